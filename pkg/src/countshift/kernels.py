"""Convolution and pooling kernel backend selection.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``COUNTSHIFT_KERNELS=python`` is set, the numpy fallback
is used.  Both backends expose::

    conv2d_forward(xp, weight, bias, stride, dilation, ho, wo, relu) -> out
    conv2d_backward(xp, weight, gout, stride, dilation, need_dx, out) -> (dxp, dw, db)

where ``xp`` is the zero-padded input of shape (N, C, Hp, Wp).  With ``relu``
the forward output is rectified; passing that output back as ``out`` masks
the upstream gradient accordingly.
"""

import os

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels


def _select():
    requested = os.environ.get("COUNTSHIFT_KERNELS", "").strip().lower()
    if requested == "python" or _ckernels is None:
        return "python"
    return "compiled"


BACKEND = _select()
_impl = BACKENDS[BACKEND]


def use_backend(name):
    """Switch the active backend ("compiled" or "python"); returns the previous name."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available (have: {sorted(BACKENDS)})")
    previous = BACKEND
    BACKEND, _impl = name, BACKENDS[name]
    return previous


def conv2d_forward(xp, weight, bias, stride, dilation, ho, wo, relu=False):
    return _impl.conv2d_forward(xp, weight, bias, stride, dilation, ho, wo, relu)


def conv2d_backward(xp, weight, gout, stride, dilation, need_dx, out=None):
    return _impl.conv2d_backward(xp, weight, gout, stride, dilation, need_dx, out)


def avgpool2_forward(x):
    return _impl.avgpool2_forward(x)


def avgpool2_backward(g):
    return _impl.avgpool2_backward(g)

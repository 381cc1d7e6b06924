import numpy as np
import pytest

from countshift import kernels
from countshift import tensor as T


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run the test once per available convolution backend."""
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


def graph_signature(root):
    """Sign pattern of every intermediate value reachable from ``root``.

    Two evaluations with the same signature took the same branch at every
    ReLU, hinge and clamp, so the function is smooth between them.  Leaves
    are skipped: they are the inputs being perturbed.
    """
    nodes = sorted((t for t in T._reachable(root) if t._parents), key=lambda t: t._id)
    return tuple(np.signbit(t.data).tobytes() + (t.data == 0).tobytes() for t in nodes)


def finite_difference(fn, array, coords, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. ``array[coord]`` for each coord (array mutated in place).

    ``fn`` returns (value, signature).  Coordinates whose +h / -h evaluations
    disagree in signature with the unperturbed one straddle a kink; they are
    returned as ``None``.
    """
    _, base_sig = fn()
    out = []
    for c in coords:
        keep = array[c]
        array[c] = keep + h
        fp, sp = fn()
        array[c] = keep - h
        fm, sm = fn()
        array[c] = keep
        out.append(None if (sp != base_sig or sm != base_sig) else (fp - fm) / (2 * h))
    return out


# gradient norms below this are compared absolutely (e.g. a bias cancelled by batchnorm);
# 1e-5 of it is still two orders above the rounding noise of an h = 1e-5 central difference
GRADIENT_FLOOR = 1e-4


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), GRADIENT_FLOOR)
    return float(np.linalg.norm(a - n) / scale)


def check_gradient(build, inputs, h=1e-5, coords_per_input=None, rng=None):
    """Compare backward() of scalar ``build()`` against central differences.

    ``inputs`` maps labels to Tensors with requires_grad.  Returns
    {label: (relative error, number of checked coords, number excluded)}.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.grad = None
    out = build()
    out.backward()
    analytic = {k: t.grad.copy() for k, t in inputs.items()}

    def fn():
        y = build()
        return y.item(), graph_signature(y)

    report = {}
    for label, t in inputs.items():
        flat = list(np.ndindex(t.shape))
        if coords_per_input is not None and len(flat) > coords_per_input:
            pick = rng.choice(len(flat), size=coords_per_input, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        numeric = finite_difference(fn, t.data, flat, h)
        kept = [(analytic[label][c], n) for c, n in zip(flat, numeric) if n is not None]
        a = [x for x, _ in kept]
        n = [y for _, y in kept]
        report[label] = (rel_error(a, n) if kept else 0.0, len(kept), len(flat) - len(kept))
    return report

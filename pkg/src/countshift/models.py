"""Density regressor, domain discriminator and their parameter store.

The regressor is a compact multi-dilation network that downsamples by 4 and
ends in a ReLU so predicted densities are nonnegative.  The discriminator
sees a density map through a gradient-reversal layer and outputs the
probability that the map came from the source domain (source=1, target=0).

Model files are ``MAGIC | u64 header length | JSON header | float64 blob``.
The blob concatenates every tensor (little-endian, row-major) in header
order, so a save/load round trip is bit-exact.
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .errors import InvalidShapeError, MalformedDatasetError

FORMAT_VERSION = 1
ARCHITECTURE = "countshift/regressor-v1+discriminator-v1"
MAGIC = b"CSHIFTM1"

SOURCE_LABEL = 1.0
TARGET_LABEL = 0.0

# name, in channels, out channels, kernel, dilation, padding; "pool" = avgpool2
REGRESSOR_LAYERS = (
    ("reg.conv1", 1, 16, 3, 1, 1),
    ("reg.conv2", 16, 16, 3, 1, 1),
    "pool",
    ("reg.conv3", 16, 32, 3, 1, 1),
    "pool",
    ("reg.conv4", 32, 32, 3, 2, 2),
    ("reg.conv5", 32, 32, 3, 3, 3),
    ("reg.head", 32, 1, 1, 1, 0),
)

# name, in channels, out channels, kernel, stride, padding
DISCRIMINATOR_CONVS = (
    ("disc.conv1", 1, 8, 3, 2, 1),
    ("disc.conv2", 8, 1, 3, 2, 1),
)
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
# The output layer starts small so early predictions are near the scale of
# real densities; a full-size head overshoots and Adam drives every cell into
# the dead zone of the final ReLU within a few steps.
HEAD_INIT_GAIN = 0.05


class ParameterStore:
    """Ordered name -> Tensor mapping plus non-trainable buffers.

    Trainable tensors come first in architecture order, followed by the
    batch-norm running statistics.
    """

    def __init__(self, tensors, buffers, seed=None, hyperparameters=None,
                 architecture=ARCHITECTURE, format_version=FORMAT_VERSION):
        self.tensors = OrderedDict(tensors)
        self.buffers = OrderedDict(buffers)
        self.seed = seed
        self.hyperparameters = dict(hyperparameters or {})
        self.architecture = architecture
        self.format_version = format_version

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self, prefix=""):
        return [n for n in self.tensors if n.startswith(prefix)]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self, prefix=""):
        """name -> gradient array for parameters that received one."""
        return OrderedDict((n, t.grad) for n, t in self.tensors.items() if n.startswith(prefix) and t.grad is not None)

    def bn_stats(self):
        return T.RunningStats(self.buffers["disc.bn.running_mean"], self.buffers["disc.bn.running_var"], BN_MOMENTUM)

    def copy(self):
        tensors = OrderedDict((n, T.Tensor(t.data.copy(), requires_grad=True, name=n)) for n, t in self.tensors.items())
        buffers = OrderedDict((n, b.copy()) for n, b in self.buffers.items())
        return ParameterStore(tensors, buffers, self.seed, dict(self.hyperparameters), self.architecture, self.format_version)

    def arrays(self):
        """All named arrays (trainable first, then buffers) in file order."""
        out = OrderedDict((n, t.data) for n, t in self.tensors.items())
        out.update(self.buffers)
        return out

    def equal(self, other):
        a, b = self.arrays(), other.arrays()
        return list(a) == list(b) and all(np.array_equal(a[n], b[n]) for n in a)


def _conv_shapes():
    for layer in REGRESSOR_LAYERS:
        if layer == "pool":
            continue
        name, cin, cout, k, _, _ = layer
        yield name, cin, cout, k
    for name, cin, cout, k, _, _ in DISCRIMINATOR_CONVS:
        yield name, cin, cout, k


def init_params(seed):
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in), shrunk for the
    regressor head), zero biases, BN gamma=1 / beta=0."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()

    def add(name, data):
        tensors[name] = T.Tensor(data, requires_grad=True, name=name)

    for name, cin, cout, k in _conv_shapes():
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        if name == "reg.head":
            bound *= HEAD_INIT_GAIN
        add(f"{name}.weight", rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        add(f"{name}.bias", np.zeros(cout))
        if name == "disc.conv1":
            add("disc.bn.gamma", np.ones(cout))
            add("disc.bn.beta", np.zeros(cout))
    buffers = OrderedDict(
        [("disc.bn.running_mean", np.zeros(DISCRIMINATOR_CONVS[0][2])),
         ("disc.bn.running_var", np.ones(DISCRIMINATOR_CONVS[0][2]))]
    )
    return ParameterStore(tensors, buffers, seed=int(seed))


def _as_image_batch(images):
    if isinstance(images, T.Tensor):
        x = images
    else:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        x = T.Tensor(arr)
    if x.ndim != 4 or x.shape[1] != 1:
        raise InvalidShapeError(f"expected single-channel images (N, 1, H, W), got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise InvalidShapeError(f"image extents {x.shape[2]}x{x.shape[3]} must be divisible by 4")
    return x


def regress_density(params, images):
    """Predicted density maps, shape (N, 1, H/4, W/4).

    ``images`` may be (H, W), (N, H, W), (N, 1, H, W) or a Tensor.
    """
    x = _as_image_batch(images)
    for layer in REGRESSOR_LAYERS:
        if layer == "pool":
            x = T.avgpool2(x)
            continue
        name, _, _, _, dilation, padding = layer
        x = T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"],
                     dilation=dilation, padding=padding, relu=True)
    return x


def discriminate(params, maps, mu, training=True):
    """Source probability for each density map, shape (N,).

    The maps pass through ``grad_reverse(maps, mu)`` first, so the regressor
    receives ``-mu`` times the discriminator's gradient.
    """
    if maps.ndim != 4 or maps.shape[1] != 1:
        raise InvalidShapeError(f"discriminator expects (N, 1, h, w) maps, got {maps.shape}")
    x = T.grad_reverse(maps, mu)
    name, _, _, _, stride, padding = DISCRIMINATOR_CONVS[0]
    x = T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding)
    x = T.batchnorm(x, params["disc.bn.gamma"], params["disc.bn.beta"], training, params.bn_stats(), eps=BN_EPS)
    x = T.relu(x)
    name, _, _, _, stride, padding = DISCRIMINATOR_CONVS[1]
    x = T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding)
    x = T.spatial_mean(x)
    return T.sigmoid(T.reshape(x, (x.shape[0],)))


def predict_maps(params, images, batch_size=32):
    """Inference-only density maps as an (N, H/4, W/4) array."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    out = []
    with T.no_grad():
        for i in range(0, len(arr), batch_size):
            out.append(regress_density(params, arr[i : i + batch_size]).data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + tuple(s // 4 for s in arr.shape[1:]))


def predict_counts(params, images, batch_size=32):
    maps = predict_maps(params, images, batch_size)
    return T.seq_sum(maps, axis=0) if len(maps) else np.zeros(0)


# ---------------------------------------------------------------- model files


def save_model(params, path, hyperparameters=None):
    """Write the store to ``path``; returns the path."""
    hyper = dict(params.hyperparameters)
    hyper.update(hyperparameters or {})
    arrays = params.arrays()
    header = {
        "format_version": params.format_version,
        "architecture": params.architecture,
        "hyperparameters": hyper,
        "seed": params.seed,
        "kernel_backend": kernels.BACKEND,
        "tensors": [
            {"name": n, "shape": list(a.shape), "trainable": n in params.tensors} for n, a in arrays.items()
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    return path


def load_model(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise MalformedDatasetError(f"{path}: not a countshift model file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedDatasetError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise MalformedDatasetError(f"{path}: unsupported format_version {header.get('format_version')}")
    blob = memoryview(raw)[16 + hlen :]
    offset = 0
    tensors, buffers = OrderedDict(), OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(blob):
            raise MalformedDatasetError(f"{path}: blob ends inside tensor {entry['name']!r}")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
        if entry["trainable"]:
            tensors[entry["name"]] = T.Tensor(data, requires_grad=True, name=entry["name"])
        else:
            buffers[entry["name"]] = data.copy()
    if offset != len(blob):
        raise MalformedDatasetError(f"{path}: blob has {len(blob) - offset} trailing bytes")
    return ParameterStore(tensors, buffers, header.get("seed"), header.get("hyperparameters"),
                          header["architecture"], header["format_version"])

"""Datasets: synthetic two-domain scenes, preprocessing and on-disk format.

On disk a dataset is a directory::

    manifest.json            {"version": 1, "domain": ..., "splits": {"train": [...], "val": [...], "test": [...]}}
    images/<id>.pgm          8-bit binary PGM (P5, maxval 255)
    images/<id>.json         {"image": <id>, "points": [[x, y], ...]}   (optional for target data)

Point coordinates are continuous pixel positions with the image spanning
[0, W) x [0, H); pixel (row r, col c) has its centre at (c + 0.5, r + 0.5).
"""

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, MalformedDatasetError

MANIFEST_VERSION = 1
DEFAULT_PATCH = 128
SPLIT_RATIOS = (("train", 0.6), ("val", 0.2), ("test", 0.2))
MAX_PLACEMENT_ATTEMPTS = 1000
_EIGHT = np.ones((3, 3), dtype=bool)


def worker_count():
    """Worker cap from COUNTSHIFT_THREADS (default: all cores)."""
    raw = os.environ.get("COUNTSHIFT_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass
class ImagePatch:
    pixels: np.ndarray  # (H, W) uint8
    id: str = ""
    points: np.ndarray | None = None  # (n, 2) float64 (x, y), or None when unlabelled
    domain: str = "source"

    @property
    def size(self):
        return self.pixels.shape

    @property
    def count(self):
        return 0 if self.points is None else len(self.points)

    def as_float(self):
        return self.pixels.astype(np.float64) / 255.0


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class SceneConfig:
    domain: str = "source"
    count_range: tuple = (5, 60)
    size_range: tuple = (6, 13)  # building extent in pixels
    irregularity: float = 0.0  # corner jitter as a fraction of the half-extent
    roof_style: str = "gradient"  # "gradient" (two shaded slopes) or "flat" (textured)
    noise: float = 6.0  # background pixel noise std (gray levels)
    contrast: float = 80.0  # roof brightness above the background mean
    background: float = 80.0
    grain: float = 0.75  # correlation length of background and roof texture (pixels)
    seed: int = 0
    size: int = DEFAULT_PATCH

    @classmethod
    def for_domain(cls, domain, seed=0, size=DEFAULT_PATCH, **overrides):
        """Defaults for the two synthetic domains, with geometry scaled to ``size``."""
        if domain == "source":
            base = dict(count_range=(5, 60), size_range=(6, 13), irregularity=0.0, roof_style="gradient",
                        noise=6.0, contrast=80.0, background=80.0, grain=0.75)
        elif domain == "target":
            base = dict(count_range=(20, 90), size_range=(5, 9), irregularity=0.35, roof_style="flat",
                        noise=10.0, contrast=40.0, background=115.0, grain=0.75)
        else:
            raise InvalidArgumentError(f"domain must be 'source' or 'target', got {domain!r}")
        k = size / DEFAULT_PATCH
        base["count_range"] = tuple(int(round(c * k * k)) for c in base["count_range"])
        base["size_range"] = tuple(max(2, int(round(s * k))) for s in base["size_range"])
        base["grain"] *= k
        base.update(overrides)
        return cls(domain=domain, seed=seed, size=size, **base)

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise InvalidArgumentError(f"invalid count range {self.count_range}")
        if self.size_range[0] < 2 or self.size_range[1] < self.size_range[0]:
            raise InvalidArgumentError(f"invalid size range {self.size_range}")
        if self.roof_style not in ("gradient", "flat"):
            raise InvalidArgumentError(f"unknown roof style {self.roof_style!r}")
        if self.grain < 0:
            raise InvalidArgumentError(f"grain must be >= 0, got {self.grain}")


def _texture(rng, shape, std, grain):
    """Gaussian-correlated noise with the given pixel standard deviation."""
    white = rng.normal(0.0, 1.0, size=shape)
    if grain <= 0:
        return std * white
    field = ndimage.gaussian_filter(white, grain, mode="wrap")
    spread = field.std()
    return std * field / spread if spread > 0 else field


def _background(rng, cfg):
    s = cfg.size
    coarse = rng.normal(0.0, 1.0, size=(5, 5))
    smooth = ndimage.zoom(coarse, s / 5.0, order=1)[:s, :s]
    img = cfg.background + 12.0 * smooth + _texture(rng, (s, s), cfg.noise, cfg.grain)
    if cfg.roof_style == "flat":
        # scattered dark clutter (vegetation, debris) typical of unplanned areas
        clutter = rng.random((s, s)) < 0.02
        img -= 25.0 * ndimage.binary_dilation(clutter)
    return img


def _polygon_mask(corners, h, w):
    """Pixels whose centres fall inside the polygon (even-odd rule)."""
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    inside = np.zeros((h, w), dtype=bool)
    n = len(corners)
    for i in range(n):
        x1, y1 = corners[i]
        x2, y2 = corners[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _building_shape(rng, cfg):
    lo, hi = cfg.size_range
    if cfg.irregularity <= 0:
        h, w = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        return np.ones((h, w), dtype=bool)
    extent = rng.uniform(lo, hi)
    half = extent / 2.0
    box = int(np.ceil(extent * 1.5)) + 2
    c = box / 2.0
    theta0 = rng.uniform(0, np.pi / 2)
    corners = []
    for k in range(4):
        a = theta0 + k * np.pi / 2 + rng.uniform(-0.5, 0.5) * cfg.irregularity
        r = half * np.sqrt(2) * (1.0 + rng.uniform(-1, 1) * cfg.irregularity * 0.5)
        corners.append((c + r * np.cos(a), c + r * np.sin(a)))
    mask = _polygon_mask(corners, box, box)
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return mask
    return mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]


def _roof(rng, cfg, mask):
    h, w = mask.shape
    base = cfg.background + cfg.contrast
    if cfg.roof_style == "gradient":
        # two slopes meeting at a ridge along the long axis, shaded in opposite directions
        if w >= h:
            t = (np.arange(h) + 0.5) / h
            ramp = np.where(t < 0.5, 0.6 + 0.8 * t, 1.4 - 0.8 * t)[:, None] * np.ones((1, w))
            side = np.where(t < 0.5, 1.0, -1.0)[:, None] * np.ones((1, w))
        else:
            t = (np.arange(w) + 0.5) / w
            ramp = np.ones((h, 1)) * np.where(t < 0.5, 0.6 + 0.8 * t, 1.4 - 0.8 * t)[None, :]
            side = np.ones((h, 1)) * np.where(t < 0.5, 1.0, -1.0)[None, :]
        return base + 0.25 * cfg.contrast * side * ramp
    tone = base + rng.normal(0.0, 6.0)
    return tone + _texture(rng, mask.shape, 4.0, cfg.grain)


def render_scene(cfg):
    """Render a scene; returns (ImagePatch, label image with structure ids 1..n)."""
    rng = np.random.default_rng(cfg.seed)
    s = cfg.size
    img = _background(rng, cfg)
    labels = np.zeros((s, s), dtype=np.int32)
    occupied = np.zeros((s, s), dtype=bool)
    lo, hi = cfg.count_range
    wanted = int(rng.integers(lo, hi + 1))
    points = []
    for _ in range(wanted):
        placed = False
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            mask = _building_shape(rng, cfg)
            h, w = mask.shape
            if h > s or w > s or not mask.any():
                continue
            r0 = int(rng.integers(0, s - h + 1))
            c0 = int(rng.integers(0, s - w + 1))
            if ndimage.label(mask, structure=_EIGHT)[1] != 1:
                continue
            # one-pixel gap (8-connectivity) keeps structures separable
            ra, rb = max(0, r0 - 1), min(s, r0 + h + 1)
            ca, cb = max(0, c0 - 1), min(s, c0 + w + 1)
            grown = np.zeros((rb - ra, cb - ca), dtype=bool)
            grown[r0 - ra : r0 - ra + h, c0 - ca : c0 - ca + w] = mask
            grown = ndimage.binary_dilation(grown, structure=_EIGHT)
            if np.any(occupied[ra:rb, ca:cb] & grown):
                continue
            placed = True
            break
        if not placed:
            break
        window = (slice(r0, r0 + h), slice(c0, c0 + w))
        occupied[window] |= mask
        labels[window][mask] = len(points) + 1
        img[window][mask] = _roof(rng, cfg, mask)[mask]
        rows, cols = np.nonzero(mask)
        points.append((c0 + cols.mean() + 0.5, r0 + rows.mean() + 0.5))
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return ImagePatch(pixels, points=pts, domain=cfg.domain), labels


def generate_scene(cfg):
    return render_scene(cfg)[0]


# ---------------------------------------------------------------- preprocessing


def hist_equalize(img):
    """256-bin histogram equalisation; returns the same type it was given.

    T(v) = round(255 * (cdf(v) - cdf_min) / (N - cdf_min)), rounding half up,
    computed in integer arithmetic.  Constant images come back unchanged.
    """
    pixels = img.pixels if isinstance(img, ImagePatch) else np.asarray(img)
    if pixels.dtype != np.uint8:
        raise InvalidArgumentError("hist_equalize expects 8-bit pixels")
    cdf = np.cumsum(np.bincount(pixels.reshape(-1), minlength=256)).astype(np.int64)
    n = int(pixels.size)
    cdf_min = int(cdf[np.nonzero(cdf)[0][0]]) if n else 0
    if n == cdf_min:
        out = pixels.copy()
    else:
        den = n - cdf_min
        lut = (2 * 255 * np.maximum(cdf - cdf_min, 0) + den) // (2 * den)
        out = lut.astype(np.uint8)[pixels]
    if isinstance(img, ImagePatch):
        return replace(img, pixels=out)
    return out


def preprocess(pixels):
    """Equalised 8-bit pixels as float64 in [0, 1]."""
    return hist_equalize(np.asarray(pixels, dtype=np.uint8)).astype(np.float64) / 255.0


def crop_extent(size, fraction):
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"sub-image fraction must be in (0, 1], got {fraction}")
    cs = int(round(fraction * size))
    if cs < 8:
        raise InvalidArgumentError(f"sub-image of {cs}px is below the 8px minimum")
    return cs


def _resize_axis(a, out_len, axis):
    n = a.shape[axis]
    src = (np.arange(out_len) + 0.5) * (n / out_len) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    t = src - i0
    shape = [1] * a.ndim
    shape[axis] = out_len
    t = t.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - t) + np.take(a, i1, axis=axis) * t


def resize_bilinear(a, out_shape):
    """Bilinear resize of the last two axes (half-pixel centre convention)."""
    a = np.asarray(a, dtype=np.float64)
    out = _resize_axis(a, out_shape[0], a.ndim - 2)
    return _resize_axis(out, out_shape[1], a.ndim - 1)


def crop_resize(image, fraction, offset):
    """Crop a square window at ``offset`` = (row, col) and resize back to the full extent."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    cs = crop_extent(min(h, w), fraction)
    r0, c0 = int(offset[0]), int(offset[1])
    window = image[..., r0 : r0 + cs, c0 : c0 + cs]
    return resize_bilinear(window, (h, w))


def sub_offset(size, fraction, mode="center", rng=None):
    """Top-left corner of the crop window: centred, or uniform over valid positions."""
    cs = crop_extent(size, fraction)
    if mode == "center":
        off = (size - cs) // 2
        return off, off
    if mode == "random":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return int(rng.integers(0, size - cs + 1)), int(rng.integers(0, size - cs + 1))
    raise InvalidArgumentError(f"unknown crop mode {mode!r}")


def extract_sub(img, fraction, mode="center", seed=None):
    """Sub-image of ``img`` resized back to full size, with its annotation mapped along."""
    h, w = img.pixels.shape
    cs = crop_extent(min(h, w), fraction)
    r0, c0 = sub_offset(min(h, w), fraction, mode, seed)
    out = crop_resize(img.pixels.astype(np.float64), fraction, (r0, c0))
    pixels = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    points = None
    if img.points is not None:
        p = img.points
        keep = (p[:, 0] >= c0) & (p[:, 0] < c0 + cs) & (p[:, 1] >= r0) & (p[:, 1] < r0 + cs)
        points = (p[keep] - np.array([c0, r0], dtype=np.float64)) * (np.array([w, h], dtype=np.float64) / cs)
    return replace(img, pixels=pixels, points=points, id=f"{img.id}_sub" if img.id else "")


# ---------------------------------------------------------------- file formats


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedDatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise MalformedDatasetError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise MalformedDatasetError(f"{path}: maxval {maxval} unsupported (need 255)")
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise MalformedDatasetError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_patch(img, root):
    """Write ``img`` (and its annotation sidecar, if labelled) under ``root/images``."""
    images = Path(root) / "images"
    images.mkdir(parents=True, exist_ok=True)
    path = images / f"{img.id}.pgm"
    write_pgm(path, img.pixels)
    if img.points is not None:
        sidecar = {"image": img.id, "points": [[float(x), float(y)] for x, y in img.points]}
        (images / f"{img.id}.json").write_text(json.dumps(sidecar, separators=(",", ":")) + "\n")
    return path


def split_ids(ids, ratios=SPLIT_RATIOS):
    """Deterministic split: order ids by SHA-256, cut at rounded ratio boundaries."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode("utf-8")).hexdigest())
    n = len(ranked)
    splits, start = {}, 0
    for k, (name, ratio) in enumerate(ratios):
        stop = n if k == len(ratios) - 1 else min(n, start + int(round(ratio * n)))
        splits[name] = sorted(ranked[start:stop])
        start = stop
    return splits


def write_manifest(root, domain, ids):
    manifest = {"version": MANIFEST_VERSION, "domain": domain, "splits": split_ids(ids)}
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise MalformedDatasetError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedDatasetError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("domain") not in ("source", "target") or not isinstance(manifest.get("splits"), dict):
        raise MalformedDatasetError(f"{path}: needs a 'domain' (source|target) and a 'splits' object")
    return manifest


def _scene_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_dataset(out, domain, n, size=DEFAULT_PATCH, seed=0, **scene_overrides):
    """Render ``n`` scenes into ``out`` and write the manifest; returns the manifest path."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)

    def make(i):
        cfg = SceneConfig.for_domain(domain, seed=_scene_seed(seed, i), size=size, **scene_overrides)
        patch = replace(generate_scene(cfg), id=f"{domain}_{i:05d}")
        save_patch(patch, out)
        return patch.id

    workers = min(worker_count(), max(1, n))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            ids = list(pool.map(make, range(n)))
    else:
        ids = [make(i) for i in range(n)]
    return write_manifest(out, domain, ids)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    root: Path
    split: str
    domain: str
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self):
        return [it.id for it in self.items]

    @property
    def labelled(self):
        return all(it.points is not None for it in self.items)

    def images(self, equalize=True):
        """(N, H, W) float64 network inputs in [0, 1]."""
        if not self.items:
            return np.zeros((0, DEFAULT_PATCH, DEFAULT_PATCH))
        if equalize:
            return np.stack([preprocess(it.pixels) for it in self.items])
        return np.stack([it.as_float() for it in self.items])

    def counts(self):
        return np.array([it.count for it in self.items], dtype=np.float64)

    def strip_annotations(self):
        """Copy with every annotation removed (what adaptation stages see of target data)."""
        return Dataset(self.root, self.split, self.domain, [replace(it, points=None) for it in self.items])

    def subset(self, n):
        return Dataset(self.root, self.split, self.domain, list(self.items[:n]))


def load_dataset(root, split):
    """Load one split; items are ordered lexicographically by id."""
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise MalformedDatasetError(f"{root}: manifest has no split {split!r}")
    domain = manifest["domain"]
    items = []
    for image_id in sorted(manifest["splits"][split]):
        pgm = root / "images" / f"{image_id}.pgm"
        if not pgm.is_file():
            raise MalformedDatasetError(f"{pgm}: listed in manifest but missing")
        pixels = read_pgm(pgm)
        sidecar = root / "images" / f"{image_id}.json"
        points = None
        if sidecar.is_file():
            try:
                doc = json.loads(sidecar.read_text())
                points = np.asarray(doc["points"], dtype=np.float64).reshape(-1, 2)
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise MalformedDatasetError(f"{sidecar}: malformed annotation ({exc})") from None
            h, w = pixels.shape
            bad = (points[:, 0] < 0) | (points[:, 0] >= w) | (points[:, 1] < 0) | (points[:, 1] >= h)
            if np.any(bad):
                raise MalformedDatasetError(f"{sidecar}: {int(bad.sum())} point(s) outside the {w}x{h} image")
        elif domain == "source":
            raise MalformedDatasetError(f"{sidecar}: missing annotation sidecar for a source-domain image")
        items.append(ImagePatch(pixels, id=image_id, points=points, domain=domain))
    return Dataset(root, split, domain, items)

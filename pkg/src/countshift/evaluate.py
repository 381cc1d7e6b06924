"""Evaluation: mean relative error, the label-free ω score, and the ω-driven sweep."""

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .dataio import crop_resize, sub_offset, write_pgm
from .errors import InvalidArgumentError, MalformedDatasetError
from .models import predict_counts, predict_maps

BUCKETS = (("<31", None, 30), ("31-60", 31, 60), (">60", 61, None))
DEFAULT_GRIDS = {
    "alpha": ["0.05", "0.1", "0.15"],
    "lambda1": ["35", "40", "45", "50"],
    "lambda2": ["1/22", "1/24", "1/26", "1/28"],
}


def relative_error(gt, pred):
    """Per-image error in percent: 100 * |gt - pred| / gt."""
    return 100.0 * abs(gt - pred) / gt


def _bucket(gt):
    for name, lo, hi in BUCKETS:
        if (lo is None or gt >= lo) and (hi is None or gt <= hi):
            return name
    return BUCKETS[-1][0]


@dataclass
class EvalRow:
    id: str
    gt_count: float
    pred_count: float
    relative_error: float | None  # None when gt == 0


@dataclass
class EvalReport:
    rows: list
    mre: float | None
    buckets: dict
    bucket_sizes: dict
    skipped_zero_gt: int

    def summary(self):
        return {
            "mre": self.mre,
            "buckets": self.buckets,
            "bucket_sizes": self.bucket_sizes,
            "images": len(self.rows),
            "skipped_zero_gt": self.skipped_zero_gt,
        }

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "gt_count", "pred_count", "relative_error"])
        for r in self.rows:
            w.writerow([r.id, repr(float(r.gt_count)), repr(float(r.pred_count)),
                        "" if r.relative_error is None else repr(r.relative_error)])
        return buf.getvalue()

    def json_text(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.csv").write_text(self.csv_text())
        (out / "eval_summary.json").write_text(self.json_text())
        return out / "eval_report.csv", out / "eval_summary.json"


def report_from_counts(ids, gt_counts, pred_counts):
    """Build an EvalReport from parallel sequences of ids, true and predicted counts."""
    rows, included = [], {name: [] for name, _, _ in BUCKETS}
    everything, skipped = [], 0
    for image_id, gt, pred in zip(ids, gt_counts, pred_counts):
        gt, pred = float(gt), float(pred)
        if gt == 0:
            rows.append(EvalRow(image_id, gt, pred, None))
            skipped += 1
            continue
        err = relative_error(gt, pred)
        rows.append(EvalRow(image_id, gt, pred, err))
        everything.append(err)
        included[_bucket(gt)].append(err)
    # fsum is exact, hence independent of evaluation order
    mean = lambda xs: math.fsum(xs) / len(xs) if xs else None  # noqa: E731
    return EvalReport(
        rows=rows,
        mre=mean(everything),
        buckets={k: mean(v) for k, v in included.items()},
        bucket_sizes={k: len(v) for k, v in included.items()},
        skipped_zero_gt=skipped,
    )


def dump_heatmaps(maps, ids, out_dir):
    """Write each predicted map as an 8-bit PGM scaled to its own maximum."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for grid, image_id in zip(maps, ids):
        peak = grid.max()
        scaled = np.zeros(grid.shape) if not peak > 0 else grid / peak * 255.0
        write_pgm(out / f"{image_id}.pgm", np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8))


def evaluate_mre(params, dataset, dump_dir=None):
    """MRE of ``params`` on a labelled dataset."""
    for it in dataset.items:
        if it.points is None:
            raise MalformedDatasetError(f"image {it.id!r} has no annotation; MRE needs labels")
    images = dataset.images()
    if dump_dir is not None:
        maps = predict_maps(params, images)
        dump_heatmaps(maps, dataset.ids, dump_dir)
    preds = predict_counts(params, images) if len(dataset) else np.zeros(0)
    return report_from_counts(dataset.ids, dataset.counts(), preds)


# ---------------------------------------------------------------- omega


def omega_from_counts(full_counts, sub_counts, m=0.0):
    """Number of images whose full count is at least their sub-image count minus m."""
    full = np.asarray(full_counts, dtype=np.float64)
    sub = np.asarray(sub_counts, dtype=np.float64)
    return int(np.count_nonzero(full - sub >= -m))


def sub_images(images, sub_fraction, mode="center", rng=None):
    """Crop-and-resize every image of an (N, H, W) stack."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return images.copy()
    size = min(images.shape[1:])
    if mode == "center":
        return crop_resize(images, sub_fraction, sub_offset(size, sub_fraction, "center"))
    return np.stack([crop_resize(im, sub_fraction, sub_offset(size, sub_fraction, mode, rng)) for im in images])


def compute_omega(params, dataset, sub_fraction=0.8, m=0.0, crop="center", seeds=(0,)):
    """Label-free ω: images whose predicted count does not drop below a sub-image's.

    ``crop="center"`` (default) is deterministic and returns an int.  With
    ``crop="random"`` each seed draws one random crop per image and the mean
    ω over ``seeds`` is returned.
    """
    images = dataset.images() if hasattr(dataset, "images") else np.asarray(dataset, dtype=np.float64)
    if len(images) == 0:
        return 0
    full = predict_counts(params, images)
    if crop == "center":
        return omega_from_counts(full, predict_counts(params, sub_images(images, sub_fraction)), m)
    if crop != "random":
        raise InvalidArgumentError(f"crop must be 'center' or 'random', got {crop!r}")
    scores = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        scores.append(omega_from_counts(full, predict_counts(params, sub_images(images, sub_fraction, "random", rng)), m))
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------- sweep

PHASES = (("alpha", "DMA", "dma"), ("lambda1", "CWI", "cwi"), ("lambda2", "CAI", "cai"))


def parse_grid_value(value):
    """Grid entries may be numbers or strings such as "0.1" or "1/26"."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            raise InvalidArgumentError(f"bad grid value {value!r}") from None
    return float(value)


def select_best(omegas):
    """Index of the largest ω; the lowest index wins ties."""
    if not omegas:
        raise InvalidArgumentError("cannot select from an empty phase")
    best = 0
    for i, w in enumerate(omegas):
        if w > omegas[best]:
            best = i
    return best


@dataclass
class SweepRow:
    experiment: str
    parameter: str
    label: str
    value: float
    omega: float
    mre: float | None = None


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    selected: dict = field(default_factory=dict)  # parameter -> (label, value)
    incomplete: bool = False

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "parameters", "MRE", "ω"])
        for r in self.rows:
            w.writerow([f"L_{r.experiment}", f"{r.parameter}={r.label}",
                        "" if r.mre is None else f"{r.mre:.2f}", r.omega])
        return buf.getvalue()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_report.csv").write_text(self.csv_text())
        summary = {"selected": {k: v[0] for k, v in self.selected.items()}, "incomplete": self.incomplete}
        (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return out / "sweep_report.csv"


def run_sweep(base_params, source_train, target_train, cfg, grids=None, subset_frac=0.1,
              budget=None, eval_data=None, scorer=None):
    """Sequential α → λ1 → λ2 search, each phase scored by ω on the full target training set.

    Candidates train on the first ``subset_frac`` of the target training
    items.  The winner of each phase is frozen into the configuration of the
    next, and (when ``cfg.cumulative``) its weights initialise the next phase.
    ``budget`` caps the number of training runs; running out returns the rows
    so far with ``incomplete=True``.  ``eval_data`` (labelled) adds a
    diagnostic MRE column; it never influences selection.  ``scorer`` replaces
    the train-and-score step, mainly for tests.
    """
    from . import trainer

    grids = {**DEFAULT_GRIDS, **(grids or {})}
    for key, _, _ in PHASES:
        if not grids[key]:
            raise InvalidArgumentError(f"grid for {key} is empty")
    if not 0 < subset_frac <= 1:
        raise InvalidArgumentError(f"subset fraction must be in (0, 1], got {subset_frac}")
    n_sub = max(1, int(round(subset_frac * len(target_train))))
    subset = target_train.subset(n_sub)
    target_unlabelled = target_train.strip_annotations()

    def default_scorer(start, stage, run_cfg):
        params, _ = trainer.adapt(start, source_train, subset, run_cfg, stage)
        omega = compute_omega(params, target_unlabelled, run_cfg.sub_fraction, run_cfg.margin)
        mre = evaluate_mre(params, eval_data).mre if eval_data is not None else None
        return params, omega, mre

    scorer = scorer or default_scorer
    report = SweepReport()
    start, runs = base_params, 0
    for key, experiment, stage in PHASES:
        results = []
        for label in grids[key]:
            if budget is not None and runs >= budget:
                report.incomplete = True
                return report
            value = parse_grid_value(label)
            run_cfg = replace(cfg, **{key: value})
            params, omega, mre = scorer(start, stage, run_cfg)
            runs += 1
            results.append(params)
            report.rows.append(SweepRow(experiment, key, str(label), value, omega, mre))
        phase_rows = report.rows[-len(results):]
        best = select_best([r.omega for r in phase_rows])
        report.selected[key] = (phase_rows[best].label, phase_rows[best].value)
        cfg = replace(cfg, **{key: phase_rows[best].value})
        if cfg.cumulative:
            start = results[best]
    return report

"""Staged training: source-only regression, then DMA, CWI and CAI adaptation.

Every stage is deterministic in ``AdaptConfig.seed``.  Independent random
streams drive source batch order, target batch order, sub-image crops and
pair shuffling, so switching a loss term off never shifts the draws of the
others.  That is what makes a zero-weighted stage reproduce the simpler
stage bit for bit.
"""

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .dataio import crop_resize, sub_offset
from .density import DensityMapConfig, build_density_map
from .errors import InvalidArgumentError, MalformedDatasetError, TrainingDivergedError
from .evaluate import compute_omega, evaluate_mre
from .models import SOURCE_LABEL, TARGET_LABEL, discriminate, init_params, regress_density

STAGES = ("source", "mse", "dma", "cwi", "cai")
LOG_COLUMNS = ("epoch", "mse", "bce", "wi", "ai", "total", "val_metric", "seconds")

# stream indices under SeedSequence(seed)
_INIT, _SOURCE_ORDER, _TARGET_ORDER, _CROPS, _PAIRS = range(5)


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.1
    lambda1: float = 45.0
    lambda2: float = 1.0 / 26.0
    margin: float = 0.0
    pair_threshold: float = 5.0
    sub_fraction: float = 0.8
    stage: str = "source"
    source_epochs: int = 30
    adapt_epochs: int = 15
    source_lr: float = 1e-4
    adapt_lr: float = 1e-5
    batch_size: int = 16
    seed: int = 0
    cumulative: bool = True  # adaptation stages start from the previous stage (False: from the source model)
    eval_every: int = 1  # epochs between validation metrics (0: only after the last epoch)

    def __post_init__(self):
        for name in ("alpha", "lambda1", "lambda2", "margin"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidArgumentError(f"{name} must be a finite value >= 0, got {v}")
        if not self.pair_threshold > 0:
            raise InvalidArgumentError(f"pair_threshold must be > 0, got {self.pair_threshold}")
        if not 0 < self.sub_fraction <= 1:
            raise InvalidArgumentError(f"sub_fraction must be in (0, 1], got {self.sub_fraction}")
        if self.stage not in STAGES:
            raise InvalidArgumentError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.source_epochs < 0 or self.adapt_epochs < 0 or self.eval_every < 0:
            raise InvalidArgumentError("batch size must be >= 1 and epoch counts >= 0")
        if self.source_lr < 0 or self.adapt_lr < 0:
            raise InvalidArgumentError("learning rates must be >= 0")

    def as_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    stage: str
    seed: int
    config: dict
    records: list = field(default_factory=list)  # one dict per epoch, keys LOG_COLUMNS

    def csv_text(self, timing=False):
        """CSV with LOG_COLUMNS; ``seconds`` is left blank unless ``timing`` so reruns match byte for byte."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for rec in self.records:
            row = []
            for col in LOG_COLUMNS:
                v = rec.get(col)
                if col == "seconds" and not timing:
                    v = None
                row.append("" if v is None else repr(v))
            w.writerow(row)
        return buf.getvalue()

    def write(self, path, timing=False):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv_text(timing))
        return path

    def column(self, name):
        return [rec[name] for rec in self.records]

    @property
    def seconds(self):
        return math.fsum(rec["seconds"] for rec in self.records)


def _streams(seed):
    children = np.random.SeedSequence(int(seed)).spawn(5)
    return [np.random.default_rng(c) for c in children]


def _init_seed(seed):
    return int(np.random.SeedSequence(int(seed)).spawn(5)[_INIT].generate_state(1)[0])


def density_targets(dataset, density_cfg=DensityMapConfig()):
    """Ground-truth maps for every item, (N, H/4, W/4)."""
    maps = []
    for it in dataset.items:
        if it.points is None:
            raise MalformedDatasetError(f"source image {it.id!r} has no annotation")
        maps.append(build_density_map(it.points, it.pixels.shape, density_cfg).grid)
    return np.stack(maps) if maps else np.zeros((0, 0, 0))


def _mean(values):
    return math.fsum(values) / len(values) if values else 0.0


def _adam(params, prefix, state, lr, where):
    grads = params.grads(prefix)
    if not grads:
        return
    try:
        T.adam_step(params.tensors, grads, state, lr)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(f"{where}: {exc}") from None


def train_source(dataset_s, cfg, val=None, params=None):
    """Fit the regressor to source density maps with Adam on the MSE loss.

    Returns ``(params, TrainLog)``.  ``val`` (labelled) supplies the per-epoch
    MRE; without it ``val_metric`` is blank.
    """
    targets = density_targets(dataset_s)  # raises before any training on unlabelled items
    if len(dataset_s) == 0:
        raise InvalidArgumentError("source dataset is empty")
    images = dataset_s.images()
    params = init_params(_init_seed(cfg.seed)) if params is None else params.copy()
    params.hyperparameters.update(source_epochs=cfg.source_epochs, source_lr=float(cfg.source_lr),
                                  batch_size=cfg.batch_size, seed=cfg.seed)
    rng = _streams(cfg.seed)[_SOURCE_ORDER]
    state = T.AdamState()
    log = TrainLog("source", cfg.seed, replace(cfg, stage="source").as_dict())
    n, b = len(images), cfg.batch_size
    for epoch in range(1, cfg.source_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        batch_losses = []
        for step, lo in enumerate(range(0, n, b), start=1):
            idx = order[lo : lo + b]
            params.zero_grad()
            loss = L.mse_loss(regress_density(params, images[idx]), targets[idx][:, None])
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"stage source, epoch {epoch}, step {step}: loss is {loss.item()}")
            loss.backward()
            _adam(params, "reg.", state, cfg.source_lr, f"stage source, epoch {epoch}, step {step}")
            batch_losses.append(loss.item())
        val_metric = None
        if val is not None and _due(epoch, cfg.source_epochs, cfg.eval_every):
            val_metric = evaluate_mre(params, val).mre
        mse = _mean(batch_losses)
        log.records.append(dict(epoch=epoch, mse=mse, bce=0.0, wi=0.0, ai=0.0, total=mse,
                                val_metric=val_metric, seconds=time.perf_counter() - started))
    params.zero_grad()
    return params, log


def _due(epoch, last, every):
    return epoch == last or (every > 0 and epoch % every == 0)


class _SourceBatches:
    """Endless source batches: fresh seeded permutation whenever one runs out."""

    def __init__(self, n, rng):
        self.n, self.rng, self.queue = n, rng, np.zeros(0, dtype=np.intp)

    def take(self, b):
        while len(self.queue) < b:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        out, self.queue = self.queue[:b], self.queue[b:]
        return out


def greedy_pairs(counts, order, threshold):
    """Walk ``order``; pair each unpaired image with the next unpaired one whose count differs by > threshold."""
    used, pairs = set(), []
    order = list(order)
    for pos, i in enumerate(order):
        if i in used:
            continue
        for j in order[pos + 1 :]:
            if j not in used and abs(counts[i] - counts[j]) > threshold:
                used.update((i, j))
                pairs.append((i, j))
                break
    return pairs


def effective_weights(cfg, stage):
    """(alpha, lambda1, lambda2) actually in force for ``stage``."""
    alpha = float(cfg.alpha) if stage in ("dma", "cwi", "cai") else 0.0
    lambda1 = float(cfg.lambda1) if stage in ("cwi", "cai") else 0.0
    lambda2 = float(cfg.lambda2) if stage == "cai" else 0.0
    return alpha, lambda1, lambda2


def step_objective(params, xs, targets_s, xt=None, xsub=None, alpha=0.0, lambda1=0.0, lambda2=0.0,
                   margin=0.0, pair_fn=None, use_disc=True):
    """Graph of one adaptation step.

    Returns ``(objective, values)``: ``objective`` is the Tensor to
    back-propagate (MSE + BCE + lambda1 * wi + lambda2 * ai; the reversal layer
    turns the BCE into ``-alpha`` times its gradient on the regressor side) and
    ``values`` the logged components with ``total`` = mse + alpha * bce +
    lambda1 * wi + lambda2 * ai.  One regressor forward covers the source,
    target and sub-image batches together.  ``pair_fn`` maps predicted target
    counts to index pairs for the across-image term.
    """
    ns = len(xs)
    k = 0 if xt is None else len(xt)
    blocks = [xs] + ([xt] if xt is not None else []) + ([xsub] if xsub is not None else [])
    maps = regress_density(params, np.concatenate(blocks))
    map_s = T.narrow(maps, 0, ns)
    mse = L.mse_loss(map_s, np.asarray(targets_s)[:, None])
    bce = wi = ai = None
    if use_disc and xt is not None:
        map_t = T.narrow(maps, ns, ns + k)
        probs = discriminate(params, T.concat([map_s, map_t]), mu=alpha, training=True)
        labels = np.concatenate([np.full(ns, SOURCE_LABEL), np.full(k, TARGET_LABEL)])
        bce = L.bce_loss(probs, labels)
    if xsub is not None and (lambda1 > 0 or lambda2 > 0):
        counts_t = T.sample_sums(T.narrow(maps, ns, ns + k))
        counts_sub = T.sample_sums(T.narrow(maps, ns + k, ns + 2 * k))
        if lambda1 > 0:
            wi = T.mean(L.within_image_loss(counts_t, counts_sub, margin))
        if lambda2 > 0:
            pairs = pair_fn(counts_t.data) if pair_fn is not None else []
            if pairs:
                a_idx = np.array([p[0] for p in pairs])
                b_idx = np.array([p[1] for p in pairs])
                ai = T.mean(L.across_image_loss(
                    counts_t.data[a_idx], counts_t.data[b_idx],
                    T.take(counts_sub, a_idx), T.take(counts_sub, b_idx), margin))
            else:
                ai = T.Tensor(0.0)
    # the discriminator sees plain BCE; the regressor gets alpha via the reversal layer
    objective = L.weighted_sum([(1.0, mse), (1.0, bce), (lambda1, wi), (lambda2, ai)])
    values = {
        "mse": mse.item(),
        "bce": 0.0 if bce is None else bce.item(),
        "wi": 0.0 if wi is None else wi.item(),
        "ai": 0.0 if ai is None else ai.item(),
    }
    values["total"] = L.weighted_sum(
        [(1.0, values["mse"]), (alpha, values["bce"]), (lambda1, values["wi"]), (lambda2, values["ai"])]
    ).item()
    return objective, values


def adapt(params, dataset_s, dataset_t, cfg, stage):
    """One adaptation stage ("mse", "dma", "cwi" or "cai"); returns ``(params, TrainLog)``.

    Each step takes a full source batch (cycling) and the next target batch;
    an epoch is one pass over the target set.  Target annotations are
    discarded before anything else happens.
    """
    if stage not in ("mse", "dma", "cwi", "cai"):
        raise InvalidArgumentError(f"unknown adaptation stage {stage!r}")
    if len(dataset_t) == 0:
        raise InvalidArgumentError("target dataset is empty")
    if len(dataset_s) == 0:
        raise InvalidArgumentError("source dataset is empty")
    target = dataset_t.strip_annotations()
    targets_s = density_targets(dataset_s)
    xs_all, xt_all = dataset_s.images(), target.images()
    alpha, lambda1, lambda2 = effective_weights(cfg, stage)
    use_disc = stage != "mse"
    use_sub = lambda1 > 0 or lambda2 > 0

    params = params.copy()
    params.hyperparameters.update(
        alpha=alpha, lambda1=lambda1, lambda2=lambda2, margin=float(cfg.margin),
        pair_threshold=float(cfg.pair_threshold), sub_fraction=float(cfg.sub_fraction),
        adapt_epochs=cfg.adapt_epochs, adapt_lr=float(cfg.adapt_lr), batch_size=cfg.batch_size, seed=cfg.seed,
    )
    streams = _streams(cfg.seed)
    source_batches = _SourceBatches(len(xs_all), streams[_SOURCE_ORDER])
    rng_t, rng_crop, rng_pair = streams[_TARGET_ORDER], streams[_CROPS], streams[_PAIRS]
    reg_state, disc_state = T.AdamState(), T.AdamState()
    log = TrainLog(stage, cfg.seed, replace(cfg, stage=stage).as_dict())
    size = xt_all.shape[1]
    nt, b = len(xt_all), cfg.batch_size

    for epoch in range(1, cfg.adapt_epochs + 1):
        started = time.perf_counter()
        order = rng_t.permutation(nt)
        parts = {k: [] for k in ("mse", "bce", "wi", "ai", "total")}
        for step, lo in enumerate(range(0, nt, b), start=1):
            where = f"stage {stage}, epoch {epoch}, step {step}"
            idx_s, idx_t = source_batches.take(b), order[lo : lo + b]
            xt = xt_all[idx_t] if use_disc else None
            xsub = None
            if use_sub:
                offsets = [sub_offset(size, cfg.sub_fraction, "random", rng_crop) for _ in idx_t]
                xsub = np.stack([crop_resize(xt_all[i], cfg.sub_fraction, off) for i, off in zip(idx_t, offsets)])
            pair_fn = None
            if lambda2 > 0:
                pair_fn = lambda counts: greedy_pairs(counts, rng_pair.permutation(len(counts)), cfg.pair_threshold)  # noqa: E731
            params.zero_grad()
            objective, values = step_objective(params, xs_all[idx_s], targets_s[idx_s], xt, xsub,
                                               alpha, lambda1, lambda2, cfg.margin, pair_fn, use_disc)
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(f"{where}: non-finite loss {values}")
            objective.backward()
            _adam(params, "reg.", reg_state, cfg.adapt_lr, where)
            _adam(params, "disc.", disc_state, cfg.adapt_lr, where)
            for key, v in values.items():
                parts[key].append(v)
        val_metric = None
        if _due(epoch, cfg.adapt_epochs, cfg.eval_every):
            val_metric = compute_omega(params, target, cfg.sub_fraction, cfg.margin)
        record = {key: _mean(v) for key, v in parts.items()}
        record.update(epoch=epoch, val_metric=val_metric, seconds=time.perf_counter() - started)
        log.records.append(record)
    params.zero_grad()
    return params, log


def adapt_mse(params, dataset_s, dataset_t, cfg):
    """Plain source fine-tuning on the adaptation schedule (reference for alpha = 0)."""
    return adapt(params, dataset_s, dataset_t, cfg, "mse")


def adapt_dma(params, dataset_s, dataset_t, cfg):
    return adapt(params, dataset_s, dataset_t, cfg, "dma")


def adapt_cwi(params, dataset_s, dataset_t, cfg):
    return adapt(params, dataset_s, dataset_t, cfg, "cwi")


def adapt_cai(params, dataset_s, dataset_t, cfg):
    return adapt(params, dataset_s, dataset_t, cfg, "cai")


def discriminator_steps(params, maps_s, maps_t, steps, lr, state=None):
    """Train only the discriminator on fixed maps; returns the BCE before each step and after the last."""
    params = params
    state = state or T.AdamState()
    fixed = T.Tensor(np.concatenate([maps_s, maps_t]))
    labels = np.concatenate([np.full(len(maps_s), SOURCE_LABEL), np.full(len(maps_t), TARGET_LABEL)])
    history = []
    for step in range(steps + 1):
        params.zero_grad()
        loss = L.bce_loss(discriminate(params, fixed, mu=0.0, training=True), labels)
        history.append(loss.item())
        if step == steps:
            break
        loss.backward()
        _adam(params, "disc.", state, lr, f"discriminator step {step + 1}")
    params.zero_grad()
    return history


def run_pipeline(source_train, target_train, cfg, source_val=None):
    """Source training followed by DMA, CWI and CAI.

    With ``cfg.cumulative`` each stage starts from the previous stage's
    weights; otherwise every stage starts from the source model.  Returns an
    ordered dict-like list of ``(stage, params, log)``.
    """
    params, log = train_source(source_train, cfg, val=source_val)
    results = [("source", params, log)]
    start = params
    for stage in ("dma", "cwi", "cai"):
        adapted, stage_log = adapt(start, source_train, target_train, cfg, stage)
        results.append((stage, adapted, stage_log))
        if cfg.cumulative:
            start = adapted
    return results

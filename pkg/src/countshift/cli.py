"""Command-line entry point: ``countshift {gen,train-source,adapt,eval,sweep}``.

Exit codes: 0 success, 2 usage or invalid argument, 3 malformed dataset or
model file, 4 training divergence.  Every command writes ``run_manifest.json``
next to its outputs.
"""

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

from . import __version__, kernels
from .dataio import generate_dataset, load_dataset
from .errors import CountShiftError, MalformedDatasetError, TrainingDivergedError
from .evaluate import DEFAULT_GRIDS, evaluate_mre, run_sweep
from .models import load_model, save_model
from .trainer import AdaptConfig, adapt, train_source

EXIT_OK, EXIT_USAGE, EXIT_MALFORMED, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _number(text):
    """Float flag that also accepts fractions such as 1/26."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid number: {text!r}") from None


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="countshift", description="Building counting with unsupervised domain adaptation.")
    parser.add_argument("--version", action="version", version=f"countshift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic dataset")
    p.add_argument("--domain", choices=["source", "target"], required=True)
    p.add_argument("--n", type=_nonneg_int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count-min", type=_nonneg_int)
    p.add_argument("--count-max", type=_nonneg_int)
    p.add_argument("--size-min", type=int)
    p.add_argument("--size-max", type=int)
    p.add_argument("--irregularity", type=float)
    p.add_argument("--roof-style", choices=["gradient", "flat"])
    p.add_argument("--noise", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--background", type=float)
    p.add_argument("--grain", type=float, help="texture correlation length in pixels")

    p = sub.add_parser("train-source", help="fit the regressor on labelled source data")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=_nonneg_int, default=30)
    p.add_argument("--lr", type=_number, default=1e-4)
    p.add_argument("--batch", type=_positive_int, default=26)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("adapt", help="run one adaptation stage")
    p.add_argument("--stage", choices=["dma", "cwi", "cai"], required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--alpha", type=_number, default=0.1)
    p.add_argument("--lambda1", type=_number, default=45.0)
    p.add_argument("--lambda2", type=_number, default=1.0 / 26.0)
    p.add_argument("--margin", type=_number, default=0.0)
    p.add_argument("--pair-threshold", type=_number, default=5.0)
    p.add_argument("--sub-fraction", type=_number, default=0.8)
    p.add_argument("--epochs", type=_nonneg_int, default=15)
    p.add_argument("--lr", type=_number, default=1e-5)
    p.add_argument("--batch", type=_positive_int, default=26)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="MRE report on a labelled split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-maps", action="store_true")

    p = sub.add_parser("sweep", help="omega-driven alpha / lambda1 / lambda2 selection")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--grid", type=Path, help="JSON {alpha: [...], lambda1: [...], lambda2: [...]}")
    p.add_argument("--subset-frac", type=_number, default=0.1)
    p.add_argument("--epochs", type=_nonneg_int, default=15)
    p.add_argument("--lr", type=_number, default=1e-5)
    p.add_argument("--batch", type=_positive_int, default=26)
    p.add_argument("--budget", type=_nonneg_int, help="maximum number of training runs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return parser


# ---------------------------------------------------------------- manifests


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root):
    """Digest of every file under ``root`` (relative names and contents, sorted)."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "run_manifest.json"):
        h.update(path.relative_to(root).as_posix().encode("utf-8") + b"\0")
        h.update(sha256_file(path).encode("ascii"))
    return h.hexdigest()


def _digest(path):
    path = Path(path)
    return sha256_tree(path) if path.is_dir() else sha256_file(path)


def write_run_manifest(out_dir, argv, config, seed, inputs, outputs, seconds):
    """Record what ran and what it produced; ``manifest_hash`` covers everything but ``timing``."""
    body = {
        "command": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in sorted(inputs.items())},
        "outputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in sorted(outputs.items())},
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body["manifest_hash"] = hashlib.sha256(canonical).hexdigest()
    body["timing"] = {"finished": datetime.now(timezone.utc).isoformat(timespec="seconds"), "seconds": seconds}
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    overrides = {}
    if args.count_min is not None or args.count_max is not None:
        if args.count_min is None or args.count_max is None:
            raise UsageError("--count-min and --count-max go together")
        overrides["count_range"] = (args.count_min, args.count_max)
    if args.size_min is not None or args.size_max is not None:
        if args.size_min is None or args.size_max is None:
            raise UsageError("--size-min and --size-max go together")
        overrides["size_range"] = (args.size_min, args.size_max)
    for name in ("irregularity", "roof_style", "noise", "contrast", "background", "grain"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    if args.size < 8 or args.size % 4:
        raise UsageError(f"--size must be a multiple of 4 and >= 8, got {args.size}")
    generate_dataset(args.out, args.domain, args.n, size=args.size, seed=args.seed, **overrides)
    return {}, {"dataset": args.out}


def cmd_train_source(args):
    cfg = AdaptConfig(source_epochs=args.epochs, source_lr=args.lr, batch_size=args.batch, seed=args.seed)
    train = load_dataset(args.data, "train")
    val = load_dataset(args.data, "val")
    params, log = train_source(train, cfg, val=val if len(val) else None)
    args.out.mkdir(parents=True, exist_ok=True)
    model = save_model(params, args.out / "source.model")
    log_path = log.write(args.out / "source_log.csv")
    return {"data": args.data}, {"model": model, "log": log_path}, log


def cmd_adapt(args):
    cfg = AdaptConfig(alpha=args.alpha, lambda1=args.lambda1, lambda2=args.lambda2, margin=args.margin,
                      pair_threshold=args.pair_threshold, sub_fraction=args.sub_fraction,
                      adapt_epochs=args.epochs, adapt_lr=args.lr, batch_size=args.batch, seed=args.seed)
    params = load_model(args.model)
    source = load_dataset(args.source, "train")
    # adaptation never sees target labels
    target = load_dataset(args.target, "train").strip_annotations()
    adapted, log = adapt(params, source, target, cfg, args.stage)
    args.out.mkdir(parents=True, exist_ok=True)
    model = save_model(adapted, args.out / f"{args.stage}.model")
    log_path = log.write(args.out / f"{args.stage}_log.csv")
    return {"model": args.model, "source": args.source, "target": args.target}, {"model": model, "log": log_path}, log


def cmd_eval(args):
    params = load_model(args.model)
    data = load_dataset(args.data, args.split)
    report = evaluate_mre(params, data, dump_dir=args.out / "maps" if args.dump_maps else None)
    csv_path, json_path = report.write(args.out)
    outputs = {"report": csv_path, "summary": json_path}
    if args.dump_maps:
        outputs["maps"] = args.out / "maps"
    print(f"MRE {report.mre if report.mre is None else round(report.mre, 4)} over {len(report.rows) - report.skipped_zero_gt} images")
    return {"model": args.model, "data": args.data}, outputs


def cmd_sweep(args):
    grids = dict(DEFAULT_GRIDS)
    if args.grid is not None:
        try:
            loaded = json.loads(args.grid.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.grid}: invalid JSON ({exc})") from None
        unknown = set(loaded) - set(grids)
        if unknown:
            raise UsageError(f"{args.grid}: unknown grid keys {sorted(unknown)}")
        grids.update(loaded)
    cfg = AdaptConfig(adapt_epochs=args.epochs, adapt_lr=args.lr, batch_size=args.batch, seed=args.seed, eval_every=0)
    params = load_model(args.model)
    source = load_dataset(args.source, "train")
    target = load_dataset(args.target, "train").strip_annotations()
    report = run_sweep(params, source, target, cfg, grids=grids, subset_frac=args.subset_frac, budget=args.budget)
    csv_path = report.write(args.out)
    inputs = {"model": args.model, "source": args.source, "target": args.target}
    if args.grid is not None:
        inputs["grid"] = args.grid
    return inputs, {"report": csv_path}


COMMANDS = {"gen": cmd_gen, "train-source": cmd_train_source, "adapt": cmd_adapt, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the offending token
        return EXIT_USAGE if exc.code else EXIT_OK
    started = time.perf_counter()
    try:
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"countshift {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"countshift {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MalformedDatasetError as exc:
        print(f"countshift {args.command}: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except (CountShiftError, ValueError, FileNotFoundError) as exc:
        print(f"countshift {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    inputs, outputs = result[0], result[1]
    seconds = time.perf_counter() - started
    config = _jsonable(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_timing = seconds
    if len(result) > 2:
        manifest_timing = {"total": seconds, "epochs": [rec["seconds"] for rec in result[2].records]}
    write_run_manifest(out_dir, ["countshift"] + argv, config, config.get("seed"), inputs, outputs, manifest_timing)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

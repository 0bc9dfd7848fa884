"""Command-line entry point: ``somnoscore <command> ...``.

Exit codes: 0 ok, 2 usage/config error, 3 data integrity error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, arch, ensemble, metrics, report, sigdata, train
from .errors import (
    BadArg,
    BadSpec,
    ConfigError,
    DataError,
    ShapeError,
    SomnoError,
)

log = logging.getLogger("somnoscore")

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
SEED_ENV = "SOMNOSCORE_SEED"


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _run_manifest(out_dir: Path, args, seed: int, inputs: dict, outputs: list[str], started: float) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    doc = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    _write_text(out_dir / "run_manifest.json", json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _load_split(path) -> sigdata.SplitSpec:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise sigdata.FormatError(f"cannot read split: {exc}", str(p)) from exc
    return sigdata.SplitSpec.from_json(text, str(p))


def _load_part(data, split_path, part) -> list[sigdata.Recording]:
    if split_path is None:
        return sigdata.manifest_read(data)
    return sigdata.manifest_read(data, _load_split(split_path).part(part))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.perf_counter()
    seed = _seed(args)
    spec = sigdata.SynthSpec(num_patients=args.patients, epochs_per_patient=args.epochs, seed=seed,
                             kinds=tuple(sigdata.parse_kinds(args.signals)))
    recs = sigdata.synth_dataset(spec)
    out = Path(args.out)
    sigdata.manifest_write(recs, out)
    _run_manifest(out, args, seed, {}, ["manifest.json"], started)
    print(f"wrote {len(recs)} recordings to {out}")
    return 0


def cmd_split(args) -> int:
    started = time.perf_counter()
    seed = _seed(args)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    spec = sigdata.split_patients(sigdata.patient_ids(args.data), ratios, seed)
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "split.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, spec.to_json() + "\n")
    _run_manifest(out.parent, args, seed, {"data": args.data}, [out.name], started)
    print(f"train {len(spec.train)}  val {len(spec.val)}  test {len(spec.test)} -> {out}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    seed = _seed(args)
    kinds = sigdata.parse_kinds(args.signals)
    split = _load_split(args.split)
    tr = sigdata.manifest_read(args.data, split.train)
    va = sigdata.manifest_read(args.data, split.val)
    config = arch.ModelConfig(len(kinds))
    tcfg = train.TrainConfig(learning_rate=args.lr, max_iterations=args.max_iterations,
                             batch_size=args.batch_size, patience=args.patience,
                             patients_per_batch=args.patients_per_batch, seed=seed)
    params, history = train.fit(config, tcfg, tr, va, kinds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arch.save_checkpoint(out / "model.ckpt", config, params, seed,
                         {"val_loss": history.best_val_loss, "iteration": history.best_iteration},
                         [k.value for k in kinds])
    history.write_csv(out / "history.csv")
    _run_manifest(out, args, seed, {"data": args.data, "split": args.split},
                  ["model.ckpt", "history.csv"], started)
    print(f"best iteration {history.best_iteration} (val loss {history.best_val_loss:.5f}, "
          f"stopped by {history.stop_reason})")
    return 0


def _predictions_csv(recs, pred) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "epoch_index", "truth", "predicted"])
    k = 0
    for r in recs:
        for e in r.scored_epochs():
            w.writerow([r.patient_id, int(e), int(r.hypnogram[e]), int(pred[k])])
            k += 1
    return buf.getvalue()


def cmd_eval(args) -> int:
    started = time.perf_counter()
    member = ensemble.Member.load(args.model)
    recs = _load_part(args.data, args.split, args.split_part)
    pred, _ = ensemble.predict_all(ensemble.EnsembleSpec((member,)), recs)
    cm = metrics.ConfusionMatrix.from_pairs(pred, ensemble.truth_labels(recs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics(cm, out, {"model": member.name, "signals": [k.value for k in member.kinds]})
    _write_text(out / "predictions.csv", _predictions_csv(recs, pred))
    _run_manifest(out, args, 0, {"model": args.model, "data": args.data, "split": args.split},
                  ["metrics.json", "confusion.csv", "predictions.csv"], started)
    rep = metrics.report(cm)
    print(f"accuracy {rep.accuracy:.4f}  kappa {rep.kappa}  macro-F1 {rep.f1_macro:.4f}")
    return 0


def cmd_ensemble(args) -> int:
    started = time.perf_counter()
    members = [ensemble.Member.load(p) for p in args.models.split(",") if p]
    names = [m.name for m in members]
    if len(set(names)) != len(names):
        members = [ensemble.Member(f"{m.name}#{i}", m.config, m.params, m.kinds, m.checkpoint)
                   for i, m in enumerate(members)]
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [len(members)]
    specs = ensemble.enumerate_ensembles(members, sizes)
    recs = _load_part(args.data, args.split, args.split_part)
    rows = ensemble.compare(specs, recs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ensemble.write_comparison(rows, out / "comparison.csv")
    best = next(s for s in specs if s.name == rows[0].members)
    _write_text(out / "ensemble.json", ensemble.spec_to_json(best))
    _run_manifest(out, args, 0, {"models": args.models, "data": args.data},
                  ["comparison.csv", "ensemble.json"], started)
    for r in rows[:10]:
        print(f"{r.members:40s} acc {r.accuracy:.4f}  kappa {r.kappa}  F1 {r.f1_macro:.4f}")
    return 0


def cmd_params(args) -> int:
    kinds = sigdata.parse_kinds(args.signals)
    if args.config:
        try:
            base = arch.ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot read model config {args.config}: {exc}") from exc
    else:
        base = arch.ModelConfig()
    config = base.with_channels(len(kinds))
    cost = arch.param_count(config)
    first = config.blocks[0]
    ratio = arch.reduction_ratio(first.K, first.F)
    doc = cost.to_dict()
    doc.update({
        "signals": [k.value for k in kinds],
        "layer_shapes": arch.shape_propagate(config)[0],
        "first_block_reduction_ratio": float(ratio),
    })
    text = json.dumps(doc, indent=1)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "params.json", text + "\n")
        _run_manifest(out, args, 0, {"config": args.config}, ["params.json"], time.perf_counter())
    return 0


def cmd_report(args) -> int:
    started = time.perf_counter()
    written = report.render(args.input, args.out)
    if not written:
        raise DataError(f"nothing to render in {args.input}")
    _run_manifest(Path(args.out), args, 0, {"in": args.input}, [p.name for p in written], started)
    for p in written:
        print(p)
    return 0


def cmd_rerun(args) -> int:
    """Replay the command recorded in a run_manifest.json with its resolved seed."""
    path = Path(args.manifest)
    try:
        doc = json.loads(path.read_text())
        argv, seed = list(doc["argv"]), int(doc["seed"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read run manifest {path}: {exc}") from exc
    if argv and argv[0] == "rerun":
        raise ConfigError("refusing to replay a rerun manifest")
    old = os.environ.get(SEED_ENV)
    os.environ[SEED_ENV] = str(seed)
    try:
        return main(argv)
    finally:
        if old is None:
            os.environ.pop(SEED_ENV, None)
        else:
            os.environ[SEED_ENV] = old


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="somnoscore", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic polysomnography dataset")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--signals", default="C3A2,C4A1,EMG")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="patient-level train/val/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--out", required=True, help="split.json path or directory")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--signals", required=True, help="e.g. C4A1,EMG")
    p.add_argument("--patients-per-batch", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--split-part", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="compare softmax-sum ensembles of checkpoints")
    p.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--sizes", help="ensemble sizes to enumerate, e.g. 1,2,3 (default: all members)")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--split-part", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("params", help="parameter and operation counts")
    p.add_argument("--signals", default="C4A1")
    p.add_argument("--config", help="model config JSON (default: reference architecture)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("report", help="render SVG figures from an output directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rerun", help="replay the command recorded in a run_manifest.json")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_rerun)
    return ap


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ConfigError, BadSpec, BadArg, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SomnoError, FloatingPointError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

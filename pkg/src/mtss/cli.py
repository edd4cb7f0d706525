"""``mtss`` command-line entry point.

Exit codes:

    0  success
    1  unexpected internal error
    2  invalid configuration or arguments
    3  data error (missing or malformed manifest, image, model or dictionary)
    4  training failure
    5  output already exists (re-run with --overwrite)

Every command takes its artifacts directory from ``--out``, else the config's
``out_dir``, else ``$MTSS_OUTPUT_ROOT/<config name>`` (default root: ``runs``).
Each artifact directory gets a ``run_manifest.json`` holding the command, the
config hash and the seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, config_hash
from .embeddings import EmbeddingError
from .evaluate import EvaluationError, evaluate_model
from .experiments import (PLANS, SWEEP_PARAMS, RunConfig, load_run_config, prepare_data, run_experiment,
                          run_sweep, synth_dataset)
from .images import load_image, load_manifest_images, to_tensor
from .inference import PredictionError, predict
from .schema import ManifestError, load_manifest, save_manifest
from .student import load_model, save_student, train_student
from .teacher import TrainingError, load_teacher, save_teacher, train_teacher

ENV_OUTPUT_ROOT = "MTSS_OUTPUT_ROOT"

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_EXISTS = 0, 1, 2, 3, 4, 5

log = logging.getLogger("mtss")


class OutputExists(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    if getattr(args, "config", None) is None:
        return RunConfig()
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return load_run_config(path)


def _out_root(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    stem = Path(args.config).stem if getattr(args, "config", None) else "default"
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs")) / stem


def _claim(path: Path, overwrite: bool) -> Path:
    """Create ``path`` for fresh output, refusing to clobber existing artifacts."""
    if path.exists() and (path.is_file() or any(path.iterdir())):
        if not overwrite:
            raise OutputExists(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_manifest(path: Path, command: str, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    doc = {"command": command, "config_hash": config_hash(cfg.to_dict()), "seed": cfg.seed,
           "config": cfg.to_dict(), **(extra or {})}
    (path / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_path(p, what: str) -> Path:
    p = Path(p)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from exc


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, cfg)
    out = _claim(root / "data", args.overwrite)
    sets = {"labeled": cfg.data.labeled, "unlabeled": cfg.data.unlabeled, "target": cfg.data.target_domain}
    for name, synth in sets.items():
        if synth is None:
            continue
        m = synth_dataset(synth, out / name)
        print(f"{name}: {len(m)} images -> {out / name / 'manifest.jsonl'}")
    _write_run_manifest(out, "gen-data", cfg)
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, cfg)
    data = prepare_data(cfg, root)
    if args.type not in data.schema:
        raise ConfigError(f"unknown attribute type {args.type!r}; schema has {data.schema.type_names}")
    out = _claim(root / "teachers" / args.type, args.overwrite)
    tcfg = cfg.teacher_config
    images = load_manifest_images(data.train)
    res = train_teacher(data.train, args.type, tcfg, val_manifest=data.val, images=images)
    save_teacher(res.model, out, tcfg, images.shape[1], res.loss_trace)
    _write_run_manifest(out, "train-teacher", cfg, {"type": args.type, "best_epoch": res.best_epoch})
    print(f"teacher {args.type}: best epoch {res.best_epoch} -> {out}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, cfg)
    data = prepare_data(cfg, root)
    teachers = []
    for d in args.teachers:
        _require_path(Path(d) / "model.json", "teacher checkpoint")
        teachers.append(load_teacher(d))
    if args.subset:
        known = {t.attribute_type for t in teachers}
        missing = set(args.subset) - known
        if missing:
            raise ConfigError(f"--subset names types without a teacher: {sorted(missing)}")
        teachers = [t for t in teachers if t.attribute_type in args.subset]
    if args.unlabeled:
        pool = [load_manifest(_require_path(p, "manifest")) for p in args.unlabeled]
        if cfg.data.include_labeled_in_pool and not args.exclude_labeled:
            pool = [data.train.strip_labels()] + pool
    else:
        pool = data.pool(cfg.data.include_labeled_in_pool and not args.exclude_labeled)
    out = _claim(root / (args.name or "student"), args.overwrite)
    res = train_student(teachers, pool, cfg.student_config, val_manifest=data.val)
    save_student(res.model, out, cfg.student_config, res.loss_trace)
    _write_run_manifest(out, "train-student", cfg, {"teachers": [str(t) for t in args.teachers],
                                                    "pool_size": sum(len(p) for p in pool),
                                                    "best_epoch": res.best_epoch})
    print(f"student ({', '.join(t.attribute_type for t in teachers)}): best epoch {res.best_epoch} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, cfg)
    model_dir = _require_path(args.model, "model path")
    model = load_model(model_dir)
    if args.manifest:
        manifest = load_manifest(_require_path(args.manifest, "manifest"))
    else:
        manifest = prepare_data(cfg, root).test
    ks = _int_list(args.k) if args.k else list(cfg.experiment.ks)
    out = _claim(root / "eval" / (args.name or Path(model_dir).name), args.overwrite)
    report = evaluate_model(model, manifest, ks, log_path=out / "predictions.jsonl")
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.render() + "\n")
    _write_run_manifest(out, "evaluate", cfg, {"model": str(model_dir), "records": len(manifest)})
    print(report.render())
    return EXIT_OK


def cmd_predict(args) -> int:
    model_dir = _require_path(args.model, "model path")
    image = load_image(_require_path(args.image, "image"))
    model = load_model(model_dir)
    print(predict(model, image, args.k).to_json())
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, cfg)
    target = root / "reports" / f"{args.plan}.csv"
    if target.exists() and not args.overwrite:
        raise OutputExists(f"{target} already exists; pass --overwrite to replace it")
    table = run_experiment(args.plan, cfg, root)
    _write_run_manifest(root / "reports", f"experiment {args.plan}", cfg)
    print(table.render())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    root = _out_root(args, cfg)
    target = root / "reports" / f"sweep_{args.param}.csv"
    if target.exists() and not args.overwrite:
        raise OutputExists(f"{target} already exists; pass --overwrite to replace it")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from exc
    table = run_sweep(cfg, args.param, values, root)
    _write_run_manifest(root / "reports", f"sweep {args.param}", cfg, {"values": values})
    print(table.render())
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    """Write ``id v1 ... vD`` lines (branch output for one type) for external t-SNE tooling."""
    import torch

    model = load_model(_require_path(args.model, "model path"))
    manifest = load_manifest(_require_path(args.manifest, "manifest"))
    if args.type not in model.attribute_types:
        raise ConfigError(f"model has no attribute type {args.type!r}; it covers {model.attribute_types}")
    out = Path(args.out)
    if out.exists() and not args.overwrite:
        raise OutputExists(f"{out} already exists; pass --overwrite to replace it")
    images = load_manifest_images(manifest)
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), 256):
            x = to_tensor(images[start:start + 256])
            e = model(x)[args.type] if hasattr(model, "branches") else model(x)
            rows.append(e.double().numpy())
    emb = np.concatenate(rows) if rows else np.zeros((0, 0))
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        fh.write(f"# mtss-embeddings type={args.type} rows={emb.shape[0]} dim={emb.shape[1] if emb.size else 0}\n")
        for rec, vec in zip(manifest.records, emb):
            fh.write(rec.id + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")
    print(f"wrote {len(manifest)} embeddings -> {out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtss", description="Multi-teacher single-student attribute models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("config", nargs=None if required else "?", help="run config (.yaml, .yml or .json)")
        sp.add_argument("--out", help="output root (overrides config and environment)")
        sp.add_argument("--overwrite", action="store_true", help="replace existing output")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="generate the synthetic datasets"))
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("train-teacher", help="train one attribute-type teacher"))
    sp.add_argument("--type", required=True)
    sp.set_defaults(func=cmd_train_teacher)

    sp = with_config(sub.add_parser("train-student", help="distill teachers into one student"))
    sp.add_argument("--teachers", nargs="+", required=True, metavar="DIR")
    sp.add_argument("--unlabeled", nargs="*", metavar="MANIFEST", help="pool manifests (default: configured data)")
    sp.add_argument("--subset", nargs="*", metavar="TYPE", help="only distill these types")
    sp.add_argument("--exclude-labeled", action="store_true", help="leave the teachers' training images out of the pool")
    sp.add_argument("--name", help="output subdirectory (default: student)")
    sp.set_defaults(func=cmd_train_student)

    sp = with_config(sub.add_parser("evaluate", help="top-k metrics for a model on a labeled manifest"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", help="labeled manifest (default: the configured test split)")
    sp.add_argument("--k", help="comma-separated k values, e.g. 1,3,5")
    sp.add_argument("--name", help="output subdirectory under eval/")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="top-k classes per type for one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.set_defaults(func=cmd_predict)

    sp = with_config(sub.add_parser("experiment", help="run a comparison recipe"))
    sp.add_argument("--plan", required=True, choices=PLANS)
    sp.set_defaults(func=cmd_experiment)

    sp = with_config(sub.add_parser("sweep", help="vary one hyperparameter"))
    sp.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("export-embeddings", help="dump one type's embeddings as text")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--type", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except OutputExists as exc:
        print(f"error: output exists: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, EmbeddingError, EvaluationError, PredictionError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except Exception as exc:  # noqa: BLE001
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

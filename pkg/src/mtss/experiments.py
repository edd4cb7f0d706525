"""Experiment recipes: data preparation, cached training, and comparison tables.

Artifacts live under one output directory::

    data/<name>/manifest.jsonl      generated or corrupted datasets
    teachers/<hash>/<type>/         teacher checkpoints, keyed by config hash
    students/<name>-<hash>/         student checkpoints
    reports/<plan>.csv, .txt        comparison tables

Datasets and checkpoints whose config hash matches are reused, so several
plans can share one directory without retraining.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, TrainConfig, config_hash, from_dict, to_dict
from .evaluate import DEFAULT_KS, ConstantRanker, MetricsReport, evaluate_model
from .images import load_manifest_images
from .schema import DatasetManifest, concat, load_manifest, split
from .student import StudentModel, load_student, save_student, train_student
from .synthdata import (CorruptionSpec, SynthConfig, corrupt_each, corrupt_manifest,
                        generate_synthetic_dataset)
from .teacher import TeacherModel, load_teacher, save_teacher, train_teacher

log = logging.getLogger(__name__)

PLANS = ("teacher_vs_student", "single_vs_multi", "cross_domain", "robustness", "unlabeled_sweep")


@dataclass(frozen=True)
class DataSection:
    labeled: SynthConfig = SynthConfig(n_images=2000, class_imbalance_exponent=0.5, label_drop_prob=0.2,
                                       seed=0, id_prefix="lab")
    unlabeled: Optional[SynthConfig] = SynthConfig(n_images=5000, seed=1000, id_prefix="unl")
    target_domain: SynthConfig = SynthConfig(n_images=2000, style="street", seed=2000, id_prefix="tgt")
    labeled_manifest: Optional[str] = None
    unlabeled_manifests: Tuple[str, ...] = ()
    split: Tuple[float, float, float] = (0.6, 0.1, 0.3)
    split_seed: int = 0
    include_labeled_in_pool: bool = True


@dataclass(frozen=True)
class ExperimentSection:
    ks: Tuple[int, ...] = DEFAULT_KS
    types: Optional[Tuple[str, ...]] = None
    sizes: Tuple[int, ...] = (500, 2000, 5000)
    corruptions: Tuple[str, ...] = ("gaussian_noise", "gaussian_blur", "brightness", "contrast", "pixelate")
    severities: Tuple[int, ...] = (1, 2, 3, 4, 5)
    corrupted_count: int = 2500
    corruption_seed: int = 77


def _default_teacher() -> TrainConfig:
    return TrainConfig(dim=6, lr=0.2, epochs=15, batch_size=64, samples_per_epoch=2048,
                       lr_decay_every_epochs=5, backbone_preset="small")


def _default_student() -> TrainConfig:
    return TrainConfig(dim=6, beta=1.0, lr=1.0, epochs=40, batch_size=64, samples_per_epoch=5000,
                       lr_decay_every_epochs=13, warmup_images=5000, backbone_preset="wide")


@dataclass(frozen=True)
class RunConfig:
    out_dir: Optional[str] = None
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    teacher: TrainConfig = field(default_factory=_default_teacher)
    student: TrainConfig = field(default_factory=_default_student)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    @property
    def teacher_config(self) -> TrainConfig:
        return self.teacher.replace(seed=self.seed)

    @property
    def student_config(self) -> TrainConfig:
        return self.student.replace(seed=self.seed)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"out_dir", "seed", "data", "teacher", "student", "experiment"}
        if unknown:
            raise ConfigError(f"run config: unknown keys {sorted(unknown)}")
        data = dict(d.get("data") or {})
        for key in ("labeled", "unlabeled", "target_domain"):
            if key in data and data[key] is not None:
                base = getattr(DataSection(), key) or SynthConfig()
                data[key] = from_dict(SynthConfig, {**to_dict(base), **data[key]}, f"data.{key}")
        exp = dict(d.get("experiment") or {})
        return cls(
            out_dir=d.get("out_dir"),
            seed=int(d.get("seed", 0)),
            data=from_dict(DataSection, data, "data"),
            teacher=from_dict(TrainConfig, {**to_dict(_default_teacher()), **(d.get("teacher") or {})}, "teacher"),
            student=from_dict(TrainConfig, {**to_dict(_default_student()), **(d.get("student") or {})}, "student"),
            experiment=from_dict(ExperimentSection, exp, "experiment"),
        )

    def to_dict(self) -> dict:
        return to_dict(self)


def load_run_config(path) -> RunConfig:
    """Read a JSON or YAML run config; unknown keys are rejected."""
    import yaml

    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return RunConfig.from_dict(doc)


# -- data -----------------------------------------------------------------------

@dataclass
class Datasets:
    train: DatasetManifest
    val: DatasetManifest
    test: DatasetManifest
    unlabeled: List[DatasetManifest]

    @property
    def schema(self):
        return self.train.schema

    def pool(self, include_labeled: bool = True, unlabeled_limit: Optional[int] = None) -> List[DatasetManifest]:
        extra = []
        remaining = unlabeled_limit
        for u in self.unlabeled:
            if remaining is not None:
                u = u.with_records(u.records[:remaining])
                remaining -= len(u)
            if len(u):
                extra.append(u.strip_labels())
        return ([self.train.strip_labels()] if include_labeled else []) + extra


def synth_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    """Generate ``config`` into ``out_dir`` unless an identical dataset is already there."""
    out_dir = Path(out_dir)
    stamp = out_dir / "synth_config.json"
    if (out_dir / "manifest.jsonl").exists() and stamp.exists() \
            and json.loads(stamp.read_text()) == to_dict(config):
        return load_manifest(out_dir / "manifest.jsonl")
    return generate_synthetic_dataset(config, out_dir)


def prepare_data(cfg: RunConfig, out_dir) -> Datasets:
    out_dir = Path(out_dir)
    d = cfg.data
    if d.labeled_manifest:
        labeled = load_manifest(d.labeled_manifest)
    else:
        labeled = synth_dataset(d.labeled, out_dir / "data" / "labeled")
    train, val, test = split(labeled, d.split, d.split_seed)
    unlabeled = [load_manifest(p).strip_labels() for p in d.unlabeled_manifests]
    if d.unlabeled is not None and not d.unlabeled_manifests:
        unlabeled.append(synth_dataset(d.unlabeled, out_dir / "data" / "unlabeled").strip_labels())
    return Datasets(train, val, test, unlabeled)


# -- cached training --------------------------------------------------------------

def teacher_dir(out_dir, config: TrainConfig, train: DatasetManifest) -> Path:
    key = config_hash({"config": to_dict(config), "train": train.ids[:50], "n": len(train)})
    return Path(out_dir) / "teachers" / key


def get_teachers(cfg: RunConfig, data: Datasets, out_dir, config: Optional[TrainConfig] = None,
                 types: Optional[Sequence[str]] = None) -> Dict[str, TeacherModel]:
    config = config or cfg.teacher_config
    types = types or cfg.experiment.types or data.schema.type_names
    base = teacher_dir(out_dir, config, data.train)
    images = None
    teachers = {}
    for t in types:
        path = base / t
        if not (path / "model.json").exists():
            if images is None:
                images = load_manifest_images(data.train)
            res = train_teacher(data.train, t, config, val_manifest=data.val, images=images)
            save_teacher(res.model, path, config, images.shape[1], res.loss_trace)
        teachers[t] = load_teacher(path)
    return teachers


def get_student(name: str, teachers: Mapping[str, TeacherModel], pool: Sequence[DatasetManifest],
                config: TrainConfig, val: Optional[DatasetManifest], out_dir) -> StudentModel:
    key = config_hash({"config": to_dict(config), "teachers": sorted(teachers),
                       "pool": [(m.ids[:20], len(m)) for m in pool],
                       "teacher_dirs": [Path(getattr(t, "checkpoint", "")).parts[-2:] for t in teachers.values()]})
    path = Path(out_dir) / "students" / f"{name}-{key}"
    if not (path / "model.json").exists():
        res = train_student(list(teachers.values()), pool, config, val_manifest=val)
        save_student(res.model, path, config, res.loss_trace)
    return load_student(path)


# -- tables ---------------------------------------------------------------------

@dataclass
class ComparisonTable:
    title: str
    columns: List[str]
    rows: List[List] = field(default_factory=list)

    def add(self, *values) -> None:
        self.rows.append(list(values))

    def column(self, name: str) -> List:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def row(self, label) -> Dict[str, object]:
        for r in self.rows:
            if r[0] == label:
                return dict(zip(self.columns, r))
        raise KeyError(label)

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, float):
            return f"{v:.2f}"
        return "-" if v is None else str(v)

    def render(self) -> str:
        cells = [self.columns] + [[self._fmt(v) for v in r] for r in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = [self.title, "  ".join(c.ljust(w) for c, w in zip(cells[0], widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells[1:]]
        return "\n".join(lines)

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
        stem.with_suffix(".txt").write_text(self.render() + "\n")


def pct(x: float) -> float:
    return 100.0 * x


# -- plans ----------------------------------------------------------------------

def teacher_reports(teachers: Mapping[str, TeacherModel], test: DatasetManifest, ks) -> Dict[str, MetricsReport]:
    images = load_manifest_images(test)
    return {t: evaluate_model(m, test, ks, images=images) for t, m in teachers.items()}


def plan_teacher_vs_student(cfg: RunConfig, out_dir) -> ComparisonTable:
    data = prepare_data(cfg, out_dir)
    ks = cfg.experiment.ks
    teachers = get_teachers(cfg, data, out_dir)
    student = get_student("multi", teachers, data.pool(cfg.data.include_labeled_in_pool), cfg.student_config,
                          data.val, out_dir)
    t_rep = teacher_reports(teachers, data.test, ks)
    s_rep = evaluate_model(student, data.test, ks)
    table = ComparisonTable("Teacher (T) vs student (S) on the test split",
                            ["type", "T F1@1", "S F1@1", "dF1@1", "T R@3", "S R@3", "dR@3"])
    for t in teachers:
        tf, sf = pct(t_rep[t].f1(1, t)), pct(s_rep.f1(1, t))
        tr, sr = pct(t_rep[t].r(3, t)), pct(s_rep.r(3, t))
        table.add(t, tf, sf, sf - tf, tr, sr, sr - tr)
    mean = lambda col: float(np.mean(table.column(col)))
    table.add("mean", mean("T F1@1"), mean("S F1@1"), mean("dF1@1"), mean("T R@3"), mean("S R@3"), mean("dR@3"))
    return table


def plan_single_vs_multi(cfg: RunConfig, out_dir) -> ComparisonTable:
    data = prepare_data(cfg, out_dir)
    teachers = get_teachers(cfg, data, out_dir)
    pool = data.pool(cfg.data.include_labeled_in_pool)
    multi = evaluate_model(get_student("multi", teachers, pool, cfg.student_config, data.val, out_dir),
                           data.test, cfg.experiment.ks)
    table = ComparisonTable("Single-teacher vs multi-teacher students (R@3)",
                            ["type", "S-Single R@3", "S-Multi R@3", "dR@3"])
    for t in teachers:
        single = get_student(f"single-{t}", {t: teachers[t]}, pool, cfg.student_config, data.val, out_dir)
        sr, mr = pct(evaluate_model(single, data.test, cfg.experiment.ks).r(3, t)), pct(multi.r(3, t))
        table.add(t, sr, mr, mr - sr)
    return table


def plan_cross_domain(cfg: RunConfig, out_dir) -> ComparisonTable:
    data = prepare_data(cfg, out_dir)
    ks = cfg.experiment.ks
    target = synth_dataset(cfg.data.target_domain, Path(out_dir) / "data" / "target")
    t_pool, _, t_test = split(target, cfg.data.split, cfg.data.split_seed)
    teachers = get_teachers(cfg, data, out_dir)
    src_pool = data.pool(cfg.data.include_labeled_in_pool)
    students = {
        "S (source only)": get_student("source", teachers, src_pool, cfg.student_config, data.val, out_dir),
        "S (source+target)": get_student("mixed-domain", teachers, src_pool + [t_pool.strip_labels()],
                                         cfg.student_config, data.val, out_dir),
    }
    table = ComparisonTable("Cross-domain adaptability (macro R@3 over types)",
                            ["model", "mixing", "source R@3", "d", "target R@3", "d"])
    src_t = teacher_reports(teachers, data.test, ks)
    tgt_t = teacher_reports(teachers, t_test, ks)
    table.add("T", "-", pct(np.mean([r.r(3) for r in src_t.values()])), None,
              pct(np.mean([r.r(3) for r in tgt_t.values()])), None)
    base = None
    for name, model in students.items():
        s, g = pct(evaluate_model(model, data.test, ks).r(3)), pct(evaluate_model(model, t_test, ks).r(3))
        if base is None:
            base = (s, g)
            table.add(name, "No", s, None, g, None)
        else:
            table.add(name, "Yes", s, s - base[0], g, g - base[1])
    return table


def corruption_specs(cfg: RunConfig) -> List[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in cfg.experiment.corruptions for s in cfg.experiment.severities]


def corrupted_sets(cfg: RunConfig, data: Datasets, out_dir) -> Tuple[DatasetManifest, DatasetManifest]:
    """(unlabeled corrupted pool, corrupted labeled test split), cached on disk."""
    specs = corruption_specs(cfg)
    exp = cfg.experiment
    key = config_hash({"specs": [s.tag for s in specs], "n": exp.corrupted_count, "seed": exp.corruption_seed,
                       "src": [(m.ids[:20], len(m)) for m in data.unlabeled], "test": data.test.ids[:20]})
    base = Path(out_dir) / "data" / f"corrupted-{key}"
    if (base / "pool" / "manifest.jsonl").exists() and (base / "test" / "manifest.jsonl").exists():
        return load_manifest(base / "pool" / "manifest.jsonl"), load_manifest(base / "test" / "manifest.jsonl")
    source = concat(data.pool(include_labeled=False)) if data.unlabeled else data.train
    pool = corrupt_manifest(source, specs, exp.corrupted_count, exp.corruption_seed, base / "pool")
    test = corrupt_each(data.test, specs, exp.corruption_seed + 1, base / "test")
    return pool, test


def plan_robustness(cfg: RunConfig, out_dir) -> ComparisonTable:
    data = prepare_data(cfg, out_dir)
    ks = cfg.experiment.ks
    teachers = get_teachers(cfg, data, out_dir)
    c_pool, c_test = corrupted_sets(cfg, data, out_dir)
    clean_pool = data.pool(cfg.data.include_labeled_in_pool)
    students = {
        "Baseline(S)": get_student("multi", teachers, clean_pool, cfg.student_config, data.val, out_dir),
        "S-mixed": get_student("corrupt-mix", teachers, clean_pool + [c_pool], cfg.student_config, data.val,
                               out_dir),
    }
    table = ComparisonTable("Robustness to corruption (macro R@3 over types)",
                            ["model", "mixing", "clean R@3", "d clean", "corrupted R@3", "d corrupted"])
    base = None
    for name, model in students.items():
        c, k = pct(evaluate_model(model, data.test, ks).r(3)), pct(evaluate_model(model, c_test, ks).r(3))
        if base is None:
            base = (c, k)
            table.add(name, "No", c, None, k, None)
        else:
            table.add(name, "Yes", c, c - base[0], k, k - base[1])
    return table


def plan_unlabeled_sweep(cfg: RunConfig, out_dir) -> ComparisonTable:
    data = prepare_data(cfg, out_dir)
    ks = cfg.experiment.ks
    teachers = get_teachers(cfg, data, out_dir)
    t_rep = teacher_reports(teachers, data.test, ks)
    t_map = pct(np.mean([r.mean_ap() for r in t_rep.values()]))
    t_r3 = pct(np.mean([r.r(3) for r in t_rep.values()]))
    table = ComparisonTable("Effect of the unlabeled pool size on the student",
                            ["model", "pool size", "mAP", "d mAP vs T", "R@3", "d R@3 vs T"])
    table.add("T", len(data.train), t_map, None, t_r3, None)
    for n in cfg.experiment.sizes:
        available = sum(len(u) for u in data.unlabeled)
        if n > available:
            raise ConfigError(f"unlabeled sweep size {n} exceeds the {available} available unlabeled images")
        pool = data.pool(cfg.data.include_labeled_in_pool, unlabeled_limit=n)
        rep = evaluate_model(get_student(f"sweep{n}", teachers, pool, cfg.student_config, data.val, out_dir),
                             data.test, ks)
        table.add(f"S-{n}", sum(len(p) for p in pool), pct(rep.mean_ap()), pct(rep.mean_ap()) - t_map,
                  pct(rep.r(3)), pct(rep.r(3)) - t_r3)
    return table


PLAN_FUNCS = {
    "teacher_vs_student": plan_teacher_vs_student,
    "single_vs_multi": plan_single_vs_multi,
    "cross_domain": plan_cross_domain,
    "robustness": plan_robustness,
    "unlabeled_sweep": plan_unlabeled_sweep,
}


def run_experiment(plan: str, cfg: RunConfig, out_dir=None) -> ComparisonTable:
    """Run one named plan and write ``reports/<plan>.csv`` and ``.txt``.

    On failure a ``reports/<plan>.FAILED`` marker holding the error is left
    next to whatever artifacts were already produced.
    """
    if plan not in PLAN_FUNCS:
        raise ConfigError(f"unknown plan {plan!r}; choose from {PLANS}")
    out_dir = Path(out_dir or cfg.out_dir or "runs")
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    marker = reports / f"{plan}.FAILED"
    try:
        table = PLAN_FUNCS[plan](cfg, out_dir)
    except Exception as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    if marker.exists():
        marker.unlink()
    table.write(reports / plan)
    return table


# -- hyperparameter sweeps ----------------------------------------------------------

SWEEP_PARAMS = ("gamma", "beta", "dim", "lr")


def run_sweep(cfg: RunConfig, param: str, values: Sequence[float], out_dir=None) -> ComparisonTable:
    """Vary one hyperparameter and report per-type R@3 changes against a baseline.

    The baseline is gamma=0 for ``gamma`` and the first listed value otherwise.
    ``gamma``, ``dim`` and ``lr`` vary the teachers; ``beta`` varies the
    student (with the configured teachers).
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(out_dir or cfg.out_dir or "runs")
    data = prepare_data(cfg, out_dir)
    ks = cfg.experiment.ks
    cast = int if param == "dim" else float
    values = [cast(v) for v in values]
    if param == "gamma":
        baseline = 0.0
        if baseline not in values:
            values = [baseline] + values
    else:
        baseline = values[0]
    results: Dict[float, Dict[str, float]] = {}
    for v in values:
        if param == "beta":
            teachers = get_teachers(cfg, data, out_dir)
            model = get_student(f"beta{v}", teachers, data.pool(cfg.data.include_labeled_in_pool),
                                cfg.student_config.replace(beta=v), data.val, out_dir)
            rep = evaluate_model(model, data.test, ks)
            results[v] = {t: pct(rep.r(3, t)) for t in teachers}
        else:
            tcfg = cfg.teacher_config.replace(**{param: v})
            teachers = get_teachers(cfg, data, out_dir, config=tcfg)
            reps = teacher_reports(teachers, data.test, ks)
            results[v] = {t: pct(reps[t].r(3, t)) for t in teachers}
    types = list(next(iter(results.values())))
    table = ComparisonTable(f"Sweep over {param} (R@3 change vs {param}={baseline})",
                            [param] + [f"{t} R@3" for t in types] + [f"{t} d" for t in types])
    for v in values:
        table.add(v, *[results[v][t] for t in types], *[results[v][t] - results[baseline][t] for t in types])
    table.write(out_dir / "reports" / f"sweep_{param}")
    return table

"""Top-k ranking metrics, per-model evaluation, and prediction logs.

Any model exposing ``attribute_types``, ``class_names(type)`` and
``score_batch(x) -> {type: B x N scores}`` can be evaluated; teachers,
students and :class:`ConstantRanker` all do.

Averaging: per type, metrics are means over the records that carry ground
truth for that type. ``overall`` is the unweighted mean of the per-type
values. Sums use ``math.fsum`` so results do not depend on reduction order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .images import load_manifest_images, to_tensor
from .schema import DatasetManifest

DEFAULT_KS = (1, 3, 5)


class EvaluationError(ValueError):
    pass


def _topk(predictions: Sequence[str], k: int) -> List[str]:
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if len(predictions) < k:
        raise EvaluationError(f"need at least {k} ranked predictions, got {len(predictions)}")
    return list(predictions[:k])


def _truth(truth: Iterable[str]) -> set:
    t = set(truth)
    if not t:
        raise EvaluationError("empty ground truth; exclude such records before scoring")
    return t


def recall_at_k(predictions: Sequence[str], truth: Iterable[str], k: int) -> float:
    t = _truth(truth)
    return len(t & set(_topk(predictions, k))) / len(t)


def precision_at_k(predictions: Sequence[str], truth: Iterable[str], k: int) -> float:
    t = _truth(truth)
    return len(t & set(_topk(predictions, k))) / k


def f1_at_k(predictions: Sequence[str], truth: Iterable[str], k: int) -> float:
    p = precision_at_k(predictions, truth, k)
    r = recall_at_k(predictions, truth, k)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def average_precision(predictions: Sequence[str], truth: Iterable[str]) -> float:
    """AP over a full ranking: mean of precision@rank at each relevant hit."""
    t = _truth(truth)
    hits, acc = 0, []
    for rank, c in enumerate(predictions, start=1):
        if c in t:
            hits += 1
            acc.append(hits / rank)
    return math.fsum(acc) / len(t)


# -- reports --------------------------------------------------------------------

@dataclass
class TypeMetrics:
    n_records: int
    recall: Dict[int, float]
    precision: Dict[int, float]
    f1: Dict[int, float]
    mean_ap: float
    per_class_recall: Dict[str, float] = field(default_factory=dict)
    per_class_support: Dict[str, int] = field(default_factory=dict)


@dataclass
class MetricsReport:
    ks: Tuple[int, ...]
    per_class_k: int
    per_type: Dict[str, TypeMetrics]
    overall: Dict[str, Dict[int, float]]

    def r(self, k: int, type_name: Optional[str] = None) -> float:
        return self.per_type[type_name].recall[k] if type_name else self.overall["recall"][k]

    def f1(self, k: int, type_name: Optional[str] = None) -> float:
        return self.per_type[type_name].f1[k] if type_name else self.overall["f1"][k]

    def mean_ap(self, type_name: Optional[str] = None) -> float:
        if type_name:
            return self.per_type[type_name].mean_ap
        return math.fsum(m.mean_ap for m in self.per_type.values()) / len(self.per_type)

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "per_class_k": self.per_class_k,
            "overall": {m: {str(k): v for k, v in d.items()} for m, d in self.overall.items()},
            "overall_map": self.mean_ap(),
            "per_type": {
                t: {"n_records": m.n_records,
                    "recall": {str(k): v for k, v in m.recall.items()},
                    "precision": {str(k): v for k, v in m.precision.items()},
                    "f1": {str(k): v for k, v in m.f1.items()},
                    "map": m.mean_ap,
                    "per_class_recall": m.per_class_recall,
                    "per_class_support": m.per_class_support}
                for t, m in self.per_type.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv_rows(self) -> List[List[str]]:
        rows = [["type", "n_records"] + [f"{m}@{k}" for m in ("R", "P", "F1") for k in self.ks] + ["mAP"]]
        for t, m in self.per_type.items():
            rows.append([t, str(m.n_records)]
                        + [f"{d[k]:.6f}" for d in (m.recall, m.precision, m.f1) for k in self.ks]
                        + [f"{m.mean_ap:.6f}"])
        rows.append(["overall", str(sum(m.n_records for m in self.per_type.values()))]
                    + [f"{self.overall[n][k]:.6f}" for n in ("recall", "precision", "f1") for k in self.ks]
                    + [f"{self.mean_ap():.6f}"])
        return rows

    def render(self) -> str:
        rows = self.to_csv_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def metrics_from_rankings(entries: Sequence[Mapping], class_names: Mapping[str, Sequence[str]],
                          ks: Sequence[int] = DEFAULT_KS, per_class_k: int = 3) -> MetricsReport:
    """Aggregate per-record rankings into a report.

    ``entries`` items carry ``id``, ``type``, ``truth`` (class names) and
    ``ranking`` (class names, best first). ``k`` is capped at the class count.
    """
    ks = tuple(sorted(set(ks)))
    grouped: Dict[str, List[Mapping]] = {t: [] for t in class_names}
    for e in entries:
        if e["truth"]:
            grouped.setdefault(e["type"], []).append(e)
    per_type = {}
    for t, items in grouped.items():
        if not items:
            continue
        items = sorted(items, key=lambda e: e["id"])
        n_cls = len(class_names[t])
        rec, prec, f1 = {}, {}, {}
        for k in ks:
            kk = min(k, n_cls)
            rec[k] = math.fsum(recall_at_k(e["ranking"], e["truth"], kk) for e in items) / len(items)
            prec[k] = math.fsum(precision_at_k(e["ranking"], e["truth"], kk) for e in items) / len(items)
            f1[k] = math.fsum(f1_at_k(e["ranking"], e["truth"], kk) for e in items) / len(items)
        m_ap = math.fsum(average_precision(e["ranking"], e["truth"]) for e in items) / len(items)
        pk = min(per_class_k, n_cls)
        hits = {c: 0 for c in class_names[t]}
        support = {c: 0 for c in class_names[t]}
        for e in items:
            top = set(e["ranking"][:pk])
            for c in e["truth"]:
                support[c] += 1
                hits[c] += c in top
        pcr = {c: hits[c] / support[c] for c in class_names[t] if support[c]}
        per_type[t] = TypeMetrics(len(items), rec, prec, f1, m_ap, pcr,
                                  {c: s for c, s in support.items() if s})
    if not per_type:
        raise EvaluationError("no evaluable records")
    overall = {name: {k: math.fsum(getattr(m, name)[k] for m in per_type.values()) / len(per_type)
                      for k in ks}
               for name in ("recall", "precision", "f1")}
    return MetricsReport(ks, per_class_k, per_type, overall)


# -- model evaluation ---------------------------------------------------------------

class ConstantRanker:
    """Baseline that ranks classes identically for every image (e.g. by training frequency)."""

    def __init__(self, rankings: Mapping[str, Sequence[str]], class_names: Mapping[str, Sequence[str]]):
        self._classes = {t: tuple(class_names[t]) for t in rankings}
        self._scores = {}
        for t, order in rankings.items():
            s = np.zeros(len(self._classes[t]))
            for pos, c in enumerate(order):
                s[self._classes[t].index(c)] = len(order) - pos
            self._scores[t] = s

    @classmethod
    def by_frequency(cls, manifest: DatasetManifest, types: Optional[Sequence[str]] = None) -> "ConstantRanker":
        from .schema import class_counts

        types = types or manifest.schema.type_names
        rankings, names = {}, {}
        for t in types:
            classes = manifest.schema[t].classes
            counts = class_counts(manifest, t)
            rankings[t] = sorted(classes, key=lambda c: (-counts[c], classes.index(c)))
            names[t] = classes
        return cls(rankings, names)

    @property
    def attribute_types(self) -> List[str]:
        return list(self._classes)

    def class_names(self, type_name: str) -> Tuple[str, ...]:
        return self._classes[type_name]

    def score_batch(self, x: torch.Tensor) -> Dict[str, np.ndarray]:
        return {t: np.tile(s, (x.shape[0], 1)) for t, s in self._scores.items()}


def rank_scores(scores: np.ndarray, classes: Sequence[str]) -> List[List[Tuple[str, float]]]:
    """Sort each row descending with a stable class-index tie-break."""
    out = []
    for row in scores:
        order = np.argsort(-row, kind="stable")
        out.append([(classes[i], float(row[i])) for i in order])
    return out


def collect_rankings(model, manifest: DatasetManifest, images: Optional[np.ndarray] = None,
                     types: Optional[Sequence[str]] = None, batch_size: int = 256) -> List[dict]:
    """Full per-record rankings for every type the model covers; one entry per (record, type)."""
    types = [t for t in (types or model.attribute_types) if t in manifest.schema]
    if images is None:
        images = load_manifest_images(manifest)
    entries = []
    for start in range(0, len(manifest.records), batch_size):
        x = to_tensor(images[start:start + batch_size])
        with torch.no_grad():
            scores = model.score_batch(x)
        for t in types:
            ranked = rank_scores(scores[t], model.class_names(t))
            for rec, rk in zip(manifest.records[start:start + batch_size], ranked):
                entries.append({"id": rec.id, "type": t, "truth": sorted(rec.labels_for(t)),
                                "ranking": [c for c, _ in rk], "scores": [s for _, s in rk]})
    return entries


def evaluate_model(model, manifest: DatasetManifest, ks: Sequence[int] = DEFAULT_KS,
                   images: Optional[np.ndarray] = None, types: Optional[Sequence[str]] = None,
                   log_path=None, per_class_k: int = 3) -> MetricsReport:
    """Score ``manifest`` with ``model`` and aggregate top-k metrics.

    A teacher covers only its own type. Records without ground truth for a
    type are skipped for that type. With ``log_path`` the per-record rankings
    are also written as JSON lines.
    """
    types = [t for t in (types or model.attribute_types)]
    for t in types:
        if t not in manifest.schema:
            raise EvaluationError(f"manifest has no attribute type {t!r}")
    entries = collect_rankings(model, manifest, images, types)
    for t in types:
        if not any(e["truth"] for e in entries if e["type"] == t):
            raise EvaluationError(f"no evaluable records for attribute type {t!r}")
    if log_path is not None:
        write_prediction_log(entries, log_path, {t: model.class_names(t) for t in types})
    return metrics_from_rankings(entries, {t: model.class_names(t) for t in types}, ks, per_class_k)


def write_prediction_log(entries: Sequence[Mapping], path, class_names: Mapping[str, Sequence[str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"classes": {t: list(c) for t, c in class_names.items()}}) + "\n")
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_prediction_log(path) -> Tuple[List[dict], Dict[str, List[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    return [json.loads(l) for l in lines[1:] if l.strip()], header["classes"]


def metrics_from_log(path, ks: Sequence[int] = DEFAULT_KS, per_class_k: int = 3) -> MetricsReport:
    entries, classes = read_prediction_log(path)
    return metrics_from_rankings(entries, classes, ks, per_class_k)

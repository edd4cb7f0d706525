"""Label dictionaries and cosine lookup against them.

A dictionary holds one learnable center embedding per class of an attribute
type. Rows are kept unnormalized; every similarity normalizes on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

DICT_HEADER = "# mtss-label-dictionary v1"


class EmbeddingError(ValueError):
    pass


@dataclass
class LabelDictionary:
    attribute_type: str
    classes: Tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise EmbeddingError("dictionary matrix must be 2-D")
        if self.matrix.shape[0] != len(self.classes):
            raise EmbeddingError(
                f"{self.attribute_type}: {self.matrix.shape[0]} rows for {len(self.classes)} classes")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise EmbeddingError(f"{self.attribute_type}: dictionary has a zero row")
        return self.matrix / norms

    def add_class(self, name: str, row: np.ndarray) -> None:
        """Append a center for a class unseen at training time."""
        row = np.asarray(row, dtype=np.float64).reshape(1, -1)
        if row.shape[1] != self.dim:
            raise EmbeddingError(f"row has dim {row.shape[1]}, dictionary has {self.dim}")
        if name in self.classes:
            raise EmbeddingError(f"class {name!r} already present")
        self.classes = self.classes + (name,)
        self.matrix = np.vstack([self.matrix, row])

    def save(self, path) -> None:
        """Plain-text export: header, then one ``class<TAB>v1 v2 ...`` line per row."""
        lines = [DICT_HEADER,
                 f"# type={self.attribute_type} rows={self.n_classes} dim={self.dim}"]
        for name, row in zip(self.classes, self.matrix):
            lines.append(name + "\t" + " ".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelDictionary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < 2 or lines[0] != DICT_HEADER:
            raise EmbeddingError(f"{path}: not a label dictionary file")
        meta = dict(kv.split("=", 1) for kv in lines[1].lstrip("# ").split())
        names, rows = [], []
        for line in lines[2:]:
            if not line:
                continue
            name, values = line.split("\t", 1)
            names.append(name)
            rows.append([float(v) for v in values.split()])
        matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), int(meta["dim"]))
        return cls(meta["type"], tuple(names), matrix)


def init_label_dictionary(type_name: str, classes: Sequence[str] | int, dim: int,
                          seed: int) -> LabelDictionary:
    """Gaussian rows with std 1/sqrt(dim), so expected row norm is about 1."""
    if isinstance(classes, int):
        classes = tuple(str(i) for i in range(classes))
    n = len(classes)
    if n < 2 or dim < 2:
        raise EmbeddingError(f"need n_classes >= 2 and dim >= 2, got {n} and {dim}")
    rng = np.random.default_rng(seed)
    return LabelDictionary(type_name, tuple(classes), rng.normal(0.0, 1.0 / np.sqrt(dim), (n, dim)))


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    return v / n


def cosine_scores(e: np.ndarray, dictionary: LabelDictionary) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (dictionary.dim,):
        raise EmbeddingError(f"embedding shape {e.shape} does not match dictionary dim {dictionary.dim}")
    return np.clip(dictionary.normalized() @ normalize(e), -1.0, 1.0)


def rank_labels(e: np.ndarray, dictionary: LabelDictionary, k: int) -> List[Tuple[str, float]]:
    """Top-``k`` classes by cosine, descending; equal scores keep class order."""
    if not 1 <= k <= dictionary.n_classes:
        raise EmbeddingError(f"k must be in [1, {dictionary.n_classes}], got {k}")
    scores = cosine_scores(e, dictionary)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(dictionary.classes[i], float(scores[i])) for i in order]


def nearest_label(e: np.ndarray, dictionary: LabelDictionary) -> Tuple[str, float]:
    return rank_labels(e, dictionary, 1)[0]

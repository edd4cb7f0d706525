"""Query-time prediction: one backbone pass, then per-type dictionary ranking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from .embeddings import rank_labels
from .images import to_tensor


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    """Per attribute type, the top-k ``(class, cosine)`` pairs, best first."""

    ranked: Dict[str, List[Tuple[str, float]]]

    def top1(self, type_name: str) -> str:
        return self.ranked[type_name][0][0]

    def to_dict(self) -> dict:
        return {t: [{"class": c, "score": s} for c, s in pairs] for t, pairs in self.ranked.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _embed_all(model, x: torch.Tensor) -> Dict[str, np.ndarray]:
    if not getattr(model, "dictionaries", None):
        raise PredictionError("model has no attached label dictionaries")
    size = getattr(model, "image_size", None)
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        raise PredictionError(f"expected {size}x{size} images, got {tuple(x.shape[-2:])}")
    types = list(model.dictionaries)
    with torch.no_grad():
        out = model(x, types)
    return {t: out[t].double().numpy() for t in types}


def _predict_rows(model, emb: Dict[str, np.ndarray], row: int, k: int) -> Prediction:
    ranked = {}
    for t, e in emb.items():
        d = model.dictionaries[t]
        ranked[t] = rank_labels(e[row], d, min(k, d.n_classes))
    return Prediction(ranked)


def predict(model, image: np.ndarray, k: int = 3) -> Prediction:
    """Top-``k`` classes for every attribute type of a student, from a single forward pass.

    ``k`` is capped per type at that type's class count.
    """
    if k < 1:
        raise PredictionError("k must be >= 1")
    image = np.asarray(image)
    if image.ndim != 3:
        raise PredictionError(f"expected one H x W x 3 image, got shape {image.shape}")
    return _predict_rows(model, _embed_all(model, to_tensor(image)), 0, k)


def predict_batch(model, images: Sequence[np.ndarray], k: int = 3, batch_size: int = 256) -> List[Prediction]:
    if k < 1:
        raise PredictionError("k must be >= 1")
    images = list(images)
    if not images:
        return []
    out: List[Prediction] = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        for j, img in enumerate(chunk):
            if np.asarray(img).ndim != 3 or np.asarray(img).shape != np.asarray(chunk[0]).shape:
                raise PredictionError(f"image {start + j}: shape {np.asarray(img).shape} does not match batch")
        try:
            emb = _embed_all(model, to_tensor(np.stack(chunk)))
        except PredictionError as exc:
            raise PredictionError(f"batch starting at index {start}: {exc}") from exc
        out.extend(_predict_rows(model, emb, j, k) for j in range(len(chunk)))
    return out

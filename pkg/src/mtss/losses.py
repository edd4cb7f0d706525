"""Ranking and distillation objectives on cosine similarities.

Two implementations live here:

* per-instance NumPy functions with closed-form gradients (used for
  diagnostics and verified against finite differences), and
* batched torch functions used by the trainers.

Batch reduction for the torch versions: sum over attribute types, mean over
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .embeddings import LabelDictionary

EPS = 1e-7

Pairs = Union[Sequence[Tuple[np.ndarray, np.ndarray]], Mapping[str, Tuple[np.ndarray, np.ndarray]]]


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class FocalLossBreakdown:
    s_pos: float
    s_neg: float
    p_raw: float
    p_t: float
    loss: float


@dataclass(frozen=True)
class DistillWeight:
    nearest_index: int
    certainty: float
    beta_power: float


def _vec(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise LossInputError(f"expected a 1-D vector, got shape {v.shape}")
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise LossInputError("zero or non-finite input vector")
    return v


def _check_dims(*vs: np.ndarray) -> None:
    if len({v.shape for v in vs}) != 1:
        raise LossInputError(f"dimension mismatch: {[v.shape for v in vs]}")


def cosine(a, b) -> float:
    a, b = _vec(a), _vec(b)
    _check_dims(a, b)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def cosine_grad(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of cos(a, b) with respect to a and b."""
    a, b = _vec(a), _vec(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    c = a @ b / (na * nb)
    return b / (na * nb) - c * a / na ** 2, a / (na * nb) - c * b / nb ** 2


def _pairs_list(pairs: Pairs):
    items = list(pairs.values()) if isinstance(pairs, Mapping) else list(pairs)
    if not items:
        raise LossInputError("need at least one (student, teacher) pair")
    return items


# -- teacher objectives ---------------------------------------------------------

def pairwise_hinge_loss(d, e_pos, e_neg) -> float:
    """max(0, 1 - cos(d, e+) + cos(d, e-)), in [0, 3]."""
    d, e_pos, e_neg = _vec(d), _vec(e_pos), _vec(e_neg)
    _check_dims(d, e_pos, e_neg)
    return max(0.0, 1.0 - cosine(d, e_pos) + cosine(d, e_neg))


def pairwise_hinge_loss_grad(d, e_pos, e_neg) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    d, e_pos, e_neg = _vec(d), _vec(e_pos), _vec(e_neg)
    _check_dims(d, e_pos, e_neg)
    if 1.0 - cosine(d, e_pos) + cosine(d, e_neg) <= 0:
        z = np.zeros_like(d)
        return z, z.copy(), z.copy()
    gd_p, gp = cosine_grad(d, e_pos)
    gd_n, gn = cosine_grad(d, e_neg)
    return gd_n - gd_p, -gp, gn


def focal_ranking_loss(d, e_pos, e_neg, gamma: float, eps: float = EPS) -> FocalLossBreakdown:
    """Focal loss on the margin-derived probability p_t.

    p_t = clamp(0.5 * max(0, 1 + cos(d, e+) - cos(d, e-)), eps, 1) and
    loss = -(1 - p_t)^gamma * log(p_t), with 0^0 = 1.
    """
    if not np.isfinite(gamma) or gamma < 0:
        raise LossInputError(f"gamma must be finite and >= 0, got {gamma}")
    d, e_pos, e_neg = _vec(d), _vec(e_pos), _vec(e_neg)
    _check_dims(d, e_pos, e_neg)
    s_pos, s_neg = cosine(d, e_pos), cosine(d, e_neg)
    p_raw = 0.5 * max(0.0, 1.0 + s_pos - s_neg)
    p_t = min(max(p_raw, eps), 1.0)
    modulator = 1.0 if gamma == 0 else (1.0 - p_t) ** gamma
    loss = -modulator * np.log(p_t)
    return FocalLossBreakdown(s_pos, s_neg, p_raw, p_t, float(max(loss, 0.0)))


def focal_ranking_loss_grad(d, e_pos, e_neg, gamma: float, eps: float = EPS):
    b = focal_ranking_loss(d, e_pos, e_neg, gamma, eps)
    d, e_pos, e_neg = _vec(d), _vec(e_pos), _vec(e_neg)
    if not eps < b.p_raw < 1.0:
        z = np.zeros_like(d)
        return z, z.copy(), z.copy()
    p = b.p_t
    dl_dp = -(1.0 - p) ** gamma / p
    if gamma != 0:
        dl_dp += gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p)
    gd_p, gp = cosine_grad(d, e_pos)
    gd_n, gn = cosine_grad(d, e_neg)
    half = 0.5 * dl_dp
    return half * (gd_p - gd_n), half * gp, -half * gn


# -- student objectives ---------------------------------------------------------

def distillation_loss(pairs: Pairs) -> float:
    """Sum over attribute types of 1 - cos(student, teacher), in [0, 2 * n_types]."""
    return float(sum(1.0 - cosine(s, t) for s, t in _pairs_list(pairs)))


def distillation_loss_grad(pairs: Pairs):
    out = []
    for s, t in _pairs_list(pairs):
        gs, gt = cosine_grad(s, t)
        out.append((-gs, -gt))
    return out


def _matrix(dictionary) -> np.ndarray:
    return dictionary.matrix if isinstance(dictionary, LabelDictionary) else np.asarray(dictionary, float)


def distill_weight(e_teacher, dictionary, beta: float) -> DistillWeight:
    """Certainty of a teacher embedding: cosine to its nearest dictionary row, clamped to [0, 1]."""
    if not np.isfinite(beta) or beta < 0:
        raise LossInputError(f"beta must be finite and >= 0, got {beta}")
    t = _vec(e_teacher)
    m = _matrix(dictionary)
    if m.ndim != 2 or m.shape[1] != t.shape[0]:
        raise LossInputError(f"dictionary shape {m.shape} incompatible with embedding dim {t.shape[0]}")
    cos = np.clip((m / np.linalg.norm(m, axis=1, keepdims=True)) @ (t / np.linalg.norm(t)), -1, 1)
    j = int(np.argmax(cos))
    c = float(min(max(cos[j], 0.0), 1.0))
    return DistillWeight(j, c, 1.0 if beta == 0 else c ** beta)


def weighted_distillation_loss(pairs: Mapping[str, Tuple[np.ndarray, np.ndarray]],
                               dictionaries: Mapping[str, object], beta: float) -> float:
    """Sum over types of w * (1 - cos(student, teacher)), w = certainty ** beta."""
    if not pairs:
        raise LossInputError("need at least one (student, teacher) pair")
    total = 0.0
    for name, (s, t) in pairs.items():
        if name not in dictionaries:
            raise LossInputError(f"no dictionary for attribute type {name!r}")
        w = distill_weight(t, dictionaries[name], beta).beta_power
        total += w * (1.0 - cosine(s, t))
    return float(total)


def weighted_distillation_loss_grad(pairs: Mapping[str, Tuple[np.ndarray, np.ndarray]],
                                    dictionaries: Mapping[str, object], beta: float):
    """Per type: gradients with respect to (student, teacher, dictionary matrix)."""
    out = {}
    for name, (s, t) in pairs.items():
        m = _matrix(dictionaries[name])
        dw = distill_weight(t, m, beta)
        miss = 1.0 - cosine(s, t)
        gs_c, gt_c = cosine_grad(s, t)
        gs = -dw.beta_power * gs_c
        gt = -dw.beta_power * gt_c
        gm = np.zeros_like(m)
        raw = cosine(m[dw.nearest_index], t)
        if beta != 0 and 0.0 < raw < 1.0:
            dw_dc = beta * raw ** (beta - 1.0)
            g_row, g_t = cosine_grad(m[dw.nearest_index], t)
            gt = gt + miss * dw_dc * g_t
            gm[dw.nearest_index] = miss * dw_dc * g_row
        out[name] = (gs, gt, gm)
    return out


# -- batched torch versions -----------------------------------------------------

def focal_ranking_loss_batch(d: torch.Tensor, e_pos: torch.Tensor, e_neg: torch.Tensor,
                             gamma: float, eps: float = EPS) -> torch.Tensor:
    """Per-sample focal ranking loss for B x D inputs."""
    dn, pn, nn_ = F.normalize(d, dim=1), F.normalize(e_pos, dim=1), F.normalize(e_neg, dim=1)
    s_pos = (dn * pn).sum(1)
    s_neg = (dn * nn_).sum(1)
    p_t = (0.5 * (1.0 + s_pos - s_neg)).clamp(eps, 1.0)
    loss = -torch.log(p_t)
    if gamma != 0:
        # clamp_min keeps the gradient finite at p_t == 1, where log(p_t) == 0 anyway
        loss = loss * (1.0 - p_t).clamp_min(1e-12) ** gamma
    return loss


def certainty_weights(teacher: torch.Tensor, dictionary: torch.Tensor, beta: float) -> torch.Tensor:
    """Per-sample clamp(cos(nearest row, teacher), 0, 1) ** beta for a B x D batch."""
    cos = F.normalize(teacher, dim=1) @ F.normalize(dictionary, dim=1).T
    c = cos.max(dim=1).values.clamp(0.0, 1.0)
    if beta == 0:
        return torch.ones_like(c)
    return c ** beta


def weighted_distillation_loss_batch(student: Mapping[str, torch.Tensor],
                                     teacher: Mapping[str, torch.Tensor],
                                     weights: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Per-sample sum over types of w * (1 - cos(student, teacher))."""
    total = None
    for name, s in student.items():
        miss = 1.0 - F.cosine_similarity(s, teacher[name], dim=1, eps=1e-12)
        term = weights[name] * miss
        total = term if total is None else total + term
    if total is None:
        raise LossInputError("no attribute types in batch")
    return total


def per_type_cosine(student: Mapping[str, torch.Tensor], teacher: Mapping[str, torch.Tensor]
                    ) -> Dict[str, torch.Tensor]:
    return {k: F.cosine_similarity(s, teacher[k], dim=1) for k, s in student.items()}

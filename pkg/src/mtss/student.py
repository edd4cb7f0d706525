"""Unified multi-branch student distilled from frozen per-type teachers."""

from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, from_dict, to_dict
from .embeddings import LabelDictionary
from .evaluate import evaluate_model
from .images import load_manifest_images, to_tensor
from .losses import certainty_weights, weighted_distillation_loss_batch
from .nets import build_backbone
from .schema import DatasetManifest
from .teacher import TeacherModel, TrainResult, TrainingError, embed_images, step_decay_lr, write_loss_trace

log = logging.getLogger(__name__)


class StudentModel(nn.Module):
    """Shared backbone followed by one linear branch per attribute type."""

    def __init__(self, dims: Mapping[str, int], backbone_preset: str = "small"):
        super().__init__()
        self.backbone_preset = backbone_preset
        self.backbone = build_backbone(backbone_preset)
        self.branches = nn.ModuleDict({t: nn.Linear(self.backbone.out_dim, d) for t, d in dims.items()})
        self.dictionaries: Dict[str, LabelDictionary] = {}
        self.backbone_calls = 0
        self.image_size: Optional[int] = None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.backbone_calls += 1
        return self.backbone(x)

    def forward(self, x: torch.Tensor, types: Optional[Sequence[str]] = None) -> Dict[str, torch.Tensor]:
        h = self.features(x)
        return {t: self.branches[t](h) for t in (types or self.branches.keys())}

    def attach_dictionaries(self, dictionaries: Mapping[str, LabelDictionary]) -> None:
        for t, d in dictionaries.items():
            if t not in self.branches:
                raise ValueError(f"no branch for attribute type {t!r}")
            if d.dim != self.branches[t].out_features:
                raise ValueError(f"{t}: dictionary dim {d.dim} != branch dim {self.branches[t].out_features}")
            self.dictionaries[t] = LabelDictionary(d.attribute_type, d.classes, d.matrix.copy())

    # evaluation protocol
    @property
    def attribute_types(self) -> List[str]:
        return [t for t in self.branches if t in self.dictionaries]

    def class_names(self, type_name: str) -> Tuple[str, ...]:
        return self.dictionaries[type_name].classes

    def score_batch(self, x: torch.Tensor) -> Dict[str, np.ndarray]:
        types = self.attribute_types
        if not types:
            raise ValueError("student has no attached dictionaries")
        with torch.no_grad():
            out = self(x, types)
        scores = {}
        for t in types:
            e = F.normalize(out[t].double(), dim=1)
            d = F.normalize(torch.from_numpy(self.dictionaries[t].matrix), dim=1)
            scores[t] = (e @ d.T).clamp(-1, 1).numpy()
        return scores


def student_embed(model: StudentModel, image: np.ndarray, type_name: str) -> np.ndarray:
    if type_name not in model.branches:
        raise KeyError(f"student has no branch for attribute type {type_name!r}")
    x = to_tensor(image)
    if model.image_size is not None and tuple(x.shape[-2:]) != (model.image_size, model.image_size):
        raise ValueError(f"expected {model.image_size}x{model.image_size} images, got {tuple(x.shape[-2:])}")
    with torch.no_grad():
        return model(x, [type_name])[type_name][0].double().numpy()


def warmup_lr(config: TrainConfig, epoch: int, images_seen: int) -> float:
    """Linear warm-up from 0 over ``warmup_images`` images, combined with step decay."""
    scale = 1.0 if config.warmup_images == 0 else min(1.0, images_seen / config.warmup_images)
    return step_decay_lr(config, epoch) * scale


def pool_images(manifests: Sequence[DatasetManifest]) -> Tuple[List[str], np.ndarray]:
    """Concatenate the images of several manifests (labels ignored)."""
    ids, arrays = [], []
    for m in manifests:
        if len(m.records):
            ids += [r.id for r in m.records]
            arrays.append(load_manifest_images(m))
    if not arrays:
        raise TrainingError("empty image pool for student training")
    if len(set(ids)) != len(ids):
        raise TrainingError("duplicate record ids across pooled manifests")
    return ids, np.concatenate(arrays)


def teacher_targets(teachers: Sequence[TeacherModel], images: np.ndarray, beta: float
                    ) -> Tuple[Dict[str, torch.Tensor], Dict[str, torch.Tensor]]:
    """Frozen teacher embeddings and per-sample certainty weights for every pooled image."""
    targets, weights = {}, {}
    for t in teachers:
        t.eval()
        with torch.no_grad():
            e = embed_images(t, images)
            targets[t.attribute_type] = e
            weights[t.attribute_type] = certainty_weights(e, t.dictionary.detach(), beta)
    return targets, weights


def epoch_order(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` indices uniform over ``n`` items: concatenated random permutations."""
    reps = -(-count // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count]


def train_student(teachers: Sequence[TeacherModel], manifests: Sequence[DatasetManifest] | DatasetManifest,
                  config: TrainConfig, val_manifest: Optional[DatasetManifest] = None,
                  types: Optional[Sequence[str]] = None, init_model: Optional[StudentModel] = None,
                  images: Optional[np.ndarray] = None) -> TrainResult:
    """Distill ``teachers`` into one student on the pooled (unlabeled) images.

    ``types`` restricts training to a subset of the teachers. Per step the
    loss is the certainty-weighted distillation objective summed over types
    and averaged over the batch. Each epoch draws ``samples_per_epoch``
    images uniformly from the pool. With ``val_manifest`` and
    ``config.select_best`` the weights with the best mean validation F1@1
    are returned.
    """
    if isinstance(manifests, DatasetManifest):
        manifests = [manifests]
    if not teachers:
        raise TrainingError("need at least one teacher")
    by_type = {t.attribute_type: t for t in teachers}
    if types is not None:
        missing = [t for t in types if t not in by_type]
        if missing:
            raise TrainingError(f"no teacher for attribute types {missing}")
        by_type = {t: by_type[t] for t in types}
    dims = {t: m.dim for t, m in by_type.items()}
    if images is None:
        _, images = pool_images(manifests)
    elif len(images) == 0:
        raise TrainingError("empty image pool for student training")
    teacher_snapshot = {t: copy.deepcopy(m.state_dict()) for t, m in by_type.items()}

    torch.manual_seed(config.seed)
    if init_model is not None:
        model = init_model
        for t, d in dims.items():
            if t not in model.branches or model.branches[t].out_features != d:
                raise TrainingError(f"initial student branch for {t!r} does not match teacher dim {d}")
    else:
        model = StudentModel(dims, config.backbone_preset)
    model.image_size = images.shape[1]
    model.attach_dictionaries({t: m.label_dictionary() for t, m in by_type.items()})
    result = TrainResult(model)

    targets, weights = teacher_targets(list(by_type.values()), images, config.beta)
    x_all = to_tensor(images)
    n = len(images)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    val_images = load_manifest_images(val_manifest) if val_manifest is not None else None
    best_state, best_score = None, -math.inf
    seen, global_step = 0, 0
    type_list = list(by_type)
    for epoch in range(config.epochs):
        order = epoch_order(n, config.samples_per_epoch, np.random.default_rng([config.seed, epoch]))
        model.train()
        total, steps = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size])
            lr = warmup_lr(config, epoch, seen)
            for g in opt.param_groups:
                g["lr"] = lr
            out = model(x_all[idx], type_list)
            loss = weighted_distillation_loss_batch(
                out, {t: targets[t][idx] for t in type_list}, {t: weights[t][idx] for t in type_list}).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite student loss at epoch {epoch} step {global_step} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            seen += len(idx)
            result.loss_trace.append((global_step, value, lr))
            total += value
            steps += 1
            global_step += 1
        result.epoch_losses.append(total / max(steps, 1))
        if val_manifest is not None:
            model.eval()
            rep = evaluate_model(model, val_manifest, ks=(1,), images=val_images)
            score = rep.overall["f1"][1]
            result.val_history.append(score)
            if config.select_best and score > best_score:
                best_score, best_state = score, copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
        log.info("student epoch %d loss %.5f", epoch, result.epoch_losses[-1])
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    for t, m in by_type.items():
        for k, v in m.state_dict().items():
            if not torch.equal(v, teacher_snapshot[t][k]):
                raise TrainingError(f"teacher {t!r} parameter {k} changed during student training")
    return result


def student_from_teacher(teacher: TeacherModel) -> StudentModel:
    """Student whose backbone and single branch are exact copies of ``teacher``."""
    s = StudentModel({teacher.attribute_type: teacher.dim}, teacher.backbone_preset)
    s.backbone.load_state_dict(teacher.backbone.state_dict())
    s.branches[teacher.attribute_type].load_state_dict(teacher.projection.state_dict())
    s.attach_dictionaries(teacher.label_dictionaries())
    return s


# -- checkpoints ----------------------------------------------------------------

def save_student(model: StudentModel, out_dir, config: TrainConfig, loss_trace: Sequence = ()) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / "weights.pt")
    for t, d in model.dictionaries.items():
        d.save(out_dir / f"dictionary_{t}.txt")
    meta = {"kind": "student", "dims": {t: b.out_features for t, b in model.branches.items()},
            "types": list(model.dictionaries), "image_size": model.image_size, "config": to_dict(config)}
    (out_dir / "model.json").write_text(json.dumps(meta, indent=2) + "\n")
    write_loss_trace(loss_trace, out_dir / "loss_trace.csv")
    return out_dir


def load_student(path) -> StudentModel:
    path = Path(path)
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no student checkpoint at {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("kind") != "student":
        raise ValueError(f"{path} is not a student checkpoint")
    config = from_dict(TrainConfig, meta["config"])
    model = StudentModel(meta["dims"], config.backbone_preset)
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.attach_dictionaries({t: LabelDictionary.load(path / f"dictionary_{t}.txt") for t in meta["types"]})
    model.image_size = meta.get("image_size")
    model.checkpoint = str(path.resolve())
    model.eval()
    return model


def load_model(path):
    """Load a teacher or student checkpoint directory."""
    from .teacher import load_teacher

    meta_path = Path(path) / "model.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no model checkpoint at {path}")
    kind = json.loads(meta_path.read_text()).get("kind")
    return load_student(path) if kind == "student" else load_teacher(path)

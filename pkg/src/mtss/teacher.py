"""Per-attribute-type teacher: embedding network plus a jointly learned label dictionary."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, from_dict, to_dict
from .embeddings import LabelDictionary, init_label_dictionary
from .evaluate import evaluate_model
from .images import load_manifest_images, to_tensor
from .losses import focal_ranking_loss_batch
from .nets import build_backbone
from .schema import DatasetManifest, filter_by_type, top_classes_filter

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class SamplingError(TrainingError):
    pass


class TeacherModel(nn.Module):
    def __init__(self, attribute_type: str, classes: Sequence[str], dim: int, backbone_preset: str = "small",
                 seed: int = 0):
        super().__init__()
        self.attribute_type = attribute_type
        self.classes = tuple(classes)
        self.backbone_preset = backbone_preset
        self.backbone = build_backbone(backbone_preset)
        self.projection = nn.Linear(self.backbone.out_dim, dim)
        init = init_label_dictionary(attribute_type, self.classes, dim, seed)
        self.dictionary = nn.Parameter(torch.tensor(init.matrix, dtype=torch.float32))
        self.backbone_calls = 0

    @property
    def dim(self) -> int:
        return self.projection.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.backbone_calls += 1
        return self.projection(self.backbone(x))

    # evaluation protocol
    @property
    def attribute_types(self) -> List[str]:
        return [self.attribute_type]

    def class_names(self, type_name: str) -> Tuple[str, ...]:
        return self.classes

    def label_dictionary(self) -> LabelDictionary:
        return LabelDictionary(self.attribute_type, self.classes,
                               self.dictionary.detach().double().numpy().copy())

    def label_dictionaries(self) -> Dict[str, LabelDictionary]:
        return {self.attribute_type: self.label_dictionary()}

    def score_batch(self, x: torch.Tensor) -> Dict[str, np.ndarray]:
        with torch.no_grad():
            e = F.normalize(self(x), dim=1)
            d = F.normalize(self.dictionary, dim=1)
            return {self.attribute_type: (e @ d.T).double().numpy()}


@dataclass
class TripletBatch:
    """``anchors`` are class indices; ``positives``/``negatives`` are record indices."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


@dataclass
class TrainResult:
    model: nn.Module
    loss_trace: List[Tuple[int, float, float]] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    val_history: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None


class TripletSampler:
    """Class-balanced triplet sampler for one attribute type.

    Anchors are uniform over ``classes``, then uniform over that class's
    images. The negative comes from a uniformly chosen other class among
    those holding at least one image that does not carry the anchor class.
    """

    def __init__(self, manifest: DatasetManifest, type_name: str, classes: Optional[Sequence[str]] = None):
        atype = manifest.schema.require(type_name)
        self.type_name = type_name
        self.all_classes = atype.classes
        classes = tuple(classes) if classes is not None else atype.classes
        self.class_ids = np.array([atype.index(c) for c in classes])
        members: Dict[str, List[int]] = {c: [] for c in atype.classes}
        for i, rec in enumerate(manifest.records):
            for c in rec.labels_for(type_name):
                members[c].append(i)
        for c in classes:
            if not members[c]:
                raise SamplingError(f"class {c!r} of {type_name!r} has no images")
        self.members = {atype.index(c): np.array(members[c]) for c in classes}
        self.labels = [rec.labels_for(type_name) for rec in manifest.records]
        # eligible negatives per (anchor, other class)
        self.neg_pools: Dict[int, List[Tuple[int, np.ndarray]]] = {}
        for a in self.class_ids:
            name = atype.classes[a]
            pools = []
            for o in self.class_ids:
                if o == a:
                    continue
                ok = np.array([i for i in self.members[o] if name not in self.labels[i]], dtype=int)
                if len(ok):
                    pools.append((int(o), ok))
            if not pools:
                raise SamplingError(f"every negative candidate for class {name!r} carries that class")
            self.neg_pools[int(a)] = pools

    def sample(self, batch_size: int, rng: np.random.Generator) -> TripletBatch:
        anchors = self.class_ids[rng.integers(len(self.class_ids), size=batch_size)]
        pos = np.empty(batch_size, dtype=int)
        neg = np.empty(batch_size, dtype=int)
        for j, a in enumerate(anchors):
            m = self.members[int(a)]
            pos[j] = m[rng.integers(len(m))]
            pools = self.neg_pools[int(a)]
            _, pool = pools[rng.integers(len(pools))]
            neg[j] = pool[rng.integers(len(pool))]
        return TripletBatch(anchors.astype(int), pos, neg)


def sample_triplets(manifest: DatasetManifest, type_name: str, batch_size: int,
                    rng: np.random.Generator, classes: Optional[Sequence[str]] = None) -> TripletBatch:
    return TripletSampler(manifest, type_name, classes).sample(batch_size, rng)


def step_decay_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every_epochs)


def _sgd(params, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def train_teacher(manifest: DatasetManifest, type_name: str, config: TrainConfig,
                  val_manifest: Optional[DatasetManifest] = None,
                  images: Optional[np.ndarray] = None) -> TrainResult:
    """Train a teacher for ``type_name`` with the focal ranking loss.

    Runs ``epochs * (samples_per_epoch // batch_size)`` SGD steps over
    backbone, projection and dictionary. Triplets for step ``s`` of epoch
    ``e`` are drawn from ``default_rng([seed, e, s])``. With ``val_manifest``
    and ``config.select_best`` the weights with the best validation F1@1 are
    returned.
    """
    schema = manifest.schema
    atype = schema.require(type_name)
    view = filter_by_type(manifest, type_name)
    classes = None
    if config.top_classes is not None and config.top_classes < atype.n_classes:
        view = top_classes_filter(view, type_name, config.top_classes)
        counts = {c: 0 for c in atype.classes}
        for r in view.records:
            for c in r.labels_for(type_name):
                counts[c] += 1
        classes = [c for c in atype.classes if counts[c] > 0]
    if images is None:
        view_images = load_manifest_images(view)
    else:
        idx = {r.id: i for i, r in enumerate(manifest.records)}
        view_images = images[[idx[r.id] for r in view.records]]

    torch.manual_seed(config.seed)
    model = TeacherModel(type_name, atype.classes, config.dim, config.backbone_preset, seed=config.seed)
    result = TrainResult(model)
    if config.epochs == 0:
        return result
    sampler = TripletSampler(view, type_name, classes)
    x_all = to_tensor(view_images)
    opt = _sgd(model.parameters(), config)
    steps = max(1, config.samples_per_epoch // config.batch_size)
    val_images = load_manifest_images(val_manifest) if val_manifest is not None else None
    best_state, best_score = None, -math.inf
    global_step = 0
    for epoch in range(config.epochs):
        lr = step_decay_lr(config, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        total = 0.0
        for s in range(steps):
            batch = sampler.sample(config.batch_size, np.random.default_rng([config.seed, epoch, s]))
            x = torch.cat([x_all[batch.positives], x_all[batch.negatives]])
            emb = model(x)
            e_pos, e_neg = emb[:config.batch_size], emb[config.batch_size:]
            d = model.dictionary[torch.from_numpy(batch.anchors)]
            loss = focal_ranking_loss_batch(d, e_pos, e_neg, config.gamma).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite teacher loss for {type_name!r} at epoch {epoch} step {s} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.loss_trace.append((global_step, value, lr))
            total += value
            global_step += 1
        result.epoch_losses.append(total / steps)
        if val_manifest is not None:
            model.eval()
            score = evaluate_model(model, val_manifest, ks=(1,), images=val_images).f1(1, type_name)
            result.val_history.append(score)
            if config.select_best and score > best_score:
                best_score, best_state = score, copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
        log.info("teacher %s epoch %d loss %.4f lr %.4f", type_name, epoch, result.epoch_losses[-1], lr)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def teacher_embed(model: TeacherModel, image: np.ndarray) -> np.ndarray:
    x = to_tensor(image)
    _check_input(model, x)
    with torch.no_grad():
        return model(x)[0].double().numpy()


def embed_images(model: nn.Module, images: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(to_tensor(images[start:start + batch_size])))
    return torch.cat(out) if out else torch.zeros(0)


def _check_input(model, x: torch.Tensor) -> None:
    size = getattr(model, "image_size", None)
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {tuple(x.shape[-2:])}")


# -- checkpoints ----------------------------------------------------------------

def write_loss_trace(trace: Sequence[Tuple[int, float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in trace:
            w.writerow([step, repr(loss), repr(lr)])


def save_teacher(model: TeacherModel, out_dir, config: TrainConfig, image_size: int,
                 loss_trace: Sequence = ()) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / "weights.pt")
    model.label_dictionary().save(out_dir / f"dictionary_{model.attribute_type}.txt")
    meta = {"kind": "teacher", "attribute_type": model.attribute_type, "classes": list(model.classes),
            "image_size": image_size, "config": to_dict(config)}
    (out_dir / "model.json").write_text(json.dumps(meta, indent=2) + "\n")
    write_loss_trace(loss_trace, out_dir / "loss_trace.csv")
    return out_dir


def load_teacher(path) -> TeacherModel:
    path = Path(path)
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no teacher checkpoint at {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("kind") != "teacher":
        raise ValueError(f"{path} is not a teacher checkpoint")
    config = from_dict(TrainConfig, meta["config"])
    model = TeacherModel(meta["attribute_type"], meta["classes"], config.dim, config.backbone_preset)
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.image_size = meta.get("image_size")
    model.checkpoint = str(path.resolve())
    model.eval()
    return model

"""Procedural multi-attribute image dataset and graded image corruptions.

Each synthetic image is one colored shape on a background. The shape carries
a pattern overlay (occasionally two) and a texture, i.e. a level of grain
noise confined to the object. Ground truth is emitted for the attribute types
``color``, ``shape``, ``pattern`` and ``texture``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .images import load_image, save_image
from .schema import (AttributeSchema, AttributeType, DatasetManifest, ImageRecord, ManifestError,
                     save_manifest)

PALETTE: Dict[str, Tuple[float, float, float]] = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.13, 0.62, 0.18),
    "blue": (0.13, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.12),
    "magenta": (0.82, 0.15, 0.75),
    "cyan": (0.12, 0.78, 0.82),
    "orange": (0.96, 0.52, 0.08),
    "purple": (0.45, 0.16, 0.62),
    "brown": (0.50, 0.30, 0.12),
    "pink": (0.98, 0.62, 0.72),
    "olive": (0.50, 0.52, 0.10),
    "navy": (0.06, 0.10, 0.42),
}
SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring", "hexagon", "star")
PATTERNS = ("solid", "h_stripes", "v_stripes", "dots", "checker", "diagonal", "grid", "zigzag")
TEXTURE_NAMES = ("smooth", "fine", "grainy", "rough", "coarse", "harsh")
TEXTURE_MAX_AMPLITUDE = 0.30
SECOND_PATTERN_PROB = 0.15
STYLES = ("studio", "street")


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    n_colors: int = 8
    n_shapes: int = 6
    n_patterns: int = 6
    n_textures: int = 4
    n_images: int = 2000
    class_imbalance_exponent: float = 0.0
    label_drop_prob: float = 0.0
    seed: int = 0
    style: str = "studio"
    id_prefix: str = "syn"

    def __post_init__(self):
        limits = {"n_colors": len(PALETTE), "n_shapes": len(SHAPES),
                  "n_patterns": len(PATTERNS), "n_textures": len(TEXTURE_NAMES)}
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        for name, hi in limits.items():
            v = getattr(self, name)
            if not 1 <= v <= hi:
                raise ValueError(f"{name} must be in [1, {hi}], got {v}")
        if self.class_imbalance_exponent < 0:
            raise ValueError("class_imbalance_exponent must be >= 0")
        if not 0 <= self.label_drop_prob < 1:
            raise ValueError("label_drop_prob must be in [0, 1)")
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}")

    def schema(self) -> AttributeSchema:
        return AttributeSchema((
            AttributeType("color", tuple(list(PALETTE)[:self.n_colors])),
            AttributeType("shape", SHAPES[:self.n_shapes]),
            AttributeType("pattern", PATTERNS[:self.n_patterns]),
            AttributeType("texture", TEXTURE_NAMES[:self.n_textures]),
        ))

    def texture_amplitudes(self) -> np.ndarray:
        return np.linspace(0.0, TEXTURE_MAX_AMPLITUDE, self.n_textures) if self.n_textures > 1 \
            else np.zeros(1)


def power_law_probs(n: int, exponent: float) -> np.ndarray:
    """Class probabilities proportional to 1 / (rank + 1) ** exponent."""
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return w / w.sum()


# -- rendering ------------------------------------------------------------------

def _shape_mask(shape: str, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = (xx - cx) / r, (yy - cy) / r
    if shape == "circle":
        return dx * dx + dy * dy <= 1.0
    if shape == "square":
        return (np.abs(dx) <= 0.82) & (np.abs(dy) <= 0.82)
    if shape == "triangle":
        return (dy <= 0.8) & (dy >= -0.95 + 1.75 * np.abs(dx))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.05
    if shape == "cross":
        return ((np.abs(dx) <= 0.33) & (np.abs(dy) <= 1.0)) | ((np.abs(dy) <= 0.33) & (np.abs(dx) <= 1.0))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= 1.0) & (d2 >= 0.3)
    if shape == "hexagon":
        ax, ay = np.abs(dx), np.abs(dy)
        return (ay <= 0.87) & (0.87 * ax + 0.5 * ay <= 0.87)
    if shape == "star":
        ang = np.arctan2(dy, dx)
        rad = np.sqrt(dx * dx + dy * dy)
        return rad <= 0.55 + 0.45 * np.cos(5 * ang) ** 2
    raise ValueError(f"unknown shape {shape!r}")


def _pattern_mask(pattern: str, xx: np.ndarray, yy: np.ndarray, period: float) -> np.ndarray:
    u, v = xx / period, yy / period
    if pattern == "solid":
        return np.zeros_like(xx, dtype=bool)
    if pattern == "h_stripes":
        return (v % 1.0) < 0.45
    if pattern == "v_stripes":
        return (u % 1.0) < 0.45
    if pattern == "dots":
        return ((u % 1.0) - 0.5) ** 2 + ((v % 1.0) - 0.5) ** 2 < 0.09
    if pattern == "checker":
        return (np.floor(u) + np.floor(v)) % 2 == 0
    if pattern == "diagonal":
        return ((u + v) % 1.0) < 0.45
    if pattern == "grid":
        return ((u % 1.0) < 0.25) | ((v % 1.0) < 0.25)
    if pattern == "zigzag":
        return ((v + 0.5 * np.abs((u % 1.0) - 0.5)) % 1.0) < 0.4
    raise ValueError(f"unknown pattern {pattern!r}")


def render_image(color: str, shape: str, patterns: Sequence[str], texture_amplitude: float,
                 rng: np.random.Generator, image_size: int = 32, style: str = "studio") -> np.ndarray:
    """Draw one H x W x 3 float image in [0, 1].

    Geometry is rendered at twice the resolution and box-downsampled, which
    keeps thin stripes legible at small sizes.
    """
    ss = 2
    n = image_size * ss
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    if style == "studio":
        base = rng.uniform(0.80, 0.95)
        tilt = rng.uniform(-0.05, 0.05)
        img = np.full((n, n, 3), base) + tilt * (yy / n - 0.5)[..., None]
        r = n * rng.uniform(0.30, 0.40)
    else:
        low = rng.normal(0.0, 1.0, (4, 4, 3))
        clutter = ndimage.zoom(low, (n / 4, n / 4, 1), order=1)
        img = 0.35 + 0.12 * clutter
        r = n * rng.uniform(0.24, 0.33)
    jitter = 0.12 * n
    cx = n / 2 + rng.uniform(-jitter, jitter)
    cy = n / 2 + rng.uniform(-jitter, jitter)

    obj = _shape_mask(shape, xx, yy, cx, cy, r)
    rgb = np.asarray(PALETTE[color], dtype=np.float64) * rng.uniform(0.92, 1.06)
    luminance = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    contrast = np.ones(3) if luminance < 0.45 else np.zeros(3)
    ink = 0.5 * rgb + 0.5 * contrast

    period = n * rng.uniform(0.13, 0.17)
    phase_x, phase_y = rng.uniform(0, period, 2)
    fill = np.broadcast_to(rgb, (n, n, 3)).copy()
    for p in patterns:
        pm = _pattern_mask(p, xx + phase_x, yy + phase_y, period)
        fill[pm] = ink
    # grain at the output resolution, nearest-upsampled so it survives downsampling
    grain = rng.normal(0.0, 1.0, (image_size, image_size, 1)).repeat(ss, 0).repeat(ss, 1)
    fill = fill + texture_amplitude * grain
    img = np.where(obj[..., None], fill, img)
    img = img.reshape(image_size, ss, image_size, ss, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def _sample_record(config: SynthConfig, index: int, schema: AttributeSchema):
    rng = np.random.default_rng([config.seed, index])
    picks = {}
    for atype in schema.types:
        probs = power_law_probs(atype.n_classes, config.class_imbalance_exponent)
        picks[atype.name] = int(rng.choice(atype.n_classes, p=probs))
    color = schema["color"].classes[picks["color"]]
    shape = schema["shape"].classes[picks["shape"]]
    patterns = [schema["pattern"].classes[picks["pattern"]]]
    extra = [p for p in schema["pattern"].classes if p not in patterns and p != "solid"]
    if rng.random() < SECOND_PATTERN_PROB and patterns[0] != "solid" and extra:
        patterns.append(extra[int(rng.integers(len(extra)))])
    texture_idx = picks["texture"]
    image = render_image(color, shape, patterns, float(config.texture_amplitudes()[texture_idx]), rng,
                         config.image_size, config.style)
    labels = {"color": {color}, "shape": {shape}, "pattern": set(patterns),
              "texture": {schema["texture"].classes[texture_idx]}}
    for name in list(labels):
        if rng.random() < config.label_drop_prob:
            del labels[name]
    return image, labels


def generate_synthetic_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    """Render ``config.n_images`` images into ``out_dir`` and write ``manifest.jsonl``.

    Every image's randomness is keyed on ``(seed, index)``, so output does not
    depend on generation order.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    schema = config.schema()
    records = []
    for i in range(config.n_images):
        image, labels = _sample_record(config, i, schema)
        rel = f"images/{config.id_prefix}{i:06d}.png"
        save_image(image, out_dir / rel)
        records.append(ImageRecord(f"{config.id_prefix}{i:06d}", rel, labels,
                                   domain_tag=config.style))
    manifest = DatasetManifest(schema, tuple(records), kind="labeled", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    (out_dir / "synth_config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")
    return manifest


def render_query(color: str, shape: str, pattern: str = "solid", texture: str = "smooth",
                 config: Optional[SynthConfig] = None, seed: int = 0) -> np.ndarray:
    """Render a single image with chosen attributes, e.g. a solid red circle."""
    config = config or SynthConfig()
    schema = config.schema()
    amp = float(config.texture_amplitudes()[schema["texture"].index(texture)])
    return render_image(color, shape, [pattern], amp, np.random.default_rng(seed),
                        config.image_size, config.style)


# -- corruptions ----------------------------------------------------------------

# Severity tables, index = severity - 1.
SEVERITY_TABLE: Dict[str, Tuple] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),   # noise std
    "gaussian_blur": (0.5, 0.8, 1.1, 1.5, 2.0),         # kernel sigma, pixels
    "brightness": (0.10, 0.20, 0.30, 0.40, 0.50),       # additive shift
    "contrast": (0.75, 0.60, 0.45, 0.30, 0.15),         # scale about the mean
    # (block height, block width); each grid refines the next, so distortion never drops
    "pixelate": ((2, 2), (4, 2), (4, 4), (8, 4), (8, 8)),
}
CORRUPTIONS = tuple(SEVERITY_TABLE)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption kind {self.kind!r}; known: {CORRUPTIONS}")
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in 0..5, got {self.severity!r}")

    @property
    def tag(self) -> str:
        return f"{self.kind}{self.severity}"


def _pixelate(image: np.ndarray, block: Tuple[int, int]) -> np.ndarray:
    """Replace each ``block``-sized cell (anchored at the top-left) by its mean color."""
    bh, bw = block
    h, w = image.shape[:2]
    out = np.empty_like(image)
    for y in range(0, h, bh):
        for x in range(0, w, bw):
            out[y:y + bh, x:x + bw] = image[y:y + bh, x:x + bw].mean(axis=(0, 1))
    return out


def corrupt_image(image: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply ``spec`` to an H x W x 3 image in [0, 1]; severity 0 is the identity."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    if spec.severity == 0:
        return image.copy()
    x = image.astype(np.float64)
    level = SEVERITY_TABLE[spec.kind][spec.severity - 1]
    if spec.kind == "gaussian_noise":
        out = x + level * np.random.default_rng(seed).standard_normal(x.shape)
    elif spec.kind == "gaussian_blur":
        out = ndimage.gaussian_filter(x, sigma=(level, level, 0), mode="nearest")
    elif spec.kind == "brightness":
        out = x + level
    elif spec.kind == "contrast":
        mean = x.mean(axis=(0, 1), keepdims=True)
        out = (x - mean) * level + mean
    else:
        out = _pixelate(x, level)
    return np.clip(out, 0.0, 1.0).astype(image.dtype if image.dtype.kind == "f" else np.float64)


def _derive_seed(*parts) -> int:
    h = hashlib.sha256(json.dumps(parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def corrupt_manifest(manifest: DatasetManifest, specs: Sequence[CorruptionSpec], sample_count: int,
                     seed: int, out_dir) -> DatasetManifest:
    """Write ``sample_count`` corrupted copies as an unlabeled manifest.

    Each sample draws a (record, corruption) pair uniformly at random.
    """
    if not specs:
        raise ValueError("corrupt_manifest needs at least one corruption spec")
    if sample_count > 0 and not manifest.records:
        raise ManifestError("cannot corrupt an empty manifest")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(sample_count):
        rec = manifest.records[int(rng.integers(len(manifest.records)))]
        spec = specs[int(rng.integers(len(specs)))]
        image = corrupt_image(load_image(manifest.image_file(rec)), spec, _derive_seed(seed, i))
        rid = f"c{i:06d}_{spec.tag}_{rec.id}"
        rel = f"images/{rid}.png"
        save_image(image, out_dir / rel)
        records.append(ImageRecord(rid, rel, {}, domain_tag="corrupted"))
    out = DatasetManifest(manifest.schema, tuple(records), kind="unlabeled", root=out_dir)
    save_manifest(out, out_dir / "manifest.jsonl")
    return out


def corrupt_each(manifest: DatasetManifest, specs: Sequence[CorruptionSpec], seed: int,
                 out_dir) -> DatasetManifest:
    """One corrupted copy per record with labels kept; builds corrupted test sets."""
    if not specs:
        raise ValueError("corrupt_each needs at least one corruption spec")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i, rec in enumerate(manifest.records):
        spec = specs[int(rng.integers(len(specs)))]
        image = corrupt_image(load_image(manifest.image_file(rec)), spec, _derive_seed(seed, i))
        rel = f"images/{rec.id}_{spec.tag}.png"
        save_image(image, out_dir / rel)
        records.append(ImageRecord(rec.id, rel, rec.labels, domain_tag="corrupted"))
    out = DatasetManifest(manifest.schema, tuple(records), kind=manifest.kind, root=out_dir)
    save_manifest(out, out_dir / "manifest.jsonl")
    return out


def all_specs(severities: Sequence[int] = (1, 2, 3, 4, 5)) -> List[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in CORRUPTIONS for s in severities]

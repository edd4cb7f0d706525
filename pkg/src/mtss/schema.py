"""Attribute hierarchy, dataset manifests, and deterministic filtering/splitting.

On-disk layout of a manifest::

    manifest.jsonl   line 1: header  {"format": "mtss-manifest", "version": 1,
                                      "kind": "labeled"|"unlabeled",
                                      "schema": "schema.json"}
                     line 2..: one record per line
                              {"id": ..., "image_path": ..., "labels": {type: [class, ...]},
                               "domain_tag": ... | null}
    schema.json      {"types": [{"name": "color", "classes": ["red", ...]}, ...]}

``image_path`` and the ``schema`` reference are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

MANIFEST_FORMAT = "mtss-manifest"
MANIFEST_VERSION = 1
KINDS = ("labeled", "unlabeled")


class ManifestError(ValueError):
    """Raised for malformed manifests, schemas, or invalid records."""


@dataclass(frozen=True)
class AttributeType:
    name: str
    classes: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.name:
            raise ManifestError("attribute type name must be non-empty")
        if len(self.classes) < 1:
            raise ManifestError(f"attribute type {self.name!r} has no classes")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError(f"duplicate class names in attribute type {self.name!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        return self.classes.index(class_name)


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute types, each with an ordered class list."""

    types: Tuple[AttributeType, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        if not self.types:
            raise ManifestError("schema needs at least one attribute type")
        names = [t.name for t in self.types]
        if len(set(names)) != len(names):
            raise ManifestError("duplicate attribute type names in schema")

    @property
    def type_names(self) -> List[str]:
        return [t.name for t in self.types]

    def __getitem__(self, name: str) -> AttributeType:
        for t in self.types:
            if t.name == name:
                return t
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return any(t.name == name for t in self.types)

    def require(self, name: str) -> AttributeType:
        if name not in self:
            raise ManifestError(f"unknown attribute type {name!r}; schema has {self.type_names}")
        return self[name]

    def to_dict(self) -> dict:
        return {"types": [{"name": t.name, "classes": list(t.classes)} for t in self.types]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttributeSchema":
        try:
            return cls(tuple(AttributeType(t["name"], tuple(t["classes"])) for t in d["types"]))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed schema document: {exc}") from exc

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[str]]) -> "AttributeSchema":
        return cls(tuple(AttributeType(k, tuple(v)) for k, v in mapping.items()))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_path: str
    labels: Mapping[str, FrozenSet[str]] = field(default_factory=dict)
    domain_tag: Optional[str] = None

    def __post_init__(self):
        labels = {k: frozenset(v) for k, v in self.labels.items() if len(v)}
        object.__setattr__(self, "labels", labels)

    def labels_for(self, type_name: str) -> FrozenSet[str]:
        return self.labels.get(type_name, frozenset())

    def to_dict(self, schema: AttributeSchema) -> dict:
        # classes serialized in schema order so files are canonical
        labels = {}
        for t in schema.types:
            got = self.labels.get(t.name)
            if got:
                labels[t.name] = [c for c in t.classes if c in got]
        return {"id": self.id, "image_path": self.image_path, "labels": labels,
                "domain_tag": self.domain_tag}


@dataclass(frozen=True)
class DatasetManifest:
    """Validated collection of image records under one schema.

    ``root`` is the directory image paths are resolved against. It is not
    serialized.
    """

    schema: AttributeSchema
    records: Tuple[ImageRecord, ...]
    kind: str = "labeled"
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.kind not in KINDS:
            raise ManifestError(f"manifest kind must be one of {KINDS}, got {self.kind!r}")
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            validate_record(rec, self.schema)
            if self.kind == "unlabeled" and rec.labels:
                raise ManifestError(f"record {rec.id!r} carries labels in an unlabeled manifest")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def with_records(self, records: Iterable[ImageRecord], kind: Optional[str] = None) -> "DatasetManifest":
        return replace(self, records=tuple(records), kind=kind or self.kind)

    def image_file(self, rec: ImageRecord) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / rec.image_path

    def strip_labels(self) -> "DatasetManifest":
        return self.with_records((replace(r, labels={}) for r in self.records), kind="unlabeled")


def validate_record(rec: ImageRecord, schema: AttributeSchema) -> None:
    for type_name, classes in rec.labels.items():
        if type_name not in schema:
            raise ManifestError(f"record {rec.id!r}: unknown attribute type {type_name!r}")
        known = set(schema[type_name].classes)
        for c in classes:
            if c not in known:
                raise ManifestError(
                    f"record {rec.id!r}: class {c!r} is not in attribute type {type_name!r}")


# -- I/O ----------------------------------------------------------------------

def save_schema(schema: AttributeSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_schema(path) -> AttributeSchema:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid schema JSON: {exc}") from exc
    return AttributeSchema.from_dict(doc)


def save_manifest(manifest: DatasetManifest, path, schema_name: str = "schema.json") -> Path:
    """Write ``manifest`` to ``path`` plus the schema sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_schema(manifest.schema, path.parent / schema_name)
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
              "kind": manifest.kind, "schema": schema_name}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_dict(manifest.schema), sort_keys=True) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: invalid header: {exc}") from exc
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}:1: not an {MANIFEST_FORMAT} file")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: unsupported version {header.get('version')!r}")
    schema = load_schema(path.parent / header.get("schema", "schema.json"))

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ImageRecord(id=str(d["id"]), image_path=str(d["image_path"]),
                              labels={k: frozenset(v) for k, v in (d.get("labels") or {}).items()},
                              domain_tag=d.get("domain_tag"))
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise ManifestError(f"{path}:{lineno}: cannot parse record: {exc}") from exc
        records.append(rec)
    return DatasetManifest(schema, tuple(records), kind=header.get("kind", "labeled"), root=path.parent)


# -- views --------------------------------------------------------------------

def filter_by_type(manifest: DatasetManifest, type_name: str) -> DatasetManifest:
    """Keep only records with at least one label for ``type_name``."""
    manifest.schema.require(type_name)
    return manifest.with_records(r for r in manifest.records if r.labels_for(type_name))


def class_counts(manifest: DatasetManifest, type_name: str) -> Dict[str, int]:
    atype = manifest.schema.require(type_name)
    counts = {c: 0 for c in atype.classes}
    for r in manifest.records:
        for c in r.labels_for(type_name):
            counts[c] += 1
    return counts


def top_classes_filter(manifest: DatasetManifest, type_name: str, top_n: int) -> DatasetManifest:
    """Restrict ``type_name`` labels to its ``top_n`` most frequent classes.

    Ties are broken by class-list order. Records that end up with no label
    for the type are dropped, so the result is that type's training view.
    """
    if top_n < 1:
        raise ManifestError("top_n must be >= 1")
    atype = manifest.schema.require(type_name)
    counts = class_counts(manifest, type_name)
    order = sorted(range(atype.n_classes), key=lambda i: (-counts[atype.classes[i]], i))
    keep = {atype.classes[i] for i in order[:top_n]}
    out = []
    for r in manifest.records:
        kept = r.labels_for(type_name) & keep
        if not kept:
            continue
        labels = dict(r.labels)
        labels[type_name] = kept
        out.append(replace(r, labels=labels))
    return manifest.with_records(out)


def split(manifest: DatasetManifest, fractions: Sequence[float], seed: int
          ) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Shuffle with ``seed`` and cut into train/val/test.

    Sizes are floor(n * f_train), floor(n * f_val), remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(
            sum(fractions), 1.0, rel_tol=0, abs_tol=1e-9) or fractions[0] <= 0:
        raise ManifestError(f"bad split fractions {tuple(fractions)!r}")
    n = len(manifest.records)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    cuts = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    return tuple(manifest.with_records(manifest.records[i] for i in sorted(idx)) for idx in cuts)


def concat(manifests: Sequence[DatasetManifest], kind: Optional[str] = None) -> DatasetManifest:
    """Pool records of several manifests sharing a schema; ids must stay unique."""
    if not manifests:
        raise ManifestError("nothing to concatenate")
    schema = manifests[0].schema
    for m in manifests[1:]:
        if m.schema != schema:
            raise ManifestError("cannot pool manifests with different schemas")
    records = []
    for m in manifests:
        for r in m.records:
            if m.root is not None and manifests[0].root != m.root:
                r = replace(r, image_path=str((m.root / r.image_path).resolve()))
            records.append(r)
    kind = kind or ("labeled" if all(m.kind == "labeled" for m in manifests) else "unlabeled")
    if kind == "unlabeled":
        records = [replace(r, labels={}) for r in records]
    return DatasetManifest(schema, tuple(records), kind=kind, root=manifests[0].root)

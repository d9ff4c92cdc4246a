"""Multi-attribute data model: schema, manifests, category splits, episodes.

A dataset is a line-delimited JSON manifest.  The first line declares the
attribute schema, every following line one video sample::

    {"kind": "schema", "attributes": [{"name": ..., "categories": [...],
                                       "synthetic": bool}, ...]}
    {"kind": "sample", "id": ..., "source": ..., "labels": {attr: category}}

Splits partition each attribute's *categories* (not samples) into
train/val/test, and episodes are N-way K-shot tasks drawn from a single
attribute's categories within one split part.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CountOverflow,
    InsufficientCategories,
    InsufficientSamples,
    ManifestParse,
    SchemaViolation,
)

PARTS = ("train", "val", "test")


@dataclass(frozen=True)
class AttributeDef:
    name: str
    categories: tuple[str, ...]
    synthetic: bool = False

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise SchemaViolation(
                f"attribute {self.name!r} has duplicate categories"
            )


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[AttributeDef, ...]

    def __post_init__(self):
        if not self.attributes:
            raise SchemaViolation("schema must declare at least one attribute")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaViolation("attribute names must be unique")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def attribute(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaViolation(f"unknown attribute {name!r}")

    def has_category(self, attribute: str, category: str) -> bool:
        try:
            return category in self.attribute(attribute).categories
        except SchemaViolation:
            return False


@dataclass(frozen=True)
class VideoSample:
    id: str
    source: str
    labels: Mapping[str, str]

    def validate(self, schema: AttributeSchema) -> None:
        for attr, cat in self.labels.items():
            if not schema.has_category(attr, cat):
                raise SchemaViolation(
                    f"sample {self.id!r}: label {attr}={cat!r} "
                    "not declared in schema"
                )


@dataclass(frozen=True)
class SplitSpec:
    """Per-attribute (train, val, test) category counts plus a seed."""

    counts: Mapping[str, tuple[int, int, int]]
    seed: int = 0


@dataclass(frozen=True)
class SplitAssignment:
    """category -> part per attribute; categories keep schema order."""

    by_attribute: Mapping[str, Mapping[str, str]]
    seed: int = 0

    def categories(self, attribute: str, part: str) -> tuple[str, ...]:
        mapping = self.by_attribute.get(attribute, {})
        return tuple(c for c, p in mapping.items() if p == part)

    def to_json_dict(self) -> dict:
        out: dict = {"kind": "split", "seed": self.seed, "assignment": {}}
        for attr, mapping in self.by_attribute.items():
            out["assignment"][attr] = {
                part: [c for c, p in mapping.items() if p == part]
                for part in PARTS
            }
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SplitAssignment":
        by_attr = {}
        for attr, parts in obj["assignment"].items():
            mapping: dict[str, str] = {}
            for part in PARTS:
                for cat in parts.get(part, []):
                    mapping[cat] = part
            by_attr[attr] = mapping
        return cls(by_attribute=by_attr, seed=int(obj.get("seed", 0)))


@dataclass(frozen=True)
class Episode:
    attribute: str
    way: int
    shot: int
    query_count: int
    categories: tuple[str, ...]
    support: tuple[tuple[VideoSample, ...], ...]
    query: tuple[VideoSample, ...]
    query_targets: tuple[int, ...]

    def __post_init__(self):
        support_ids = {s.id for group in self.support for s in group}
        query_ids = {q.id for q in self.query}
        if support_ids & query_ids:
            raise SchemaViolation("support and query sample ids overlap")


# -- manifest I/O -------------------------------------------------------------

def _parse_schema_record(obj: dict, line_no: int) -> AttributeSchema:
    try:
        attrs = tuple(
            AttributeDef(
                name=a["name"],
                categories=tuple(a["categories"]),
                synthetic=bool(a.get("synthetic", False)),
            )
            for a in obj["attributes"]
        )
    except (KeyError, TypeError) as exc:
        raise ManifestParse(f"line {line_no}: bad schema record ({exc})") from exc
    return AttributeSchema(attributes=attrs)


def load_manifest(path: str | os.PathLike) -> tuple[AttributeSchema, list[VideoSample]]:
    """Read a manifest file, validating every sample against the schema."""
    schema: AttributeSchema | None = None
    samples: list[VideoSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParse(f"line {line_no}: invalid JSON ({exc})") from exc
            kind = obj.get("kind")
            if kind == "schema":
                if schema is not None:
                    raise ManifestParse(f"line {line_no}: duplicate schema record")
                schema = _parse_schema_record(obj, line_no)
            elif kind == "sample":
                if schema is None:
                    raise ManifestParse(
                        f"line {line_no}: sample record before schema record"
                    )
                try:
                    sample = VideoSample(
                        id=str(obj["id"]),
                        source=str(obj.get("source", "")),
                        labels=dict(obj.get("labels", {})),
                    )
                except (KeyError, TypeError) as exc:
                    raise ManifestParse(
                        f"line {line_no}: bad sample record ({exc})"
                    ) from exc
                sample.validate(schema)
                samples.append(sample)
            else:
                raise ManifestParse(f"line {line_no}: unknown record kind {kind!r}")
    if schema is None:
        raise ManifestParse("manifest contains no schema record")
    return schema, samples


def dump_manifest(
    path: str | os.PathLike,
    schema: AttributeSchema,
    samples: Iterable[VideoSample],
) -> None:
    """Write a manifest atomically (temp file + rename)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        header = {
            "kind": "schema",
            "attributes": [
                {
                    "name": a.name,
                    "categories": list(a.categories),
                    "synthetic": a.synthetic,
                }
                for a in schema.attributes
            ],
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            rec = {
                "kind": "sample",
                "id": s.id,
                "source": s.source,
                "labels": dict(s.labels),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


# -- deterministic rng streams ------------------------------------------------

def stream(seed: int, *key: int | str) -> np.random.Generator:
    """Derive an independent rng stream from a master seed and a key.

    Uses a counter-style derivation (seed plus hashed key words), so
    stream i never depends on how many other streams were drawn first.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in key:
        if isinstance(part, int):
            words.append(part & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:8], "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


# -- splits -------------------------------------------------------------------

def split_categories(schema: AttributeSchema, spec: SplitSpec) -> SplitAssignment:
    """Deterministically partition each attribute's categories into parts."""
    by_attr: dict[str, dict[str, str]] = {}
    for idx, attr in enumerate(schema.attributes):
        if attr.name not in spec.counts:
            continue
        n_train, n_val, n_test = spec.counts[attr.name]
        total = n_train + n_val + n_test
        if min(n_train, n_val, n_test) < 0 or total > len(attr.categories):
            raise CountOverflow(
                f"attribute {attr.name!r}: split counts "
                f"{(n_train, n_val, n_test)} exceed {len(attr.categories)} categories"
            )
        rng = stream(spec.seed, "split", idx)
        order = list(attr.categories)
        perm = rng.permutation(len(order))
        shuffled = [order[i] for i in perm]
        mapping: dict[str, str] = {}
        for cat in shuffled[:n_train]:
            mapping[cat] = "train"
        for cat in shuffled[n_train:n_train + n_val]:
            mapping[cat] = "val"
        for cat in shuffled[n_train + n_val:total]:
            mapping[cat] = "test"
        # keep schema category order for reproducible serialization
        by_attr[attr.name] = {c: mapping[c] for c in attr.categories if c in mapping}
    return SplitAssignment(by_attribute=by_attr, seed=spec.seed)


# -- episode sampling ----------------------------------------------------------

def index_by_category(
    samples: Sequence[VideoSample], attribute: str
) -> dict[str, list[VideoSample]]:
    """Group samples by their label under one attribute (manifest order kept)."""
    buckets: dict[str, list[VideoSample]] = {}
    for s in samples:
        cat = s.labels.get(attribute)
        if cat is not None:
            buckets.setdefault(cat, []).append(s)
    return buckets


def eligible_categories(
    samples: Sequence[VideoSample],
    split: SplitAssignment,
    attribute: str,
    part: str,
    shot: int,
) -> list[str]:
    """Categories in the requested part with at least shot+1 samples."""
    buckets = index_by_category(samples, attribute)
    cats = split.categories(attribute, part)
    return [c for c in cats if len(buckets.get(c, ())) >= shot + 1]


def sample_episode(
    samples: Sequence[VideoSample],
    split: SplitAssignment,
    attribute: str,
    way: int,
    shot: int,
    query_count: int,
    rng: np.random.Generator,
    part: str = "train",
) -> Episode:
    """Draw one N-way K-shot episode under a single attribute.

    Categories are a uniform without-replacement draw over the eligible
    ones; query slots draw a category uniformly (with replacement across
    slots) and then a sample of that category that is not in the support.
    """
    buckets = index_by_category(samples, attribute)
    eligible = eligible_categories(samples, split, attribute, part, shot)
    if len(eligible) < way:
        raise InsufficientCategories(
            f"attribute {attribute!r}: {len(eligible)} eligible categories "
            f"in part {part!r}, need {way}"
        )
    chosen_idx = rng.choice(len(eligible), size=way, replace=False)
    categories = tuple(eligible[i] for i in chosen_idx)

    support: list[tuple[VideoSample, ...]] = []
    support_ids: set[str] = set()
    for cat in categories:
        pool = buckets[cat]
        picked = rng.choice(len(pool), size=shot, replace=False)
        group = tuple(pool[i] for i in picked)
        support.append(group)
        support_ids.update(s.id for s in group)

    query: list[VideoSample] = []
    targets: list[int] = []
    for _ in range(query_count):
        n = int(rng.integers(way))
        pool = [s for s in buckets[categories[n]] if s.id not in support_ids]
        if not pool:
            raise InsufficientSamples(
                f"category {categories[n]!r} has no non-support samples left"
            )
        query.append(pool[int(rng.integers(len(pool)))])
        targets.append(n)

    return Episode(
        attribute=attribute,
        way=way,
        shot=shot,
        query_count=query_count,
        categories=categories,
        support=tuple(support),
        query=tuple(query),
        query_targets=tuple(targets),
    )

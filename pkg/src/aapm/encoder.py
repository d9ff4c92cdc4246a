"""Frozen feature-extraction boundary.

Encoders are frozen and deterministic: the same sample always yields the
same feature matrix, and nothing in this module carries trainable state.
Two encoders are provided:

* ``SyntheticEncoder`` - a seeded generative stand-in for an external
  vision-language backbone, used for all desk-scale verification.  Each
  (attribute, category) pair owns a fixed near-orthogonal unit basis
  vector; a video frame is the normalized sum of its labels' bases plus a
  temporal drift walk and per-frame noise.
* ``CachedEncoder`` - reads features from the on-disk cache, which is
  also the exchange format for externally computed backbone features.

Cache layout: ``index.jsonl`` with one record per feature
(``{"id","kind","t","d","file","sha256"}``) plus per-record binary files
of little-endian float32 (row-major t x d for visual, d for text).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BasisConstruction,
    DimensionMismatch,
    HashMismatch,
    IoFailure,
    SourceUnavailable,
    UnknownCategory,
)
from .schema import AttributeSchema, VideoSample

TEXT_TEMPLATE = "a video of {category}"


@dataclass(frozen=True)
class VisualFeature:
    sample_id: str
    tokens: np.ndarray  # (t, d) float32, unit-norm rows

    @property
    def t(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class TextFeature:
    attribute: str
    category: str
    vector: np.ndarray  # (d,) float32, unit norm

    @property
    def d(self) -> int:
        return self.vector.shape[0]


@dataclass(frozen=True)
class SyntheticEncoderConfig:
    d: int = 64
    t: int = 8
    basis_seed: int = 0
    noise_std: float = 0.05
    drift_std: float = 0.02
    attribute_weights: Mapping[str, float] | None = None
    basis_max_cos: float = 0.3
    basis_max_tries: int = 10_000

    def __post_init__(self):
        if self.noise_std < 0 or self.drift_std < 0:
            raise ValueError("noise_std and drift_std must be non-negative")
        if self.attribute_weights and min(self.attribute_weights.values()) <= 0:
            raise ValueError("attribute weights must be positive")


def _id_entropy(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class SyntheticEncoder:
    """Deterministic seeded encoder over a schema's label vocabulary."""

    def __init__(self, schema: AttributeSchema, config: SyntheticEncoderConfig | None = None):
        self.schema = schema
        self.config = config or SyntheticEncoderConfig()
        self._bases = self._build_bases()
        self._text_cache: dict[tuple[str, str], TextFeature] = {}
        self._video_cache: dict[str, VisualFeature] = {}

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def t(self) -> int:
        return self.config.t

    def _build_bases(self) -> dict[tuple[str, str], np.ndarray]:
        cfg = self.config
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.basis_seed, _id_entropy("basis")]))
        )
        bases: dict[tuple[str, str], np.ndarray] = {}
        stack: list[np.ndarray] = []
        for attr in self.schema.attributes:
            for cat in attr.categories:
                vec = None
                for _ in range(cfg.basis_max_tries):
                    cand = _unit(rng.standard_normal(cfg.d))
                    if not stack or np.max(np.abs(np.stack(stack) @ cand)) < cfg.basis_max_cos:
                        vec = cand
                        break
                if vec is None:
                    raise BasisConstruction(
                        f"could not place basis for ({attr.name}, {cat}) with "
                        f"max |cos| < {cfg.basis_max_cos} at d={cfg.d}"
                    )
                bases[(attr.name, cat)] = vec
                stack.append(vec)
        if stack:
            mat = np.stack(stack)
            gram = np.abs(mat @ mat.T)
            np.fill_diagonal(gram, 0.0)
            assert gram.max() < cfg.basis_max_cos
        return bases

    def basis(self, attribute: str, category: str) -> np.ndarray:
        """Expose the fixed basis vector (for oracles and feature injection)."""
        key = (attribute, category)
        if key not in self._bases:
            raise UnknownCategory(f"no basis for ({attribute}, {category})")
        return self._bases[key].copy()

    def mean_direction(self, labels: Mapping[str, str]) -> np.ndarray:
        """Clean signal direction for a label map (sum of weighted bases)."""
        cfg = self.config
        mu = np.zeros(cfg.d)
        for attr, cat in labels.items():
            w = 1.0
            if cfg.attribute_weights:
                w = cfg.attribute_weights.get(attr, 1.0)
            mu += w * self.basis(attr, cat)
        return mu

    def encode_video(self, sample: VideoSample) -> VisualFeature:
        cached = self._video_cache.get(sample.id)
        if cached is not None:
            return cached
        cfg = self.config
        mu = self.mean_direction(sample.labels)
        rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence([cfg.basis_seed, _id_entropy("video"), _id_entropy(sample.id)])
            )
        )
        steps = rng.standard_normal((cfg.t, cfg.d)) * cfg.drift_std
        steps[0] = 0.0
        drift = np.cumsum(steps, axis=0)
        noise = rng.standard_normal((cfg.t, cfg.d)) * cfg.noise_std
        frames = mu[None, :] + drift + noise
        norms = np.linalg.norm(frames, axis=1, keepdims=True)
        feat = VisualFeature(
            sample_id=sample.id,
            tokens=(frames / norms).astype("<f4"),
        )
        self._video_cache[sample.id] = feat
        return feat

    def encode_text(self, attribute: str, category: str) -> TextFeature:
        key = (attribute, category)
        cached = self._text_cache.get(key)
        if cached is not None:
            return cached
        base = self.basis(attribute, category)
        cfg = self.config
        rng = np.random.Generator(
            np.random.PCG64(
                np.random.SeedSequence(
                    [cfg.basis_seed, _id_entropy("text"), _id_entropy(attribute), _id_entropy(category)]
                )
            )
        )
        vec = _unit(base + cfg.noise_std * rng.standard_normal(cfg.d))
        feat = TextFeature(attribute=attribute, category=category, vector=vec.astype("<f4"))
        self._text_cache[key] = feat
        return feat


# -- feature cache -------------------------------------------------------------

def _record_filename(record_id: str) -> str:
    return hashlib.sha256(record_id.encode("utf-8")).hexdigest()[:24] + ".bin"


def _payload_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _write_atomic(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def text_record_id(attribute: str, category: str) -> str:
    return f"text::{attribute}::{category}"


def cache_features(
    samples: Sequence[VideoSample],
    encoder,
    cache_dir: str | os.PathLike,
    text_pairs: Sequence[tuple[str, str]] = (),
) -> dict:
    """Write features for samples (and optional text pairs) to a cache dir.

    Idempotent: records already present are verified by content hash and
    skipped; a corrupt payload raises HashMismatch naming the record.
    """
    cache_dir = str(cache_dir)
    os.makedirs(cache_dir, exist_ok=True)
    index_path = os.path.join(cache_dir, "index.jsonl")
    existing: dict[str, dict] = {}
    if os.path.exists(index_path):
        with open(index_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    existing[rec["id"]] = rec

    records: list[dict] = []
    written = 0
    skipped = 0

    def _store(record_id: str, kind: str, arr: np.ndarray) -> None:
        nonlocal written, skipped
        payload = _payload_bytes(arr)
        digest = hashlib.sha256(payload).hexdigest()
        prior = existing.get(record_id)
        fname = prior["file"] if prior else _record_filename(record_id)
        fpath = os.path.join(cache_dir, fname)
        if prior is not None and os.path.exists(fpath):
            with open(fpath, "rb") as fh:
                on_disk = hashlib.sha256(fh.read()).hexdigest()
            if on_disk != prior["sha256"]:
                raise HashMismatch(f"cache entry for {record_id!r} is corrupt")
            skipped += 1
            records.append(prior)
            return
        _write_atomic(fpath, payload)
        written += 1
        records.append(
            {
                "id": record_id,
                "kind": kind,
                "t": int(arr.shape[0]) if arr.ndim == 2 else 0,
                "d": int(arr.shape[-1]),
                "file": fname,
                "sha256": digest,
            }
        )

    for s in samples:
        feat = encoder.encode_video(s)
        _store(s.id, "visual", feat.tokens)
    for attr, cat in text_pairs:
        feat = encoder.encode_text(attr, cat)
        _store(text_record_id(attr, cat), "text", feat.vector)

    index_tmp = index_path + ".tmp"
    with open(index_tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(index_tmp, index_path)

    meta = {"text_template": TEXT_TEMPLATE, "d": getattr(encoder, "d", None)}
    _write_atomic(
        os.path.join(cache_dir, "meta.json"),
        (json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"),
    )
    return {"written": written, "skipped": skipped, "records": records}


class CachedEncoder:
    """Encoder backed by an on-disk feature cache (the external-feature adapter)."""

    def __init__(self, cache_dir: str | os.PathLike, d: int | None = None):
        self.cache_dir = str(cache_dir)
        index_path = os.path.join(self.cache_dir, "index.jsonl")
        if not os.path.exists(index_path):
            raise SourceUnavailable(f"no cache index at {index_path}")
        self._index: dict[str, dict] = {}
        with open(index_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    self._index[rec["id"]] = rec
        widths = {rec["d"] for rec in self._index.values()}
        if d is None and len(widths) == 1:
            d = widths.pop()
        self._d = d
        self._t = None
        for rec in self._index.values():
            if rec["kind"] == "visual":
                self._t = rec["t"]
                break

    @property
    def d(self) -> int | None:
        return self._d

    @property
    def t(self) -> int | None:
        return self._t

    def _load(self, record_id: str) -> tuple[dict, np.ndarray]:
        rec = self._index.get(record_id)
        if rec is None:
            raise SourceUnavailable(f"no cached feature for {record_id!r}")
        if self._d is not None and rec["d"] != self._d:
            raise DimensionMismatch(
                f"cached width {rec['d']} != configured {self._d} for {record_id!r}"
            )
        path = os.path.join(self.cache_dir, rec["file"])
        try:
            with open(path, "rb") as fh:
                payload = fh.read()
        except OSError as exc:
            raise SourceUnavailable(str(exc)) from exc
        if hashlib.sha256(payload).hexdigest() != rec["sha256"]:
            raise HashMismatch(f"cache entry for {record_id!r} is corrupt")
        arr = np.frombuffer(payload, dtype="<f4")
        if rec["kind"] == "visual":
            arr = arr.reshape(rec["t"], rec["d"])
        return rec, arr

    def encode_video(self, sample: VideoSample) -> VisualFeature:
        _, arr = self._load(sample.id)
        return VisualFeature(sample_id=sample.id, tokens=arr)

    def encode_text(self, attribute: str, category: str) -> TextFeature:
        record_id = text_record_id(attribute, category)
        if record_id not in self._index:
            raise UnknownCategory(f"no cached text feature for ({attribute}, {category})")
        _, arr = self._load(record_id)
        return TextFeature(attribute=attribute, category=category, vector=arr)

"""Attribute Assignment Method: probabilistic attribute injection.

Synthetic, action-irrelevant attributes (colorful geometry masks and
object masks) are stamped onto samples with independent per-attribute
probabilities.  Assignment is a pure function of (sample id, seed), so
datasets rebuild identically.  Overlays exist at two levels:

* pixel level  - shapes/sprites drawn onto frame images (golden-image
  tested; placement is drawn once per video and held across frames);
* feature level - the overlay category's basis vector added to every
  frame of a synthetic feature, so the full training loop runs with no
  image data at all.

The module also houses the Multi-Kinetics builder: it merges an
action-labeled source manifest with human annotations (scene,
human-group, illumination), injects the synthetic attributes, and emits
the manifest plus a category split file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .encoder import VisualFeature
from .errors import (
    CountMismatch,
    DecodeFailure,
    InvalidSpec,
    MissingAnnotation,
    UnknownCategory,
)
from .schema import (
    AttributeDef,
    AttributeSchema,
    SplitSpec,
    VideoSample,
    dump_manifest,
    load_manifest,
    split_categories,
    stream,
)

ANNOTATION_KEYS = {"scene": "scene", "human-group": "human_group", "illumination": "illumination"}

OBJECT_CATEGORIES = (
    "ball", "book", "bottle", "box", "clock", "cup", "flag", "heart",
    "key", "kite", "leaf", "moon", "mug", "star-badge", "umbrella",
)

PAPER_SPLIT_COUNTS = {
    "action": (64, 12, 24),
    "scene": (19, 5, 10),
    "geometry": (41, 8, 16),
    "object": (5, 5, 5),
}

PAPER_VOCAB_SIZES = {
    "action": 100,
    "scene": 34,
    "human-group": 4,
    "illumination": 2,
    "geometry": 65,
    "object": 15,
}

_SCALE_RANGE = (0.10, 0.30)


def load_geometry_table() -> dict:
    with resources.files("aapm.data").joinpath("geometry.json").open("r") as fh:
        return json.load(fh)


def geometry_categories(table: dict | None = None) -> tuple[str, ...]:
    """The shape x color product; 13 shapes x 5 colors = 65 names."""
    table = table or load_geometry_table()
    cats = tuple(
        f"{color} {shape}" for shape in table["shapes"] for color in table["colors"]
    )
    assert len(cats) == len(table["shapes"]) * len(table["colors"])
    return cats


def synthetic_attribute_defs() -> tuple[AttributeDef, AttributeDef]:
    return (
        AttributeDef(name="geometry", categories=geometry_categories(), synthetic=True),
        AttributeDef(name="object", categories=OBJECT_CATEGORIES, synthetic=True),
    )


@dataclass(frozen=True)
class AssignmentConfig:
    probabilities: Mapping[str, float]
    seed: int = 0

    def __post_init__(self):
        for attr, p in self.probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidSpec(f"probability for {attr!r} must be in [0, 1], got {p}")


@dataclass(frozen=True)
class OverlaySpec:
    kind: str  # geometry | object
    category: str
    center: tuple[float, float]  # relative, held fixed across a video's frames
    scale: float  # relative to frame height
    opacity: float = 1.0


def assign_attributes(
    sample: VideoSample, schema: AttributeSchema, config: AssignmentConfig
) -> tuple[VideoSample, tuple[OverlaySpec, ...]]:
    """Independently include each synthetic attribute with its probability.

    When included, a category is drawn uniformly from the attribute's
    vocabulary and recorded in the sample's labels; placement for the
    pixel overlay is drawn from the same per-(sample, attribute) stream.
    """
    labels = dict(sample.labels)
    specs: list[OverlaySpec] = []
    for attr in schema.attributes:
        if not attr.synthetic:
            continue
        p = float(config.probabilities.get(attr.name, 0.0))
        rng = stream(config.seed, "assign", attr.name, sample.id)
        if rng.random() >= p:
            continue
        category = attr.categories[int(rng.integers(len(attr.categories)))]
        labels[attr.name] = category
        center = (
            float(rng.uniform(0.15, 0.85)),
            float(rng.uniform(0.15, 0.85)),
        )
        scale = float(rng.uniform(*_SCALE_RANGE))
        specs.append(
            OverlaySpec(kind=attr.name, category=category, center=center, scale=scale)
        )
    return (
        VideoSample(id=sample.id, source=sample.source, labels=labels),
        tuple(specs),
    )


# -- pixel-level rendering ---------------------------------------------------------

def overlay_bbox(spec: OverlaySpec, width: int, height: int) -> tuple[int, int, int, int]:
    """Pixel bounding box (x0, y0, x1, y1) the overlay may touch, clamped on-canvas."""
    side = spec.scale * height
    cx = spec.center[0] * width
    cy = spec.center[1] * height
    x0 = int(math.floor(cx - side / 2))
    y0 = int(math.floor(cy - side / 2))
    x1 = int(math.ceil(cx + side / 2))
    y1 = int(math.ceil(cy + side / 2))
    x0 = max(0, min(x0, width - 1))
    y0 = max(0, min(y0, height - 1))
    x1 = max(x0 + 1, min(x1, width))
    y1 = max(y0 + 1, min(y1, height))
    return x0, y0, x1, y1


def _draw_geometry(draw: ImageDraw.ImageDraw, box, shape_def: dict, color) -> None:
    x0, y0, x1, y1 = box
    w = x1 - x0
    h = y1 - y0

    def pt(rx, ry):
        return (x0 + rx * w, y0 + ry * h)

    kind = shape_def["kind"]
    if kind == "ellipse":
        bx = shape_def["box"]
        draw.ellipse([pt(bx[0], bx[1]), pt(bx[2], bx[3])], fill=color)
    elif kind == "rectangle":
        bx = shape_def["box"]
        draw.rectangle([pt(bx[0], bx[1]), pt(bx[2], bx[3])], fill=color)
    elif kind == "polygon":
        draw.polygon([pt(rx, ry) for rx, ry in shape_def["points"]], fill=color)
    elif kind == "regular":
        sides = shape_def["sides"]
        pts = [
            pt(0.5 + 0.5 * math.cos(2 * math.pi * k / sides - math.pi / 2),
               0.5 + 0.5 * math.sin(2 * math.pi * k / sides - math.pi / 2))
            for k in range(sides)
        ]
        draw.polygon(pts, fill=color)
    elif kind == "star":
        n = shape_def["points"]
        inner = shape_def["inner"]
        pts = []
        for k in range(2 * n):
            r = 0.5 if k % 2 == 0 else 0.5 * inner
            ang = math.pi * k / n - math.pi / 2
            pts.append(pt(0.5 + r * math.cos(ang), 0.5 + r * math.sin(ang)))
        draw.polygon(pts, fill=color)
    elif kind == "ring":
        bx = shape_def["box"]
        width_px = max(1, int(round(shape_def["width"] * min(w, h))))
        draw.ellipse([pt(bx[0], bx[1]), pt(bx[2], bx[3])], outline=color, width=width_px)
    else:
        raise InvalidSpec(f"unknown shape kind {kind!r}")


def _as_image(frame) -> Image.Image:
    if isinstance(frame, Image.Image):
        return frame.copy()
    if isinstance(frame, (str, os.PathLike)):
        try:
            with Image.open(frame) as img:
                return img.convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            raise DecodeFailure(f"cannot decode frame {frame!r}: {exc}") from exc
    arr = np.asarray(frame)
    return Image.fromarray(arr)


def render_overlay(
    frames: Sequence, spec: OverlaySpec, sprites_dir: str | os.PathLike | None = None
) -> list[Image.Image]:
    """Stamp the overlay onto every frame at the spec's fixed placement.

    Pixels outside the overlay mask are bitwise unchanged; rendering is
    deterministic for a given spec.
    """
    if spec.scale <= 0:
        raise InvalidSpec("overlay scale must be positive")
    table = load_geometry_table()
    sprite = None
    if spec.kind == "geometry":
        if spec.category not in geometry_categories(table):
            raise UnknownCategory(f"unknown geometry category {spec.category!r}")
        color_name, shape_name = spec.category.split(" ", 1)
        color = tuple(table["colors"][color_name])
        shape_def = table["shapes"][shape_name]
    elif spec.kind == "object":
        if spec.category not in OBJECT_CATEGORIES:
            raise UnknownCategory(f"unknown object category {spec.category!r}")
        if sprites_dir is None:
            raise InvalidSpec("object overlays need a sprites directory")
        path = os.path.join(str(sprites_dir), f"{spec.category}.png")
        try:
            with Image.open(path) as img:
                sprite = img.convert("RGBA")
        except (OSError, UnidentifiedImageError) as exc:
            raise DecodeFailure(f"cannot load sprite {path!r}: {exc}") from exc
    else:
        raise InvalidSpec(f"unknown overlay kind {spec.kind!r}")

    out = []
    for frame in frames:
        img = _as_image(frame)
        box = overlay_bbox(spec, img.width, img.height)
        if spec.kind == "geometry":
            draw = ImageDraw.Draw(img)
            _draw_geometry(draw, box, shape_def, color)
        else:
            x0, y0, x1, y1 = box
            scaled = sprite.resize((max(1, x1 - x0), max(1, y1 - y0)), Image.NEAREST)
            img.paste(scaled, (x0, y0), mask=scaled)
        out.append(img)
    return out


def make_object_sprites(out_dir: str | os.PathLike, size: int = 64) -> list[str]:
    """Materialize the bundled 15-object sprite vocabulary as PNG files."""
    os.makedirs(out_dir, exist_ok=True)
    table = load_geometry_table()
    palette = list(table["colors"].values())
    paths = []
    for idx, name in enumerate(OBJECT_CATEGORIES):
        img = Image.new("RGBA", (size, size), (0, 0, 0, 0))
        draw = ImageDraw.Draw(img)
        color = tuple(palette[idx % len(palette)]) + (255,)
        accent = tuple(palette[(idx + 2) % len(palette)]) + (255,)
        s = size
        # two stacked primitives per object keep the sprites distinguishable
        draw.ellipse([s * 0.15, s * 0.15, s * 0.85, s * 0.85], fill=color)
        draw.rectangle(
            [s * (0.2 + 0.04 * (idx % 5)), s * 0.45, s * 0.8, s * (0.6 + 0.02 * (idx % 7))],
            fill=accent,
        )
        draw.line([s * 0.1, s * (0.1 + idx * 0.05), s * 0.9, s * 0.2], fill=accent, width=3)
        path = os.path.join(str(out_dir), f"{name}.png")
        img.save(path)
        paths.append(path)
    return paths


# -- feature-level injection ---------------------------------------------------------

def inject_feature_overlay(
    feature: VisualFeature, spec: OverlaySpec, encoder, weight: float = 1.0
) -> VisualFeature:
    """Add the overlay category's basis direction to every frame, renormalized."""
    basis = encoder.basis(spec.kind, spec.category)
    tokens = np.asarray(feature.tokens, dtype=np.float64) + weight * basis[None, :]
    norms = np.linalg.norm(tokens, axis=1, keepdims=True)
    return VisualFeature(sample_id=feature.sample_id, tokens=(tokens / norms).astype("<f4"))


# -- Multi-Kinetics builder ------------------------------------------------------------

def _read_annotations(path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                out[str(rec["id"])] = rec
    return out


def build_multikinetics(
    source_manifest,
    annotations_path,
    config: AssignmentConfig,
    out_dir,
    split_counts: Mapping[str, tuple[int, int, int]] | None = None,
    expected_sizes: Mapping[str, int] | None = None,
    split_seed: int = 0,
) -> dict:
    """Assemble the multi-attribute manifest plus split file.

    Annotated attributes (scene, human-group, illumination) come from the
    annotation file and must cover every sample; geometry and object are
    injected per the assignment config.  Attributes with fewer than five
    test categories are flagged ineligible for 5-way evaluation.
    """
    src_schema, src_samples = load_manifest(source_manifest)
    action = src_schema.attribute("action")
    annotations = _read_annotations(annotations_path)

    vocab: dict[str, list[str]] = {name: [] for name in ANNOTATION_KEYS}
    for s in src_samples:
        rec = annotations.get(s.id)
        if rec is None:
            raise MissingAnnotation(f"sample {s.id!r} has no annotation record")
        for attr, key in ANNOTATION_KEYS.items():
            if key not in rec:
                raise MissingAnnotation(f"sample {s.id!r} missing {key!r} annotation")
            val = str(rec[key])
            if val not in vocab[attr]:
                vocab[attr].append(val)

    geometry_def, object_def = synthetic_attribute_defs()
    schema = AttributeSchema(
        attributes=(
            AttributeDef(name="action", categories=action.categories),
            AttributeDef(name="scene", categories=tuple(sorted(vocab["scene"]))),
            AttributeDef(name="human-group", categories=tuple(sorted(vocab["human-group"]))),
            AttributeDef(name="illumination", categories=tuple(sorted(vocab["illumination"]))),
            geometry_def,
            object_def,
        )
    )
    if expected_sizes:
        for attr, size in expected_sizes.items():
            actual = len(schema.attribute(attr).categories)
            if actual != size:
                raise CountMismatch(
                    f"attribute {attr!r} has {actual} categories, expected {size}"
                )

    samples = []
    for s in src_samples:
        rec = annotations[s.id]
        labels = dict(s.labels)
        for attr, key in ANNOTATION_KEYS.items():
            labels[attr] = str(rec[key])
        base = VideoSample(id=s.id, source=s.source, labels=labels)
        augmented, _ = assign_attributes(base, schema, config)
        samples.append(augmented)

    counts = dict(split_counts) if split_counts else dict(PAPER_SPLIT_COUNTS)
    assignment = split_categories(schema, SplitSpec(counts=counts, seed=split_seed))

    eligible = {}
    for attr in schema.names:
        test_cats = assignment.categories(attr, "test")
        eligible[attr] = len(test_cats) >= 5

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(str(out_dir), "manifest.jsonl")
    split_path = os.path.join(str(out_dir), "split.json")
    dump_manifest(manifest_path, schema, samples)
    split_doc = assignment.to_json_dict()
    split_doc["five_way_eligible"] = eligible
    tmp = split_path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(split_doc, sort_keys=True) + "\n")
    os.replace(tmp, split_path)
    return {
        "manifest": manifest_path,
        "split": split_path,
        "schema": schema,
        "samples": samples,
        "assignment": assignment,
        "five_way_eligible": eligible,
    }


def make_source_fixture(
    out_dir,
    n_actions: int = 100,
    videos_per_action: int = 100,
    n_scenes: int = 34,
    n_groups: int = 4,
    n_illuminations: int = 2,
    seed: int = 0,
) -> tuple[str, str]:
    """Synthesize a source manifest + annotation file with the dataset's shape."""
    os.makedirs(out_dir, exist_ok=True)
    actions = tuple(f"action-{i:03d}" for i in range(n_actions))
    scenes = [f"scene-{i:02d}" for i in range(n_scenes)]
    groups = [f"group-{i}" for i in range(n_groups)]
    illum = [f"illum-{i}" for i in range(n_illuminations)]
    schema = AttributeSchema(
        attributes=(AttributeDef(name="action", categories=actions),)
    )
    samples = []
    ann_lines = []
    rng = stream(seed, "fixture")
    k = 0
    for ai, act in enumerate(actions):
        for v in range(videos_per_action):
            sid = f"vid-{ai:03d}-{v:03d}"
            samples.append(
                VideoSample(id=sid, source=f"synthetic://{sid}", labels={"action": act})
            )
            # force-cover each annotation vocabulary before sampling freely
            rec = {
                "id": sid,
                "scene": scenes[k % n_scenes] if k < n_scenes else scenes[int(rng.integers(n_scenes))],
                "human_group": groups[k % n_groups] if k < n_groups else groups[int(rng.integers(n_groups))],
                "illumination": illum[k % n_illuminations] if k < n_illuminations else illum[int(rng.integers(n_illuminations))],
            }
            ann_lines.append(json.dumps(rec, sort_keys=True))
            k += 1
    manifest_path = os.path.join(str(out_dir), "source_manifest.jsonl")
    ann_path = os.path.join(str(out_dir), "annotations.jsonl")
    dump_manifest(manifest_path, schema, samples)
    with open(ann_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(ann_lines) + "\n")
    return manifest_path, ann_path

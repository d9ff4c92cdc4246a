"""Experiment harness: seeded synthetic benchmarks mirroring the full-scale
study structure (multi-attribute accuracy, text-concatenation ablation,
assignment-probability grid, attribute-count degradation).

The shared fixture is a confusion benchmark: every sample carries labels
for all attributes simultaneously with equal mixing weights, so any two
attributes confound each other's prototypes.  It ships with an analytic
nearest-subspace Bayes classifier over the encoder's known bases, which
upper-bounds what any model can do on the synthetic distribution.

Published full-scale reference numbers are embedded as documentation
targets only (printed next to synthetic results with ``--paper-refs``);
they are never asserted by tests.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .aam import AssignmentConfig, assign_attributes
from .align import AlignConfig
from .encoder import SyntheticEncoder, SyntheticEncoderConfig
from .errors import EmptyResults, InvalidSpec
from .fewshot import (
    AccuracyReport,
    EpisodeConfig,
    TrainConfig,
    evaluate,
    iter_episodes,
    train,
)
from .schema import (
    AttributeDef,
    AttributeSchema,
    SplitAssignment,
    SplitSpec,
    VideoSample,
    split_categories,
    stream,
)
from .tcm import TCMParams, init_tcm_params

BENCH_ATTRIBUTES = ("action", "scene", "geometry", "object")

# Published full-scale reference accuracies (%), kept for context only.
PAPER_REFERENCES = {
    "multi_attribute": {
        "frozen-baseline": {
            "action": (78.9, 91.9),
            "scene": (78.1, 93.7),
            "geometry": (36.5, 60.8),
            "object": (72.7, 97.4),
        },
        "aapm": {
            "action": (90.8, 94.8),
            "scene": (86.6, 95.6),
            "geometry": (78.1, 93.3),
            "object": (84.6, 97.6),
        },
    },
    "text_concat": {
        "action": (80.0, 92.2),
        "scene": (79.6, 93.7),
        "geometry": (38.5, 64.5),
        "object": (73.0, 97.5),
    },
    "degradation": {
        "frozen-baseline": (91.9, 87.8, 84.7, 81.9),
        "aapm": (95.2, 94.2, 94.4, 94.3),
    },
    "assignment_ablation": {
        "(0.0, 0.0)": {"action": (91.4, 94.8), "object": (70.8, 95.0)},
        "(0.5, 0.0)": {"action": (91.5, 94.7), "object": (69.8, 94.4)},
        "(0.0, 0.5)": {"action": (91.4, 95.1), "object": (82.1, 96.4)},
        "(0.5, 0.5)": {"action": (91.3, 94.9), "object": (81.8, 96.4)},
    },
}


@dataclass(frozen=True)
class Benchmark:
    schema: AttributeSchema
    train_samples: tuple[VideoSample, ...]
    eval_samples: tuple[VideoSample, ...]
    split: SplitAssignment
    encoder: SyntheticEncoder
    seed: int


def confusion_benchmark(
    n_attributes: int = 2,
    categories: int = 20,
    train_pool: int = 600,
    eval_pool: int = 600,
    seed: int = 1,
    d: int = 64,
    t: int = 8,
    noise_std: float = 0.05,
    drift_std: float = 0.02,
    train_probs: Mapping[str, float] | None = None,
) -> Benchmark:
    """Seeded synthetic dataset where attributes confound each other.

    Every attribute has equal mixing weight and a 60/20/20 category
    split.  Eval-pool samples always carry all attributes; train-pool
    inclusion follows ``train_probs`` (default: always included), which
    is how the assignment-probability grid is realized.
    """
    if not 1 <= n_attributes <= len(BENCH_ATTRIBUTES):
        raise InvalidSpec(f"n_attributes must be in 1..{len(BENCH_ATTRIBUTES)}")
    names = BENCH_ATTRIBUTES[:n_attributes]
    attrs = tuple(
        AttributeDef(
            name=name,
            categories=tuple(f"{name}-{i:02d}" for i in range(categories)),
            synthetic=(idx > 0),
        )
        for idx, name in enumerate(names)
    )
    schema = AttributeSchema(attributes=attrs)
    n_train = int(round(categories * 0.6))
    n_val = int(round(categories * 0.2))
    n_test = categories - n_train - n_val
    split = split_categories(
        schema,
        SplitSpec(counts={n: (n_train, n_val, n_test) for n in names}, seed=seed),
    )
    encoder = SyntheticEncoder(
        schema,
        SyntheticEncoderConfig(
            d=d, t=t, basis_seed=seed, noise_std=noise_std, drift_std=drift_std
        ),
    )

    def build_pool(prefix: str, count: int, probs: Mapping[str, float]) -> tuple[VideoSample, ...]:
        cfg = AssignmentConfig(probabilities=probs, seed=seed)
        out = []
        for i in range(count):
            sid = f"{prefix}-{i:04d}"
            rng = stream(seed, "bench", prefix, i)
            labels = {names[0]: attrs[0].categories[int(rng.integers(categories))]}
            sample = VideoSample(id=sid, source=f"synthetic://{sid}", labels=labels)
            sample, _ = assign_attributes(sample, schema, cfg)
            out.append(sample)
        return tuple(out)

    all_on = {n: 1.0 for n in names}
    train_p = dict(all_on)
    if train_probs:
        train_p.update({k: float(v) for k, v in train_probs.items() if k in names})
    return Benchmark(
        schema=schema,
        train_samples=build_pool("train", train_pool, train_p),
        eval_samples=build_pool("eval", eval_pool, all_on),
        split=split,
        encoder=encoder,
        seed=seed,
    )


# -- analytic Bayes oracle ---------------------------------------------------------

def _nuisance_basis(bench: Benchmark, attribute: str) -> np.ndarray | None:
    vecs = []
    for attr in bench.schema.attributes:
        if attr.name == attribute:
            continue
        for cat in attr.categories:
            vecs.append(bench.encoder.basis(attr.name, cat))
    if not vecs:
        return None
    q, _ = np.linalg.qr(np.stack(vecs).T)
    return q


def bayes_accuracy(
    bench: Benchmark,
    attribute: str,
    way: int = 4,
    shot: int = 1,
    queries: int = 25,
    episodes: int = 400,
    seed: int = 0,
) -> float:
    """Nearest-subspace classification on the known bases (upper bound).

    For candidate category c the signal subspace is span(basis(c)) plus
    the span of every other attribute's bases; since the nuisance span is
    shared, the decision reduces to the largest squared projection of the
    nuisance-orthogonalized query mean onto the orthogonalized candidate
    direction.
    """
    q_b = _nuisance_basis(bench, attribute)
    accs = []
    for episode in iter_episodes(
        bench.eval_samples, bench.split, attribute, way, shot, queries, episodes,
        seed, part="test",
    ):
        dirs = []
        for cat in episode.categories:
            u = bench.encoder.basis(attribute, cat)
            if q_b is not None:
                u = u - q_b @ (q_b.T @ u)
            dirs.append(u / np.linalg.norm(u))
        dirs = np.stack(dirs)
        correct = 0
        for qi, sample in enumerate(episode.query):
            x = np.asarray(
                bench.encoder.encode_video(sample).tokens, dtype=np.float64
            ).mean(axis=0)
            if q_b is not None:
                x = x - q_b @ (q_b.T @ x)
            pred = int(np.argmax((dirs @ x) ** 2))
            correct += pred == episode.query_targets[qi]
        accs.append(correct / len(episode.query))
    return float(np.mean(accs))


# -- experiment specs and runners -----------------------------------------------------

MODELS = ("aapm", "frozen-baseline", "text-concat")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: str = "aapm"
    attributes: tuple[str, ...] = ()
    way: int = 4
    shot: int = 1
    queries: int = 25
    episodes: int = 400
    seeds: tuple[int, ...] = (1, 2, 3)
    train_episodes: int = 500
    lr: float = 2e-3
    weight_decay: float = 5e-4
    constrain_variant: str = "frame-query"
    gamma: float = 0.1
    boundary: str = "relaxed"
    metric: str = "soft-dtw"
    temperature: float = 1.0
    assignment_probs: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidSpec(f"unknown model variant {self.model!r}")

    def episode_config(self, mode: str | None = None) -> EpisodeConfig:
        return EpisodeConfig(
            mode=mode or self.model,
            align=AlignConfig(gamma=self.gamma, boundary=self.boundary, metric=self.metric),
            temperature=self.temperature,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            episodes_per_epoch=self.train_episodes,
            epochs=1,
            query_batch=self.queries,
            way=self.way,
            shot=self.shot,
            seed=seed,
            gamma=self.gamma,
            temperature=self.temperature,
            boundary=self.boundary,
            metric=self.metric,
            assignment_probs=self.assignment_probs,
        )


def _spec_attributes(bench: Benchmark, spec: ExperimentSpec) -> tuple[str, ...]:
    attrs = spec.attributes or bench.schema.names
    for attr in attrs:
        if len(bench.split.categories(attr, "test")) < spec.way:
            raise InvalidSpec(
                f"attribute {attr!r} has fewer than {spec.way} test categories"
            )
    return tuple(attrs)


def train_model(bench: Benchmark, spec: ExperimentSpec, seed: int) -> TCMParams:
    params = init_tcm_params(
        d=bench.encoder.d, variant=spec.constrain_variant, seed=seed
    )
    params, _ = train(
        bench.train_samples, bench.schema, bench.split, bench.encoder,
        params=params, config=spec.train_config(seed),
    )
    return params


def run_model(
    bench: Benchmark,
    spec: ExperimentSpec,
    params_by_seed: Mapping[int, TCMParams] | None = None,
) -> list[dict]:
    """One evaluation row per (seed, attribute) for the spec's model."""
    attrs = _spec_attributes(bench, spec)
    rows = []
    for seed in spec.seeds:
        params = None
        if spec.model == "aapm":
            if params_by_seed and seed in params_by_seed:
                params = params_by_seed[seed]
            else:
                params = train_model(bench, spec, seed)
        cfg = spec.episode_config()
        for attr in attrs:
            report = evaluate(
                params, bench.eval_samples, bench.schema, bench.split, bench.encoder,
                attr, way=spec.way, shot=spec.shot, queries=spec.queries,
                episodes=spec.episodes, seed=seed, cfg=cfg, part="test",
            )
            rows.append(
                {
                    "model": spec.model,
                    "seed": seed,
                    "attribute": attr,
                    "accuracy": report.accuracy,
                    "ci95": report.ci95,
                    "episodes": report.episodes,
                }
            )
    return rows


def run_frozen_baseline(bench: Benchmark, spec: ExperimentSpec) -> list[dict]:
    return run_model(bench, replace(spec, model="frozen-baseline"))


def run_text_concat(bench: Benchmark, spec: ExperimentSpec) -> list[dict]:
    return run_model(bench, replace(spec, model="text-concat"))


def run_confusion_experiment(spec: ExperimentSpec, seed: int, n_attributes: int = 2) -> dict:
    """Train + evaluate all three models and the Bayes oracle on one seed."""
    bench = confusion_benchmark(n_attributes=n_attributes, seed=seed)
    one_seed = replace(spec, seeds=(seed,))
    out = {"seed": seed, "attributes": {}}
    params = train_model(bench, one_seed, seed)
    for attr in _spec_attributes(bench, one_seed):
        bayes = bayes_accuracy(
            bench, attr, way=spec.way, shot=spec.shot, queries=spec.queries,
            episodes=spec.episodes, seed=seed,
        )
        accs = {}
        for model in MODELS:
            cfg = one_seed.episode_config(mode=model)
            p = params if model == "aapm" else None
            rep = evaluate(
                p, bench.eval_samples, bench.schema, bench.split, bench.encoder,
                attr, way=spec.way, shot=spec.shot, queries=spec.queries,
                episodes=spec.episodes, seed=seed, cfg=cfg, part="test",
            )
            accs[model] = rep.accuracy
        out["attributes"][attr] = {"bayes": bayes, **accs}
    return out


def run_degradation_study(
    spec: ExperimentSpec, counts: Sequence[int] = (1, 2, 3, 4), seed: int = 1
) -> list[dict]:
    """Mean accuracy across included attributes at cumulative attribute counts.

    Attributes enter in the fixed benchmark order; the same seed keeps
    the shared basis vectors nested across counts.
    """
    rows = []
    for k in counts:
        bench = confusion_benchmark(n_attributes=k, seed=seed)
        one_seed = replace(spec, seeds=(seed,), attributes=())
        result = run_model(bench, one_seed)
        mean_acc = float(np.mean([r["accuracy"] for r in result]))
        rows.append(
            {
                "model": spec.model,
                "attribute_count": k,
                "mean_accuracy": mean_acc,
                "per_attribute": {r["attribute"]: r["accuracy"] for r in result},
                "seed": seed,
            }
        )
    return rows


def run_assignment_ablation(
    spec: ExperimentSpec,
    grid: Sequence[tuple[float, float]] = ((0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)),
    seed: int = 1,
) -> list[dict]:
    """Assignment-probability grid: object is held out of training (P=0)
    but evaluated, so its accuracy measures generalization to an unseen
    attribute while the always-trained first attribute measures
    specialization."""
    rows = []
    for p1, p2 in grid:
        probs = {"action": 1.0, "scene": p1, "geometry": p2, "object": 0.0}
        bench = confusion_benchmark(n_attributes=4, seed=seed, train_probs=probs)
        point = replace(
            spec, seeds=(seed,), assignment_probs=probs, attributes=("action", "object")
        )
        params = train_model(bench, point, seed)
        accs = {}
        for attr in ("action", "object"):
            rep = evaluate(
                params, bench.eval_samples, bench.schema, bench.split, bench.encoder,
                attr, way=spec.way, shot=spec.shot, queries=spec.queries,
                episodes=spec.episodes, seed=seed, cfg=point.episode_config(mode="aapm"),
                part="test",
            )
            accs[attr] = rep.accuracy
        rows.append(
            {
                "p_scene": p1,
                "p_geometry": p2,
                "seen_accuracy": accs["action"],
                "unseen_accuracy": accs["object"],
                "seed": seed,
            }
        )
    return rows


# -- report emission ----------------------------------------------------------------

def _git_hash() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=10
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(results: Sequence[dict], out_dir, paper_refs: bool = False) -> list[str]:
    """Write one markdown file plus per-experiment CSVs and plot data.

    Each result is {"name", "columns", "rows"} with optional
    {"plot": {"x", "y", "series"}} marking it as a figure-data source.
    """
    if not results:
        raise EmptyResults("no experiment results to emit")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    md_lines = ["# Experiment report", ""]
    for res in results:
        name = res["name"]
        cols = list(res["columns"])
        rows = [list(r) for r in res["rows"]]
        md_lines.append(f"## {name}")
        md_lines.append("")
        md_lines.append("| " + " | ".join(cols) + " |")
        md_lines.append("|" + "|".join(["---"] * len(cols)) + "|")
        for row in rows:
            md_lines.append("| " + " | ".join(_format_cell(v) for v in row) + " |")
        md_lines.append("")
        csv_path = os.path.join(str(out_dir), f"{name}.csv")
        tmp = csv_path + ".tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for row in rows:
                fh.write(",".join(_format_cell(v) for v in row) + "\n")
        os.replace(tmp, csv_path)
        written.append(csv_path)
        if res.get("plot"):
            plot_path = os.path.join(str(out_dir), f"{name}_plot.csv")
            px, py = res["plot"]["x"], res["plot"]["y"]
            xi, yi = cols.index(px), cols.index(py)
            tmp = plot_path + ".tmp"
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(f"{px},{py}\n")
                for row in rows:
                    fh.write(f"{_format_cell(row[xi])},{_format_cell(row[yi])}\n")
            os.replace(tmp, plot_path)
            written.append(plot_path)
    if paper_refs:
        md_lines.append("## Full-scale reference values (context only)")
        md_lines.append("")
        md_lines.append("```json")
        md_lines.append(json.dumps(PAPER_REFERENCES, indent=2, sort_keys=True))
        md_lines.append("```")
        md_lines.append("")
    md_path = os.path.join(str(out_dir), "report.md")
    tmp = md_path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(md_lines))
    os.replace(tmp, md_path)
    written.append(md_path)

    digest = hashlib.sha256(
        json.dumps([{k: v for k, v in r.items() if k != "rows"} for r in results],
                   sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()
    meta = {"git_hash": _git_hash(), "config_digest": digest,
            "seeds": sorted({str(r.get("seed", "")) for r in results if r.get("seed")})}
    meta_path = os.path.join(str(out_dir), "run_metadata.json")
    tmp = meta_path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
    os.replace(tmp, meta_path)
    written.append(meta_path)
    return written


def rows_to_result(name: str, rows: Sequence[dict], plot: dict | None = None) -> dict:
    """Normalize dict rows into the tabular result format for emit_report."""
    if not rows:
        raise EmptyResults(f"experiment {name!r} produced no rows")
    cols = [c for c in rows[0] if not isinstance(rows[0][c], dict)]
    table = [[r[c] for c in cols] for r in rows]
    out = {"name": name, "columns": cols, "rows": table}
    if plot:
        out["plot"] = plot
    return out

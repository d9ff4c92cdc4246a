"""Episode-level model: prototypes, distance-softmax classification, training.

A query is classified against per-category prototypes (frame-wise means
of the constrained support features) by softmax over negated alignment
distances.  Three feature modes share the machinery:

* ``aapm``            - support and query features pass through the
  Text-Constrain Module before prototype construction;
* ``frozen-baseline`` - raw encoder features, no trainable state;
* ``text-concat``     - each support sequence gets its category's text
  feature appended as an extra temporal token (queries are untouched,
  so the query's own label never enters the computation).

Training is episodic with a decoupled-weight-decay adaptive-moment
optimizer; gradients flow through the whole chain (attribute block,
cross-attention, alignment, cross-entropy) via the hand-written backward
passes and are finite-difference checked in the test suite.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .align import (
    AlignConfig,
    _frame_cost_cached,
    _frame_cost_vjp,
    _gradient_batch,
    _forward_batch,
    mean_pool_distance,
)
from .errors import DivergedLoss, RaggedSupport, WidthMismatch, ZeroVector
from .schema import (
    AttributeSchema,
    Episode,
    SplitAssignment,
    VideoSample,
    eligible_categories,
    sample_episode,
    stream,
)
from .tcm import (
    ConstrainedFeature,
    TCMParams,
    _constrain_backward,
    _constrain_forward,
    _g_backward,
    _g_forward,
    init_tcm_params,
    save_checkpoint,
)

MODES = ("aapm", "frozen-baseline", "text-concat")
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class EpisodeConfig:
    """How episode features are built and compared."""

    mode: str = "aapm"
    align: AlignConfig = field(default_factory=AlignConfig)
    temperature: float = 1.0
    proto_mode: str = "mean-then-align"  # | align-then-mean

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.proto_mode not in ("mean-then-align", "align-then-mean"):
            raise ValueError(f"unknown proto_mode {self.proto_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    episodes_per_epoch: int = 100
    epochs: int = 1
    support_batch: int = 1
    query_batch: int = 25
    way: int = 5
    shot: int = 1
    seed: int = 0
    gamma: float = 0.1
    temperature: float = 1.0
    boundary: str = "relaxed"
    metric: str = "soft-dtw"
    proto_mode: str = "mean-then-align"
    assignment_probs: Mapping[str, float] | None = None

    def __post_init__(self):
        for name in ("episodes_per_epoch", "epochs", "support_batch", "query_batch", "way", "shot"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.gamma < 0 or self.temperature <= 0:
            raise ValueError("lr/weight_decay/gamma must be >= 0 and temperature > 0")

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            mode="aapm",
            align=AlignConfig(gamma=self.gamma, boundary=self.boundary, metric=self.metric),
            temperature=self.temperature,
            proto_mode=self.proto_mode,
        )


@dataclass(frozen=True)
class PrototypeSet:
    tokens: np.ndarray  # (N, t, d)
    categories: tuple[str, ...]
    attribute: str


@dataclass(frozen=True)
class AccuracyReport:
    attribute: str
    way: int
    shot: int
    episodes: int
    accuracy: float
    ci95: float
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "kind": "accuracy_report",
            "attribute": self.attribute,
            "way": self.way,
            "shot": self.shot,
            "episodes": self.episodes,
            "accuracy": self.accuracy,
            "ci95": self.ci95,
            "seed": self.seed,
        }


def write_report(path, report: AccuracyReport) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def write_trace(path, trace: Sequence[tuple[int, float]]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "loss"])
        for idx, loss in trace:
            writer.writerow([idx, repr(float(loss))])
    os.replace(tmp, path)


# -- prototypes and classification ------------------------------------------------

def build_prototypes(
    support: Sequence[Sequence[ConstrainedFeature]],
    categories: Sequence[str],
    attribute: str,
) -> PrototypeSet:
    """Frame-wise mean over the K constrained shots of each category."""
    shots = {len(group) for group in support}
    if len(shots) != 1:
        raise RaggedSupport(f"unequal shot counts across categories: {sorted(shots)}")
    stacks = []
    for group in support:
        arrs = [np.asarray(f.tokens, dtype=np.float64) for f in group]
        widths = {a.shape for a in arrs}
        if len(widths) != 1:
            raise WidthMismatch(f"support features disagree on shape: {widths}")
        stacks.append(np.mean(arrs, axis=0))
    return PrototypeSet(
        tokens=np.stack(stacks), categories=tuple(categories), attribute=attribute
    )


def _distances(query_tokens: np.ndarray, support_lists, cfg: EpisodeConfig):
    """Distance of one query to each category's support sequences (mean over list)."""
    dists = []
    for seqs in support_lists:
        vals = []
        for seq in seqs:
            if cfg.align.metric == "mean-pool":
                vals.append(mean_pool_distance(query_tokens, seq))
            else:
                cost, _ = _frame_cost_cached(query_tokens, seq)
                v, _ = _forward_batch(cost, cfg.align.gamma, cfg.align.boundary)
                vals.append(float(v[0]))
        dists.append(float(np.mean(vals)))
    return np.array(dists)


def classify(
    query: ConstrainedFeature | np.ndarray,
    protos: PrototypeSet,
    cfg: EpisodeConfig = EpisodeConfig(),
) -> np.ndarray:
    """Probability of the query belonging to each prototype's category."""
    q = np.asarray(getattr(query, "tokens", query), dtype=np.float64)
    if q.shape[1] != protos.tokens.shape[2]:
        raise WidthMismatch(
            f"query width {q.shape[1]} != prototype width {protos.tokens.shape[2]}"
        )
    support_lists = [[protos.tokens[n]] for n in range(len(protos.categories))]
    dists = _distances(q, support_lists, cfg)
    return _softmax(-dists / cfg.temperature)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- full episode forward/backward -------------------------------------------------

def _episode_run(
    episode: Episode,
    params: TCMParams | None,
    encoder,
    cfg: EpisodeConfig,
    with_grads: bool = False,
):
    """Shared engine: returns (loss, probs, grads-or-None).

    The query's own label text is never an input: text features enter
    only for the episode's support categories.
    """
    n_way = episode.way
    shot = episode.shot
    attr = episode.attribute

    sup_vis = [
        [np.asarray(encoder.encode_video(s).tokens, dtype=np.float64) for s in group]
        for group in episode.support
    ]
    qry_vis = [
        np.asarray(encoder.encode_video(s).tokens, dtype=np.float64)
        for s in episode.query
    ]

    grads = params.zero_grads() if (with_grads and params is not None) else None

    if cfg.mode == "aapm":
        if params is None:
            raise ValueError("aapm mode requires TCM parameters")
        text = [encoder.encode_text(attr, c) for c in episode.categories]
        lam_in = np.stack([np.asarray(t.vector, dtype=np.float64) for t in text])
        lam, g_cache = _g_forward(lam_in, params)
        sup_caches = []
        sup_seqs = []
        for group in sup_vis:
            outs, caches = [], []
            for vis in group:
                out, _, cache = _constrain_forward(lam, vis, params)
                outs.append(out)
                caches.append(cache)
            sup_seqs.append(outs)
            sup_caches.append(caches)
        qry_caches = []
        qry_seqs = []
        for vis in qry_vis:
            out, _, cache = _constrain_forward(lam, vis, params)
            qry_seqs.append(out)
            qry_caches.append(cache)
    elif cfg.mode == "text-concat":
        text = [encoder.encode_text(attr, c) for c in episode.categories]
        sup_seqs = [
            [
                np.vstack([vis, np.asarray(text[n].vector, dtype=np.float64)[None, :]])
                for vis in group
            ]
            for n, group in enumerate(sup_vis)
        ]
        qry_seqs = qry_vis
    else:  # frozen-baseline
        sup_seqs = sup_vis
        qry_seqs = qry_vis

    if cfg.proto_mode == "mean-then-align":
        support_lists = [[np.mean(group, axis=0)] for group in sup_seqs]
    else:
        support_lists = [list(group) for group in sup_seqs]
    per_cat = len(support_lists[0])

    # batch every (query, category, support-sequence) pair through the metric
    pair_costs = []
    pair_caches = []
    if cfg.align.metric == "soft-dtw":
        for q in qry_seqs:
            for seqs in support_lists:
                for s in seqs:
                    cost, cache = _frame_cost_cached(q, s)
                    pair_costs.append(cost)
                    pair_caches.append(cache)
        stacked = np.stack(pair_costs)
        if with_grads:
            values, cost_grads = _gradient_batch(
                stacked, cfg.align.gamma, cfg.align.boundary
            )
        else:
            values, _ = _forward_batch(stacked, cfg.align.gamma, cfg.align.boundary)
            cost_grads = None
        dist = values.reshape(len(qry_seqs), n_way, per_cat).mean(axis=2)
    else:
        dist = np.empty((len(qry_seqs), n_way))
        mp_caches = []
        for qi, q in enumerate(qry_seqs):
            row = []
            for n, seqs in enumerate(support_lists):
                vals = []
                for s in seqs:
                    qm = q.mean(axis=0)
                    sm = s.mean(axis=0)
                    qn = np.linalg.norm(qm)
                    sn = np.linalg.norm(sm)
                    if qn < _NORM_FLOOR or sn < _NORM_FLOOR:
                        raise ZeroVector("mean frame with zero norm")
                    vals.append((qm, sm, qn, sn, float(qm @ sm / (qn * sn))))
                row.append(vals)
                dist[qi, n] = 1.0 - np.mean([v[4] for v in vals])
            mp_caches.append(row)
        cost_grads = None

    targets = np.asarray(episode.query_targets)
    z = -dist / cfg.temperature
    zmax = z.max(axis=1, keepdims=True)
    logp = z - (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))
    probs = np.exp(logp)
    loss = float(-np.mean(logp[np.arange(len(targets)), targets]))

    if not with_grads or params is None or cfg.mode != "aapm":
        return loss, probs, grads

    # -- backward ------------------------------------------------------------
    n_q = len(qry_seqs)
    one_hot = np.zeros_like(probs)
    one_hot[np.arange(n_q), targets] = 1.0
    ddist = (one_hot - probs) / (cfg.temperature * n_q)  # dL/ddist

    dsup_lists = [[np.zeros_like(s) for s in seqs] for seqs in support_lists]
    dqry = [np.zeros_like(q) for q in qry_seqs]
    if cfg.align.metric == "soft-dtw":
        k = 0
        for qi in range(n_q):
            for n in range(n_way):
                for si in range(per_cat):
                    scale = ddist[qi, n] / per_cat
                    dq, ds = _frame_cost_vjp(pair_caches[k], scale * cost_grads[k])
                    dqry[qi] += dq
                    dsup_lists[n][si] += ds
                    k += 1
    else:
        for qi in range(n_q):
            for n in range(n_way):
                for si, (qm, sm, qn, sn, cos) in enumerate(mp_caches[qi][n]):
                    scale = ddist[qi, n] / per_cat
                    dcos = -scale
                    dqm = dcos * (sm / (qn * sn) - cos * qm / (qn * qn))
                    dsm = dcos * (qm / (qn * sn) - cos * sm / (sn * sn))
                    dqry[qi] += dqm[None, :] / qry_seqs[qi].shape[0]
                    dsup_lists[n][si] += dsm[None, :] / support_lists[n][si].shape[0]

    dlam_total = np.zeros_like(lam)
    for n in range(n_way):
        if cfg.proto_mode == "mean-then-align":
            douts = [dsup_lists[n][0] / shot] * shot
        else:
            douts = dsup_lists[n]
        for ki in range(shot):
            dlam, _ = _constrain_backward(douts[ki], sup_caches[n][ki], params, grads)
            dlam_total += dlam
    for qi in range(n_q):
        dlam, _ = _constrain_backward(dqry[qi], qry_caches[qi], params, grads)
        dlam_total += dlam
    _g_backward(dlam_total, g_cache, params, grads)
    return loss, probs, grads


def episode_probs(episode, params, encoder, cfg: EpisodeConfig) -> np.ndarray:
    _, probs, _ = _episode_run(episode, params, encoder, cfg, with_grads=False)
    return probs


def episode_loss(episode, params, encoder, cfg: EpisodeConfig) -> float:
    loss, _, _ = _episode_run(episode, params, encoder, cfg, with_grads=False)
    return loss


def episode_loss_and_grads(episode, params, encoder, cfg: EpisodeConfig):
    loss, _, grads = _episode_run(episode, params, encoder, cfg, with_grads=True)
    return loss, grads


# -- optimizer -----------------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay adaptive-moment update."""

    def __init__(self, lr=1e-4, weight_decay=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: TCMParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for name, arr in params.param_dict().items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(arr))
            v = self.v.setdefault(name, np.zeros_like(arr))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mh = m / (1 - self.beta1**self.t)
            vh = v / (1 - self.beta2**self.t)
            arr -= self.lr * (mh / (np.sqrt(vh) + self.eps) + self.weight_decay * arr)


# -- training ---------------------------------------------------------------------

def _attribute_policy(
    samples, schema: AttributeSchema, split, cfg: TrainConfig, part: str = "train"
) -> tuple[list[str], np.ndarray]:
    """Training attribute mixture: assignment probabilities renormalized
    over attributes that can actually host a way-sized episode."""
    probs = cfg.assignment_probs or {a: 1.0 for a in schema.names}
    names, weights = [], []
    for attr in schema.names:
        p = float(probs.get(attr, 0.0))
        if p <= 0:
            continue
        if len(eligible_categories(samples, split, attr, part, cfg.shot)) >= cfg.way:
            names.append(attr)
            weights.append(p)
    if not names:
        raise DivergedLoss("no attribute is trainable under the assignment policy")
    w = np.array(weights)
    return names, w / w.sum()


def train(
    samples: Sequence[VideoSample],
    schema: AttributeSchema,
    split: SplitAssignment,
    encoder,
    params: TCMParams | None = None,
    config: TrainConfig = TrainConfig(),
) -> tuple[TCMParams, list[tuple[int, float]]]:
    """Episodic training; returns the trained parameters and the loss trace."""
    if params is None:
        params = init_tcm_params(d=encoder.d, seed=config.seed)
    else:
        params = params.copy()
    ep_cfg = config.episode_config()
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    names, weights = _attribute_policy(samples, schema, split, config)
    trace: list[tuple[int, float]] = []
    total = config.episodes_per_epoch * config.epochs
    for idx in range(total):
        rng = stream(config.seed, "train", idx)
        attr = names[int(rng.choice(len(names), p=weights))]
        episode = sample_episode(
            samples, split, attr, config.way, config.shot, config.query_batch,
            rng, part="train",
        )
        loss, grads = episode_loss_and_grads(episode, params, encoder, ep_cfg)
        if not np.isfinite(loss):
            raise DivergedLoss(f"non-finite loss at episode {idx}")
        opt.step(params, grads)
        trace.append((idx, loss))
    return params, trace


# -- evaluation ---------------------------------------------------------------------

def iter_episodes(
    samples, split, attribute, way, shot, queries, episodes, seed, part="test"
) -> Iterable[Episode]:
    """Deterministic per-index episode streams (order-independent)."""
    for idx in range(episodes):
        rng = stream(seed, "eval", idx)
        yield sample_episode(
            samples, split, attribute, way, shot, queries, rng, part=part
        )


def evaluate(
    params: TCMParams | None,
    samples: Sequence[VideoSample],
    schema: AttributeSchema,
    split: SplitAssignment,
    encoder,
    attribute: str,
    way: int = 5,
    shot: int = 1,
    queries: int = 25,
    episodes: int = 1000,
    seed: int = 0,
    cfg: EpisodeConfig = EpisodeConfig(),
    part: str = "test",
) -> AccuracyReport:
    """Mean episode accuracy with a 95% confidence half-width."""
    accs = np.empty(episodes)
    for idx, episode in enumerate(
        iter_episodes(samples, split, attribute, way, shot, queries, episodes, seed, part)
    ):
        probs = episode_probs(episode, params, encoder, cfg)
        pred = np.argmax(probs, axis=1)
        accs[idx] = float(np.mean(pred == np.asarray(episode.query_targets)))
    mean = float(np.mean(accs))
    half = float(1.96 * np.std(accs, ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return AccuracyReport(
        attribute=attribute,
        way=way,
        shot=shot,
        episodes=episodes,
        accuracy=mean,
        ci95=half,
        seed=seed,
    )


# -- sklearn-style estimator facade ---------------------------------------------------

class AAPMClassifier(BaseEstimator):
    """Estimator wrapper around the episodic model.

    Hyperparameters live in the constructor (sklearn conventions:
    ``get_params``/``set_params`` work, ``fit`` returns self); the data
    interface is episodic rather than tabular, so ``fit`` takes the
    sample list plus schema/split/encoder keyword arguments.
    """

    def __init__(
        self,
        d=64,
        heads=4,
        variant="pooled",
        gamma=0.1,
        boundary="relaxed",
        metric="soft-dtw",
        temperature=1.0,
        proto_mode="mean-then-align",
        lr=1e-4,
        weight_decay=5e-4,
        episodes=100,
        way=5,
        shot=1,
        queries=25,
        seed=0,
    ):
        self.d = d
        self.heads = heads
        self.variant = variant
        self.gamma = gamma
        self.boundary = boundary
        self.metric = metric
        self.temperature = temperature
        self.proto_mode = proto_mode
        self.lr = lr
        self.weight_decay = weight_decay
        self.episodes = episodes
        self.way = way
        self.shot = shot
        self.queries = queries
        self.seed = seed

    def _train_config(self, assignment_probs=None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            episodes_per_epoch=self.episodes,
            epochs=1,
            query_batch=self.queries,
            way=self.way,
            shot=self.shot,
            seed=self.seed,
            gamma=self.gamma,
            temperature=self.temperature,
            boundary=self.boundary,
            metric=self.metric,
            proto_mode=self.proto_mode,
            assignment_probs=assignment_probs,
        )

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(
            mode="aapm",
            align=AlignConfig(gamma=self.gamma, boundary=self.boundary, metric=self.metric),
            temperature=self.temperature,
            proto_mode=self.proto_mode,
        )

    def fit(self, samples, y=None, *, schema, split, encoder, assignment_probs=None):
        init = init_tcm_params(
            d=self.d, heads=self.heads, variant=self.variant, seed=self.seed
        )
        self.params_, self.trace_ = train(
            samples, schema, split, encoder,
            params=init, config=self._train_config(assignment_probs),
        )
        self.encoder_ = encoder
        return self

    def predict_proba(self, episode: Episode) -> np.ndarray:
        return episode_probs(episode, self.params_, self.encoder_, self.episode_config())

    def predict(self, episode: Episode) -> np.ndarray:
        return np.argmax(self.predict_proba(episode), axis=1)

    def score(self, samples, y=None, *, schema, split, attribute, episodes=200, seed=0, part="test"):
        report = evaluate(
            self.params_, samples, schema, split, self.encoder_, attribute,
            way=self.way, shot=self.shot, queries=self.queries,
            episodes=episodes, seed=seed, cfg=self.episode_config(), part=part,
        )
        return report.accuracy

    def save(self, path) -> None:
        save_checkpoint(path, self.params_, {"seed": self.seed})

"""Text-Constrain Module: attribute space over label text + visual constraint.

Two trainable blocks, both implemented directly in numpy (float64) with
hand-written backward passes so every parameter gradient can be checked
against finite differences:

* an adaptive attribute block - one pre-norm transformer encoder layer
  (no positional encoding, so it is permutation-equivariant) that maps
  the N support-category text features to a latent attribute space;
* a cross-attention constraint that injects attribute context into the
  frozen visual frames, preserving the temporal length.

With the cross output projection and the encoder layer's residual-branch
output projections zero-initialized, the constrained features equal the
raw visual features exactly, so a fresh model reproduces the frozen
baseline bit for bit.

Two constraint variants are supported:

* ``pooled`` (default): attribute tokens query the frames, the context
  rows are mean-pooled and added residually to every frame;
* ``frame-query``: frames query the attribute tokens, each frame gets
  its own context row.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from .encoder import TextFeature, VisualFeature
from .errors import (
    CheckpointFormat,
    MixedAttributes,
    NonFiniteGradient,
    WidthMismatch,
)

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

VARIANTS = ("pooled", "frame-query")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LatentAttributeSpace:
    tokens: np.ndarray  # (N, d)
    attribute: str


@dataclass(frozen=True)
class ConstrainedFeature:
    tokens: np.ndarray  # (t, d)
    role: str  # support | query
    category: str | None = None


@dataclass
class TCMParams:
    """All trainable weights; arrays are float64 and updated in place."""

    # adaptive attribute block (one pre-norm transformer encoder layer)
    g_ln1_gain: np.ndarray
    g_ln1_bias: np.ndarray
    g_wq: np.ndarray
    g_wk: np.ndarray
    g_wv: np.ndarray
    g_bq: np.ndarray
    g_bk: np.ndarray
    g_bv: np.ndarray
    g_wo: np.ndarray
    g_bo: np.ndarray
    g_ln2_gain: np.ndarray
    g_ln2_bias: np.ndarray
    g_ffn_w1: np.ndarray
    g_ffn_b1: np.ndarray
    g_ffn_w2: np.ndarray
    g_ffn_b2: np.ndarray
    # cross-attention constraint
    x_wq: np.ndarray
    x_wk: np.ndarray
    x_wv: np.ndarray
    x_wo: np.ndarray
    # shape metadata
    d: int = 64
    heads: int = 4
    variant: str = "pooled"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide d ({self.d})")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown constrain variant {self.variant!r}")

    @property
    def dk(self) -> int:
        return self.d // self.heads

    def param_dict(self) -> dict[str, np.ndarray]:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name not in ("d", "heads", "variant")
        }

    def copy(self) -> "TCMParams":
        kwargs = {k: v.copy() for k, v in self.param_dict().items()}
        return TCMParams(d=self.d, heads=self.heads, variant=self.variant, **kwargs)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.param_dict().items()}


def init_tcm_params(
    d: int = 64,
    heads: int = 4,
    variant: str = "pooled",
    seed: int = 0,
    ffn_mult: int = 4,
    cross_init: str = "identity",
) -> TCMParams:
    """Fresh parameters.

    Residual-branch output projections (g_wo/g_bo, g_ffn_w2/g_ffn_b2) and
    the cross output projection x_wo start at zero, which makes the whole
    module the identity map on visual features.  Cross q/k/v default to
    the identity so attention scores start as raw feature-text affinity.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7C4])))
    h = ffn_mult * d

    def xavier(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    if cross_init == "identity":
        cross = lambda: np.eye(d)
    elif cross_init == "xavier":
        cross = lambda: xavier(d, d)
    else:
        raise ValueError(f"unknown cross_init {cross_init!r}")

    return TCMParams(
        g_ln1_gain=np.ones(d),
        g_ln1_bias=np.zeros(d),
        g_wq=xavier(d, d),
        g_wk=xavier(d, d),
        g_wv=xavier(d, d),
        g_bq=np.zeros(d),
        g_bk=np.zeros(d),
        g_bv=np.zeros(d),
        g_wo=np.zeros((d, d)),
        g_bo=np.zeros(d),
        g_ln2_gain=np.ones(d),
        g_ln2_bias=np.zeros(d),
        g_ffn_w1=xavier(d, h),
        g_ffn_b1=np.zeros(h),
        g_ffn_w2=np.zeros((h, d)),
        g_ffn_b2=np.zeros(d),
        x_wq=cross(),
        x_wk=cross(),
        x_wv=cross(),
        x_wo=np.zeros((d, d)),
        d=d,
        heads=heads,
        variant=variant,
    )


def perturb_params(params: TCMParams, seed: int, scale: float = 0.05) -> TCMParams:
    """Copy with seeded Gaussian noise on every entry (untrained-but-nonzero)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x9E3])))
    out = params.copy()
    for arr in out.param_dict().values():
        arr += scale * rng.standard_normal(arr.shape)
    return out


# -- primitive layers with explicit backward passes -----------------------------

def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layer_norm_vjp(dy, cache):
    xhat, inv, gain = cache
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def _gelu_vjp(dy, cache):
    x, cdf = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (cdf + x * pdf)


def _softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(y, dy):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def _mha_forward(xq, xkv, wq, wk, wv, bq, bk, bv, heads):
    """Multi-head scaled dot-product attention, context concatenated."""
    d = xq.shape[1]
    dk = d // heads
    scale = 1.0 / np.sqrt(dk)
    q = xq @ wq + (bq if bq is not None else 0.0)
    k = xkv @ wk + (bk if bk is not None else 0.0)
    v = xkv @ wv + (bv if bv is not None else 0.0)
    ctx = np.empty((xq.shape[0], d))
    attn = []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        a = _softmax_rows(q[:, sl] @ k[:, sl].T * scale)
        ctx[:, sl] = a @ v[:, sl]
        attn.append(a)
    cache = (xq, xkv, q, k, v, attn, heads, dk, bq is not None)
    return ctx, attn, cache


def _mha_vjp(dctx, cache, wq, wk, wv):
    xq, xkv, q, k, v, attn, heads, dk, has_bias = cache
    scale = 1.0 / np.sqrt(dk)
    dq = np.zeros_like(q)
    dk_ = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        a = attn[h]
        dv[:, sl] = a.T @ dctx[:, sl]
        da = dctx[:, sl] @ v[:, sl].T
        ds = _softmax_vjp(a, da) * scale
        dq[:, sl] = ds @ k[:, sl]
        dk_[:, sl] = ds.T @ q[:, sl]
    dwq = xq.T @ dq
    dwk = xkv.T @ dk_
    dwv = xkv.T @ dv
    dbq = dq.sum(axis=0) if has_bias else None
    dbk = dk_.sum(axis=0) if has_bias else None
    dbv = dv.sum(axis=0) if has_bias else None
    dxq = dq @ wq.T
    dxkv = dk_ @ wk.T + dv @ wv.T
    return dxq, dxkv, (dwq, dwk, dwv, dbq, dbk, dbv)


# -- adaptive attribute block ----------------------------------------------------

def _g_forward(x: np.ndarray, p: TCMParams):
    z1, c_ln1 = _layer_norm(x, p.g_ln1_gain, p.g_ln1_bias)
    ctx, _, c_att = _mha_forward(
        z1, z1, p.g_wq, p.g_wk, p.g_wv, p.g_bq, p.g_bk, p.g_bv, p.heads
    )
    h = x + ctx @ p.g_wo + p.g_bo
    z2, c_ln2 = _layer_norm(h, p.g_ln2_gain, p.g_ln2_bias)
    u = z2 @ p.g_ffn_w1 + p.g_ffn_b1
    g, c_gelu = _gelu(u)
    y = h + g @ p.g_ffn_w2 + p.g_ffn_b2
    return y, (x, z1, ctx, h, z2, g, c_ln1, c_att, c_ln2, c_gelu)


def _g_backward(dy, cache, p: TCMParams, grads: dict):
    x, z1, ctx, h, z2, g, c_ln1, c_att, c_ln2, c_gelu = cache
    grads["g_ffn_w2"] += g.T @ dy
    grads["g_ffn_b2"] += dy.sum(axis=0)
    dg = dy @ p.g_ffn_w2.T
    du = _gelu_vjp(dg, c_gelu)
    grads["g_ffn_w1"] += z2.T @ du
    grads["g_ffn_b1"] += du.sum(axis=0)
    dz2 = du @ p.g_ffn_w1.T
    dh_ln, dgain2, dbias2 = _layer_norm_vjp(dz2, c_ln2)
    grads["g_ln2_gain"] += dgain2
    grads["g_ln2_bias"] += dbias2
    dh = dy + dh_ln
    grads["g_wo"] += ctx.T @ dh
    grads["g_bo"] += dh.sum(axis=0)
    dctx = dh @ p.g_wo.T
    dz1_q, dz1_kv, (dwq, dwk, dwv, dbq, dbk, dbv) = _mha_vjp(
        dctx, c_att, p.g_wq, p.g_wk, p.g_wv
    )
    grads["g_wq"] += dwq
    grads["g_wk"] += dwk
    grads["g_wv"] += dwv
    grads["g_bq"] += dbq
    grads["g_bk"] += dbk
    grads["g_bv"] += dbv
    dx_ln, dgain1, dbias1 = _layer_norm_vjp(dz1_q + dz1_kv, c_ln1)
    grads["g_ln1_gain"] += dgain1
    grads["g_ln1_bias"] += dbias1
    return dh + dx_ln


def build_attribute_space(
    text_feats: Sequence[TextFeature], params: TCMParams
) -> LatentAttributeSpace:
    """Latent attribute space from the support categories' text features."""
    if len(text_feats) < 2:
        raise MixedAttributes("attribute space needs at least two category tokens")
    attrs = {f.attribute for f in text_feats}
    if len(attrs) != 1:
        raise MixedAttributes(f"text features span attributes {sorted(attrs)}")
    widths = {f.d for f in text_feats}
    if widths != {params.d}:
        raise WidthMismatch(f"text widths {sorted(widths)} vs params d={params.d}")
    x = np.stack([np.asarray(f.vector, dtype=np.float64) for f in text_feats])
    y, _ = _g_forward(x, params)
    return LatentAttributeSpace(tokens=y, attribute=text_feats[0].attribute)


# -- cross-attention constraint ----------------------------------------------------

def _constrain_forward(lam: np.ndarray, vis: np.ndarray, p: TCMParams):
    if p.variant == "pooled":
        ctx, attn, c_att = _mha_forward(
            lam, vis, p.x_wq, p.x_wk, p.x_wv, None, None, None, p.heads
        )
        cbar = ctx.mean(axis=0)
        out = vis + cbar @ p.x_wo
    else:  # frame-query
        ctx, attn, c_att = _mha_forward(
            vis, lam, p.x_wq, p.x_wk, p.x_wv, None, None, None, p.heads
        )
        cbar = None
        out = vis + ctx @ p.x_wo
    return out, attn, (ctx, cbar, c_att, lam, vis)


def _constrain_backward(dout, cache, p: TCMParams, grads: dict):
    ctx, cbar, c_att, lam, vis = cache
    if p.variant == "pooled":
        ds = dout.sum(axis=0)
        grads["x_wo"] += np.outer(cbar, ds)
        dcbar = p.x_wo @ ds
        dctx = np.tile(dcbar / ctx.shape[0], (ctx.shape[0], 1))
        dlam, dvis_kv, (dwq, dwk, dwv, _, _, _) = _mha_vjp(
            dctx, c_att, p.x_wq, p.x_wk, p.x_wv
        )
        dvis = dout + dvis_kv
    else:
        grads["x_wo"] += ctx.T @ dout
        dctx = dout @ p.x_wo.T
        dvis_q, dlam, (dwq, dwk, dwv, _, _, _) = _mha_vjp(
            dctx, c_att, p.x_wq, p.x_wk, p.x_wv
        )
        dvis = dout + dvis_q
    grads["x_wq"] += dwq
    grads["x_wk"] += dwk
    grads["x_wv"] += dwv
    return dlam, dvis


def constrain(
    space: LatentAttributeSpace,
    visual: VisualFeature,
    params: TCMParams,
    role: str = "query",
    category: str | None = None,
) -> ConstrainedFeature:
    """Inject attribute context into a visual feature (t and d preserved)."""
    vis = np.asarray(visual.tokens, dtype=np.float64)
    if vis.shape[1] != params.d or space.tokens.shape[1] != params.d:
        raise WidthMismatch(
            f"widths differ: visual {vis.shape[1]}, space {space.tokens.shape[1]}, "
            f"params {params.d}"
        )
    out, _, _ = _constrain_forward(space.tokens, vis, params)
    return ConstrainedFeature(tokens=out, role=role, category=category)


def attention_rows(
    space: LatentAttributeSpace, visual: VisualFeature, params: TCMParams
) -> list[np.ndarray]:
    """Per-head attention matrices of the constraint (for tests/inspection)."""
    vis = np.asarray(visual.tokens, dtype=np.float64)
    _, attn, _ = _constrain_forward(space.tokens, vis, params)
    return attn


def tcm_gradients(episode_batch, params: TCMParams, encoder, config) -> dict[str, np.ndarray]:
    """Parameter gradients of the episode loss, averaged over the batch.

    Delegates the loss definition to the episode model; raises
    NonFiniteGradient naming the offending parameter block.
    """
    from . import fewshot  # local import; fewshot depends on this module

    episodes = episode_batch if isinstance(episode_batch, (list, tuple)) else [episode_batch]
    total = params.zero_grads()
    for ep in episodes:
        _, grads = fewshot.episode_loss_and_grads(ep, params, encoder, config)
        for k, g in grads.items():
            total[k] += g / len(episodes)
    for k, g in total.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter block {k!r}")
    return total


# -- checkpoint archive -------------------------------------------------------------

def save_checkpoint(path, params: TCMParams, extra: Mapping | None = None) -> None:
    """Single-archive checkpoint: manifest + little-endian float32 payloads."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "d": params.d,
            "heads": params.heads,
            "variant": params.variant,
            **(dict(extra) if extra else {}),
        },
        "params": [],
    }
    payloads = {}
    for name, arr in params.param_dict().items():
        fname = f"{name}.bin"
        manifest["params"].append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "file": fname}
        )
        payloads[fname] = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for fname, payload in payloads.items():
            zf.writestr(fname, payload)


def load_checkpoint(path) -> tuple[TCMParams, dict]:
    with zipfile.ZipFile(path, "r") as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise CheckpointFormat("checkpoint missing manifest.json") from exc
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointFormat(
                f"unsupported checkpoint version {manifest.get('version')!r}"
            )
        cfg = manifest["config"]
        kwargs = {}
        for rec in manifest["params"]:
            raw = zf.read(rec["file"])
            arr = np.frombuffer(raw, dtype=rec["dtype"]).astype(np.float64)
            kwargs[rec["name"]] = arr.reshape(rec["shape"])
    params = TCMParams(
        d=int(cfg["d"]), heads=int(cfg["heads"]), variant=cfg["variant"], **kwargs
    )
    return params, cfg

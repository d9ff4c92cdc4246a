"""Prototype alignment distance: cosine frame costs plus differentiable DTW.

The distance between two frame sequences is a smoothed-minimum dynamic
programming alignment over the cost matrix C[i, j] = 1 - cos(q_i, s_j).
``softmin_gamma(x) = -gamma * log sum exp(-x / gamma)`` replaces the hard
minimum so the distance is differentiable; gamma = 0 recovers hard DTW.

Boundary modes:

* ``strict``   - the alignment must cover both sequences end to end.
* ``relaxed``  - the alignment covers the full query sequence but may
  start and end at any support frame (free start/end on the support
  axis, realized with a zero-cost virtual row before the first query
  frame).  Each alignment path is counted exactly once.

An exhaustive path-enumeration oracle (``enumerate_alignment``) is kept
alongside the recurrence; it shares no code with the dynamic program and
is the reference for all equivalence tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import WidthMismatch, ZeroGamma, ZeroVector

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class AlignConfig:
    gamma: float = 0.1
    boundary: str = "relaxed"  # strict | relaxed
    metric: str = "soft-dtw"  # soft-dtw | mean-pool

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.boundary not in ("strict", "relaxed"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if self.metric not in ("soft-dtw", "mean-pool"):
            raise ValueError(f"unknown metric {self.metric!r}")


def _tokens(x) -> np.ndarray:
    arr = getattr(x, "tokens", x)
    return np.asarray(arr, dtype=np.float64)


def softmin(stacked: np.ndarray, gamma: float, axis: int = 0) -> np.ndarray:
    """Smoothed minimum along an axis; gamma = 0 is the hard minimum.

    Infinite entries carry no mass.  Debug builds assert the sandwich
    softmin <= min <= softmin + gamma * log(n) on every call.
    """
    mn = np.min(stacked, axis=axis)
    if gamma == 0.0:
        return mn
    z = np.exp(-(stacked - np.expand_dims(mn, axis)) / gamma)
    out = mn - gamma * np.log(np.sum(z, axis=axis))
    if __debug__:
        n = stacked.shape[axis]
        assert np.all(out <= mn + 1e-9)
        assert np.all(mn <= out + gamma * np.log(n) + 1e-9)
    return out


# -- frame cost ----------------------------------------------------------------

def frame_cost(query, support) -> np.ndarray:
    """Cosine cost matrix, entry (i, j) = 1 - cos(query frame i, support frame j)."""
    cost, _ = _frame_cost_cached(query, support)
    return cost


def _frame_cost_cached(query, support):
    q = _tokens(query)
    s = _tokens(support)
    if q.shape[1] != s.shape[1]:
        raise WidthMismatch(f"frame widths differ: {q.shape[1]} vs {s.shape[1]}")
    qn = np.linalg.norm(q, axis=1)
    sn = np.linalg.norm(s, axis=1)
    if np.any(qn < _NORM_FLOOR) or np.any(sn < _NORM_FLOOR):
        raise ZeroVector("frame with zero norm in cost computation")
    qh = q / qn[:, None]
    sh = s / sn[:, None]
    cos = qh @ sh.T
    cache = (qh, sh, qn, sn, cos)
    return 1.0 - cos, cache


def _frame_cost_vjp(cache, dcost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate a cost-matrix gradient to both frame sequences."""
    qh, sh, qn, sn, cos = cache
    dcos = -dcost
    dq = (dcos @ sh - np.sum(dcos * cos, axis=1, keepdims=True) * qh) / qn[:, None]
    ds = (dcos.T @ qh - np.sum(dcos * cos, axis=0)[:, None] * sh) / sn[:, None]
    return dq, ds


# -- soft-DTW recurrence ---------------------------------------------------------

def _forward_batch(costs: np.ndarray, gamma: float, boundary: str):
    """Vectorized recurrence over a batch of cost matrices (P, m, n).

    Returns (values (P,), R (P, m+1, n+1)) where R[:, 0, :] is the
    boundary row (zero everywhere in relaxed mode, zero only at the
    origin in strict mode).
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim == 2:
        costs = costs[None]
    p, m, n = costs.shape
    if m == 0 or n == 0:
        raise ValueError("empty cost matrix")
    big = np.inf
    r = np.full((p, m + 1, n + 1), big)
    if boundary == "relaxed":
        r[:, 0, :] = 0.0
    else:
        r[:, 0, 0] = 0.0
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if boundary == "relaxed" and i == 1:
                # entry row: a path either starts at this support frame
                # (virtual zero predecessor) or extends horizontally
                pred = np.stack([r[:, 0, j], r[:, 1, j - 1]])
            else:
                pred = np.stack(
                    [r[:, i - 1, j], r[:, i, j - 1], r[:, i - 1, j - 1]]
                )
            r[:, i, j] = costs[:, i - 1, j - 1] + softmin(pred, gamma)
    if boundary == "relaxed":
        values = softmin(r[:, m, 1:], gamma, axis=1)
    else:
        values = r[:, m, n]
    return values, r


def _gradient_batch(costs: np.ndarray, gamma: float, boundary: str):
    """Exact reverse-mode gradient of the recurrence w.r.t. the cost entries."""
    if gamma <= 0:
        raise ZeroGamma("gradient requires gamma > 0 (hard min is non-differentiable)")
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim == 2:
        costs = costs[None]
    p, m, n = costs.shape
    values, r = _forward_batch(costs, gamma, boundary)

    # padded copies so successor lookups past the last row/column vanish
    rbar = np.full((p, m + 2, n + 2), -np.inf)
    rbar[:, : m + 1, : n + 1] = r
    rbar[:, 0, :] = np.where(np.isinf(rbar[:, 0, :]), -np.inf, rbar[:, 0, :])
    rbar[:, :, 0] = -np.inf  # column 0 never receives flow
    dbar = np.zeros((p, m + 2, n + 2))
    dbar[:, 1 : m + 1, 1 : n + 1] = costs

    e = np.zeros((p, m + 2, n + 2))
    if boundary == "strict":
        rbar[:, m + 1, n + 1] = r[:, m, n]
        e[:, m + 1, n + 1] = 1.0
        seeds = None
    else:
        seeds = np.exp(-(r[:, m, 1:] - values[:, None]) / gamma)

    for i in range(m, 0, -1):
        for j in range(n, 0, -1):
            a = np.exp((rbar[:, i + 1, j] - rbar[:, i, j] - dbar[:, i + 1, j]) / gamma)
            b = np.exp((rbar[:, i, j + 1] - rbar[:, i, j] - dbar[:, i, j + 1]) / gamma)
            c = np.exp(
                (rbar[:, i + 1, j + 1] - rbar[:, i, j] - dbar[:, i + 1, j + 1]) / gamma
            )
            flow = a * e[:, i + 1, j] + b * e[:, i, j + 1] + c * e[:, i + 1, j + 1]
            if seeds is not None and i == m:
                flow = flow + seeds[:, j - 1]
            e[:, i, j] = flow
    return values, e[:, 1 : m + 1, 1 : n + 1]


def soft_dtw(cost: np.ndarray, config: AlignConfig = AlignConfig()) -> float:
    """Alignment distance of one cost matrix under the configured boundary."""
    values, _ = _forward_batch(np.asarray(cost, dtype=np.float64), config.gamma, config.boundary)
    return float(values[0])


def soft_dtw_batch(costs: np.ndarray, config: AlignConfig = AlignConfig()) -> np.ndarray:
    values, _ = _forward_batch(costs, config.gamma, config.boundary)
    return values


def soft_dtw_gradient(cost: np.ndarray, config: AlignConfig = AlignConfig()) -> np.ndarray:
    """Gradient of the distance w.r.t. every cost entry (requires gamma > 0)."""
    _, grads = _gradient_batch(np.asarray(cost, dtype=np.float64), config.gamma, config.boundary)
    return grads[0]


def soft_dtw_gradient_batch(costs: np.ndarray, config: AlignConfig = AlignConfig()):
    return _gradient_batch(costs, config.gamma, config.boundary)


# -- sequence-level distances ----------------------------------------------------

def mean_pool_distance(query, support) -> float:
    q = _tokens(query).mean(axis=0)
    s = _tokens(support).mean(axis=0)
    qn = np.linalg.norm(q)
    sn = np.linalg.norm(s)
    if qn < _NORM_FLOOR or sn < _NORM_FLOOR:
        raise ZeroVector("mean frame with zero norm")
    return float(1.0 - q @ s / (qn * sn))


def alignment_distance(query, support, config: AlignConfig = AlignConfig()) -> float:
    """Distance between a query sequence and a support sequence."""
    if config.metric == "mean-pool":
        return mean_pool_distance(query, support)
    cost = frame_cost(query, support)
    return soft_dtw(cost, config)


# -- exhaustive path enumeration (oracle) -----------------------------------------

@lru_cache(maxsize=64)
def _paths(m: int, n: int, boundary: str) -> tuple[np.ndarray, np.ndarray]:
    """All monotonic alignment paths as a (n_paths, m*n) visit matrix.

    Strict paths run (0,0) -> (m-1,n-1); relaxed paths start at (0, a)
    and end at (m-1, b) for any support columns a <= b.  Built by plain
    recursion, independent of the recurrence it is used to check.
    """
    paths: list[list[int]] = []

    def walk(i: int, j: int, visited: list[int]) -> None:
        visited = visited + [i * n + j]
        at_end = (i == m - 1) and (j == n - 1 if boundary == "strict" else True)
        if at_end and boundary == "relaxed":
            paths.append(visited)
        if i == m - 1 and j == n - 1:
            if boundary == "strict":
                paths.append(visited)
            return
        if i + 1 < m:
            walk(i + 1, j, visited)
        if j + 1 < n:
            walk(i, j + 1, visited)
            if i + 1 < m:
                walk(i + 1, j + 1, visited)

    starts = [0] if boundary == "strict" else list(range(n))
    for a in starts:
        walk(0, a, [])

    visit = np.zeros((len(paths), m * n))
    for k, cells in enumerate(paths):
        visit[k, cells] = 1.0
    lengths = visit.sum(axis=1)
    return visit, lengths


def enumerate_paths(m: int, n: int, boundary: str = "strict") -> int:
    """Number of admissible alignment paths."""
    visit, _ = _paths(m, n, boundary)
    return visit.shape[0]


def enumerate_alignment(
    cost: np.ndarray, gamma: float, boundary: str = "strict"
) -> tuple[float, np.ndarray]:
    """Brute-force distance and cost gradient by summing over all paths.

    Returns ``(value, gradient)``; at gamma = 0 the value is the hard
    minimum path cost and the gradient entries are the visit indicators
    of (one of) the minimizing paths.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    visit, _ = _paths(m, n, boundary)
    path_costs = visit @ cost.ravel()
    if gamma == 0.0:
        k = int(np.argmin(path_costs))
        return float(path_costs[k]), visit[k].reshape(m, n)
    value = -gamma * logsumexp(-path_costs / gamma)
    weights = np.exp(-(path_costs - value) / gamma)
    weights = weights / weights.sum()
    grad = (weights @ visit).reshape(m, n)
    return float(value), grad

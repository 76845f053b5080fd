"""Aggregation rules: AlignIns and the baseline defenses.

Every rule takes the round's client updates as an ``(n, d)`` float array
(one row per client) and returns an :class:`AggregationOutcome`. Ground-truth
malicious flags never reach a rule except :func:`fedavg_oracle`, whose whole
point is to use them; :func:`aggregate` is the dispatcher the simulator uses
and enforces that split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .vecops import as_param_vector, mz_scores, top_k_indices

DEFENSES = ("alignins", "fedavg", "fedavg_star", "multikrum", "rfa", "rlr", "foolsgold")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    # evaluation-only; rules receive ``defense_view`` output instead
    truth_is_malicious: bool = field(default=False, repr=False)


@dataclass(frozen=True)
class AlignInsConfig:
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    k_fraction: float = 0.3

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_s < 0:
            raise ValueError("filtering radii must be nonnegative")
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError("k_fraction must be in (0, 1]")

    def k_for(self, d: int) -> int:
        # round half up, then clamp into [1, d]
        return min(d, max(1, int(math.floor(self.k_fraction * d + 0.5))))


@dataclass
class AggregationOutcome:
    """Aggregated update plus whatever per-client diagnostics the rule produced.

    ``selected`` holds client ids. Rules that do not filter select everyone.
    ``flagged`` marks degenerate rounds (empty AlignIns selection, all-zero
    FoolsGold weights) where a fallback was used.
    """

    aggregated: np.ndarray
    selected: frozenset
    tda: np.ndarray | None = None
    mpsa: np.ndarray | None = None
    mz_tda: np.ndarray | None = None
    mz_mpsa: np.ndarray | None = None
    clip_threshold: float = 0.0
    weights: np.ndarray | None = None
    flagged: bool = False
    note: str = ""


def _as_matrix(updates) -> np.ndarray:
    mat = np.array(updates, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0 or mat.shape[1] == 0:
        raise ValueError(f"updates must be a non-empty (n, d) array, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("updates contain non-finite values")
    return mat


def _ids(client_ids, n: int) -> np.ndarray:
    if client_ids is None:
        return np.arange(n)
    ids = np.asarray(client_ids)
    if ids.shape != (n,) or len(set(ids.tolist())) != n:
        raise ValueError("client_ids must be n distinct ids")
    return ids


def _canonical(mat: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows sorted by client id, so float reductions do not depend on arrival order."""
    order = np.argsort(ids, kind="stable")
    return mat[order], ids[order]


def _everyone(ids) -> frozenset:
    return frozenset(int(i) for i in ids)


# --------------------------------------------------------------------------
# AlignIns


def principal_sign(updates) -> np.ndarray:
    """Coordinate-wise majority vote of update signs (0 on a tied vote)."""
    mat = _as_matrix(updates)
    return np.sign(np.sign(mat).sum(axis=0)).astype(np.int8)


def tda_scores(updates, global_model) -> np.ndarray:
    """Cosine of each update with the current global model; zero-norm updates score 0."""
    mat = _as_matrix(updates)
    theta = as_param_vector(global_model, "global_model")
    if theta.size != mat.shape[1]:
        raise ValueError("global model and updates differ in dimension")
    theta_norm = np.linalg.norm(theta)
    if theta_norm == 0.0:
        raise ValueError("global model has zero norm")
    norms = np.linalg.norm(mat, axis=1)
    dots = mat @ theta
    out = np.zeros(mat.shape[0])
    ok = norms > 0
    out[ok] = np.clip(dots[ok] / (norms[ok] * theta_norm), -1.0, 1.0)
    return out


def mpsa_scores(updates, p, k: int) -> np.ndarray:
    """Share of each update's top-k magnitude coordinates whose sign matches ``p``."""
    mat = _as_matrix(updates)
    p = np.asarray(p)
    d = mat.shape[1]
    if p.shape != (d,):
        raise ValueError("principal sign has the wrong length")
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    out = np.empty(mat.shape[0])
    for i, row in enumerate(mat):
        idx = top_k_indices(row, k)
        mismatched = np.count_nonzero(np.sign(row[idx]) != p[idx])
        out[i] = 1.0 - mismatched / k
    return out


def clipped_mean(mat: np.ndarray, c: float) -> np.ndarray:
    """Mean of rows after scaling each down to norm at most ``c``.

    Zero rows pass through unscaled.
    """
    norms = np.linalg.norm(mat, axis=1)
    scale = np.ones_like(norms)
    big = norms > c
    scale[big] = c / norms[big]
    return (mat * scale[:, None]).mean(axis=0)


def alignins(updates, global_model, cfg: AlignInsConfig | None = None,
             client_ids=None) -> AggregationOutcome:
    cfg = cfg or AlignInsConfig()
    mat = _as_matrix(updates)
    ids = _ids(client_ids, mat.shape[0])
    mat, ids = _canonical(mat, ids)
    k = cfg.k_for(mat.shape[1])

    tda = tda_scores(mat, global_model)
    p = principal_sign(mat)
    mpsa = mpsa_scores(mat, p, k)
    mz_c = mz_scores(tda)
    mz_s = mz_scores(mpsa)
    keep = (np.abs(mz_c) <= cfg.lambda_c) & (np.abs(mz_s) <= cfg.lambda_s)

    scores = dict(tda=tda, mpsa=mpsa, mz_tda=mz_c, mz_mpsa=mz_s)
    if not keep.any():
        return AggregationOutcome(np.zeros(mat.shape[1]), frozenset(), flagged=True,
                                  note="empty selection", **scores)

    chosen = mat[keep]
    c = float(np.median(np.linalg.norm(chosen, axis=1)))
    return AggregationOutcome(
        aggregated=clipped_mean(chosen, c),
        selected=_everyone(ids[keep]),
        clip_threshold=c,
        **scores,
    )


# --------------------------------------------------------------------------
# Baselines


def fedavg(updates) -> np.ndarray:
    return _as_matrix(updates).mean(axis=0)


def fedavg_oracle(updates, malicious) -> np.ndarray:
    """Mean of the updates whose ground-truth flag is benign."""
    mat = _as_matrix(updates)
    malicious = np.asarray(malicious, dtype=bool)
    if malicious.shape != (mat.shape[0],):
        raise ValueError("need one truth flag per update")
    if malicious.all():
        raise ValueError("no benign update to average")
    return mat[~malicious].mean(axis=0)


def krum_scores(mat: np.ndarray, assumed_m: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - m - 2`` nearest other rows."""
    n = mat.shape[0]
    sq = np.sum(mat * mat, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * mat @ mat.T, 0.0)
    np.fill_diagonal(dist, np.inf)
    nearest = n - assumed_m - 2
    return np.sort(dist, axis=1)[:, :nearest].sum(axis=1)


def multi_krum(updates, assumed_m: int, select_count: int | None = None,
               client_ids=None) -> AggregationOutcome:
    mat = _as_matrix(updates)
    n = mat.shape[0]
    ids = _ids(client_ids, n)
    mat, ids = _canonical(mat, ids)
    if select_count is None:
        select_count = n - assumed_m
    if assumed_m < 0 or n < assumed_m + 3:
        raise ValueError(f"multi-krum needs n >= m + 3 (n={n}, m={assumed_m})")
    if not 1 <= select_count <= n - assumed_m:
        raise ValueError(f"select_count must be in [1, {n - assumed_m}]")
    scores = krum_scores(mat, assumed_m)
    # lexsort: primary key score, ties by client id (rows are already id-sorted)
    chosen = np.lexsort((ids, scores))[:select_count]
    chosen.sort()
    return AggregationOutcome(mat[chosen].mean(axis=0), _everyone(ids[chosen]),
                              weights=scores)


def rfa_geometric_median(updates, max_iters: int = 10, tol: float = 1e-6,
                         smoothing_eps: float = 1e-8, client_ids=None) -> np.ndarray:
    """Smoothed Weiszfeld iterations started from the coordinate-wise mean."""
    mat = _as_matrix(updates)
    mat, _ = _canonical(mat, _ids(client_ids, mat.shape[0]))
    z = mat.mean(axis=0)
    for _ in range(max_iters):
        w = 1.0 / np.maximum(np.linalg.norm(mat - z, axis=1), smoothing_eps)
        z_new = w @ mat / w.sum()
        step = np.linalg.norm(z_new - z)
        z = z_new
        if step < tol:
            break
    return z


def rlr_default_threshold(n: int) -> int:
    return math.ceil(n / 2) + 1


def rlr(updates, vote_threshold: int | None = None, server_lr: float = 1.0,
        client_ids=None) -> np.ndarray:
    """Robust learning rate: flip the server step on coordinates lacking sign consensus."""
    mat = _as_matrix(updates)
    mat, _ = _canonical(mat, _ids(client_ids, mat.shape[0]))
    if vote_threshold is None:
        vote_threshold = rlr_default_threshold(mat.shape[0])
    votes = np.abs(np.sign(mat).sum(axis=0))
    rate = np.where(votes >= vote_threshold, server_lr, -server_lr)
    return rate * mat.mean(axis=0)


def foolsgold_weights(features: np.ndarray) -> np.ndarray:
    """FoolsGold re-weighting from pairwise cosine similarity.

    ``w_i = 1 - max_j cs_ij`` clipped to [0, 1], divided by its max (capped at
    0.99), then passed through ``ln(w / (1 - w)) + 0.5`` and clipped to [0, 1].
    The pardoning step and cross-round history are omitted. Returns all zeros
    when no client keeps positive weight.
    """
    n = features.shape[0]
    norms = np.linalg.norm(features, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = features / safe[:, None]
    cs = unit @ unit.T
    np.fill_diagonal(cs, -np.inf)
    max_cs = cs.max(axis=1) if n > 1 else np.zeros(1)
    w = np.clip(1.0 - max_cs, 0.0, 1.0)
    w[w < 1e-12] = 0.0  # cosine of parallel vectors can round to just below 1
    top = w.max()
    if top <= 0.0:
        return np.zeros(n)
    w = w / top
    w[w >= 1.0] = 0.99
    with np.errstate(divide="ignore"):
        w = np.log(w / (1.0 - w)) + 0.5
    return np.clip(w, 0.0, 1.0)


def foolsgold(updates, last_layer: slice | None = None, client_ids=None) -> AggregationOutcome:
    mat = _as_matrix(updates)
    if mat.shape[0] < 2:
        raise ValueError("foolsgold needs at least two updates")
    ids = _ids(client_ids, mat.shape[0])
    mat, ids = _canonical(mat, ids)
    features = mat[:, last_layer] if last_layer is not None else mat
    w = foolsgold_weights(features)
    if w.sum() <= 0.0:
        return AggregationOutcome(mat.mean(axis=0), _everyone(ids), weights=w,
                                  flagged=True, note="all-zero weights, fell back to fedavg")
    return AggregationOutcome(w @ mat / w.sum(), _everyone(ids[w > 0]), weights=w)


# --------------------------------------------------------------------------
# Dispatch


def defense_view(updates: Sequence[ClientUpdate]) -> tuple[np.ndarray, np.ndarray]:
    """The (ids, deltas) pair a non-oracle rule is allowed to see."""
    if not updates:
        raise ValueError("no client updates")
    ids = np.array([u.client_id for u in updates])
    order = np.argsort(ids, kind="stable")
    return ids[order], np.stack([updates[i].delta for i in order])


def aggregate(name: str, updates: Sequence[ClientUpdate], global_model,
              params: dict | None = None, last_layer: slice | None = None) -> AggregationOutcome:
    """Apply the defense called ``name`` to one round of client updates."""
    params = dict(params or {})
    ids, mat = defense_view(updates)
    if name == "alignins":
        cfg = AlignInsConfig(**{k: params[k] for k in ("lambda_c", "lambda_s", "k_fraction")
                                if k in params})
        return alignins(mat, global_model, cfg, client_ids=ids)
    if name == "fedavg":
        return AggregationOutcome(fedavg(mat), _everyone(ids))
    if name == "fedavg_star":
        flags = {u.client_id: u.truth_is_malicious for u in updates}
        truth = np.array([flags[c] for c in ids])
        return AggregationOutcome(fedavg_oracle(mat, truth), _everyone(ids[~truth]))
    if name == "multikrum":
        m = params.get("assumed_m", 0)
        return multi_krum(mat, m, params.get("select_count"), client_ids=ids)
    if name == "rfa":
        agg = rfa_geometric_median(mat, params.get("max_iters", 10), params.get("tol", 1e-6),
                                   params.get("smoothing_eps", 1e-8), client_ids=ids)
        return AggregationOutcome(agg, _everyone(ids))
    if name == "rlr":
        agg = rlr(mat, params.get("vote_threshold"), params.get("server_lr", 1.0), client_ids=ids)
        return AggregationOutcome(agg, _everyone(ids))
    if name == "foolsgold":
        return foolsgold(mat, last_layer, client_ids=ids)
    raise ValueError(f"unknown defense {name!r}; expected one of {DEFENSES}")

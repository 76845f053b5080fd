"""Accuracy metrics, robustness coefficients and the theoretical error bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledDataset, TriggerSpec, apply_trigger
from .model import MlpModel, loss_and_grad, predict


@dataclass
class RoundMetrics:
    round: int
    ma: float
    ba: float
    ra: float
    n_selected: int | None = 0
    sel_tp: int | None = 0  # benign clients kept
    sel_fp: int | None = 0  # malicious clients kept
    clip_c: float | None = 0.0
    emp_kappa: float | None = 0.0
    prop_err: float | None = None
    flagged: bool = False


@dataclass(frozen=True)
class HeterogeneityEstimate:
    nu_bar: float
    zeta_bar: float


def evaluate(model: MlpModel, clean_test: LabeledDataset, trigger: TriggerSpec) -> tuple[float, float, float]:
    """(MA, BA, RA) in percent.

    BA and RA are measured on fully triggered copies of the test samples whose
    true label is not the target; target-class samples are left out of both.
    """
    if len(clean_test) == 0:
        raise ValueError("empty test set")
    pred, _ = predict(model, clean_test.features)
    ma = 100.0 * np.mean(pred == clean_test.labels)
    keep = clean_test.labels != trigger.target_label
    if not keep.any():
        return float(ma), 0.0, 0.0
    triggered = apply_trigger(clean_test.features[keep], trigger)
    tpred, _ = predict(model, triggered)
    ba = 100.0 * np.mean(tpred == trigger.target_label)
    ra = 100.0 * np.mean(tpred == clean_test.labels[keep])
    return float(ma), float(ba), float(ra)


def empirical_kappa(aggregated, deltas, malicious, client_ids=None) -> float:
    """Squared distance between an aggregate and the mean of the truly benign updates.

    Pass ``client_ids`` to make the result exactly independent of row order.
    """
    mat = np.asarray(deltas, dtype=np.float64)
    malicious = np.asarray(malicious, dtype=bool)
    if malicious.shape != (mat.shape[0],):
        raise ValueError("need one truth flag per update")
    if malicious.all():
        raise ValueError("no benign update")
    if client_ids is not None:
        order = np.argsort(np.asarray(client_ids), kind="stable")
        mat, malicious = mat[order], malicious[order]
    benign = mat[~malicious]
    diff = np.asarray(aggregated, dtype=np.float64) - benign.mean(axis=0)
    return float(diff @ diff)


def kappa_bound(n: int, m: int, epsilon: float, nu_bar: float, zeta_bar: float, clip_c: float) -> float:
    """Robustness coefficient guaranteed for AlignIns when |S| >= n - 2m."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n < 1 or not 0 <= m < n / (3.0 + epsilon):
        raise ValueError(f"need 0 <= m < n/(3+epsilon); got n={n}, m={m}, epsilon={epsilon}")
    return (1.0 + m / (n - 2 * m)) * ((2.0 / epsilon + 1.0) * (2.0 * nu_bar + zeta_bar)
                                      + 8.0 * clip_c ** 2)


def cumulative_rate(T: int, alphas) -> float:
    """Sum of squared server learning rates over rounds 1..T (scalar = constant rate)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    a = np.asarray(alphas, dtype=np.float64)
    a = np.full(T, float(a)) if a.ndim == 0 else a[:T]
    if a.size < T:
        raise ValueError(f"need {T} learning rates, got {a.size}")
    # fsum is correctly rounded, so phi(T) never decreases as T grows
    return math.fsum(a * a)


def propagation_error_bound(T: int, alphas, mu: float, kappa: float, nu_bar: float) -> float:
    """Bound on ||theta^T - theta^{T,*}||; grows as (2 + 3 mu^2)^phi with phi the cumulative rate."""
    phi = cumulative_rate(T, alphas)
    return phi * (2.0 + 3.0 * mu ** 2) ** phi * (kappa + 2.0 * nu_bar)


def estimate_nu_zeta(benign_clients: Sequence[LabeledDataset], model: MlpModel, probes: int,
                     batch_size: int, seed: int) -> HeterogeneityEstimate:
    """Gradient variance and heterogeneity at ``model``.

    For each client, ``probes`` mini-batches of ``batch_size`` samples are
    drawn (without replacement within a batch); the variance is the mean squared distance of their
    gradients from the client's full-batch gradient. Heterogeneity is the mean
    squared distance of the full-batch gradients from their average.
    """
    if probes < 2:
        raise ValueError("probes must be >= 2")
    if len(benign_clients) < 2:
        raise ValueError("need at least two benign clients")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4E5A]))
    full_grads, variances = [], []
    for data in benign_clients:
        _, full = loss_and_grad(model, data.features, data.labels)
        full_grads.append(full)
        b = min(batch_size, len(data))
        sq = []
        for _ in range(probes):
            idx = np.sort(rng.choice(len(data), size=b, replace=False))
            _, g = loss_and_grad(model, data.features[idx], data.labels[idx])
            sq.append(float(np.sum((g - full) ** 2)))
        variances.append(np.mean(sq))
    full_grads = np.stack(full_grads)
    centered = full_grads - full_grads.mean(axis=0)
    zeta = float(np.mean(np.sum(centered ** 2, axis=1)))
    return HeterogeneityEstimate(float(np.mean(variances)), zeta)

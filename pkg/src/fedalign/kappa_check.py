"""Randomized check of the AlignIns robustness bound.

Each trial draws benign updates as ``shared + client_offset + noise`` and
measures the heterogeneity and variance of exactly those draws, adds ``m``
adversarial updates, runs AlignIns and compares ``||agg - benign_mean||^2``
against :func:`fedalign.evaluation.kappa_bound`. The bound only applies when
the selection kept at least ``n - 2m`` clients; other trials are counted
separately.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .defenses import AlignInsConfig, alignins, principal_sign
from .evaluation import empirical_kappa, kappa_bound

ADVERSARIES = ("scaled", "sign_flipped", "ada_b")


@dataclass
class Trial:
    n: int
    d: int
    m: int
    adversary: str
    selected: int
    kappa: float
    bound: float
    nu_bar: float
    zeta_bar: float
    clip_c: float

    @property
    def precondition_met(self) -> bool:
        return self.selected >= self.n - 2 * self.m

    @property
    def violated(self) -> bool:
        return self.precondition_met and self.kappa > self.bound


@dataclass
class KappaReport:
    trials: list[Trial] = field(default_factory=list)

    @property
    def checked(self) -> int:
        return sum(t.precondition_met for t in self.trials)

    @property
    def precondition_failures(self) -> int:
        return len(self.trials) - self.checked

    @property
    def violations(self) -> int:
        return sum(t.violated for t in self.trials)

    @property
    def max_ratio(self) -> float:
        ratios = [t.kappa / t.bound for t in self.trials if t.precondition_met and t.bound > 0]
        return max(ratios, default=0.0)

    def passed(self, max_failure_rate: float = 0.2) -> bool:
        return self.violations == 0 and self.precondition_failures < max_failure_rate * len(self.trials)

    def summary(self) -> dict:
        return {
            "trials": len(self.trials),
            "checked": self.checked,
            "precondition_failures": self.precondition_failures,
            "violations": self.violations,
            "max_kappa_over_bound": self.max_ratio,
        }

    def as_dict(self) -> dict:
        return {**self.summary(), "per_trial": [asdict(t) for t in self.trials]}


def max_attackers(n: int, epsilon: float) -> int:
    """Largest m with m < n / (3 + epsilon)."""
    m = math.ceil(n / (3.0 + epsilon)) - 1
    return max(m, 0)


def run_trial(rng: np.random.Generator, epsilon: float, radius: float, probes: int = 8) -> Trial:
    n = int(rng.integers(7, 21))
    d = int(rng.integers(5, 51))
    # every trial carries at least one attacker; n >= 7 keeps max_attackers >= 1
    m = int(rng.integers(1, max_attackers(n, epsilon) + 1))
    adversary = ADVERSARIES[int(rng.integers(len(ADVERSARIES)))]
    nb = n - m

    shared = rng.normal(0.0, 1.0, d)
    offsets = rng.normal(0.0, rng.uniform(0.05, 0.5), (nb, d))
    noise = rng.normal(0.0, rng.uniform(0.05, 0.5), (nb, probes, d))
    client_means = shared + offsets
    benign = client_means + noise[:, 0]

    nu_bar = float(np.mean(np.sum(noise ** 2, axis=2)))
    zeta_bar = float(np.mean(np.sum((client_means - client_means.mean(axis=0)) ** 2, axis=1)))

    if adversary == "scaled":
        base = shared + rng.normal(0.0, 0.3, (m, d))
        mal = base * rng.uniform(2.0, 10.0, (m, 1))
    elif adversary == "sign_flipped":
        mal = -(shared + rng.normal(0.0, 0.3, (m, d)))
    else:
        p = principal_sign(benign).astype(np.float64)
        mal = np.tile(p * (np.median(np.linalg.norm(benign, axis=1)) / math.sqrt(d)), (m, 1))

    updates = np.vstack([benign, mal]) if m else benign
    truth = np.arange(n) >= nb
    global_model = shared + rng.normal(0.0, 1.0, d)
    cfg = AlignInsConfig(lambda_c=radius, lambda_s=radius)
    out = alignins(updates, global_model, cfg)
    kappa = empirical_kappa(out.aggregated, updates, truth)
    bound = kappa_bound(n, m, epsilon, nu_bar, zeta_bar, out.clip_threshold)
    return Trial(n, d, m, adversary, len(out.selected), kappa, bound, nu_bar, zeta_bar,
                 out.clip_threshold)


def run_kappa_check(trials: int = 200, seed: int = 0, epsilon: float = 0.1,
                    radius: float = 1.5) -> KappaReport:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4B41]))
    return KappaReport([run_trial(rng, epsilon, radius) for _ in range(trials)])

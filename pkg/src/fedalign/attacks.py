"""Malicious client behaviours.

Data-poisoning attacks (badnet, dba) only change the client's shard, see
:func:`fedalign.data.poison_dataset`. The functions here are the update
transforms and the update-replacement attacks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vecops import as_param_vector, top_k_indices

ATTACKS = ("none", "badnet", "dba", "scaling", "pgd", "neurotoxin", "ada_a", "ada_b")
POISONING_ATTACKS = ("badnet", "dba", "scaling", "pgd", "neurotoxin")
ADA_B_SIGN_SOURCES = ("colluders", "exact")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    scale_factor: float = 2.0
    pgd_radius_ratio: float = 1.0
    neurotoxin_bottom_frac: float = 0.75
    poison_ratio: float = 0.5
    attack_ratio: float = 0.2
    # where ADA_B gets its principal-sign estimate: "colluders" uses the
    # malicious clients' own dry runs plus the last global step, "exact" the
    # true principal sign over the updates the server receives
    ada_b_sign: str = "colluders"

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")
        for name in ("pgd_radius_ratio", "poison_ratio", "attack_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 < self.neurotoxin_bottom_frac <= 1.0:
            raise ValueError("neurotoxin_bottom_frac must be in (0, 1]")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if self.ada_b_sign not in ADA_B_SIGN_SOURCES:
            raise ValueError(f"ada_b_sign must be one of {ADA_B_SIGN_SOURCES}")

    @property
    def poisons_data(self) -> bool:
        return self.kind in POISONING_ATTACKS


def scaling_attack(update, factor: float = 2.0) -> np.ndarray:
    if factor <= 0:
        raise ValueError("factor must be positive")
    return as_param_vector(update) * factor


def pgd_project(local_model, global_model, radius: float) -> np.ndarray:
    """Pull ``local_model`` back onto the L2 ball of ``radius`` around ``global_model``."""
    local = as_param_vector(local_model, "local_model")
    center = as_param_vector(global_model, "global_model")
    if local.shape != center.shape:
        raise ValueError("model dimensions differ")
    diff = local - center
    dist = np.linalg.norm(diff)
    if dist <= radius:
        return local.copy()
    return center + diff * (radius / dist)


def neurotoxin_mask(update, prev_aggregate, bottom_frac: float = 0.75) -> np.ndarray:
    """Zero ``update`` on the top ceil((1 - bottom_frac) d) coordinates of ``|prev_aggregate|``.

    With no previous aggregate (first round) the update passes through.
    """
    update = as_param_vector(update, "update")
    if prev_aggregate is None:
        return update.copy()
    prev = as_param_vector(prev_aggregate, "prev_aggregate")
    if prev.shape != update.shape:
        raise ValueError("update and previous aggregate differ in dimension")
    drop = math.ceil(round((1.0 - bottom_frac) * update.size, 9))
    out = update.copy()
    if drop:
        out[top_k_indices(prev, drop)] = 0.0
    return out


def ada_a(benign_updates, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Sign-mirror of one randomly chosen benign update, scaled to ``magnitude / sqrt(d)`` per coordinate."""
    if len(benign_updates) == 0:
        raise ValueError("ADA_A needs at least one benign update to mirror")
    chosen = as_param_vector(benign_updates[int(rng.integers(len(benign_updates)))])
    return -np.sign(chosen) * (magnitude / math.sqrt(chosen.size))


def ada_b(p, magnitude: float) -> np.ndarray:
    """Update pointing exactly along the principal sign ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return p * (magnitude / math.sqrt(p.size))


def colluder_sign_estimate(colluder_updates, prev_aggregate=None) -> np.ndarray:
    """Principal-sign guess from the attackers' own honest updates and the last global step."""
    votes = np.sign(np.asarray(colluder_updates, dtype=np.float64)).sum(axis=0)
    if prev_aggregate is not None:
        votes = votes + np.sign(prev_aggregate)
    return np.sign(votes).astype(np.int8)

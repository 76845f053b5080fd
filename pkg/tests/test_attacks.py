import math

import numpy as np
import pytest

from fedalign.attacks import (AttackSpec, ada_a, ada_b, colluder_sign_estimate, neurotoxin_mask,
                              pgd_project, scaling_attack)
from fedalign.defenses import mpsa_scores, principal_sign
from fedalign.vecops import top_k_mask


def test_scaling():
    assert scaling_attack([1.0, -2.0], 2.0).tolist() == [2.0, -4.0]
    assert scaling_attack([1.0, -2.0], 1.0).tolist() == [1.0, -2.0]
    v = np.array([0.3, 4.0, -1.0])
    assert np.linalg.norm(scaling_attack(v, 3.0)) == pytest.approx(3 * np.linalg.norm(v))
    with pytest.raises(ValueError):
        scaling_attack(v, 0.0)


def test_pgd_examples():
    g = np.array([1.0, 1.0])
    assert pgd_project(g, g, 1.0).tolist() == g.tolist()
    local = g + np.array([6.0, 8.0])
    out = pgd_project(local, g, 5.0)
    np.testing.assert_allclose(out - g, [3.0, 4.0])
    assert pgd_project(local, g, 10.0).tolist() == local.tolist()


def test_pgd_stays_in_ball():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g, local = rng.normal(size=(2, 9)) * rng.uniform(0.1, 10)
        r = rng.uniform(0.01, 5)
        assert np.linalg.norm(pgd_project(local, g, r) - g) <= r + 1e-9


def test_neurotoxin_examples():
    u = np.array([5.0, -2.0, 3.0, 1.0])
    assert neurotoxin_mask(u, [9.0, 1.0, 1.0, 1.0]).tolist() == [0.0, -2.0, 3.0, 1.0]
    assert neurotoxin_mask(u, [9.0, 1.0, 1.0, 1.0], 1.0).tolist() == u.tolist()
    assert neurotoxin_mask(u, None).tolist() == u.tolist()


def test_neurotoxin_is_complement_of_top_k():
    rng = np.random.default_rng(1)
    for d in (4, 7, 13, 40):
        u, prev = rng.normal(size=(2, d))
        k = math.ceil(0.25 * d)
        out = neurotoxin_mask(u, prev, 0.75)
        assert np.array_equal(out, u * (1 - top_k_mask(prev, k)))
        assert np.all(np.abs(out) <= np.abs(u))


def test_ada_a_examples():
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(ada_a([np.array([1.0, -1.0])], math.sqrt(2), rng), [-1.0, 1.0])
    pool = [np.array([1.0, -2.0, 0.0]), np.array([-3.0, 1.0, 2.0])]
    out = ada_a(pool, 1.0, np.random.default_rng(5))
    again = ada_a(pool, 1.0, np.random.default_rng(5))
    assert out.tolist() == again.tolist()
    assert any(np.array_equal(np.sign(out), -np.sign(c)) for c in pool)
    with pytest.raises(ValueError):
        ada_a([], 1.0, rng)


def test_ada_b_examples():
    out = ada_b([1, -1, 0], math.sqrt(2))
    np.testing.assert_allclose(out, np.array([1, -1, 0]) * math.sqrt(2 / 3))
    assert not ada_b([1, -1, 1], 0.0).any()


def test_ada_b_exact_sign_has_full_mpsa():
    rng = np.random.default_rng(2)
    benign = rng.normal(size=(8, 30))
    p = principal_sign(benign)
    mal = np.tile(ada_b(p, 1.0), (3, 1))
    everyone = np.vstack([benign, mal])
    # adding updates along p leaves the principal sign where it was
    assert np.array_equal(principal_sign(everyone), p)
    assert np.all(mpsa_scores(mal, principal_sign(everyone), 9) == 1.0)


def test_colluder_sign_estimate():
    est = colluder_sign_estimate([[1.0, -1.0, 1.0], [1.0, 1.0, -1.0]], [0.0, -5.0, 2.0])
    assert est.tolist() == [1, -1, 1]
    assert colluder_sign_estimate([[1.0, -1.0]]).tolist() == [1, -1]


def test_attack_spec_validation():
    assert AttackSpec("badnet").poisons_data
    assert not AttackSpec("ada_b").poisons_data
    for bad in (dict(kind="evil"), dict(poison_ratio=1.5), dict(scale_factor=0.0),
                dict(neurotoxin_bottom_frac=0.0), dict(ada_b_sign="oracle")):
        with pytest.raises(ValueError):
            AttackSpec(**bad)

import itertools
import math

import numpy as np
import pytest

from fedalign.defenses import (AlignInsConfig, ClientUpdate, aggregate, alignins, fedavg,
                               fedavg_oracle, foolsgold, foolsgold_weights, krum_scores,
                               mpsa_scores, multi_krum, principal_sign, rfa_geometric_median, rlr,
                               rlr_default_threshold, tda_scores)
from fedalign.evaluation import empirical_kappa, kappa_bound

from oracles import alignins_reference, multi_krum_reference


def test_principal_sign_examples():
    assert principal_sign([[1, -1], [1, 1], [-1, 1]]).tolist() == [1, 1]
    assert principal_sign([[5, -5]]).tolist() == [1, -1]
    assert principal_sign([[1], [-1]]).tolist() == [0]
    with pytest.raises(ValueError):
        principal_sign(np.zeros((0, 3)))


def test_tda_examples():
    theta = np.array([1.0, 2.0])
    np.testing.assert_allclose(tda_scores([theta, -theta, [2.0, -1.0], [0.0, 0.0]], theta),
                               [1.0, -1.0, 0.0, 0.0], atol=1e-15)


def test_mpsa_examples():
    p = np.array([1, -1, 1])
    assert mpsa_scores([[2.0, -1.0, 3.0]], p, 3)[0] == 1.0
    assert mpsa_scores([[-2.0, 1.0, -3.0]], p, 3)[0] == 0.0
    assert mpsa_scores([[3.0, -1.0, 2.0]], [1, 1, 1], 2)[0] == 1.0


@pytest.mark.parametrize("d,k", [(1, 1), (3, 1), (5, 2), (10, 3), (15, 5), (100, 30)])
def test_k_rounding(d, k):
    assert AlignInsConfig().k_for(d) == k


def test_alignins_identical_updates():
    u = np.array([0.3, -1.0, 2.0])
    out = alignins([u] * 5, np.array([1.0, 1.0, 1.0]))
    assert out.selected == frozenset(range(5))
    np.testing.assert_allclose(out.aggregated, u, rtol=1e-15)


def test_alignins_rejects_flipped_outlier():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=30)
    benign = theta + rng.normal(0, 0.2, (9, 30))
    updates = np.vstack([benign, -10 * theta])
    out = alignins(updates, theta)
    assert 9 not in out.selected
    assert abs(out.mz_tda[9]) > 1.0
    zeta = float(np.mean(np.sum((benign - benign.mean(0)) ** 2, axis=1)))
    kappa = empirical_kappa(out.aggregated, updates, np.arange(10) == 9)
    assert kappa <= kappa_bound(10, 1, 0.1, 0.0, zeta, out.clip_threshold)


def test_alignins_huge_radii_is_clipped_mean():
    rng = np.random.default_rng(1)
    updates = rng.normal(size=(6, 8))
    out = alignins(updates, rng.normal(size=8), AlignInsConfig(1e9, 1e9))
    assert out.selected == frozenset(range(6))
    norms = np.linalg.norm(updates, axis=1)
    c = np.median(norms)
    expected = np.mean([u * min(1, c / n) for u, n in zip(updates, norms)], axis=0)
    np.testing.assert_allclose(out.aggregated, expected, rtol=1e-12)


def test_alignins_equal_norms_matches_fedavg():
    rng = np.random.default_rng(2)
    updates = rng.normal(size=(5, 7))
    updates /= np.linalg.norm(updates, axis=1, keepdims=True)
    out = alignins(updates, rng.normal(size=7), AlignInsConfig(1e9, 1e9))
    np.testing.assert_allclose(out.aggregated, fedavg(updates), atol=1e-15)


def test_alignins_empty_selection_is_flagged():
    out = alignins([[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0], AlignInsConfig(0.0, 0.0))
    assert out.flagged and out.selected == frozenset()
    assert out.aggregated.tolist() == [0.0, 0.0]


def test_alignins_zero_update_passes_unscaled():
    out = alignins([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]], [1.0, 1.0], AlignInsConfig(1e9, 1e9))
    assert out.clip_threshold == pytest.approx(math.sqrt(2))
    np.testing.assert_allclose(out.aggregated, [2 / 3, 2 / 3])


@pytest.mark.parametrize("seed", range(20))
def test_alignins_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(3, 12)), int(rng.integers(2, 25))
    updates = rng.normal(size=(n, d))
    theta = rng.normal(size=d)
    lc, ls = rng.uniform(0.5, 2.5, 2)
    out = alignins(updates, theta, AlignInsConfig(lc, ls))
    sel, c, agg = alignins_reference(updates.tolist(), theta.tolist(), lc, ls)
    assert sorted(out.selected) == sel
    assert out.clip_threshold == pytest.approx(c, rel=1e-12)
    np.testing.assert_allclose(out.aggregated, agg, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_alignins_scale_invariant_selection(seed):
    rng = np.random.default_rng(seed)
    updates = rng.normal(size=(8, 12))
    theta = rng.normal(size=12)
    a = alignins(updates, theta)
    b = alignins(updates * 4.0, theta)
    assert a.selected == b.selected
    assert np.linalg.norm(a.aggregated) <= a.clip_threshold + 1e-12


def test_fedavg_examples():
    assert fedavg([[1, 1], [3, 3]]).tolist() == [2, 2]
    assert fedavg([[4, 5]]).tolist() == [4, 5]
    assert fedavg([[1], [-1]]).tolist() == [0]
    with pytest.raises(ValueError):
        fedavg(np.zeros((0, 2)))


def test_fedavg_oracle_examples():
    assert fedavg_oracle([[1.0], [3.0]], [False, False]).tolist() == [2.0]
    assert fedavg_oracle([[100.0], [2.0]], [True, False]).tolist() == [2.0]
    assert fedavg_oracle([[1.0], [3.0], [9.0]], [False, False, True]).tolist() == [2.0]
    with pytest.raises(ValueError):
        fedavg_oracle([[1.0]], [True])


def test_multi_krum_cluster_example():
    out = multi_krum([[0.0], [0.1], [0.2], [50.0]], assumed_m=0, select_count=3)
    assert out.selected == frozenset({0, 1, 2})
    np.testing.assert_allclose(out.aggregated, [0.1])


def test_multi_krum_outlier_excluded():
    ups = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1], [30.0, -30.0]]
    out = multi_krum(ups, assumed_m=1, select_count=4)
    assert 4 not in out.selected


def test_multi_krum_identical():
    out = multi_krum([[2.0, 3.0]] * 5, assumed_m=1)
    assert out.aggregated.tolist() == [2.0, 3.0]


def test_multi_krum_infeasible():
    with pytest.raises(ValueError):
        multi_krum([[0.0], [1.0], [2.0]], assumed_m=1)


@pytest.mark.parametrize("seed", range(10))
def test_multi_krum_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 12))
    m = int(rng.integers(0, n - 3))
    updates = rng.normal(size=(n, 6))
    updates[:m] += 20 * rng.normal(size=(m, 6))
    sel = int(rng.integers(1, n - m + 1))
    out = multi_krum(updates, m, sel)
    assert sorted(out.selected) == multi_krum_reference(updates.tolist(), m, sel)


@pytest.mark.parametrize("seed", range(5))
def test_multi_krum_never_keeps_far_outliers(seed):
    rng = np.random.default_rng(seed)
    n, m = 10, 3
    cluster = rng.normal(0, 0.1, (n - m, 4))
    diam = max(np.linalg.norm(a - b) for a, b in itertools.combinations(cluster, 2))
    far = rng.normal(size=(m, 4))
    far = 20 * diam * far / np.linalg.norm(far, axis=1, keepdims=True) + 20 * diam
    out = multi_krum(np.vstack([cluster, far]), m, n - m)
    assert out.selected == frozenset(range(n - m))


def test_krum_score_brute_force():
    mat = np.array([[0.0], [1.0], [3.0], [7.0]])
    # n - m - 2 = 2 nearest: 0 -> {1, 9}, 1 -> {1, 4}, 3 -> {4, 9}, 7 -> {16, 36}
    assert krum_scores(mat, 0).tolist() == [10.0, 5.0, 13.0, 52.0]


def test_rfa_examples():
    np.testing.assert_allclose(rfa_geometric_median([[-1.0], [1.0]]), [0.0], atol=1e-12)
    np.testing.assert_allclose(rfa_geometric_median([[3.0, 4.0]]), [3.0, 4.0])
    z = rfa_geometric_median([[0.0, 0.0], [0.0, 0.0], [10.0, 10.0]])
    assert np.linalg.norm(z) <= 0.5


def test_rfa_against_grid():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(7, 2))
    pts[0] = [8.0, -6.0]
    g = np.linspace(-3, 3, 601)
    xx, yy = np.meshgrid(g, g)
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    cost = np.sum(np.linalg.norm(grid[:, None, :] - pts[None], axis=2), axis=1)
    best = grid[np.argmin(cost)]
    z = rfa_geometric_median(pts, max_iters=200)
    assert np.linalg.norm(z - best) < 0.02


def test_rlr_examples():
    ups = np.array([[1.0, -2.0], [3.0, -1.0], [2.0, -3.0]])
    np.testing.assert_allclose(rlr(ups, 2, server_lr=0.5), 0.5 * fedavg(ups))
    np.testing.assert_allclose(rlr(ups, 0), fedavg(ups))
    split = np.array([[1.0, 1.0], [1.0, -3.0]])
    np.testing.assert_allclose(rlr(split, 2), [1.0, 1.0])
    assert rlr_default_threshold(20) == 11
    assert rlr_default_threshold(5) == 4


def test_foolsgold_sybils_zeroed():
    mal = [1.0, 2.0, 0.5]
    benign = [-1.0, 0.3, 2.0]
    out = foolsgold([mal, mal, benign])
    assert out.weights[0] == 0.0 and out.weights[1] == 0.0
    np.testing.assert_allclose(out.aggregated, benign)


def test_foolsgold_orthogonal_is_fedavg():
    ups = np.eye(3) * [1.0, 2.0, 3.0]
    np.testing.assert_allclose(foolsgold_weights(ups), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(foolsgold(ups).aggregated, fedavg(ups))


def test_foolsgold_identical_pair_falls_back():
    out = foolsgold([[1.0, 2.0], [1.0, 2.0]])
    assert out.flagged
    np.testing.assert_allclose(out.aggregated, [1.0, 2.0])


def test_foolsgold_last_layer_view():
    ups = np.array([[5.0, 1.0, 0.0], [-5.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    out = foolsgold(ups, last_layer=slice(1, 3))
    assert out.weights[0] == out.weights[1] == 0.0


@pytest.mark.parametrize("name", ["alignins", "fedavg", "fedavg_star", "multikrum", "rfa", "rlr",
                                  "foolsgold"])
def test_permutation_invariance(name):
    rng = np.random.default_rng(5)
    deltas = rng.normal(size=(8, 10))
    theta = rng.normal(size=10)
    ups = [ClientUpdate(i, deltas[i], i < 2) for i in range(8)]
    params = {"assumed_m": 2} if name == "multikrum" else {}
    base = aggregate(name, ups, theta, params)
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(8)
        other = aggregate(name, [ups[i] for i in perm], theta, params)
        assert np.array_equal(base.aggregated, other.aggregated)
        assert base.selected == other.selected


def test_truth_flags_only_reach_the_oracle():
    deltas = np.array([[1.0], [3.0], [100.0]])
    ups = [ClientUpdate(i, deltas[i], i == 2) for i in range(3)]
    assert aggregate("fedavg_star", ups, np.ones(1)).aggregated.tolist() == [2.0]
    assert aggregate("fedavg", ups, np.ones(1)).aggregated.tolist() == pytest.approx([104 / 3])
    assert "truth" not in repr(ups[0])


def test_unknown_defense():
    with pytest.raises(ValueError):
        aggregate("median", [ClientUpdate(0, np.ones(2))], np.ones(2))

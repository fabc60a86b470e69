import logging

import numpy as np
import pytest

from latentmatch.domain import LatentTable
from latentmatch.estimator import Estimate, ThetaTable
from latentmatch.evaluation import (assign_phenotypes, effect_curves, kmeans, read_curves_csv, score,
                                    unit_summaries, write_curves_csv, write_differences_csv, write_svg)
from latentmatch.synthgen import OracleTable

TABLE2_LMN = [3.76, 10.42, 9.68, 4.54, 3.92, 4.46, 3.68]


def _table(units, times, theta, method="lmn"):
    est = [Estimate(int(u), int(t), a, float(theta[i, a]), float(theta[i, a]), 0.0, 1, False)
           for i, (u, t) in enumerate(zip(units, times)) for a in range(theta.shape[1])]
    return ThetaTable(est, method)


def _oracle(theta, units=None, times=None):
    n, A = theta.shape
    units = np.arange(n) if units is None else np.asarray(units)
    times = np.zeros(n, dtype=int) if times is None else np.asarray(times)
    return OracleTable(units, times, np.zeros((n, 1)), np.full((n, A), 1.0 / A), np.asarray(theta, float), 1.0)


@pytest.fixture
def random_pair():
    rng = np.random.default_rng(0)
    truth = rng.standard_normal((40, 7))
    return truth, truth + 0.3 * rng.standard_normal((40, 7))


# --- score -----------------------------------------------------------------------

def test_identity_scores_zero(random_pair):
    truth, _ = random_pair
    r = score(_table(np.arange(40), np.zeros(40), truth), _oracle(truth))
    assert r.rmse == 0 and r.pehe == 0 and r.policy_gap == 0
    assert np.all(r.bias_per_action == 0)


def test_constant_shift(random_pair):
    truth, est = random_pair
    r = score(_table(np.arange(40), np.zeros(40), truth + 1.0), _oracle(truth))
    np.testing.assert_allclose(r.bias_per_action, 1.0)
    assert r.pehe == pytest.approx(0.0, abs=1e-12)
    base = score(_table(np.arange(40), np.zeros(40), est), _oracle(truth))
    shifted = score(_table(np.arange(40), np.zeros(40), est + 2.5), _oracle(truth))
    np.testing.assert_allclose(shifted.bias_per_action - base.bias_per_action, 2.5)
    assert shifted.pehe == pytest.approx(base.pehe, rel=1e-12)


def test_two_record_hand_example():
    truth = np.array([[1.0, 2.0], [3.0, 5.0]])
    est = np.array([[2.0, 2.0], [3.0, 3.0]])
    r = score(_table([0, 1], [0, 0], est), _oracle(truth))
    # errors [[1, 0], [0, -2]]
    assert r.rmse == pytest.approx(np.sqrt(1.25))
    np.testing.assert_allclose(r.bias_per_action, [0.5, -1.0])
    np.testing.assert_allclose(r.rmse_per_action, [np.sqrt(0.5), np.sqrt(2.0)])
    assert r.pehe == pytest.approx(np.sqrt(2.5))
    # best action is 0 for both rows: |mean(2, 3) - mean(1, 3)|
    assert r.policy_gap == pytest.approx(0.5)


def test_per_action_rmse_reaggregates(random_pair):
    truth, est = random_pair
    r = score(_table(np.arange(40), np.zeros(40), est), _oracle(truth))
    assert abs(np.sqrt(np.mean(r.rmse_per_action ** 2)) - r.rmse) < 1e-9
    assert r.rmse >= 0


def test_row_order_invariance(random_pair):
    truth, est = random_pair
    tab = _table(np.arange(40), np.zeros(40), est)
    rev = ThetaTable(list(reversed(tab.estimates)))
    a, b = score(tab, _oracle(truth)), score(rev, _oracle(truth))
    assert a.rmse == pytest.approx(b.rmse, rel=1e-12) and a.pehe == pytest.approx(b.pehe, rel=1e-12)
    assert a.policy_gap == pytest.approx(b.policy_gap, rel=1e-12)


def test_coverage_gap_lists_missing_keys():
    truth = np.zeros((2, 2))
    with pytest.raises(KeyError, match="unit=5"):
        score(_table([0, 5], [0, 0], truth), _oracle(truth))
    partial = _table([0, 1], [0, 0], truth)
    partial.estimates.pop()
    with pytest.raises(KeyError, match="incomplete"):
        score(partial, _oracle(truth))


# --- phenotypes ----------------------------------------------------------------

def _blobs(seed=0):
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    truth = np.repeat(np.arange(3), 30)
    return centres[truth] + 0.3 * rng.standard_normal((90, 2)), truth


def test_separated_blobs_recovered():
    x, truth = _blobs()
    labels, _, _ = kmeans(x, 3, seed=1)
    # a bijection between found and true labels
    pairs = set(zip(labels.tolist(), truth.tolist()))
    assert len(pairs) == 3


def test_objective_non_increasing_and_deterministic():
    x = np.random.default_rng(2).standard_normal((200, 4))
    l1, c1, trace = kmeans(x, 5, seed=3)
    l2, c2, _ = kmeans(x, 5, seed=3)
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    assert np.array_equal(l1, l2) and np.array_equal(c1, c2)


def test_single_cluster_and_too_few_units():
    x = np.random.default_rng(4).standard_normal((10, 2))
    assert np.all(kmeans(x, 1)[0] == 0)
    with pytest.raises(ValueError):
        kmeans(x[:2], 3)


def test_assign_phenotypes_uses_unit_means():
    z = np.array([[0.0], [2.0], [10.0], [12.0], [20.0]])
    lat = LatentTable(z, np.zeros(5, int), np.zeros(5), np.array([0, 0, 1, 1, 2]), np.arange(5))
    units, summ = unit_summaries(lat)
    assert units.tolist() == [0, 1, 2] and summ[:, 0].tolist() == [1.0, 11.0, 20.0]
    ph = assign_phenotypes(lat, 3, seed=0)
    assert len(set(ph.labels.tolist())) == 3 and set(ph.mapping()) == {0, 1, 2}


# --- curves -------------------------------------------------------------------------

def test_constant_theta_is_flat():
    tab = _table(np.arange(5), np.zeros(5), np.full((5, 7), 2.0))
    (c,) = effect_curves(tab)
    assert np.all(c.mean == 2.0) and np.all(c.sd == 0.0) and c.n == 5


def test_table2_column_peaks_at_dose_one():
    tab = _table([0], [0], np.array([TABLE2_LMN]))
    (c,) = effect_curves(tab)
    assert c.peak == 1
    np.testing.assert_allclose(c.mean, TABLE2_LMN)


def test_phenotype_curves_differ_by_offset():
    rng = np.random.default_rng(5)
    base = rng.standard_normal((20, 7))
    theta = np.vstack([base, base + 1.5])
    units = np.arange(40)
    groups = {int(u): (0 if u < 20 else 1) for u in units}
    c0, c1 = effect_curves(_table(units, np.zeros(40), theta), groups)
    np.testing.assert_allclose(c1.mean - c0.mean, 1.5)
    np.testing.assert_allclose(c0.sd, base.std(axis=0, ddof=1))


def test_empty_group_is_omitted_with_warning(caplog):
    tab = _table([0, 1], [0, 0], np.zeros((2, 7)))
    with caplog.at_level(logging.WARNING):
        curves = effect_curves(tab, {0: "a", 1: "a"}, group_names=["a", "b"])
    assert [c.group for c in curves] == ["a"]
    assert "b" in caplog.text


def test_curve_files(tmp_path):
    rng = np.random.default_rng(6)
    curves = effect_curves(_table(np.arange(6), np.zeros(6), rng.standard_normal((6, 7))),
                           {u: u % 2 for u in range(6)})
    write_curves_csv(curves, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "group,action,mean_theta,sd_theta,n"
    back = read_curves_csv(tmp_path / "c.csv")
    for a, b in zip(curves, back):
        assert a.group == b.group and np.array_equal(a.mean, b.mean) and np.array_equal(a.sd, b.sd)
    write_differences_csv("HEART", np.zeros(7), tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[:2] == ["group,action,delta_vs_all", "HEART,0,0.0"]
    write_svg(curves, tmp_path / "c.svg", title="curves")
    svg = (tmp_path / "c.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2

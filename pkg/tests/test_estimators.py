import itertools
import json
import math

import numpy as np
import pytest

from gumbel_crf import autodiff as ad
from gumbel_crf import estimators as est
from gumbel_crf import golden
from gumbel_crf.checks import cell_stream, objective_for
from gumbel_crf.crf_core import PotentialTable, enumerate_posterior, forward
from gumbel_crf.sampling import GumbelNoiseStream, ffbs_many


def linear(pot, seed=0):
    return est.linear_objective(np.random.default_rng(seed).standard_normal((pot.T, pot.K)))


def fd_exact(f, pot):
    vec = est.flatten_params(pot)
    return ad.finite_diff(lambda v: est.exact_expectation(f, est.unflatten_params(v, pot.K, pot.T)), [vec])[0]


# -- exact oracle ---------------------------------------------------------------------


def test_exact_gradient_of_constant_is_zero():
    pot = PotentialTable.random(3, 3, seed=1)
    np.testing.assert_allclose(est.exact_gradient(est.constant_objective(2.5), pot), 0.0, atol=1e-12)


def test_exact_gradient_single_step_categorical():
    # p = softmax(init + emit); d E[f] / d theta_k = p_k (f_k - E[f])
    pot = PotentialTable(np.zeros((2, 2)), np.array([[0.3, -0.4]]), np.array([0.1, 0.5]))
    fvals = np.array([1.5, -2.0])
    f = est.linear_objective(fvals[None])
    logits = pot.log_initial + pot.log_emission[0]
    p = np.exp(logits - np.logaddexp.reduce(logits))
    want = p * (fvals - p @ fvals)
    g = est.exact_gradient(f, pot)
    np.testing.assert_allclose(g[:4], 0.0, atol=1e-15)
    np.testing.assert_allclose(g[4:6], want, atol=1e-14)
    np.testing.assert_allclose(g[6:], want, atol=1e-14)


def test_exact_gradient_matches_finite_differences():
    pot = golden.get("bench-k3t3").table()
    f = objective_for(golden.get("bench-k3t3"))
    assert ad.relative_error(est.exact_gradient(f, pot), fd_exact(f, pot)) < 1e-8


def test_flatten_round_trip():
    pot = PotentialTable.random(3, 4, seed=2)
    back = est.unflatten_params(est.flatten_params(pot), 3, 4)
    np.testing.assert_array_equal(back.log_emission, pot.log_emission)
    assert est.flatten_params(pot).size == 9 + 12 + 3


# -- variance ratio and reports -----------------------------------------------------------


def test_variance_ratio_value():
    g = np.array([[1.0, 2.0], [3.0, 2.0]])
    vr = est.variance_ratio(g)
    # variances (2, 0), mean (2, 2)
    assert vr.value == pytest.approx(math.log(1.0 / math.sqrt(8.0)), abs=1e-14)
    assert not vr.degenerate


def test_variance_ratio_degenerate_cases():
    assert est.variance_ratio(np.ones((5, 3))).degenerate
    assert math.isnan(est.variance_ratio(np.ones((5, 3))).value)
    assert est.variance_ratio(np.array([[1.0, -1.0], [-1.0, 1.0]])).degenerate
    with pytest.raises(ValueError, match="two"):
        est.variance_ratio(np.ones((1, 3)))


def test_report_serialises_to_json():
    pot = PotentialTable.random(2, 2, seed=0)
    rep = est.gumbel_crf(linear(pot), pot, 0.5, 2, GumbelNoiseStream(0), replications=10,
                         oracle=np.zeros(est.flatten_params(pot).size))
    doc = json.loads(rep.to_json())
    assert doc["estimator"] == "gumbel_crf" and doc["n_samples"] == 20 and doc["n_estimates"] == 10
    assert len(doc["mean"]) == 10 and doc["tau"] == 0.5
    single = est.gumbel_crf(linear(pot), pot, 0.5, 1, GumbelNoiseStream(0))
    assert single.degenerate and json.loads(single.to_json())["variance_ratio"] is None


def test_budget_validation():
    pot = PotentialTable.random(2, 2, seed=0)
    f = linear(pot)
    with pytest.raises(ValueError, match="n_samples >= 2"):
        est.reinforce_ms(f, pot, 1, GumbelNoiseStream(0))
    with pytest.raises(ValueError):
        est.gumbel_crf(f, pot, 1.0, 0, GumbelNoiseStream(0))
    with pytest.raises(ValueError, match="unknown estimator"):
        est.run_estimator("nope", f, pot, GumbelNoiseStream(0), n_samples=2)


def test_relaxed_estimators_reject_hard_only_objectives():
    pot = PotentialTable.random(2, 2, seed=0)
    hard_only = est.DownstreamObjective(lambda z: ad.sum(ad.sum(z, axis=2), axis=1), accepts_soft=False, name="h")
    for fn in (est.gumbel_crf, est.gumbel_crf_st, est.pm_mrf, est.pm_mrf_st):
        with pytest.raises(ValueError, match="relaxed"):
            fn(hard_only, pot, 1.0, 1, GumbelNoiseStream(0))
    est.reinforce_ms(hard_only, pot, 2, GumbelNoiseStream(0))


# -- REINFORCE ----------------------------------------------------------------------------


def test_reinforce_constant_objective_gives_zero_gradients():
    pot = PotentialTable.random(3, 3, seed=1)
    rep = est.reinforce_ms(est.constant_objective(4.0), pot, 4, GumbelNoiseStream(0), replications=50)
    np.testing.assert_array_equal(rep.estimates, 0.0)


def test_reinforce_ms_c_with_zero_c_equals_ms():
    pot = PotentialTable.random(3, 3, seed=1)
    f = linear(pot)
    a = est.reinforce_ms(f, pot, 3, GumbelNoiseStream(5), replications=20)
    b = est.reinforce_ms_c(f, pot, 3, 0.0, GumbelNoiseStream(5), replications=20)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_reinforce_uses_ffbs_paths_from_the_shared_stream():
    pot = PotentialTable.random(3, 3, seed=1)
    f = linear(pot)
    paths = ffbs_many(pot, forward(pot), GumbelNoiseStream(5), 6)
    rep = est.reinforce_ms(f, pot, 3, GumbelNoiseStream(5), replications=2)
    assert rep.objective == pytest.approx(np.mean(f.hard_values(paths, 3)), abs=1e-14)


def test_reinforce_ms_c_constant_objective_is_unbiased():
    # with f constant only the -c term survives, and E[grad log q] = 0
    inst = golden.get("est-k2t2")
    pot = inst.table()
    rep = est.reinforce_ms_c(est.constant_objective(1.0), pot, 5, 1.0, cell_stream(0, "t", "msc-const"),
                             replications=4000)
    assert np.max(np.abs(rep.z_scores(np.zeros_like(rep.mean)))) < 3.5


@pytest.mark.parametrize("name", ["reinforce_ms", "reinforce_ms_c"])
def test_score_function_estimators_are_unbiased(name):
    inst = golden.get("est-k3t2")
    pot, f = inst.table(), objective_for(inst)
    exact = est.exact_gradient(f, pot)
    rep = est.run_estimator(name, f, pot, cell_stream(1, "unit-unbiased", name), n_samples=5,
                            c=1.0, replications=10_000, oracle=exact)
    z = rep.z_scores(exact)
    # P components, one 3.5-sigma band each
    assert np.max(np.abs(z)) < 3.5


@pytest.mark.parametrize("N, c", [(2, 0.0), (3, 0.0), (3, 1.3), (4, -0.5)])
def test_exact_reinforce_variance_matches_tuple_enumeration(N, c):
    # enumerate every N-tuple of paths and take the variance of the estimate directly
    pot = PotentialTable.random(2, 2, seed=3)
    f = est.quadratic_objective(2, 2, 1)
    post = enumerate_posterior(pot)
    s = est.path_scores(pot, post.paths)
    fv = f.hard_values(post.paths, 2)
    vals, ws = [], []
    for idx in itertools.product(range(len(post.probs)), repeat=N):
        idx = list(idx)
        r = fv[idx]
        base = (r.sum() - r) / (N - 1)
        vals.append(((r - base - c)[:, None] * s[idx]).mean(axis=0))
        ws.append(np.prod(post.probs[idx]))
    vals, ws = np.array(vals), np.array(ws)
    mean = ws @ vals
    np.testing.assert_allclose(mean, est.exact_gradient(f, pot), atol=1e-14)
    np.testing.assert_allclose(ws @ (vals - mean) ** 2, est.reinforce_ms_variance(f, pot, N, c), atol=1e-14)


def test_exact_reinforce_variance_matches_sampled_spread():
    inst = golden.get("est-k3t2")
    pot, f = inst.table(), objective_for(inst)
    rep = est.reinforce_ms(f, pot, 4, cell_stream(2, "unit-var"), replications=20_000)
    exact = est.reinforce_ms_variance(f, pot, 4)
    # rare-path components have heavy-tailed sample variances; compare the total
    assert rep.variance.sum() == pytest.approx(exact.sum(), rel=0.03)
    np.testing.assert_allclose(rep.variance, exact, rtol=0.25)
    with pytest.raises(ValueError):
        est.reinforce_ms_variance(f, pot, 1)


def test_path_scores_average_to_zero():
    pot = PotentialTable.random(3, 3, seed=5)
    post = enumerate_posterior(pot)
    np.testing.assert_allclose(post.probs @ est.path_scores(pot, post.paths), 0.0, atol=1e-13)


def test_leave_one_out_flag_changes_baseline():
    pot = PotentialTable.random(3, 3, seed=1)
    f = linear(pot)
    a = est.reinforce_ms(f, pot, 3, GumbelNoiseStream(5), replications=5)
    b = est.reinforce_ms(f, pot, 3, GumbelNoiseStream(5), replications=5, leave_one_out=False)
    assert not np.allclose(a.estimates, b.estimates)


# -- relaxed estimators -------------------------------------------------------------------


@pytest.mark.parametrize("sampler, fn", [("ffbs", est.gumbel_crf), ("viterbi", est.pm_mrf)])
def test_relaxed_estimators_match_frozen_noise_finite_differences(sampler, fn):
    inst = golden.get("est-k3t3")
    pot, f = inst.table(), objective_for(inst)
    g = GumbelNoiseStream(3).gumbel((4, pot.T, pot.K))
    rep = fn(f, pot, 0.5, 4, GumbelNoiseStream.fixed(g))
    fd = ad.finite_diff(lambda v: est.relaxed_objective(f, est.unflatten_params(v, 3, 3), g, 0.5, sampler),
                        [est.flatten_params(pot)])[0]
    assert ad.relative_error(rep.mean, fd) < 1e-7


def test_pm_mrf_zero_noise_matches_finite_differences():
    pot = PotentialTable.random(3, 4, seed=4)
    f = linear(pot, 2)
    g = np.zeros((1, 4, 3))
    rep = est.pm_mrf(f, pot, 0.7, 1, GumbelNoiseStream.zeros())
    fd = ad.finite_diff(lambda v: est.relaxed_objective(f, est.unflatten_params(v, 3, 4), g, 0.7, "viterbi"),
                        [est.flatten_params(pot)])[0]
    assert ad.relative_error(rep.mean, fd) < 1e-7


def test_objective_independent_of_z_gives_zero_gradient():
    pot = PotentialTable.random(3, 3, seed=1)
    for fn in (est.gumbel_crf, est.gumbel_crf_st, est.pm_mrf, est.pm_mrf_st):
        rep = fn(est.constant_objective(1.0), pot, 0.5, 3, GumbelNoiseStream(0), replications=3)
        np.testing.assert_array_equal(rep.estimates, 0.0)


def test_straight_through_forward_uses_hard_path():
    pot = PotentialTable.random(3, 3, seed=1)
    f = linear(pot)
    g = GumbelNoiseStream(7).gumbel((8, 3, 3))
    paths = ffbs_many(pot, forward(pot), GumbelNoiseStream.fixed(g), 8)
    st = est.gumbel_crf_st(f, pot, 0.5, 8, GumbelNoiseStream.fixed(g))
    soft = est.gumbel_crf(f, pot, 0.5, 8, GumbelNoiseStream.fixed(g))
    assert st.objective == pytest.approx(np.mean(f.hard_values(paths, 3)), abs=1e-14)
    assert soft.objective != pytest.approx(st.objective, abs=1e-6)


def test_straight_through_backward_on_linear_objective():
    # for a linear f the adjoint into the soft rows is w under both variants,
    # so the ST and non-ST gradients coincide
    pot = PotentialTable.random(2, 2, seed=3)
    f = linear(pot, 5)
    g = GumbelNoiseStream(1).gumbel((1, 2, 2))
    a = est.gumbel_crf_st(f, pot, 0.8, 1, GumbelNoiseStream.fixed(g))
    b = est.gumbel_crf(f, pot, 0.8, 1, GumbelNoiseStream.fixed(g))
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-14)
    assert np.linalg.norm(a.mean) > 0


def test_gumbel_crf_st_bias_on_benchmark_is_within_bounds():
    inst = golden.get("bench-k3t3")
    pot, f = inst.table(), objective_for(inst)
    b = inst.bounds
    rep = est.gumbel_crf_st(f, pot, b["st_tau"], 1, cell_stream(0, "unit-st-bias"),
                            replications=b["st_replications"], oracle=est.exact_gradient(f, pot))
    assert b["gumbel_crf_st_bias_floor"] <= rep.bias_norm <= b["gumbel_crf_st_bias_ceiling"]


def test_pm_mrf_st_more_biased_than_gumbel_st_on_adversarial_instance():
    inst = golden.get("pm-adversarial")
    pot, f = inst.table(), objective_for(inst)
    exact = est.exact_gradient(f, pot)
    gs = est.gumbel_crf_st(f, pot, 1.0, 1, cell_stream(0, "unit-adv", "g"), replications=20_000, oracle=exact)
    ps = est.pm_mrf_st(f, pot, 1.0, 1, cell_stream(0, "unit-adv", "p"), replications=20_000, oracle=exact)
    assert ps.bias_norm > gs.bias_norm


def test_estimators_share_noise_under_a_seed():
    pot = PotentialTable.random(3, 3, seed=1)
    f = linear(pot)
    a = est.run_estimator("gumbel_crf", f, pot, GumbelNoiseStream(9), n_samples=2, replications=3)
    b = est.run_estimator("gumbel_crf", f, pot, GumbelNoiseStream(9), n_samples=2, replications=3)
    np.testing.assert_array_equal(a.estimates, b.estimates)

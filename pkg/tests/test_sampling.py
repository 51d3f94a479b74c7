import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gumbel_crf.checks import chi_square_gof, total_variation
from gumbel_crf.crf_core import PotentialTable, enumerate_posterior, forward, viterbi
from gumbel_crf.sampling import (
    GumbelNoiseStream,
    ffbs,
    ffbs_many,
    gumbel_max,
    gumbel_softmax,
    gumbelized_ffbs,
    gumbelized_ffbs_many,
    perturb,
    perturb_and_map,
    perturb_and_map_many,
    perturbed_table,
    relaxed_viterbi,
    relaxed_viterbi_trellis,
)

sys.path.insert(0, str(Path(__file__).parent))
from oracles import prob_near_one_hot  # noqa: E402


def forced(path, K):
    emit = np.full((len(path), K), -np.inf)
    emit[np.arange(len(path)), path] = 0.0
    return PotentialTable(np.zeros((K, K)), emit, np.zeros(K))


# -- noise stream ---------------------------------------------------------------------


def test_stream_is_reproducible_and_clamped():
    a, b = GumbelNoiseStream(7), GumbelNoiseStream(7)
    assert a.gumbel((5, 3)).tobytes() == b.gumbel((5, 3)).tobytes()
    u = GumbelNoiseStream(1, eps=0.25).uniform(1000)
    assert u.min() >= 0.25 and u.max() <= 0.75


def test_stream_state_round_trip():
    s = GumbelNoiseStream(3)
    s.gumbel(4)
    state = s.state()
    x = s.gumbel(6)
    s.set_state(state)
    np.testing.assert_array_equal(s.gumbel(6), x)


def test_spawned_streams_are_distinct_and_reproducible():
    m = GumbelNoiseStream(11)
    w0, w1 = m.spawn(0).gumbel(8), m.spawn(1).gumbel(8)
    assert not np.array_equal(w0, w1)
    np.testing.assert_array_equal(GumbelNoiseStream(11).spawn(1).gumbel(8), w1)


def test_fixed_noise_checks_shape():
    s = GumbelNoiseStream.fixed(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        s.gumbel((3, 2))


def test_gumbel_moments():
    g = GumbelNoiseStream(0).gumbel(200_000)
    assert abs(g.mean() - 0.5772156649) < 0.01
    assert abs(g.var() - math.pi**2 / 6) < 0.03


# -- gumbel max / softmax ----------------------------------------------------------------


def test_gumbel_max_trivial():
    s = GumbelNoiseStream(0)
    assert gumbel_max(np.array([0.3]), s) == 0
    assert all(gumbel_max(np.array([0.0, -np.inf]), s) == 0 for _ in range(100))
    with pytest.raises(ValueError):
        gumbel_max(np.array([-np.inf, -np.inf]), s)


def test_gumbel_max_frequencies():
    p = np.array([0.2, 0.3, 0.5])
    s = GumbelNoiseStream(5)
    n = 100_000
    draws = np.array([gumbel_max(np.log(p), s) for _ in range(n)])
    freq = np.bincount(draws, minlength=3) / n
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / n))
    assert chi_square_gof(np.bincount(draws, minlength=3), p)[0] > 1e-3


def test_gumbel_softmax_zero_noise_returns_pi():
    p = np.array([0.1, 0.6, 0.3])
    soft, hard = gumbel_softmax(np.log(p), GumbelNoiseStream.zeros(), 1.0)
    np.testing.assert_allclose(soft, p, atol=1e-15)
    assert hard == 1


def test_gumbel_softmax_high_temperature_flattens():
    soft, _ = gumbel_softmax(np.log([0.2, 0.3, 0.5]), GumbelNoiseStream(1), 1e6)
    assert np.max(np.abs(soft - 1 / 3)) < 1e-5


def test_gumbel_softmax_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros(3), GumbelNoiseStream(0), 0.0)
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros(3), GumbelNoiseStream(0), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0), st.integers(1, 6))
def test_gumbel_softmax_coupling(seed, tau, K):
    log_pi = GumbelNoiseStream(seed + 1).gumbel(K)
    soft, hard = gumbel_softmax(log_pi, GumbelNoiseStream(seed), tau)
    assert np.all(soft >= 0) and abs(soft.sum() - 1) < 1e-9
    assert int(np.argmax(soft)) == hard


def test_low_temperature_deviation_rate_matches_quadrature():
    # the near-one-hot rate at tau = 0.01 is governed by near-ties of the top two
    # perturbed scores; compare the simulated rate with the exact integral
    log_pi = np.log([0.2, 0.3, 0.5])
    s = GumbelNoiseStream(2024)
    n = 10_000
    dev = []
    for _ in range(n):
        soft, hard = gumbel_softmax(log_pi, s, 0.01)
        dev.append(np.max(np.abs(soft - np.eye(3)[hard])))
    rate = np.mean(np.array(dev) > 1e-3)
    exact = 1.0 - prob_near_one_hot(log_pi, 0.01, 1e-3)
    assert exact == pytest.approx(0.04241, abs=2e-4)
    assert abs(rate - exact) < 3 * math.sqrt(exact * (1 - exact) / n)


# -- FFBS ----------------------------------------------------------------------------------


def test_ffbs_trivial_cases():
    pot = PotentialTable.uniform(1, 4)
    assert ffbs(pot, forward(pot), GumbelNoiseStream(0)).states == (0, 0, 0, 0)
    pot = forced([1, 0, 2], 3)
    s = GumbelNoiseStream(0)
    assert all(ffbs(pot, forward(pot), s).states == (1, 0, 2) for _ in range(50))


def test_ffbs_total_variation():
    pot = PotentialTable.random(3, 4, seed=1)
    post = enumerate_posterior(pot)
    paths = ffbs_many(pot, forward(pot), GumbelNoiseStream(3), 100_000)
    assert total_variation(post, paths, 3) < 0.02


def test_ffbs_many_matches_repeated_single_draws():
    pot = PotentialTable.random(3, 3, seed=2)
    tr = forward(pot)
    s = GumbelNoiseStream(9)
    single = np.array([ffbs(pot, tr, s).states for _ in range(20)])
    np.testing.assert_array_equal(ffbs_many(pot, tr, GumbelNoiseStream(9), 20), single)


@pytest.mark.parametrize("tau", [1.0, 0.3, 0.01])
def test_gumbelized_ffbs_hard_path_equals_ffbs(tau):
    pot = PotentialTable.random(4, 5, seed=3)
    tr = forward(pot)
    a, b = GumbelNoiseStream(4), GumbelNoiseStream(4)
    for _ in range(200):
        assert ffbs(pot, tr, a) == gumbelized_ffbs(pot, tr, b, tau).hard


def test_gumbelized_ffbs_total_variation():
    pot = PotentialTable.random(3, 4, seed=1)
    post = enumerate_posterior(pot)
    hard, _ = gumbelized_ffbs_many(pot, forward(pot), GumbelNoiseStream(8), 0.5, 100_000)
    assert total_variation(post, hard, 3) < 0.02


def test_gumbelized_ffbs_low_temperature_rate_matches_simulated_rows():
    # a path deviates when any of its rows does; the per-row rate follows the
    # same near-tie law as a single Gumbel-Softmax draw
    pot = PotentialTable.random(3, 4, seed=1)
    hard, soft = gumbelized_ffbs_many(pot, forward(pot), GumbelNoiseStream(1), 0.01, 10_000)
    onehot = np.eye(3)[hard]
    dev = np.max(np.abs(soft - onehot), axis=(1, 2))
    assert np.all(np.argmax(soft, axis=2) == hard)
    assert 0.0 < np.mean(dev > 1e-3) < 0.2


def test_gumbelized_ffbs_rejects_nonpositive_tau():
    pot = PotentialTable.uniform(2, 2)
    with pytest.raises(ValueError):
        gumbelized_ffbs(pot, forward(pot), GumbelNoiseStream(0), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000), st.sampled_from([1.0, 0.1, 0.01]))
def test_relaxed_path_invariants(K, T, seed, tau):
    pot = PotentialTable.random(K, T, seed, 2.0)
    rp = gumbelized_ffbs(pot, forward(pot), GumbelNoiseStream(seed), tau)
    assert np.all(rp.soft >= 0)
    np.testing.assert_allclose(rp.soft.sum(axis=1), 1.0, atol=1e-9)
    assert tuple(np.argmax(rp.soft, axis=1)) == rp.hard.states


def test_temperature_monotone_on_shared_noise():
    pot = PotentialTable.random(3, 4, seed=6)
    tr = forward(pot)
    g = GumbelNoiseStream(0).gumbel((2000, 4, 3))
    means = []
    for tau in (1.0, 0.5, 0.1, 0.01):
        hard, soft = gumbelized_ffbs_many(pot, tr, GumbelNoiseStream.fixed(g), tau, 2000)
        means.append(np.mean(np.max(np.abs(soft - np.eye(3)[hard]), axis=(1, 2))))
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_samplers_are_deterministic():
    pot = PotentialTable.random(3, 3, seed=4)
    tr = forward(pot)
    a = gumbelized_ffbs_many(pot, tr, GumbelNoiseStream(5), 0.5, 50)
    b = gumbelized_ffbs_many(pot, tr, GumbelNoiseStream(5), 0.5, 50)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    np.testing.assert_array_equal(perturb_and_map_many(pot, GumbelNoiseStream(5), 50),
                                  perturb_and_map_many(pot, GumbelNoiseStream(5), 50))


# -- perturb and MAP ------------------------------------------------------------------------


def test_pm_trivial_cases():
    assert perturb_and_map(PotentialTable.uniform(1, 3), GumbelNoiseStream(0)).states == (0, 0, 0)
    pot = PotentialTable.random(3, 5, seed=1)
    assert perturb_and_map(pot, GumbelNoiseStream.zeros()) == viterbi(pot)


def test_pm_noise_layout_is_back_to_front():
    pot = PotentialTable.random(3, 4, seed=1)
    g = GumbelNoiseStream(2).gumbel((4, 3))
    _, emit, _ = perturb(pot, GumbelNoiseStream.fixed(g))
    np.testing.assert_allclose(emit, pot.log_emission + g[::-1])


def test_pm_many_matches_single():
    pot = PotentialTable.random(3, 4, seed=7)
    s = GumbelNoiseStream(3)
    single = np.array([perturb_and_map(pot, s).states for _ in range(30)])
    np.testing.assert_array_equal(perturb_and_map_many(pot, GumbelNoiseStream(3), 30), single)


def test_pm_transition_perturbation_option():
    pot = PotentialTable.random(3, 4, seed=7)
    _, _, trans = perturb(pot, GumbelNoiseStream(0), perturb_transitions=True)
    assert trans.shape == (3, 3, 3)
    path = perturb_and_map(pot, GumbelNoiseStream(0), perturb_transitions=True)
    assert len(path) == 4


def test_pm_is_exact_for_a_single_step():
    # with T = 1 the perturbed argmax is a Gumbel-Max draw
    pot = PotentialTable.random(4, 1, seed=2)
    post = enumerate_posterior(pot)
    paths = perturb_and_map_many(pot, GumbelNoiseStream(1), 100_000)
    assert total_variation(post, paths, 4) < 0.01


# -- relaxed viterbi -------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000), st.sampled_from([1.0, 0.1, 0.01]))
def test_relaxed_viterbi_hard_path_is_viterbi(K, T, seed, tau):
    pert = perturbed_table(PotentialTable.random(K, T, seed), GumbelNoiseStream(seed))
    rp = relaxed_viterbi(pert, tau)
    assert rp.hard == viterbi(pert)
    np.testing.assert_allclose(rp.soft.sum(axis=1), 1.0, atol=1e-9)
    trellis = relaxed_viterbi_trellis(pert, tau)
    np.testing.assert_allclose(trellis.b.sum(axis=1), 1.0, atol=1e-9)


def test_relaxed_viterbi_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        relaxed_viterbi(PotentialTable.uniform(2, 2), 0.0)


def test_relaxed_viterbi_low_temperature_is_nearly_hard():
    pot = PotentialTable.random(3, 4, seed=2)
    s = GumbelNoiseStream(0)
    devs = np.array([relaxed_viterbi(perturbed_table(pot, s), 0.01).deviation() for _ in range(2000)])
    # near-ties between competing predecessors keep a few percent of paths soft
    assert np.median(devs) < 1e-6
    assert np.mean(devs < 1e-3) > 0.8

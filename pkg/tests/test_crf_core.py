import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gumbel_crf.crf_core import (
    ExactPosterior,
    HardPath,
    PotentialTable,
    backward,
    entropy,
    enumerate_posterior,
    forward,
    logsumexp,
    marginals,
    path_log_prob,
    path_score,
    viterbi,
)


def forced_table(path, K, strength=-math.inf):
    """Emissions that allow only ``path``."""
    T = len(path)
    emit = np.full((T, K), strength)
    emit[np.arange(T), path] = 0.0
    return PotentialTable(np.zeros((K, K)), emit, np.zeros(K))


tables = st.builds(
    lambda K, T, seed, scale: PotentialTable.random(K, T, seed, scale),
    st.integers(1, 4),
    st.integers(1, 5),
    st.integers(0, 10_000),
    st.sampled_from([0.1, 1.0, 3.0]),
)


# -- construction ---------------------------------------------------------------


def test_table_rejects_nan_and_bad_shapes():
    with pytest.raises(ValueError):
        PotentialTable(np.zeros((2, 2)), np.array([[0.0, np.nan]]), np.zeros(2))
    with pytest.raises(ValueError):
        PotentialTable(np.zeros((2, 3)), np.zeros((1, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        PotentialTable(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        PotentialTable(np.zeros((2, 2)), np.zeros((1, 2)), np.array([0.0, np.inf]))


def test_table_arrays_are_read_only():
    pot = PotentialTable.random(2, 2, 0)
    with pytest.raises(ValueError):
        pot.log_emission[0, 0] = 1.0


def test_json_round_trip_keeps_forbidden_factors(tmp_path):
    trans = np.array([[0.0, -np.inf], [1.5, -0.25]])
    pot = PotentialTable(trans, np.array([[0.1, 0.2], [0.3, -np.inf]]), np.array([0.0, -1.0]))
    doc = json.loads(pot.to_json())
    assert doc["K"] == 2 and doc["T"] == 2
    back = PotentialTable.from_json(pot.to_json())
    np.testing.assert_array_equal(back.log_transition, pot.log_transition)
    np.testing.assert_array_equal(back.log_emission, pot.log_emission)
    path = tmp_path / "t.json"
    pot.to_json(path)
    np.testing.assert_array_equal(PotentialTable.from_json(path).log_initial, pot.log_initial)


def test_json_accepts_string_sentinel_and_rejects_malformed():
    text = '{"K": 1, "T": 1, "log_transition": [[0]], "log_emission": [["-inf"]], "log_initial": [0]}'
    assert PotentialTable.from_json(text).log_emission[0, 0] == -math.inf
    with pytest.raises(ValueError):
        PotentialTable.from_json('{"K": 1, "T": 1, "log_transition": [[0]]')
    with pytest.raises(ValueError):
        PotentialTable.from_json('{"K": 1, "T": 1, "log_transition": [[0]], "log_emission": [[0]]}')
    with pytest.raises(ValueError):
        PotentialTable.from_json('{"K": 2, "T": 1, "log_transition": [[0]], "log_emission": [[0]], "log_initial": [0]}')


# -- forward / backward -----------------------------------------------------------


def test_forward_single_state():
    assert forward(PotentialTable.uniform(1, 3)).log_Z == 0.0


def test_forward_uniform_counts_paths():
    assert forward(PotentialTable.uniform(3, 2)).log_Z == pytest.approx(math.log(9), abs=1e-14)


def test_forward_matches_enumeration_seeded():
    pot = PotentialTable.random(3, 4, seed=1)
    post = enumerate_posterior(pot)
    scores = [path_score(pot, p) for p, _ in post.items()]
    assert abs(forward(pot).log_Z - logsumexp(np.array(scores))) < 1e-10
    # frozen value from the enumeration oracle
    assert forward(pot).log_Z == pytest.approx(6.060589584788916, abs=1e-10)


def test_forward_all_forbidden_reports_minus_inf():
    pot = PotentialTable(np.zeros((2, 2)), np.full((2, 2), -np.inf), np.zeros(2))
    assert forward(pot).log_Z == -math.inf


def test_backward_single_state_is_zero():
    np.testing.assert_array_equal(backward(PotentialTable.uniform(1, 4)).log_beta, 0.0)


def test_backward_uniform_symmetric():
    beta = backward(PotentialTable.uniform(2, 3)).log_beta
    assert beta[0, 0] == beta[0, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 10_000))
def test_forward_backward_agree(K, T, seed):
    pot = PotentialTable.random(K, T, seed, scale=2.0)
    lz_b = logsumexp(pot.log_initial + pot.log_emission[0] + backward(pot).log_beta[0])
    assert abs(forward(pot).log_Z - lz_b) < 1e-10


# -- path probabilities ------------------------------------------------------------


def test_path_log_prob_trivial_cases():
    assert path_log_prob(PotentialTable.uniform(1, 4), [0, 0, 0, 0]) == 0.0
    for p in [(0, 0), (1, 2), (2, 1)]:
        assert path_log_prob(PotentialTable.uniform(3, 2), p) == pytest.approx(-math.log(9), abs=1e-14)


def test_path_log_prob_matches_enumeration():
    pot = PotentialTable.random(3, 3, seed=5)
    post = enumerate_posterior(pot)
    trellis = forward(pot)
    for path, lp in zip(post.paths, post.log_probs):
        assert abs(path_log_prob(pot, HardPath(path), trellis) - lp) < 1e-10


def test_path_length_and_range_errors():
    pot = PotentialTable.uniform(2, 3)
    with pytest.raises(ValueError):
        path_log_prob(pot, [0, 1])
    with pytest.raises(ValueError):
        path_score(pot, [0, 1, 2])


# -- marginals and entropy ------------------------------------------------------------


def test_marginals_trivial():
    np.testing.assert_array_equal(marginals(PotentialTable.uniform(1, 3)), np.ones((3, 1)))
    np.testing.assert_allclose(marginals(PotentialTable.uniform(4, 3)), 0.25, atol=1e-15)


def test_marginals_match_enumeration():
    pot = PotentialTable.random(3, 4, seed=1)
    post = enumerate_posterior(pot)
    mu = marginals(pot)
    assert np.max(np.abs(mu - post.marginals(3))) < 1e-10
    np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-10)


def test_entropy_forced_path_is_zero():
    assert entropy(forced_table([0, 2, 1, 1], 3)) == 0.0


def test_entropy_uniform():
    assert entropy(PotentialTable.uniform(2, 3)) == pytest.approx(math.log(8), abs=1e-12)


def test_entropy_matches_enumeration():
    pot = PotentialTable.random(3, 4, seed=1)
    assert abs(entropy(pot) - enumerate_posterior(pot).entropy()) < 1e-8
    # frozen value from the enumeration oracle
    assert entropy(pot) == pytest.approx(3.7421193311502545, abs=1e-8)


def test_entropy_with_forbidden_transitions():
    trans = np.array([[0.0, -np.inf, 0.3], [0.2, 0.0, -np.inf], [-np.inf, 0.5, 0.1]])
    pot = PotentialTable(trans, np.random.default_rng(3).standard_normal((4, 3)), np.array([0.0, -np.inf, 0.2]))
    assert abs(entropy(pot) - enumerate_posterior(pot).entropy()) < 1e-10


# -- viterbi ------------------------------------------------------------------------


def test_viterbi_trivial():
    assert viterbi(PotentialTable.uniform(1, 3)).states == (0, 0, 0)
    assert viterbi(forced_table([2, 0, 1], 3)).states == (2, 0, 1)


def test_viterbi_ties_go_to_lowest_index():
    assert viterbi(PotentialTable.uniform(3, 4)).states == (0, 0, 0, 0)


def test_viterbi_matches_enumeration():
    pot = PotentialTable.random(3, 4, seed=1)
    post = enumerate_posterior(pot)
    assert viterbi(pot).states == tuple(post.paths[np.argmax(post.log_probs)])


# -- enumeration ----------------------------------------------------------------------


def test_enumeration_trivial():
    post = enumerate_posterior(PotentialTable.uniform(1, 3))
    assert post.paths.shape == (1, 3) and post.probs[0] == 1.0
    np.testing.assert_allclose(enumerate_posterior(PotentialTable.uniform(2, 2)).probs, 0.25)


def test_enumeration_normalised_and_indexed():
    pot = PotentialTable.random(4, 3, seed=9)
    post = enumerate_posterior(pot)
    assert abs(post.probs.sum() - 1.0) < 1e-10
    assert isinstance(post, ExactPosterior)
    np.testing.assert_array_equal(post.index_of(post.paths, 4), np.arange(len(post.paths)))


def test_enumeration_cap():
    with pytest.raises(ValueError, match="oracle-scale"):
        enumerate_posterior(PotentialTable.uniform(4, 6), cap=1000)


# -- properties -----------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(tables)
def test_enumeration_equivalence(pot):
    post = enumerate_posterior(pot)
    assert abs(forward(pot).log_Z - post.log_Z) < 1e-10
    assert np.max(np.abs(marginals(pot) - post.marginals(pot.K))) < 1e-10
    assert abs(entropy(pot) - post.entropy()) < 1e-8
    best = post.log_probs.max()
    assert abs(path_log_prob(pot, viterbi(pot)) - best) < 1e-10


@settings(max_examples=40, deadline=None)
@given(tables, st.data(), st.floats(-20, 20))
def test_shifting_one_step(pot, data, c):
    t = data.draw(st.integers(0, pot.T - 1))
    shifted = pot.shift_step(t, c)
    assert abs(forward(shifted).log_Z - (forward(pot).log_Z + c)) < 1e-9
    assert np.max(np.abs(marginals(shifted) - marginals(pot))) < 1e-9
    assert abs(entropy(shifted) - entropy(pot)) < 1e-8
    assert viterbi(shifted).states == viterbi(pot).states


@settings(max_examples=20, deadline=None)
@given(tables)
def test_dp_is_bit_deterministic(pot):
    a, b = forward(pot), forward(pot)
    assert np.array_equal(a.log_alpha, b.log_alpha) and a.log_Z == b.log_Z
    assert entropy(pot) == entropy(pot)
    assert np.array_equal(marginals(pot), marginals(pot))

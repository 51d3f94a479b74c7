"""Synthetic HMM data with an exact likelihood oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crf_core import PotentialTable, forward


@dataclass(frozen=True)
class HMMGenerator:
    """Ground-truth HMM; ``initial`` is the stationary distribution of ``transition``."""

    initial: np.ndarray  # (K,)
    transition: np.ndarray  # (K, K), rows sum to 1
    emission: np.ndarray  # (K, V), rows sum to 1

    @property
    def K(self) -> int:
        return self.transition.shape[0]

    @property
    def V(self) -> int:
        return self.emission.shape[1]

    def posterior_table(self, x: np.ndarray) -> PotentialTable:
        """Table of p(z | x); its log-partition is log p(x)."""
        with np.errstate(divide="ignore"):
            return PotentialTable(
                np.log(self.transition), np.log(self.emission[:, np.asarray(x, dtype=int)].T), np.log(self.initial)
            )

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """(n,) exact log p(x) by the forward algorithm."""
        x = np.atleast_2d(np.asarray(x, dtype=int))
        return np.array([forward(self.posterior_table(row)).log_Z for row in x])

    def nll(self, x: np.ndarray) -> float:
        """Mean per-sequence negative log-likelihood."""
        return float(-np.mean(self.log_likelihood(x)))


@dataclass(frozen=True)
class HMMDataset:
    words: np.ndarray  # (n, T)
    states: np.ndarray  # (n, T)
    generator: HMMGenerator
    seed: int

    def split(self, n_valid: int, n_test: int):
        """``(train, valid, test)`` word arrays, taken in order."""
        n = len(self.words)
        if n_valid + n_test >= n:
            raise ValueError(f"cannot hold out {n_valid + n_test} of {n} sequences")
        a, b = n - n_valid - n_test, n - n_test
        return self.words[:a], self.words[a:b], self.words[b:]


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Left eigenvector of ``transition`` for eigenvalue 1, normalised."""
    vals, vecs = np.linalg.eig(np.asarray(transition).T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    v = np.abs(v)
    return v / v.sum()


def make_generator(K: int, V: int, seed: int, concentration: float = 0.9) -> HMMGenerator:
    """Random HMM whose emission rows put ``concentration`` of their mass on
    a block of words owned by that state."""
    if K < 1 or V < 1:
        raise ValueError("K and V must be positive")
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(K), size=K)
    emission = np.empty((K, V))
    blocks = np.array_split(np.arange(V), K) if V >= K else [np.arange(V)] * K
    for k in range(K):
        owned = np.zeros(V, dtype=bool)
        owned[blocks[k]] = True
        row = np.full(V, (1 - concentration) / V)
        row[owned] += concentration * rng.dirichlet(np.ones(owned.sum()))
        emission[k] = row / row.sum()
    return HMMGenerator(stationary_distribution(transition), transition, emission)


def generate_hmm_dataset(K: int, V: int, T: int, n: int, seed: int) -> HMMDataset:
    """``n`` length-``T`` sequences from a seeded random HMM."""
    gen = make_generator(K, V, seed)
    rng = np.random.default_rng([seed, 1])
    states = np.empty((n, T), dtype=int)
    words = np.empty((n, T), dtype=int)
    cum_t = np.cumsum(gen.transition, axis=1)
    cum_e = np.cumsum(gen.emission, axis=1)
    states[:, 0] = np.minimum(np.searchsorted(np.cumsum(gen.initial), rng.random(n), side="right"), K - 1)
    for t in range(1, T):
        u = rng.random(n)
        states[:, t] = np.minimum((cum_t[states[:, t - 1]] < u[:, None]).sum(axis=1), K - 1)
    u = rng.random((n, T))
    words[:] = np.minimum((cum_e[states] < u[..., None]).sum(axis=2), V - 1)
    return HMMDataset(words, states, gen, seed)

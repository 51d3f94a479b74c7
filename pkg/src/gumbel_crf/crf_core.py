"""Exact log-space dynamic programs for time-homogeneous linear-chain CRFs.

A table holds a K x K transition matrix shared by every step, per-step
emission scores (T x K) and scores for the first state (a virtual,
deterministic start state). ``-inf`` entries mark forbidden factors.

All recursions run in log-space; nothing here allocates probabilities
before the final normalisation.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

DEFAULT_ENUMERATION_CAP = 10**6


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp that maps all ``-inf`` slices to ``-inf``."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class PotentialTable:
    log_transition: np.ndarray
    log_emission: np.ndarray
    log_initial: np.ndarray

    def __post_init__(self):
        trans = np.array(self.log_transition, dtype=float)
        emit = np.array(self.log_emission, dtype=float)
        init = np.array(self.log_initial, dtype=float)
        if emit.ndim != 2 or emit.shape[0] < 1 or emit.shape[1] < 1:
            raise ValueError(f"log_emission must be T x K with T, K >= 1, got {emit.shape}")
        K = emit.shape[1]
        if trans.shape != (K, K):
            raise ValueError(f"log_transition must be {K} x {K}, got {trans.shape}")
        if init.shape != (K,):
            raise ValueError(f"log_initial must have length {K}, got {init.shape}")
        for name, arr in (("log_transition", trans), ("log_emission", emit), ("log_initial", init)):
            if np.isnan(arr).any() or np.isposinf(arr).any():
                raise ValueError(f"{name} contains NaN or +inf")
            arr.setflags(write=False)
        object.__setattr__(self, "log_transition", trans)
        object.__setattr__(self, "log_emission", emit)
        object.__setattr__(self, "log_initial", init)

    @property
    def num_states(self) -> int:
        return self.log_emission.shape[1]

    @property
    def seq_len(self) -> int:
        return self.log_emission.shape[0]

    K = num_states
    T = seq_len

    @classmethod
    def uniform(cls, K: int, T: int) -> "PotentialTable":
        return cls(np.zeros((K, K)), np.zeros((T, K)), np.zeros(K))

    @classmethod
    def random(cls, K: int, T: int, seed: int, scale: float = 1.0) -> "PotentialTable":
        rng = np.random.default_rng(seed)
        return cls(
            scale * rng.standard_normal((K, K)),
            scale * rng.standard_normal((T, K)),
            scale * rng.standard_normal(K),
        )

    def shift_step(self, t: int, c: float) -> "PotentialTable":
        """Add ``c`` to every emission factor of step ``t``."""
        emit = self.log_emission.copy()
        emit[t] += c
        return PotentialTable(self.log_transition, emit, self.log_initial)

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        def enc(a):
            return np.where(np.isneginf(a), None, a).tolist()

        return {
            "K": self.K,
            "T": self.T,
            "log_transition": enc(self.log_transition),
            "log_emission": enc(self.log_emission),
            "log_initial": enc(self.log_initial),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PotentialTable":
        def dec(x):
            # null and "-inf" both mean a forbidden factor
            return np.array(_map_nested(x, _decode_factor), dtype=float)

        try:
            table = cls(dec(doc["log_transition"]), dec(doc["log_emission"]), dec(doc["log_initial"]))
        except KeyError as exc:
            raise ValueError(f"potential table document is missing {exc}") from None
        if ("K" in doc and doc["K"] != table.K) or ("T" in doc and doc["T"] != table.T):
            raise ValueError(
                f"declared K={doc.get('K')}, T={doc.get('T')} disagree with arrays "
                f"(K={table.K}, T={table.T})"
            )
        return table

    def to_json(self, path: Union[str, Path, None] = None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path: Union[str, Path]) -> "PotentialTable":
        if isinstance(text_or_path, Path) or not str(text_or_path).lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        else:
            text = str(text_or_path)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed potential table JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ValueError("potential table JSON must be an object")
        return cls.from_dict(doc)


def _decode_factor(v):
    if v is None:
        return -math.inf
    if isinstance(v, str):
        if v.strip().lower() in ("-inf", "-infinity"):
            return -math.inf
        raise ValueError(f"unrecognised factor value {v!r}")
    return float(v)


def _map_nested(x, fn):
    if isinstance(x, list):
        return [_map_nested(v, fn) for v in x]
    return fn(x)


@dataclass(frozen=True)
class ForwardTrellis:
    log_alpha: np.ndarray
    log_Z: float


@dataclass(frozen=True)
class BackwardTrellis:
    log_beta: np.ndarray


@dataclass(frozen=True)
class HardPath:
    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))

    def __len__(self):
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, i):
        return self.states[i]

    def one_hot(self, K: int) -> np.ndarray:
        out = np.zeros((len(self.states), K))
        out[np.arange(len(self.states)), self.states] = 1.0
        return out


@dataclass(frozen=True)
class ExactPosterior:
    """Every path of a table with its normalised probability.

    ``paths`` is (K**T, T) in lexicographic order; ``probs`` and
    ``log_probs`` are aligned with it. ``log_Z`` is the log-sum-exp of the
    raw path scores, computed independently of the forward recursion.
    """

    paths: np.ndarray
    log_probs: np.ndarray
    log_Z: float

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def items(self):
        for row, p in zip(self.paths, self.probs):
            yield HardPath(row), float(p)

    def index_of(self, paths: np.ndarray, K: int) -> np.ndarray:
        """Row index of each path in ``paths`` (n x T) within this table."""
        paths = np.atleast_2d(paths)
        T = paths.shape[1]
        weights = K ** np.arange(T - 1, -1, -1)
        return paths @ weights

    def marginals(self, K: int) -> np.ndarray:
        T = self.paths.shape[1]
        out = np.zeros((T, K))
        p = self.probs
        for t in range(T):
            np.add.at(out[t], self.paths[:, t], p)
        return out

    def entropy(self) -> float:
        p = self.probs
        mask = p > 0
        return float(-np.sum(p[mask] * self.log_probs[mask]))


def _as_path(path: Union[HardPath, Sequence[int], np.ndarray]) -> np.ndarray:
    states = path.states if isinstance(path, HardPath) else path
    return np.asarray(states, dtype=int)


def forward(pot: PotentialTable) -> ForwardTrellis:
    trans, emit = pot.log_transition, pot.log_emission
    log_alpha = np.empty((pot.T, pot.K))
    log_alpha[0] = pot.log_initial + emit[0]
    for t in range(1, pot.T):
        log_alpha[t] = logsumexp(log_alpha[t - 1][:, None] + trans, axis=0) + emit[t]
    return ForwardTrellis(log_alpha, float(logsumexp(log_alpha[-1])))


def backward(pot: PotentialTable) -> BackwardTrellis:
    trans, emit = pot.log_transition, pot.log_emission
    log_beta = np.zeros((pot.T, pot.K))
    for t in range(pot.T - 2, -1, -1):
        log_beta[t] = logsumexp(trans + (emit[t + 1] + log_beta[t + 1])[None, :], axis=1)
    return BackwardTrellis(log_beta)


def path_score(pot: PotentialTable, path) -> float:
    """Unnormalised log-potential of one path."""
    z = _as_path(path)
    if z.shape != (pot.T,):
        raise ValueError(f"path has length {z.size}, table has T={pot.T}")
    if z.min() < 0 or z.max() >= pot.K:
        raise ValueError(f"path states must lie in [0, {pot.K})")
    score = pot.log_initial[z[0]] + pot.log_emission[np.arange(pot.T), z].sum()
    return float(score + pot.log_transition[z[:-1], z[1:]].sum())


def path_log_prob(pot: PotentialTable, path, trellis: ForwardTrellis | None = None) -> float:
    trellis = trellis or forward(pot)
    return path_score(pot, path) - trellis.log_Z


def marginals(pot: PotentialTable) -> np.ndarray:
    fwd = forward(pot)
    if fwd.log_Z == -math.inf:
        raise ValueError("table assigns zero mass to every path; marginals are undefined")
    bwd = backward(pot)
    return np.exp(fwd.log_alpha + bwd.log_beta - fwd.log_Z)


def _xlogx_weighted(w: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    # w * log w with 0 log 0 = 0
    return np.where(w > 0, w * np.where(w > 0, log_w, 0.0), 0.0)


def entropy(pot: PotentialTable, trellis: ForwardTrellis | None = None) -> float:
    """Entropy of p(z | x) by the forward-style weighted recursion.

    H_{t+1}(j) = sum_i w(i, j) [H_t(i) - log w(i, j)] where
    w(i, j) = p(z_t = i | z_{t+1} = j) = Phi(i, j, x_{t+1}) alpha_t(i) / alpha_{t+1}(j).
    """
    fwd = trellis or forward(pot)
    if fwd.log_Z == -math.inf:
        raise ValueError("table assigns zero mass to every path; entropy is undefined")
    la = fwd.log_alpha
    trans, emit = pot.log_transition, pot.log_emission
    H = np.zeros(pot.K)
    for t in range(pot.T - 1):
        nxt = la[t + 1]
        reachable = np.isfinite(nxt)
        denom = np.where(reachable, nxt, 0.0)
        with np.errstate(invalid="ignore"):
            log_w = la[t][:, None] + trans + emit[t + 1][None, :] - denom[None, :]
        log_w = np.where(reachable[None, :], log_w, -math.inf)
        w = np.exp(log_w)
        H_next = np.sum(np.where(w > 0, w * H[:, None], 0.0), axis=0) - np.sum(_xlogx_weighted(w, log_w), axis=0)
        H = np.where(reachable, H_next, 0.0)
    log_p = la[-1] - fwd.log_Z
    p = np.exp(log_p)
    return float(np.sum(np.where(p > 0, p * H, 0.0)) - np.sum(_xlogx_weighted(p, log_p)))


def viterbi(pot: PotentialTable) -> HardPath:
    """MAP path. Ties go to the lowest state index at every back-pointer."""
    return HardPath(_viterbi_states(pot.log_initial, pot.log_emission, pot.log_transition))


def _viterbi_states(log_initial, log_emission, log_transition) -> np.ndarray:
    # log_transition may be (K, K) or per-step (T - 1, K, K)
    T, K = log_emission.shape
    per_step = np.ndim(log_transition) == 3
    delta = log_initial + log_emission[0]
    back = np.zeros((T, K), dtype=int)
    for t in range(1, T):
        trans = log_transition[t - 1] if per_step else log_transition
        scores = delta[:, None] + trans
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(K)] + log_emission[t]
    states = np.empty(T, dtype=int)
    states[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    return states


def enumerate_posterior(pot: PotentialTable, cap: int = DEFAULT_ENUMERATION_CAP) -> ExactPosterior:
    n_paths = pot.K**pot.T
    if n_paths > cap:
        raise ValueError(
            f"enumerating {pot.K}^{pot.T} = {n_paths} paths exceeds the cap of {cap}; "
            "use an oracle-scale table (smaller K or T)"
        )
    paths = np.array(list(itertools.product(range(pot.K), repeat=pot.T)), dtype=int).reshape(n_paths, pot.T)
    scores = pot.log_initial[paths[:, 0]] + pot.log_emission[np.arange(pot.T), paths].sum(axis=1)
    if pot.T > 1:
        scores = scores + pot.log_transition[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    log_Z = float(logsumexp(scores))
    return ExactPosterior(paths, scores - log_Z, log_Z)

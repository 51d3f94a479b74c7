"""Exact and relaxed path samplers driven by explicit Gumbel noise.

Noise layout
------------
Every sampler consumes one Gumbel vector per time step, taken from a single
``(T, K)`` draw (or ``(n, T, K)`` for ``n`` paths). Row ``i`` of that draw
belongs to step ``T - 1 - i``: the rows are laid out back-to-front in the
order backward sampling visits the steps. FFBS, Gumbelized FFBS and
Perturb-and-MAP all use this layout, so two samplers fed streams with the
same seed see identical noise at identical steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crf_core import ForwardTrellis, HardPath, PotentialTable, _viterbi_states

UNIFORM_EPS = 1e-12


class GumbelNoiseStream:
    """Seeded source of standard Gumbel variates ``-log(-log U)``.

    ``U`` is clamped to ``[eps, 1 - eps]`` before the transform. Streams for
    parallel workers are derived from a master seed with :meth:`spawn`.
    """

    def __init__(self, seed=0, eps: float = UNIFORM_EPS):
        self.seed = seed
        self.eps = eps
        self._seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._rng = np.random.Generator(np.random.PCG64(self._seed_seq))

    def spawn(self, worker: int) -> "GumbelNoiseStream":
        seq = np.random.SeedSequence(self._seed_seq.entropy, spawn_key=self._seed_seq.spawn_key + (worker,))
        return GumbelNoiseStream(seq, self.eps)

    def uniform(self, shape) -> np.ndarray:
        return np.clip(self._rng.random(shape), self.eps, 1.0 - self.eps)

    def gumbel(self, shape) -> np.ndarray:
        return -np.log(-np.log(self.uniform(shape)))

    def state(self) -> dict:
        return self._rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state

    @classmethod
    def zeros(cls) -> "GumbelNoiseStream":
        return _ZeroNoise()

    @classmethod
    def fixed(cls, values: np.ndarray) -> "GumbelNoiseStream":
        """Stream that replays ``values`` on every draw (frozen noise)."""
        return _FixedNoise(values)


class _ZeroNoise(GumbelNoiseStream):
    def __init__(self):
        super().__init__(0)

    def gumbel(self, shape) -> np.ndarray:
        return np.zeros(shape)


class _FixedNoise(GumbelNoiseStream):
    def __init__(self, values):
        super().__init__(0)
        self.values = np.asarray(values, dtype=float)

    def gumbel(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        if self.values.shape != shape:
            raise ValueError(f"frozen noise has shape {self.values.shape}, sampler asked for {shape}")
        return self.values.copy()


@dataclass(frozen=True)
class RelaxedPath:
    hard: HardPath
    soft: np.ndarray
    tau: float

    def deviation(self) -> float:
        """``max |soft - onehot(hard)|`` over the whole T x K matrix."""
        return float(np.max(np.abs(self.soft - self.hard.one_hot(self.soft.shape[1]))))


@dataclass(frozen=True)
class RelaxedViterbiTrellis:
    """Max-scores ``s`` (T x K) and tempered soft back-pointers ``b``.

    ``b[t, :, i]`` is the distribution over the predecessor of state ``i``
    at step ``t``. Step 0 has no predecessor; its slice is uniform and
    never read.
    """

    s: np.ndarray
    b: np.ndarray
    tau: float


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return tau


def _softmax(y: np.ndarray, tau: float) -> np.ndarray:
    y = y / tau
    m = np.max(y, axis=-1, keepdims=True)
    e = np.exp(y - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def gumbel_max(log_pi, noise: GumbelNoiseStream) -> int:
    log_pi = np.asarray(log_pi, dtype=float)
    if not np.isfinite(log_pi).any():
        raise ValueError("gumbel_max needs at least one finite log-probability")
    g = noise.gumbel(log_pi.shape)
    return int(np.argmax(log_pi + g))


def gumbel_softmax(log_pi, noise: GumbelNoiseStream, tau: float):
    """Relaxed one-hot ``softmax((log_pi + g) / tau)`` and its Gumbel-Max index."""
    tau = _check_tau(tau)
    log_pi = np.asarray(log_pi, dtype=float)
    if not np.isfinite(log_pi).any():
        raise ValueError("gumbel_softmax needs at least one finite log-probability")
    y = log_pi + noise.gumbel(log_pi.shape)
    return _softmax(y, tau), int(np.argmax(y))


def _backward_logits(pot: PotentialTable, log_alpha: np.ndarray, t: int, nxt: np.ndarray) -> np.ndarray:
    """log p(z_t | z_{t+1} = nxt, x) for a batch of successor states."""
    # Phi(z_t, z_{t+1}, x_{t+1}) alpha_t(z_t) / alpha_{t+1}(z_{t+1})
    return (
        log_alpha[t][None, :]
        + pot.log_transition[:, nxt].T
        + (pot.log_emission[t + 1, nxt] - log_alpha[t + 1, nxt])[:, None]
    )


def _ffbs_core(pot: PotentialTable, trellis: ForwardTrellis, g: np.ndarray, tau: float | None):
    n, T, K = g.shape
    hard = np.empty((n, T), dtype=int)
    soft = np.empty((n, T, K)) if tau is not None else None
    log_pi = np.broadcast_to(trellis.log_alpha[-1] - trellis.log_Z, (n, K))
    for i, t in enumerate(range(T - 1, -1, -1)):
        if t < T - 1:
            log_pi = _backward_logits(pot, trellis.log_alpha, t, hard[:, t + 1])
        y = log_pi + g[:, i]
        hard[:, t] = np.argmax(y, axis=1)
        if soft is not None:
            soft[:, t] = _softmax(y, tau)
    return hard, soft


def ffbs(pot: PotentialTable, trellis: ForwardTrellis, noise: GumbelNoiseStream) -> HardPath:
    """One exact posterior sample; each backward draw is a Gumbel-Max."""
    g = noise.gumbel((pot.T, pot.K))[None]
    hard, _ = _ffbs_core(pot, trellis, g, None)
    return HardPath(hard[0])


def ffbs_many(pot: PotentialTable, trellis: ForwardTrellis, noise: GumbelNoiseStream, n: int) -> np.ndarray:
    """``n`` exact samples as an (n, T) array; same stream use as ``n`` calls to :func:`ffbs`."""
    hard, _ = _ffbs_core(pot, trellis, noise.gumbel((n, pot.T, pot.K)), None)
    return hard


def gumbelized_ffbs(pot: PotentialTable, trellis: ForwardTrellis, noise: GumbelNoiseStream, tau: float) -> RelaxedPath:
    tau = _check_tau(tau)
    g = noise.gumbel((pot.T, pot.K))[None]
    hard, soft = _ffbs_core(pot, trellis, g, tau)
    return RelaxedPath(HardPath(hard[0]), soft[0], tau)


def gumbelized_ffbs_many(pot, trellis, noise, tau, n):
    """Batched Gumbelized FFBS: ``(hard (n, T), soft (n, T, K))``."""
    tau = _check_tau(tau)
    return _ffbs_core(pot, trellis, noise.gumbel((n, pot.T, pot.K)), tau)


def perturb(pot: PotentialTable, noise: GumbelNoiseStream, perturb_transitions: bool = False):
    """Add i.i.d. Gumbel noise to every emission factor (and optionally every
    per-step transition factor).

    Returns ``(log_initial, log_emission, log_transition)`` where the
    transition term is (K, K), or (T - 1, K, K) when transitions are perturbed.
    """
    g = noise.gumbel((pot.T, pot.K))
    emit = pot.log_emission + g[::-1]
    trans = pot.log_transition
    if perturb_transitions and pot.T > 1:
        trans = trans[None] + noise.gumbel((pot.T - 1, pot.K, pot.K))
    return pot.log_initial, emit, trans


def perturbed_table(pot: PotentialTable, noise: GumbelNoiseStream) -> PotentialTable:
    """Emission-perturbed copy of ``pot``, the input relaxed Viterbi expects."""
    init, emit, trans = perturb(pot, noise)
    return PotentialTable(trans, emit, init)


def perturb_and_map(pot: PotentialTable, noise: GumbelNoiseStream, perturb_transitions: bool = False) -> HardPath:
    init, emit, trans = perturb(pot, noise, perturb_transitions)
    return HardPath(_viterbi_states(init, emit, trans))


def perturb_and_map_many(pot: PotentialTable, noise: GumbelNoiseStream, n: int) -> np.ndarray:
    """``n`` Perturb-and-MAP paths (emission perturbation only), vectorised."""
    g = noise.gumbel((n, pot.T, pot.K))
    emit = pot.log_emission[None] + g[:, ::-1]
    K, T = pot.K, pot.T
    delta = pot.log_initial[None] + emit[:, 0]
    back = np.zeros((n, T, K), dtype=int)
    rows = np.arange(n)[:, None]
    for t in range(1, T):
        scores = delta[:, :, None] + pot.log_transition[None]
        back[:, t] = np.argmax(scores, axis=1)
        delta = scores[rows, back[:, t], np.arange(K)[None, :]] + emit[:, t]
    states = np.empty((n, T), dtype=int)
    states[:, -1] = np.argmax(delta, axis=1)
    for t in range(T - 1, 0, -1):
        states[:, t - 1] = back[np.arange(n), t, states[:, t]]
    return states


def relaxed_viterbi_trellis(pot: PotentialTable, tau: float) -> RelaxedViterbiTrellis:
    tau = _check_tau(tau)
    T, K = pot.T, pot.K
    s = np.empty((T, K))
    b = np.full((T, K, K), 1.0 / K)
    s[0] = pot.log_initial + pot.log_emission[0]
    for t in range(1, T):
        # scores[j, i] = s_{t-1}(j) + log Phi(j, i, x_t); emission is constant in j
        scores = s[t - 1][:, None] + pot.log_transition
        s[t] = np.max(scores, axis=0) + pot.log_emission[t]
        b[t] = _softmax(scores.T, tau).T
    return RelaxedViterbiTrellis(s, b, tau)


def relaxed_viterbi(pot: PotentialTable, tau: float) -> RelaxedPath:
    """Viterbi with softmax back-tracking on an (already perturbed) table."""
    trellis = relaxed_viterbi_trellis(pot, tau)
    T = pot.T
    hard = np.empty(T, dtype=int)
    soft = np.empty((T, pot.K))
    soft[-1] = _softmax(trellis.s[-1], tau)
    hard[-1] = int(np.argmax(trellis.s[-1]))
    for t in range(T - 2, -1, -1):
        soft[t] = trellis.b[t + 1][:, hard[t + 1]]
        # argmax of the unnormalised back-pointer scores, robust to softmax underflow ties
        hard[t] = int(np.argmax(trellis.s[t] + pot.log_transition[:, hard[t + 1]]))
    return RelaxedPath(HardPath(hard), soft, trellis.tau)


__all__ = [
    "GumbelNoiseStream",
    "RelaxedPath",
    "RelaxedViterbiTrellis",
    "gumbel_max",
    "gumbel_softmax",
    "ffbs",
    "ffbs_many",
    "gumbelized_ffbs",
    "gumbelized_ffbs_many",
    "perturb",
    "perturb_and_map",
    "perturb_and_map_many",
    "relaxed_viterbi",
    "relaxed_viterbi_trellis",
    "perturbed_table",
]

"""Monte-Carlo gradient estimators for E_{p(z|x)}[f(z)] over a linear-chain CRF.

The CRF potentials themselves are the parameters being differentiated.
Gradients are reported as flat vectors in the order
``(log_transition, log_emission, log_initial)``.

Every estimator draws its Gumbel noise as one ``(B, T, K)`` block in the
layout of :mod:`gumbel_crf.sampling`, so two estimators given streams with
the same seed see the same noise, and REINFORCE's FFBS paths are exactly
the hard paths of the Gumbel-CRF estimators.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import diffcrf
from .autodiff import Tape, Tensor
from .crf_core import DEFAULT_ENUMERATION_CAP, PotentialTable, enumerate_posterior, forward
from .sampling import GumbelNoiseStream, ffbs_many

ESTIMATORS = ("reinforce_ms", "reinforce_ms_c", "gumbel_crf", "gumbel_crf_st", "pm_mrf", "pm_mrf_st")


@dataclass
class DownstreamObjective:
    """A batched downstream function ``f``: (B, T, K) paths -> (B,) values.

    ``accepts_soft`` says whether ``f`` is defined on relaxed (non one-hot)
    rows. Hard paths are always fed as one-hot rows.
    """

    fn: Callable[[Tensor], Tensor]
    accepts_soft: bool = True
    name: str = "f"

    def __call__(self, z) -> Tensor:
        return self.fn(ad.as_tensor(z))

    def hard_values(self, paths: np.ndarray, K: int) -> np.ndarray:
        return np.asarray(self(diffcrf.one_hot(paths, K)).value, dtype=float)


def constant_objective(value: float = 1.0) -> DownstreamObjective:
    def fn(z):
        return ad.constant(np.full(z.shape[0], float(value)))

    return DownstreamObjective(fn, name=f"const({value})")


def linear_objective(weights: np.ndarray) -> DownstreamObjective:
    """``f(z) = sum_t <w_t, z_t>`` with a fixed (T, K) weight table."""
    w = np.asarray(weights, dtype=float)

    def fn(z):
        return ad.sum(ad.sum(z * w, axis=2), axis=1)

    return DownstreamObjective(fn, name="linear")


def quadratic_objective(T: int, K: int, seed: int = 0) -> DownstreamObjective:
    """Seeded quadratic benchmark objective.

    ``f(z) = sum_t <u_t, z_t> + sum_t z_t^T M z_{t+1} - sum_t |z_t - c_t|^2``
    with random unary weights ``u``, coupling ``M`` and targets ``c``.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((T, K))
    M = rng.standard_normal((K, K))
    c = rng.dirichlet(np.ones(K), size=T)

    def fn(z):
        B = z.shape[0]
        val = ad.sum(ad.sum(z * u, axis=2), axis=1)
        if T > 1:
            left = ad.reshape(z[:, :-1, :], (B * (T - 1), K))
            right = ad.reshape(z[:, 1:, :], (B * (T - 1), K))
            pair = ad.sum(ad.matmul(left, M) * right, axis=1)
            val = val + ad.sum(ad.reshape(pair, (B, T - 1)), axis=1)
        d = z - c
        return val - ad.sum(ad.sum(d * d, axis=2), axis=1)

    return DownstreamObjective(fn, name=f"quadratic(seed={seed})")


# -- parameter plumbing ----------------------------------------------------------


def flatten_params(pot: PotentialTable) -> np.ndarray:
    return np.concatenate([pot.log_transition.ravel(), pot.log_emission.ravel(), pot.log_initial.ravel()])


def unflatten_params(vec: np.ndarray, K: int, T: int) -> PotentialTable:
    vec = np.asarray(vec, dtype=float)
    a, b = K * K, K * K + T * K
    return PotentialTable(vec[:a].reshape(K, K), vec[a:b].reshape(T, K), vec[b:])


def _replicated_leaves(tape: Tape, pot: PotentialTable, B: int):
    trans = tape.leaf(np.broadcast_to(pot.log_transition, (B, pot.K, pot.K)).copy(), "log_transition")
    emit = tape.leaf(np.broadcast_to(pot.log_emission, (B, pot.T, pot.K)).copy(), "log_emission")
    init = tape.leaf(np.broadcast_to(pot.log_initial, (B, pot.K)).copy(), "log_initial")
    return trans, emit, init


def _per_sample_grads(leaves) -> np.ndarray:
    B = leaves[0].value.shape[0]
    return np.concatenate([leaf.grad.reshape(B, -1) for leaf in leaves], axis=1)


# -- reports ---------------------------------------------------------------------


@dataclass(frozen=True)
class VarianceRatio:
    value: float
    degenerate: bool
    mean_variance: float
    mean_norm: float


def _fsum_mean_var(x: np.ndarray):
    """Column means and unbiased variances with compensated summation."""
    n = x.shape[0]
    mean = np.array([math.fsum(col) for col in x.T]) / n
    if n < 2:
        return mean, np.zeros_like(mean)
    dev = x - mean
    var = np.array([math.fsum(col) for col in (dev * dev).T]) / (n - 1)
    return mean, var


def variance_ratio(grads) -> VarianceRatio:
    """``log(mean per-coordinate variance / ||mean gradient||_2)``.

    ``grads`` is (n, P) with one gradient estimate per row. Identical rows
    (zero variance) or a vanishing mean make the ratio meaningless; those
    cases are flagged ``degenerate`` with ``value = nan``.
    """
    g = np.atleast_2d(np.asarray(grads, dtype=float))
    if g.shape[0] < 2:
        raise ValueError("variance_ratio needs at least two gradient samples")
    mean, var = _fsum_mean_var(g)
    mean_var = float(np.mean(var))
    norm = float(np.linalg.norm(mean))
    scale = float(np.max(np.abs(g))) if g.size else 0.0
    if mean_var <= 0.0 or norm <= 1e-12 * scale or norm == 0.0:
        return VarianceRatio(math.nan, True, mean_var, norm)
    return VarianceRatio(math.log(mean_var / norm), False, mean_var, norm)


@dataclass
class GradReport:
    estimator: str
    mean: np.ndarray
    variance: np.ndarray
    variance_ratio: float
    degenerate: bool
    bias_norm: float | None
    n_samples: int
    samples_per_estimate: int
    n_estimates: int
    seconds: float
    tau: float | None = None
    objective: float | None = None
    estimates: np.ndarray | None = field(default=None, repr=False)

    @property
    def stderr(self) -> np.ndarray:
        """Standard error of :attr:`mean`, from the spread of independent estimates."""
        return np.sqrt(self.variance / self.n_estimates)

    @property
    def seconds_per_estimate(self) -> float:
        return self.seconds / self.n_estimates

    def z_scores(self, exact: np.ndarray) -> np.ndarray:
        se = self.stderr
        diff = self.mean - np.asarray(exact)
        out = np.zeros_like(diff)
        nz = se > 0
        out[nz] = diff[nz] / se[nz]
        out[~nz & (np.abs(diff) > 1e-12)] = np.inf
        return out

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

        return {
            "estimator": self.estimator,
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
            "variance_ratio": num(self.variance_ratio),
            "degenerate": self.degenerate,
            "bias_norm": num(self.bias_norm),
            "n_samples": self.n_samples,
            "samples_per_estimate": self.samples_per_estimate,
            "n_estimates": self.n_estimates,
            "seconds": self.seconds,
            "seconds_per_estimate": self.seconds_per_estimate,
            "tau": self.tau,
            "objective": num(self.objective),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _report(name, per_sample, samples_per_estimate, seconds, oracle, tau=None, objective=None) -> GradReport:
    B, P = per_sample.shape
    R = B // samples_per_estimate
    estimates = per_sample.reshape(R, samples_per_estimate, P).mean(axis=1)
    mean, var = _fsum_mean_var(estimates)
    if R >= 2:
        vr = variance_ratio(estimates)
        r, degenerate = vr.value, vr.degenerate
    else:
        r, degenerate = math.nan, True
    bias = None if oracle is None else float(np.linalg.norm(mean - np.asarray(oracle)))
    return GradReport(
        estimator=name,
        mean=mean,
        variance=var,
        variance_ratio=r,
        degenerate=degenerate,
        bias_norm=bias,
        n_samples=B,
        samples_per_estimate=samples_per_estimate,
        n_estimates=R,
        seconds=seconds,
        tau=tau,
        objective=objective,
        estimates=estimates,
    )


# -- exact oracle ----------------------------------------------------------------


def exact_expectation(f: DownstreamObjective, pot: PotentialTable, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    post = enumerate_posterior(pot, cap)
    return float(np.dot(post.probs, f.hard_values(post.paths, pot.K)))


def exact_gradient(f: DownstreamObjective, pot: PotentialTable, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Gradient of ``sum_z p(z) f(z)`` by enumerating every path on the tape."""
    post = enumerate_posterior(pot, cap)
    fvals = f.hard_values(post.paths, pot.K)
    with Tape() as tape:
        trans = tape.leaf(pot.log_transition)
        emit = tape.leaf(pot.log_emission[None])
        init = tape.leaf(pot.log_initial)
        logq = diffcrf.path_log_prob(trans, emit, init, post.paths)
        loss = ad.sum(ad.exp(logq) * fvals)
    grads = ad.backprop(tape, loss)
    return np.concatenate([g.ravel() for g in grads])


def path_scores(pot: PotentialTable, paths: np.ndarray) -> np.ndarray:
    """(n, P) score vectors grad log q(z) of integer paths (n, T), flat order."""
    paths = np.asarray(paths, dtype=int)
    with Tape() as tape:
        leaves = _replicated_leaves(tape, pot, len(paths))
        loss = ad.sum(diffcrf.path_log_prob(*leaves, paths))
    ad.backprop(tape, loss)
    return _per_sample_grads(leaves)


def reinforce_ms_variance(f: DownstreamObjective, pot: PotentialTable, n_samples: int, c: float = 0.0,
                          cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Exact per-component variance of one leave-one-out REINFORCE-MS estimate.

    With baseline ``b_i`` the mean reward of the other samples, the estimate
    is the order-2 U-statistic of the kernel
    ``h(x, y) = (f_x - f_y)(s_x - s_y) / 2 - c (s_x + s_y) / 2`` over the
    ``n_samples`` paths (``s`` the score). Its variance
    ``2 / (N (N - 1)) * (2 (N - 2) zeta_1 + zeta_2)`` needs only single-path
    moments, computed here by enumeration.
    """
    N = int(n_samples)
    if N < 2:
        raise ValueError("the leave-one-out estimate needs n_samples >= 2")
    post = enumerate_posterior(pot, cap)
    p = post.probs
    fv = f.hard_values(post.paths, pot.K)[:, None]  # (Z, 1)
    s = path_scores(pot, post.paths)  # (Z, P)
    A = fv * s - c * s
    Ef, Es, EA = p @ fv, p @ s, p @ A
    # h(x, y) = A_x/2 + (A_y - f_x s_y - s_x f_y)/2 is linear in the features (A, s, f, 1) of y
    g1 = 0.5 * (A + EA - fv * Es - s * Ef)
    mu = p @ g1
    zeta1 = p @ (g1 - mu) ** 2
    # E_y[h^2] for each x from second moments of the y-features
    EAA, Ess, Eff = p @ (A * A), p @ (s * s), float(p @ (fv[:, 0] ** 2))
    EAs, EAf, Esf = p @ (A * s), p @ (A * fv), p @ (s * fv)
    a0, fx, sx = 0.5 * A, -0.5 * fv, -0.5 * s  # coefficients of 1, s_y, f_y; A_y has 1/2
    Eh2_x = (a0 * a0 + 0.25 * EAA + fx * fx * Ess + sx * sx * Eff
             + 2 * a0 * (0.5 * EA) + 2 * a0 * fx * Es + 2 * a0 * sx * Ef
             + 2 * 0.5 * fx * EAs + 2 * 0.5 * sx * EAf + 2 * fx * sx * Esf)
    zeta2 = p @ Eh2_x - mu**2
    return 2.0 / (N * (N - 1)) * (2 * (N - 2) * zeta1 + zeta2)


# -- score-function estimators ---------------------------------------------------


def _check_budget(n_samples: int, replications: int) -> None:
    if replications < 1:
        raise ValueError(f"replications must be >= 1, got {replications}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")


def reinforce_ms(
    f: DownstreamObjective,
    pot: PotentialTable,
    n_samples: int,
    noise: GumbelNoiseStream,
    *,
    replications: int = 1,
    c: float = 0.0,
    leave_one_out: bool = True,
    reward_scale: float = 1.0,
    oracle: np.ndarray | None = None,
    name: str | None = None,
) -> GradReport:
    """REINFORCE with the mean reward of the other samples as baseline.

    Each estimate uses ``n_samples`` FFBS paths; sample ``i`` contributes
    ``(r f(z_i) - b_i - c) * grad log q(z_i)`` where ``b_i`` is the mean
    scaled reward of the other ``n_samples - 1`` paths (or of all paths when
    ``leave_one_out`` is False). ``replications`` independent estimates are
    drawn to measure spread.
    """
    if n_samples < 2:
        raise ValueError("reinforce_ms needs n_samples >= 2: the sample-mean baseline is undefined otherwise")
    _check_budget(n_samples, replications)
    start = time.perf_counter()
    N, R = n_samples, replications
    B = N * R
    paths = ffbs_many(pot, forward(pot), noise, B)
    rewards = reward_scale * f.hard_values(paths, pot.K).reshape(R, N)
    if leave_one_out:
        base = (rewards.sum(axis=1, keepdims=True) - rewards) / (N - 1)
    else:
        base = rewards.mean(axis=1, keepdims=True)
    adv = (rewards - base - c).reshape(B)
    with Tape() as tape:
        leaves = _replicated_leaves(tape, pot, B)
        logq = diffcrf.path_log_prob(*leaves, paths)
        loss = ad.sum(logq * adv)
    ad.backprop(tape, loss)
    per_sample = _per_sample_grads(leaves)
    label = name or ("reinforce_ms" if c == 0.0 else "reinforce_ms_c")
    return _report(label, per_sample, N, time.perf_counter() - start, oracle, objective=float(rewards.mean()))


def reinforce_ms_c(f, pot, n_samples, c, noise, **kwargs) -> GradReport:
    """REINFORCE-MS with an extra constant ``c`` added to every baseline."""
    kwargs.setdefault("name", "reinforce_ms_c")
    return reinforce_ms(f, pot, n_samples, noise, c=c, **kwargs)


# -- reparameterised estimators --------------------------------------------------


def _relaxed(sampler: str, f, pot, tau, n_samples, noise, *, straight_through, replications, oracle, name):
    if not f.accepts_soft:
        raise ValueError(f"{name}: objective {f.name!r} does not accept relaxed inputs")
    _check_budget(n_samples, replications)
    start = time.perf_counter()
    B = n_samples * replications
    g = noise.gumbel((B, pot.T, pot.K))
    with Tape() as tape:
        trans, emit, init = _replicated_leaves(tape, pot, B)
        if sampler == "ffbs":
            hard, soft = diffcrf.gumbel_ffbs(trans, emit, init, g, tau)
        else:
            hard, soft = diffcrf.relaxed_viterbi(trans, emit + g[:, ::-1], init, tau)
        z = ad.straight_through(diffcrf.one_hot(hard, pot.K), soft) if straight_through else soft
        vals = f(z)
        loss = ad.sum(vals)
    ad.backprop(tape, loss)
    per_sample = _per_sample_grads((trans, emit, init))
    return _report(name, per_sample, n_samples, time.perf_counter() - start, oracle, tau, float(np.mean(vals.value)))


def gumbel_crf(f, pot, tau, n_samples, noise, *, replications=1, oracle=None, straight_through=False) -> GradReport:
    """Reparameterised estimate: average of grad f(z~(phi, g)) through Gumbelized FFBS."""
    name = "gumbel_crf_st" if straight_through else "gumbel_crf"
    return _relaxed("ffbs", f, pot, tau, n_samples, noise, straight_through=straight_through,
                    replications=replications, oracle=oracle, name=name)


def gumbel_crf_st(f, pot, tau, n_samples, noise, **kwargs) -> GradReport:
    """Straight-through variant: ``f`` sees the hard FFBS path, gradients use the soft rows."""
    return gumbel_crf(f, pot, tau, n_samples, noise, straight_through=True, **kwargs)


def pm_mrf(f, pot, tau, n_samples, noise, *, replications=1, oracle=None, straight_through=False) -> GradReport:
    """Perturb-and-MAP: Gumbel-perturbed emissions, relaxed Viterbi back-tracking."""
    name = "pm_mrf_st" if straight_through else "pm_mrf"
    return _relaxed("viterbi", f, pot, tau, n_samples, noise, straight_through=straight_through,
                    replications=replications, oracle=oracle, name=name)


def pm_mrf_st(f, pot, tau, n_samples, noise, **kwargs) -> GradReport:
    return pm_mrf(f, pot, tau, n_samples, noise, straight_through=True, **kwargs)


def relaxed_objective(f: DownstreamObjective, pot: PotentialTable, g: np.ndarray, tau: float,
                      sampler: str = "ffbs", straight_through: bool = False) -> float:
    """Mean of ``f`` over relaxed samples for frozen noise ``g`` (B, T, K); the
    deterministic function whose gradient the relaxed estimators return."""
    B = g.shape[0]
    trans = np.broadcast_to(pot.log_transition, (B, pot.K, pot.K))
    emit = np.broadcast_to(pot.log_emission, (B, pot.T, pot.K))
    init = np.broadcast_to(pot.log_initial, (B, pot.K))
    if sampler == "ffbs":
        hard, soft = diffcrf.gumbel_ffbs(trans, emit, init, g, tau)
    else:
        hard, soft = diffcrf.relaxed_viterbi(trans, emit + g[:, ::-1], init, tau)
    z = diffcrf.one_hot(hard, pot.K) if straight_through else soft
    return float(np.mean(f(z).value))


def run_estimator(name: str, f, pot, noise, *, n_samples: int, tau: float = 1.0, c: float = 1.0,
                  replications: int = 1, oracle=None) -> GradReport:
    """Dispatch by estimator name (one of :data:`ESTIMATORS`)."""
    if name == "reinforce_ms":
        return reinforce_ms(f, pot, n_samples, noise, replications=replications, oracle=oracle)
    if name == "reinforce_ms_c":
        return reinforce_ms_c(f, pot, n_samples, c, noise, replications=replications, oracle=oracle)
    if name in ("gumbel_crf", "gumbel_crf_st"):
        return gumbel_crf(f, pot, tau, n_samples, noise, replications=replications, oracle=oracle,
                          straight_through=name.endswith("_st"))
    if name in ("pm_mrf", "pm_mrf_st"):
        return pm_mrf(f, pot, tau, n_samples, noise, replications=replications, oracle=oracle,
                      straight_through=name.endswith("_st"))
    raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")

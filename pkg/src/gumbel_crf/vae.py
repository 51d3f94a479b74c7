"""Desk-scale latent-template VAE.

Generative model: a tanh recurrent decoder that emits a latent state and
then a word at every step,

    h_t   = tanh([e(z_{t-1}); e(x_{t-1})] W_in + h_{t-1} W_hh + b_h)
    z_t   ~ softmax(h_t W_s + b_s)
    x_t   ~ softmax([e(z_t); h_t] W_w + b_w)

with zero start embeddings and ``h_0 = 0``.

Inference model: a linear-chain CRF whose emission scores come from a
position-wise map over a +-1 window of encoder word embeddings and whose
transition scores are a free K x K matrix. The first-state scores are
fixed at zero (the transition matrix already carries all pairwise terms).

Training maximises E_q[log p(x, z)] + beta * H[q] with plain SGD and
gradient-norm clipping.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffcrf
from .autodiff import Tape, Tensor
from .crf_core import DEFAULT_ENUMERATION_CAP, HardPath, PotentialTable, marginals, viterbi
from .estimators import ESTIMATORS, variance_ratio
from .sampling import GumbelNoiseStream

CHECKPOINT_VERSION = 1
SOFT_ESTIMATORS = ("gumbel_crf", "gumbel_crf_st", "pm_mrf", "pm_mrf_st")


# -- parameters ------------------------------------------------------------------


class _Params:
    """Named float arrays with dict round-tripping."""

    NAMES: tuple = ()

    def __init__(self, **arrays):
        for name in self.NAMES:
            arr = np.array(arrays[name], dtype=float)
            if not np.isfinite(arr).all():
                raise ValueError(f"{type(self).__name__}.{name} has non-finite entries")
            setattr(self, name, arr)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    def to_dict(self) -> dict:
        return {n: getattr(self, n).tolist() for n in self.NAMES}

    @classmethod
    def from_dict(cls, doc: dict):
        return cls(**{n: np.asarray(doc[n], dtype=float) for n in cls.NAMES})

    def copy(self):
        return type(self)(**{n: getattr(self, n).copy() for n in self.NAMES})

    def replace(self, arrays):
        return type(self)(**dict(zip(self.NAMES, arrays)))

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))


class GenerativeParams(_Params):
    NAMES = ("word_emb", "state_emb", "W_in", "W_hh", "b_h", "W_s", "b_s", "W_w", "b_w")

    @property
    def sizes(self):
        V, d = self.word_emb.shape
        K = self.state_emb.shape[0]
        return K, V, d, self.W_hh.shape[0]

    @classmethod
    def init(cls, K: int, V: int, d: int, h: int, seed: int = 0, scale: float = 0.1) -> "GenerativeParams":
        rng = np.random.default_rng(seed)
        return cls(
            word_emb=scale * rng.standard_normal((V, d)),
            state_emb=scale * rng.standard_normal((K, d)),
            W_in=scale * rng.standard_normal((2 * d, h)),
            W_hh=scale * rng.standard_normal((h, h)),
            b_h=np.zeros(h),
            W_s=scale * rng.standard_normal((h, K)),
            b_s=np.zeros(K),
            W_w=scale * rng.standard_normal((d + h, V)),
            b_w=np.zeros(V),
        )

    @classmethod
    def zeros(cls, K: int, V: int, d: int, h: int) -> "GenerativeParams":
        return cls(word_emb=np.zeros((V, d)), state_emb=np.zeros((K, d)), W_in=np.zeros((2 * d, h)),
                   W_hh=np.zeros((h, h)), b_h=np.zeros(h), W_s=np.zeros((h, K)), b_s=np.zeros(K),
                   W_w=np.zeros((d + h, V)), b_w=np.zeros(V))


class InferenceParams(_Params):
    NAMES = ("word_emb", "W_f", "b_f", "W_phi", "b_phi", "log_transition")

    @property
    def sizes(self):
        V, d = self.word_emb.shape
        return self.log_transition.shape[0], V, d, self.W_f.shape[1]

    @classmethod
    def init(cls, K: int, V: int, d: int, h: int, seed: int = 1, scale: float = 0.1) -> "InferenceParams":
        rng = np.random.default_rng(seed)
        return cls(
            word_emb=scale * rng.standard_normal((V, d)),
            W_f=scale * rng.standard_normal((3 * d, h)),
            b_f=np.zeros(h),
            W_phi=scale * rng.standard_normal((h, K)),
            b_phi=np.zeros(K),
            log_transition=np.zeros((K, K)),
        )

    @classmethod
    def constant(cls, K: int, V: int, d: int, h: int, emission=None, log_transition=None) -> "InferenceParams":
        """Input-independent posterior: encoder weights zero, scores fixed."""
        return cls(
            word_emb=np.zeros((V, d)),
            W_f=np.zeros((3 * d, h)),
            b_f=np.zeros(h),
            W_phi=np.zeros((h, K)),
            b_phi=np.zeros(K) if emission is None else np.asarray(emission, dtype=float),
            log_transition=np.zeros((K, K)) if log_transition is None else np.asarray(log_transition, dtype=float),
        )


def _bind(params: _Params, tensors) -> _Params:
    # a params object whose attributes are tape tensors
    out = type(params).__new__(type(params))
    for n, t in zip(params.NAMES, tensors):
        setattr(out, n, t)
    return out


# -- decoder ---------------------------------------------------------------------


def decoder_step(theta, z_prev_embed, x_prev_embed, h_prev, z_embed=None):
    """One recurrent step.

    Returns ``(h_t, state_logits, word_logits)``; ``word_logits`` is None
    unless the embedding ``z_embed`` of the current state is given.
    Accepts arrays or tape tensors of shape (B, d) / (B, h).
    """
    z_prev_embed, x_prev_embed, h_prev = (ad.as_tensor(a) for a in (z_prev_embed, x_prev_embed, h_prev))
    d = theta.state_emb.shape[1]
    hdim = theta.W_hh.shape[0]
    if z_prev_embed.shape[-1] != d or x_prev_embed.shape[-1] != d or h_prev.shape[-1] != hdim:
        raise ValueError(
            f"decoder_step: expected embeddings of width {d} and state of width {hdim}, got "
            f"{z_prev_embed.shape}, {x_prev_embed.shape}, {h_prev.shape}"
        )
    inp = ad.concat([z_prev_embed, x_prev_embed], axis=-1)
    h = ad.tanh(ad.matmul(inp, theta.W_in) + ad.matmul(h_prev, theta.W_hh) + theta.b_h)
    state_logits = ad.matmul(h, theta.W_s) + theta.b_s
    word_logits = None
    if z_embed is not None:
        word_logits = ad.matmul(ad.concat([ad.as_tensor(z_embed), h], axis=-1), theta.W_w) + theta.b_w
    return h, state_logits, word_logits


def _state_embeddings(theta, z):
    """(B, T, d) state embeddings: row lookup for int paths, expected embedding for rows."""
    if isinstance(z, np.ndarray) and z.dtype.kind in "iu":
        return [ad.take(theta.state_emb, z[:, t]) for t in range(z.shape[1])], None
    z = ad.as_tensor(z)
    return [ad.matmul(z[:, t, :], theta.state_emb) for t in range(z.shape[1])], z


def joint_log_prob(theta, x: np.ndarray, z, word_dropout_mask: np.ndarray | None = None) -> Tensor:
    """(B,) values of log p(x, z).

    ``z`` is either an int array (B, T) of hard states or a (B, T, K) array
    or tensor of relaxed rows; relaxed rows enter through the expected
    state embedding and a z-weighted state log-probability. A one-hot
    relaxed input gives exactly the hard value.

    ``word_dropout_mask`` (B, T) marks positions whose word embedding is
    zeroed when fed back as the next decoder input.
    """
    x = np.asarray(x, dtype=int)
    if x.ndim == 1:
        x = x[None]
    B, T = x.shape
    zT = z.shape[1] if hasattr(z, "shape") else len(z)
    if zT != T or z.shape[0] != B:
        raise ValueError(f"joint_log_prob: z has shape {tuple(z.shape)}, words have (B, T) = {(B, T)}")
    z_emb, soft = _state_embeddings(theta, z)
    d = theta.state_emb.shape[1]
    hdim = theta.W_hh.shape[0]
    h = ad.constant(np.zeros((B, hdim)))
    z_prev = ad.constant(np.zeros((B, d)))
    x_prev = ad.constant(np.zeros((B, d)))
    rows = np.arange(B)
    total = None
    for t in range(T):
        h, s_logits, w_logits = decoder_step(theta, z_prev, x_prev, h, z_emb[t])
        s_logp = ad.log_softmax(s_logits)
        if soft is None:
            s_term = s_logp[rows, z[:, t]]
        else:
            s_term = ad.sum(soft[:, t, :] * s_logp, axis=1)
        w_term = ad.log_softmax(w_logits)[rows, x[:, t]]
        step = s_term + w_term
        total = step if total is None else total + step
        z_prev = z_emb[t]
        x_emb = ad.take(theta.word_emb, x[:, t])
        if word_dropout_mask is not None:
            x_emb = x_emb * (1.0 - word_dropout_mask[:, t : t + 1].astype(float))
        x_prev = x_emb
    return total


def exact_log_likelihood(theta, x: np.ndarray, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """(B,) exact log p(x) by summing the joint over every latent path."""
    import itertools

    x = np.atleast_2d(np.asarray(x, dtype=int))
    K = theta.state_emb.shape[0]
    B, T = x.shape
    if K**T > cap:
        raise ValueError(f"enumerating {K}^{T} latent paths exceeds the cap of {cap}")
    paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=int)
    out = np.empty(B)
    for b in range(B):
        xs = np.repeat(x[b : b + 1], len(paths), axis=0)
        vals = joint_log_prob(theta, xs, paths).value
        m = vals.max()
        out[b] = m + math.log(np.sum(np.exp(vals - m)))
    return out


# -- inference network -----------------------------------------------------------


def encoder_emissions(phi, x: np.ndarray) -> Tensor:
    """(B, T, K) emission scores from a +-1 window of encoder embeddings."""
    x = np.atleast_2d(np.asarray(x, dtype=int))
    B, T = x.shape
    d = phi.word_emb.shape[1]
    emb = ad.take(phi.word_emb, x)  # (B, T, d)
    pad = ad.constant(np.zeros((B, 1, d)))
    left = ad.concat([pad, emb[:, :-1, :]], axis=1) if T > 1 else pad
    right = ad.concat([emb[:, 1:, :], pad], axis=1) if T > 1 else pad
    window = ad.concat([left, emb, right], axis=2)  # (B, T, 3d)
    feat = ad.tanh(ad.matmul(window, phi.W_f) + phi.b_f)
    return ad.matmul(feat, phi.W_phi) + phi.b_phi


def _init_scores(phi):
    return np.zeros(phi.log_transition.shape[0])


def inference_table(phi, x: np.ndarray) -> PotentialTable:
    """Potential table of q(z | x) for one sequence."""
    x = np.asarray(x, dtype=int).reshape(1, -1)
    emit = encoder_emissions(phi, x).value[0]
    return PotentialTable(np.asarray(getattr(phi.log_transition, "value", phi.log_transition)), emit, _init_scores(phi))


def extract_template(phi, x: np.ndarray) -> HardPath:
    """MAP latent path of q(z | x)."""
    return viterbi(inference_table(phi, x))


def collapse_states(path) -> list[int]:
    """Merge runs of repeated states: [1, 1, 2, 2, 3] -> [1, 2, 3]."""
    out: list[int] = []
    for s in path:
        s = int(s)
        if not out or out[-1] != s:
            out.append(s)
    return out


# -- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    beta_entropy: float = 1.0
    tau_init: float = 1.0
    tau_floor: float = 0.5
    tau_decay: float = 0.95
    word_dropout_init: float = 0.3
    word_dropout_zero_epoch: int = 10
    estimator: str = "gumbel_crf_st"
    n_samples: int = 1  # per sequence; score-function estimators need >= 2
    baseline_c: float = 0.0
    batch_size: int = 20
    lr: float = 0.1
    clip_norm: float = 5.0
    epochs: int = 15
    seed: int = 0
    nll_samples: int = 100
    variance_probes: int = 8
    eval_items: int = 200
    snapshot_dir: str | None = None

    def __post_init__(self):
        if self.beta_entropy < 0:
            raise ValueError("beta_entropy must be nonnegative")
        if not self.tau_floor > 0 or not self.tau_init > 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.word_dropout_init <= 1.0:
            raise ValueError("word_dropout_init must lie in [0, 1]")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {', '.join(ESTIMATORS)}")
        if self.estimator.startswith("reinforce") and self.n_samples < 2:
            raise ValueError("score-function estimators need n_samples >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.n_samples < 1:
            raise ValueError("batch_size and n_samples must be positive, epochs nonnegative")

    def tau(self, epoch: int) -> float:
        return max(self.tau_floor, self.tau_init * self.tau_decay**epoch)

    def word_dropout(self, epoch: int) -> float:
        if self.word_dropout_zero_epoch <= 0:
            return 0.0
        return self.word_dropout_init * max(0.0, 1.0 - epoch / self.word_dropout_zero_epoch)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**doc)


# -- ELBO ------------------------------------------------------------------------


@dataclass
class ElboResult:
    objective: float  # mean ELBO surrogate value per sequence
    expected_log_joint: float
    entropy: float
    theta_grads: list
    phi_grads: list


def _elbo_graph(theta, phi, x, config: TrainConfig, noise: GumbelNoiseStream, tau: float, dropout: float,
                rng: np.random.Generator | None):
    """Record the per-batch ELBO surrogate on the active tape.

    Returns ``(surrogate, expected_log_joint (B,), entropy (B,))``; the
    surrogate's gradient is the chosen estimator's gradient of the mean ELBO.
    """
    x = np.atleast_2d(np.asarray(x, dtype=int))
    B, T = x.shape
    K = theta.state_emb.shape[0]
    emit = encoder_emissions(phi, x)
    init = _init_scores(phi)
    trellis = diffcrf.forward(phi.log_transition, emit, init)
    H = diffcrf.entropy(phi.log_transition, emit, init, trellis)
    name = config.estimator
    N = config.n_samples
    mask = None
    if dropout > 0 and rng is not None:
        mask = rng.random((B * N, T)) < dropout
    if name in SOFT_ESTIMATORS:
        if N > 1:
            emit_r = ad.take(emit, np.repeat(np.arange(B), N))
            trellis_r = None
        else:
            emit_r, trellis_r = emit, trellis
        xr = np.repeat(x, N, axis=0)
        g = noise.gumbel((B * N, T, K))
        if name.startswith("gumbel_crf"):
            hard, soft = diffcrf.gumbel_ffbs(phi.log_transition, emit_r, init, g, tau, trellis_r)
        else:
            hard, soft = diffcrf.relaxed_viterbi(phi.log_transition, emit_r + g[:, ::-1], init, tau)
        z = ad.straight_through(diffcrf.one_hot(hard, K), soft) if name.endswith("_st") else soft
        f = joint_log_prob(theta, xr, z, mask)
        f_mean = ad.scalar_scale(ad.sum(ad.reshape(f, (B, N)), axis=1), 1.0 / N) if N > 1 else f
        surrogate = ad.sum(f_mean) + ad.scalar_scale(ad.sum(H), config.beta_entropy)
        return ad.scalar_scale(surrogate, 1.0 / B), f_mean.value, H.value
    # score-function: hard FFBS samples, leave-one-out baseline
    g = noise.gumbel((B * N, T, K))
    emit_r = ad.take(emit, np.repeat(np.arange(B), N))
    hard, _ = diffcrf.gumbel_ffbs(
        phi.log_transition.value, emit_r.value, init, g, 1.0
    )
    xr = np.repeat(x, N, axis=0)
    f = joint_log_prob(theta, xr, hard, mask)
    rewards = f.value.reshape(B, N)
    base = (rewards.sum(axis=1, keepdims=True) - rewards) / (N - 1)
    c = config.baseline_c if name == "reinforce_ms_c" else 0.0
    adv = (rewards - base - c).reshape(B * N)
    logq = diffcrf.path_log_prob(phi.log_transition, emit_r, init, hard)
    surrogate = (
        ad.scalar_scale(ad.sum(f), 1.0 / N)
        + ad.scalar_scale(ad.sum(logq * adv), 1.0 / N)
        + ad.scalar_scale(ad.sum(H), config.beta_entropy)
    )
    return ad.scalar_scale(surrogate, 1.0 / B), rewards.mean(axis=1), H.value


def elbo(theta: GenerativeParams, phi: InferenceParams, x, config: TrainConfig, noise: GumbelNoiseStream,
         tau: float | None = None, dropout: float = 0.0, rng: np.random.Generator | None = None) -> ElboResult:
    """Estimated mean ELBO of a batch and its estimated gradients.

    The entropy term is exact (weighted forward recursion on the tape); the
    expected log-joint uses the configured estimator.
    """
    tau = config.tau_init if tau is None else tau
    with Tape() as tape:
        th = _bind(theta, [tape.leaf(a) for a in theta.arrays()])
        ph = _bind(phi, [tape.leaf(a) for a in phi.arrays()])
        loss, elj, H = _elbo_graph(th, ph, x, config, noise, tau, dropout, rng)
    grads = ad.backprop(tape, loss)
    nt = len(theta.NAMES)
    return ElboResult(
        objective=float(np.mean(elj) + config.beta_entropy * np.mean(H)),
        expected_log_joint=float(np.mean(elj)),
        entropy=float(np.mean(H)),
        theta_grads=grads[:nt],
        phi_grads=grads[nt:],
    )


def elbo_samples(theta, phi, x, n: int, noise: GumbelNoiseStream) -> np.ndarray:
    """(B, n) single-sample ELBO values log p(x, z) - log q(z | x) with hard FFBS samples."""
    x = np.atleast_2d(np.asarray(x, dtype=int))
    logp, logq = _is_terms(theta, phi, x, n, noise)
    return logp - logq


def _is_terms(theta, phi, x, n, noise):
    B, T = x.shape
    K = theta.state_emb.shape[0]
    emit = encoder_emissions(phi, x).value
    emit_r = np.repeat(emit, n, axis=0)
    init = _init_scores(phi)
    hard, _ = diffcrf.gumbel_ffbs(phi.log_transition, emit_r, init, noise.gumbel((B * n, T, K)), 1.0)
    logq = diffcrf.path_log_prob(phi.log_transition, emit_r, init, hard).value
    logp = joint_log_prob(theta, np.repeat(x, n, axis=0), hard).value
    return logp.reshape(B, n), logq.reshape(B, n)


def importance_nll(theta, phi, x, n_samples: int, noise: GumbelNoiseStream) -> np.ndarray:
    """(B,) importance-sampled -log p(x) with hard FFBS proposals from q."""
    if n_samples < 1:
        raise ValueError("importance_nll needs n_samples >= 1")
    lw = elbo_samples(theta, phi, x, n_samples, noise)
    m = lw.max(axis=1, keepdims=True)
    return -(m[:, 0] + np.log(np.mean(np.exp(lw - m), axis=1)))


# -- collapse diagnostics --------------------------------------------------------


@dataclass(frozen=True)
class CollapseDiagnostics:
    """``constant_score``: mean pairwise TV between per-example marginals
    (0 when the posterior ignores x). ``uniform_score``: mean per-position
    entropy over log K (1 when the posterior is uniform)."""

    constant_score: float
    uniform_score: float
    constant_threshold: float = 0.05
    uniform_threshold: float = 0.95

    @property
    def constant_collapse(self) -> bool:
        # a uniform posterior is also input-independent; report it as uniform only
        return self.constant_score < self.constant_threshold and not self.uniform_collapse

    @property
    def uniform_collapse(self) -> bool:
        return self.uniform_score > self.uniform_threshold


def posterior_marginals(phi, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=int))
    return np.stack([marginals(inference_table(phi, row)) for row in x])


def collapse_diagnostics(phi, x) -> CollapseDiagnostics:
    mu = posterior_marginals(phi, x)  # (B, T, K)
    B, T, K = mu.shape
    flat = mu.reshape(B, T * K)
    if B > 1:
        # sum_{a<b} TV(a, b) via per-coordinate sorted absolute differences
        tot = 0.0
        for col in flat.T:
            s = np.sort(col)
            ranks = np.arange(B)
            tot += np.sum(s * (2 * ranks - B + 1))
        pair_tv = 0.5 * tot / T / (B * (B - 1) / 2)
    else:
        pair_tv = 0.0
    if K == 1:
        uni = 1.0
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(mu > 0, mu * np.log(mu), 0.0), axis=2)
        uni = float(np.mean(ent) / math.log(K))
    return CollapseDiagnostics(float(np.clip(pair_tv, 0.0, 1.0)), float(np.clip(uni, 0.0, 1.0)))


# -- training --------------------------------------------------------------------


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot_path: str | None):
        super().__init__(message if snapshot_path is None else f"{message} (snapshot: {snapshot_path})")
        self.snapshot_path = snapshot_path


@dataclass
class TrainResult:
    theta: GenerativeParams
    phi: InferenceParams
    trace: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid_nll: float = math.inf
    rng_state: dict | None = None  # generator states after the last update


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def _phi_variance_ratio(theta, phi, x, config, noise, tau) -> float:
    probes = []
    for _ in range(config.variance_probes):
        res = elbo(theta, phi, x, config, noise, tau=tau)
        probes.append(np.concatenate([g.ravel() for g in res.phi_grads]))
    vr = variance_ratio(np.array(probes))
    return vr.value


def train(theta: GenerativeParams, phi: InferenceParams, train_x: np.ndarray, config: TrainConfig,
          valid_x: np.ndarray | None = None, log=None) -> TrainResult:
    """Minibatch SGD ascent on the ELBO.

    One trace record per epoch holds the train ELBO, validation
    importance-sampled NLL, posterior entropy, the phi-gradient variance
    ratio on a probe batch, collapse scores, temperature and word-dropout
    rate. The returned parameters are those of the epoch with the lowest
    validation NLL (the final epoch when no validation split is given).
    """
    theta, phi = theta.copy(), phi.copy()
    train_x = np.asarray(train_x, dtype=int)
    valid_x = train_x[: config.eval_items] if valid_x is None else np.asarray(valid_x, dtype=int)[: config.eval_items]
    master = np.random.SeedSequence(config.seed)
    ss_shuffle, ss_noise, ss_drop, ss_eval = master.spawn(4)
    shuffle_rng = np.random.default_rng(ss_shuffle)
    drop_rng = np.random.default_rng(ss_drop)
    noise = GumbelNoiseStream(ss_noise)
    result = TrainResult(theta, phi)
    nt = len(theta.NAMES)
    probe = train_x[: min(len(train_x), config.batch_size)]
    for epoch in range(config.epochs):
        start = time.perf_counter()
        tau, dropout = config.tau(epoch), config.word_dropout(epoch)
        order = shuffle_rng.permutation(len(train_x))
        elbos, ents, norms = [], [], []
        for lo in range(0, len(order), config.batch_size):
            batch = train_x[order[lo : lo + config.batch_size]]
            res = elbo(theta, phi, batch, config, noise, tau=tau, dropout=dropout, rng=drop_rng)
            if not math.isfinite(res.objective) or not all(np.isfinite(g).all() for g in res.theta_grads + res.phi_grads):
                path = _snapshot(theta, phi, config, epoch, noise, batch)
                raise TrainingAborted(f"non-finite ELBO or gradient at epoch {epoch}", path)
            grads, norm = _clip(res.theta_grads + res.phi_grads, config.clip_norm)
            if config.lr != 0.0:
                theta = theta.replace([p + config.lr * g for p, g in zip(theta.arrays(), grads[:nt])])
                phi = phi.replace([p + config.lr * g for p, g in zip(phi.arrays(), grads[nt:])])
            elbos.append(res.objective * len(batch))
            ents.append(res.entropy * len(batch))
            norms.append(norm)
        eval_noise = GumbelNoiseStream(np.random.SeedSequence(ss_eval.entropy, spawn_key=ss_eval.spawn_key + (epoch,)))
        nll = float(np.mean(importance_nll(theta, phi, valid_x, config.nll_samples, eval_noise)))
        r = _phi_variance_ratio(theta, phi, probe, config, eval_noise, tau)
        diag = collapse_diagnostics(phi, valid_x)
        record = {
            "epoch": epoch,
            "elbo": math.fsum(elbos) / len(train_x),
            "nll_is": nll,
            "entropy": math.fsum(ents) / len(train_x),
            "variance_ratio": None if math.isnan(r) else r,
            "constant_score": diag.constant_score,
            "uniform_score": diag.uniform_score,
            "tau": tau,
            "word_dropout": dropout,
            "grad_norm": float(np.mean(norms)) if norms else 0.0,
            "seconds": time.perf_counter() - start,
        }
        result.trace.append(record)
        if log is not None:
            log(record)
        if nll < result.best_valid_nll:
            result.best_valid_nll, result.best_epoch = nll, epoch
            result.theta, result.phi = theta.copy(), phi.copy()
    if config.epochs == 0 or result.best_epoch < 0:
        result.theta, result.phi = theta, phi
    result.rng_state = {"noise": noise.state(), "shuffle": shuffle_rng.bit_generator.state,
                        "dropout": drop_rng.bit_generator.state}
    return result


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, theta, phi, config: TrainConfig, rng_state: dict | None = None, extra: dict | None = None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "theta": theta.to_dict(),
        "phi": phi.to_dict(),
        "config": asdict(config),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, default=_json_default))
    return str(path)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    return (
        GenerativeParams.from_dict(doc["theta"]),
        InferenceParams.from_dict(doc["phi"]),
        TrainConfig.from_dict(doc["config"]),
        doc.get("rng_state"),
    )


def _snapshot(theta, phi, config, epoch, noise, batch) -> str | None:
    if config.snapshot_dir is None:
        return None
    Path(config.snapshot_dir).mkdir(parents=True, exist_ok=True)
    path = Path(config.snapshot_dir) / f"nan_epoch{epoch}.json"
    return save_checkpoint(path, theta, phi, config, noise.state(), {"epoch": epoch, "batch": batch.tolist()})

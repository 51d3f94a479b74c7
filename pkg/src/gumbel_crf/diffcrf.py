"""CRF dynamic programs recorded on the autodiff tape.

These mirror the numpy kernels in :mod:`crf_core` and :mod:`sampling` but
take :class:`~gumbel_crf.autodiff.Tensor` potentials so that gradients flow
through the recursions themselves. Every function is batched:

* ``emit``  -- (B, T, K) emission scores
* ``trans`` -- (K, K) shared, or (B, K, K) per-sequence transition scores
* ``init``  -- (K,) shared, or (B, K) per-sequence first-state scores

Per-sequence parameters let one reverse sweep return per-sample gradients
(each sample owns a copy of the parameters). Potentials are assumed finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .crf_core import PotentialTable, marginals


@dataclass
class TapeTrellis:
    alphas: list  # T tensors of shape (B, K)
    log_Z: Tensor  # (B,)


def _trans_t(trans: Tensor) -> Tensor:
    # transposed so rows index the successor state: out[..., j, i] = trans[..., i, j]
    return ad.transpose(trans, (1, 0) if trans.ndim == 2 else (0, 2, 1))


def _rows(B: int, n: int) -> np.ndarray:
    return np.zeros(B, dtype=int) if n == 1 else np.arange(B)


def forward(trans, emit, init) -> TapeTrellis:
    trans, emit, init = ad.as_tensor(trans), ad.as_tensor(emit), ad.as_tensor(init)
    B, T, K = emit.shape
    transT = _trans_t(trans)
    alpha = init + emit[:, 0, :]
    alphas = [alpha]
    for t in range(1, T):
        scores = ad.reshape(alpha, (B, 1, K)) + transT
        alpha = ad.logsumexp_row(scores) + emit[:, t, :]
        alphas.append(alpha)
    return TapeTrellis(alphas, ad.logsumexp_row(alphas[-1]))


def path_score(trans, emit, init, paths: np.ndarray) -> Tensor:
    """(n,) unnormalised log-potentials of integer paths (n, T).

    Parameters with a batch axis of 1 are shared by all paths; otherwise
    path ``b`` is scored under parameter copy ``b``.
    """
    trans, emit, init = ad.as_tensor(trans), ad.as_tensor(emit), ad.as_tensor(init)
    paths = np.asarray(paths, dtype=int)
    n, T = paths.shape
    steps = np.arange(T)[None, :]
    e_rows = _rows(n, emit.shape[0])[:, None]
    score = ad.sum(emit[e_rows, steps, paths], axis=1)
    if init.ndim == 1:
        score = score + init[paths[:, 0]]
    else:
        score = score + init[_rows(n, init.shape[0]), paths[:, 0]]
    if T > 1:
        if trans.ndim == 2:
            tr = trans[paths[:, :-1], paths[:, 1:]]
        else:
            tr = trans[_rows(n, trans.shape[0])[:, None], paths[:, :-1], paths[:, 1:]]
        score = score + ad.sum(tr, axis=1)
    return score


def path_log_prob(trans, emit, init, paths, trellis: TapeTrellis | None = None) -> Tensor:
    trellis = trellis or forward(trans, emit, init)
    return path_score(trans, emit, init, paths) - trellis.log_Z


def entropy(trans, emit, init, trellis: TapeTrellis | None = None) -> Tensor:
    """(B,) posterior entropies by the weighted forward recursion."""
    trans, emit, init = ad.as_tensor(trans), ad.as_tensor(emit), ad.as_tensor(init)
    trellis = trellis or forward(trans, emit, init)
    B, T, K = emit.shape
    transT = _trans_t(trans)
    la = trellis.alphas
    H = ad.constant(np.zeros((B, K)))
    for t in range(T - 1):
        # log_w[b, j, i] = alpha_t(i) + trans(i, j) + emit_{t+1}(j) - alpha_{t+1}(j)
        col = ad.reshape(emit[:, t + 1, :] - la[t + 1], (B, K, 1))
        log_w = ad.reshape(la[t], (B, 1, K)) + transT + col
        w = ad.exp(log_w)
        H = ad.sum(w * (ad.reshape(H, (B, 1, K)) - log_w), axis=2)
    log_p = la[-1] - ad.reshape(trellis.log_Z, (B, 1))
    return ad.sum(ad.exp(log_p) * (H - log_p), axis=1)


def marginals_value(trans, emit, init) -> np.ndarray:
    """(B, T, K) posterior marginals as plain arrays (no recording)."""
    trans, emit, init = (np.asarray(getattr(x, "value", x)) for x in (trans, emit, init))
    out = []
    for b in range(emit.shape[0]):
        tr = trans if trans.ndim == 2 else trans[b]
        ini = init if init.ndim == 1 else init[b]
        out.append(marginals(PotentialTable(tr, emit[b], ini)))
    return np.stack(out)


def gumbel_ffbs(trans, emit, init, g: np.ndarray, tau: float, trellis: TapeTrellis | None = None):
    """Gumbelized FFBS on the tape.

    ``g`` is (B, T, K) Gumbel noise in the back-to-front layout of
    :mod:`sampling`. Returns ``(hard (B, T) ints, soft (B, T, K) Tensor)``.
    The hard path is a Gumbel-Max sample and is used only for indexing;
    gradients reach the potentials through the soft rows.
    """
    trans, emit, init = ad.as_tensor(trans), ad.as_tensor(emit), ad.as_tensor(init)
    trellis = trellis or forward(trans, emit, init)
    B, T, K = emit.shape
    g = np.asarray(g, dtype=float)
    if g.shape != (B, T, K):
        raise ValueError(f"noise shape {g.shape} does not match (B, T, K) = {(B, T, K)}")
    transT = _trans_t(trans)
    la = trellis.alphas
    hard = np.empty((B, T), dtype=int)
    soft = [None] * T
    rows = np.arange(B)
    log_pi = la[-1] - ad.reshape(trellis.log_Z, (B, 1))
    for i, t in enumerate(range(T - 1, -1, -1)):
        if t < T - 1:
            z = hard[:, t + 1]
            col = transT[z] if transT.ndim == 2 else transT[rows, z]
            norm = emit[rows, t + 1, z] - la[t + 1][rows, z]
            log_pi = la[t] + col + ad.reshape(norm, (B, 1))
        y = log_pi + g[:, i]
        hard[:, t] = np.argmax(y.value, axis=1)
        soft[t] = ad.softmax_with_temperature(y, tau)
    return hard, ad.stack(soft, axis=1)


def relaxed_viterbi(trans, emit, init, tau: float):
    """Viterbi with softmax back-tracking on the tape.

    ``emit`` should already carry any perturbation. Returns
    ``(hard (B, T) ints, soft (B, T, K) Tensor)``.
    """
    trans, emit, init = ad.as_tensor(trans), ad.as_tensor(emit), ad.as_tensor(init)
    B, T, K = emit.shape
    transT = _trans_t(trans)
    s = init + emit[:, 0, :]
    scores = [None]
    for t in range(1, T):
        sc = ad.reshape(s, (B, 1, K)) + transT  # sc[b, i, j]: predecessor j of state i
        scores.append(sc)
        s = ad.max_row(sc) + emit[:, t, :]
    hard = np.empty((B, T), dtype=int)
    soft = [None] * T
    rows = np.arange(B)
    soft[-1] = ad.softmax_with_temperature(s, tau)
    hard[:, -1] = np.argmax(s.value, axis=1)
    for t in range(T - 2, -1, -1):
        row = scores[t + 1][rows, hard[:, t + 1]]
        soft[t] = ad.softmax_with_temperature(row, tau)
        hard[:, t] = np.argmax(row.value, axis=1)
    return hard, ad.stack(soft, axis=1)


def one_hot(paths: np.ndarray, K: int) -> np.ndarray:
    paths = np.asarray(paths, dtype=int)
    out = np.zeros(paths.shape + (K,))
    np.put_along_axis(out, paths[..., None], 1.0, axis=-1)
    return out

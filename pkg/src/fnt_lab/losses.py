"""Transducer, CTC, LM cross-entropy and KL losses with exact gradients.

All four functions take numpy log-probabilities and return ``(loss, grad)``
where ``grad`` is the derivative of the loss with respect to the input array,
treating every entry as a free coordinate.  :func:`as_torch` lifts any of them
into a differentiable torch op so they can sit at the end of a model graph.

Transducer lattice layout: ``log_probs[t, u, 0]`` is the transducer blank and
``log_probs[t, u, k + 1]`` is token ``k``.  CTC layout: ``log_probs[t, k]`` is
token ``k`` and ``log_probs[t, V]`` is the CTC blank.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
import torch

from fnt_lab.errors import FNTError

NEG = -1e30


def _check_tokens(target: Sequence[int], V: int) -> np.ndarray:
    y = np.asarray(target, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= V):
        raise FNTError("target-out-of-range", f"ids must lie in [0, {V})")
    return y


def _lae_cumsum(x: np.ndarray) -> np.ndarray:
    return np.logaddexp.accumulate(x)


# ---------------------------------------------------------------------------
# transducer


def transducer_alphas(log_probs: np.ndarray, target: Sequence[int]):
    """Forward variables ``alpha[t, u]`` and the blank / emit log-prob planes."""
    T, U1, V1 = log_probs.shape
    y = _check_tokens(target, V1 - 1)
    U = len(y)
    if U1 != U + 1:
        raise FNTError("shape-mismatch", f"lattice has U+1={U1}, target length {U}")
    if T == 0:
        raise FNTError("empty-lattice")
    blank = log_probs[:, :, 0]
    emit = np.take_along_axis(log_probs[:, :U, :], (y + 1)[None, :, None], axis=2)[:, :, 0]
    alpha = np.empty((T, U1))
    # alpha[t, u] = lae(alpha[t-1, u] + blank[t-1, u], alpha[t, u-1] + emit[t, u-1]);
    # solved per row as a first-order linear recurrence in log space
    incoming = np.full(U1, NEG)
    incoming[0] = 0.0
    for t in range(T):
        if t > 0:
            incoming = alpha[t - 1] + blank[t - 1]
        E = np.concatenate(([0.0], np.cumsum(emit[t])))
        alpha[t] = E + _lae_cumsum(incoming - E)
    return alpha, blank, emit


def transducer_betas(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    """Backward variables: ``beta[t, u]`` = log prob of finishing from (t, u)."""
    T, U1 = blank.shape
    beta = np.empty((T, U1))
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            outgoing = np.full(U1, NEG)
            outgoing[U1 - 1] = blank[t, U1 - 1]
        else:
            outgoing = beta[t + 1] + blank[t]
        # beta[t, u] = lae(outgoing[u], emit[t, u] + beta[t, u+1])
        F = np.concatenate(([0.0], np.cumsum(emit[t])))
        beta[t] = -F + _lae_cumsum((outgoing + F)[::-1])[::-1]
    return beta


def transducer_loss(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood summed over all monotone blank/emit alignments.

    Args:
        log_probs: (T, U+1, V+1) lattice of normalised log-distributions.
        target: U token ids in ``[0, V)``.

    Returns:
        ``(loss, grad)`` with ``grad`` shaped like ``log_probs``; only the blank
        column and the target-token entries are non-zero.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    alpha, blank, emit = transducer_alphas(log_probs, target)
    T, U1, _ = log_probs.shape
    log_like = alpha[T - 1, U1 - 1] + blank[T - 1, U1 - 1]
    beta = transducer_betas(blank, emit)

    grad = np.zeros_like(log_probs)
    beta_next_t = np.vstack([beta[1:], np.full((1, U1), NEG)])
    beta_next_t[T - 1, U1 - 1] = 0.0
    grad[:, :, 0] = -np.exp(alpha + blank + beta_next_t - log_like)
    if U1 > 1:
        y = _check_tokens(target, log_probs.shape[2] - 1)
        occ = -np.exp(alpha[:, :-1] + emit + beta[:, 1:] - log_like)
        tt, uu = np.meshgrid(np.arange(T), np.arange(U1 - 1), indexing="ij")
        grad[tt, uu, (y + 1)[uu]] = occ
    return float(-log_like), grad


def brute_force_transducer_loss(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Enumerate all C(T-1+U, U) paths ending in the final blank; independent oracle."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, U1, _ = log_probs.shape
    U = U1 - 1
    y = list(target)
    if T == 0:
        raise FNTError("empty-lattice")
    path_scores = []
    # choose which of the T-1+U moves before the final blank are emissions
    for emits in itertools.combinations(range(T - 1 + U), U):
        emit_set = set(emits)
        t = u = 0
        score = 0.0
        for step in range(T - 1 + U):
            if step in emit_set:
                score += log_probs[t, u, y[u] + 1]
                u += 1
            else:
                score += log_probs[t, u, 0]
                t += 1
        score += log_probs[T - 1, U, 0]
        path_scores.append(score)
    return float(-np.logaddexp.reduce(path_scores))


# ---------------------------------------------------------------------------
# CTC


def ctc_required_frames(target: Sequence[int]) -> int:
    y = list(target)
    return len(y) + sum(1 for a, b in zip(y, y[1:]) if a == b)


def ctc_loss(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """CTC negative log-likelihood with the blank in the last column."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V1 = log_probs.shape
    blank_id = V1 - 1
    y = _check_tokens(target, blank_id)
    if T == 0:
        raise FNTError("empty-lattice")
    if ctc_required_frames(y) > T:
        raise FNTError("ctc-infeasible", f"{ctc_required_frames(y)} frames needed, {T} given")

    S = 2 * len(y) + 1
    ext = np.full(S, blank_id, dtype=np.int64)
    ext[1::2] = y
    # skip transition s-2 -> s allowed onto a label that differs from the previous label
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = y[1:] != y[:-1]

    lp = log_probs[:, ext]                       # (T, S)
    alpha = np.full((T, S), NEG)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + lp[t]

    # beta[t, s] excludes the emission at t
    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    ends = [alpha[T - 1, S - 1]] + ([alpha[T - 1, S - 2]] if S > 1 else [])
    log_like = np.logaddexp.reduce(ends)
    occ = np.exp(alpha + beta - log_like)       # state posteriors
    grad = np.zeros_like(log_probs)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_like), grad


def brute_force_ctc_loss(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Sum over all (V+1)^T frame paths that collapse to ``target``; independent oracle."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, V1 = log_probs.shape
    blank_id = V1 - 1
    goal = tuple(int(t) for t in target)
    scores = []
    for path in itertools.product(range(V1), repeat=T):
        collapsed = []
        prev = None
        for s in path:
            if s != prev and s != blank_id:
                collapsed.append(s)
            prev = s
        if tuple(collapsed) == goal:
            scores.append(sum(log_probs[t, s] for t, s in enumerate(path)))
    if not scores:
        return float("inf")
    return float(-np.logaddexp.reduce(scores))


# ---------------------------------------------------------------------------
# LM cross-entropy and KL


def lm_cross_entropy(pred_log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Per-token mean negative log-probability of ``target`` under the rows."""
    pred_log_probs = np.asarray(pred_log_probs, dtype=np.float64)
    U, V = pred_log_probs.shape
    y = _check_tokens(target, V)
    if len(y) != U:
        raise FNTError("shape-mismatch", f"{U} rows for {len(y)} targets")
    grad = np.zeros_like(pred_log_probs)
    if U == 0:
        return 0.0, grad
    rows = np.arange(U)
    grad[rows, y] = -1.0 / U
    return float(-pred_log_probs[rows, y].sum() / U), grad


def kl_divergence(adapted_log_probs: np.ndarray,
                  baseline_log_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Row-mean KL(adapted || baseline); gradient w.r.t. the adapted rows only."""
    a = np.asarray(adapted_log_probs, dtype=np.float64)
    b = np.asarray(baseline_log_probs, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise FNTError("shape-mismatch", f"{a.shape} vs {b.shape}")
    U = a.shape[0]
    if U == 0:
        return 0.0, np.zeros_like(a)
    p = np.exp(a)
    diff = a - b
    value = float((p * diff).sum() / U)
    return value, p * (diff + 1.0) / U


# ---------------------------------------------------------------------------
# torch bridge


class _NumpyLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, fn, *args):
        loss, grad = fn(x.detach().numpy(), *args)
        ctx.save_for_backward(torch.from_numpy(np.ascontiguousarray(grad)))
        ctx.n_args = len(args)
        return x.new_tensor(loss)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return (g * grad, None) + (None,) * ctx.n_args


def as_torch(fn):
    """Wrap a ``(loss, grad)`` numpy loss as a differentiable torch function.

    Only the first argument receives a gradient; the rest are constants.
    Tensor constants are detached and converted to numpy.
    """
    def wrapped(x: torch.Tensor, *args):
        args = tuple(a.detach().numpy() if isinstance(a, torch.Tensor) else a for a in args)
        return _NumpyLoss.apply(x, fn, *args)
    wrapped.__name__ = f"torch_{fn.__name__}"
    wrapped.__doc__ = f"Differentiable torch version of :func:`{fn.__name__}`."
    return wrapped


torch_transducer_loss = as_torch(transducer_loss)
torch_ctc_loss = as_torch(ctc_loss)
torch_lm_cross_entropy = as_torch(lm_cross_entropy)
torch_kl_divergence = as_torch(kl_divergence)

"""CTC: collapse, log-space forward-backward loss, greedy decoding.

Blank is the last class index (``n_classes - 1``) unless given explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, _make, as_tensor, logsumexp_np

NEG_INF = -np.inf


class CTCError(ValueError):
    pass


def collapse(alignment: Sequence[int], blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def num_repeats(labels: Sequence[int]) -> int:
    return sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that admits a CTC path for ``labels``."""
    return len(labels) + num_repeats(labels)


@dataclass
class CtcLattice:
    """Forward/backward variables over the blank-interleaved label sequence.

    Both include the emission at their own frame, so a state's total path
    mass at frame t is ``alpha + beta - log p_t(label)``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    extended: np.ndarray
    log_likelihood: float

    def occupancy(self, log_probs: np.ndarray) -> np.ndarray:
        """Posterior of being in each extended state, shape (T, 2U+1); rows sum to 1."""
        emit = log_probs[:, self.extended]
        return np.exp(self.alpha + self.beta - emit - self.log_likelihood)


def _extend(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_lattice(log_probs: np.ndarray, labels: Sequence[int], blank: int | None = None) -> CtcLattice:
    """Run forward-backward on frame log-probabilities (T x |V'|)."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    t_len, n_cls = log_probs.shape
    blank = n_cls - 1 if blank is None else blank
    labels = [int(x) for x in labels]
    if any(x == blank or not 0 <= x < n_cls for x in labels):
        raise CTCError(f"labels {labels} contain blank or out-of-range ids")
    need = min_frames(labels)
    if t_len < need or t_len == 0:
        raise CTCError(f"infeasible: {t_len} frames for {len(labels)} labels "
                       f"({num_repeats(labels)} adjacent repeats) needs {max(need, 1)}")

    ext = _extend(labels, blank)
    s_len = len(ext)
    emit = log_probs[:, ext]
    # skip transition s-2 -> s allowed for non-blank s whose label differs from s-2
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    ll = float(logsumexp_np(alpha[-1, max(s_len - 2, 0):]))
    return CtcLattice(alpha, beta, ext, ll)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    return x - logsumexp_np(x, axis=-1, keepdims=True)


def _loss_and_grad(logits: np.ndarray, labels, blank) -> tuple[float, np.ndarray]:
    lp = _log_softmax(logits)
    lat = ctc_lattice(lp, labels, blank)
    occ = lat.occupancy(lp)
    target = np.zeros_like(lp)
    np.add.at(target, (slice(None), lat.extended), occ)
    return -lat.log_likelihood, np.exp(lp) - target


def ctc_loss(logits, labels: Sequence[int], blank: int | None = None) -> Tensor:
    """Negative log-likelihood of ``labels`` given frame logits (T x |V'|); scalar tensor."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise CTCError(f"ctc_loss expects T x |V'| logits, got shape {logits.shape}")
    loss, grad = _loss_and_grad(logits.data, labels, blank)
    return _make(np.array(loss), (logits,), lambda g: (g * grad,), "ctc_loss")


def ctc_loss_batch(logits: Tensor, lengths: Sequence[int], labels: Sequence[Sequence[int]],
                   blank: int | None = None) -> Tensor:
    """Per-utterance CTC losses, shape (B,), for padded logits (B x T x |V'|)."""
    b, t_max, _ = logits.shape
    losses = np.empty(b)
    grad = np.zeros_like(logits.data)
    for i in range(b):
        n = int(lengths[i])
        losses[i], grad[i, :n] = _loss_and_grad(logits.data[i, :n], labels[i], blank)
    return _make(losses, (logits,), lambda g: (g[:, None, None] * grad,), "ctc_loss")


def ctc_greedy_decode(logits, blank: int | None = None) -> list[int]:
    """Collapse of the per-frame argmax path."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    blank = x.shape[-1] - 1 if blank is None else blank
    return collapse(np.argmax(x, axis=-1), blank)


def inter_ctc_combine(loss_final, loss_inter, weight: float = 0.5):
    """(1 - w) * final + w * intermediate; works on floats and tensors."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"interCTC weight {weight} outside [0, 1]")
    return (1.0 - weight) * loss_final + weight * loss_inter

"""Auxiliary attention decoder and the KL distillation losses built on it.

One decoder parameter set is applied to the final encoder output and to each
tapped intermediate layer. Its per-position distributions are pulled toward
the teacher's top-K soft labels; the decoder is training-only and plays no
part in CTC inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

KL_FLOOR = 1e-8


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1


@dataclass
class DistillWeights:
    alpha: float = 0.7
    beta: float = 0.5
    k: int = 10
    m: int = 1
    taps: list[int] = field(default_factory=list)

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.k < 1 or self.m < 0:
            raise ValueError(f"need K >= 1 and M >= 0, got K={self.k}, M={self.m}")
        if self.taps and len(self.taps) != self.m:
            raise ValueError(f"{len(self.taps)} tap layers given for M={self.m}")


class DecoderLayer(nn.Module):
    def __init__(self, rng, dim: int, cfg: DecoderConfig):
        self.self_norm = nn.LayerNorm(dim)
        self.self_att = nn.MultiHeadAttention(rng, dim, cfg.heads, cfg.dropout)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_att = nn.MultiHeadAttention(rng, dim, cfg.heads, cfg.dropout)
        self.ff = nn.FeedForward(rng, dim, cfg.ff_dim, cfg.dropout)

    def __call__(self, x, memory, self_mask, cross_mask, rng=None):
        a = self.self_norm(x)
        x = x + self.self_att(a, a, self_mask, rng)
        x = x + self.cross_att(self.cross_norm(x), memory, cross_mask, rng)
        return x + self.ff(x, rng)


class AttentionDecoder(nn.Module):
    """Transformer decoder over the teacher/decoder vocabulary (base tokens + 4 specials)."""

    def __init__(self, rng, vocab_size: int, dim: int, cfg: DecoderConfig):
        self.vocab_size = vocab_size
        self.dim = dim
        self.cfg = cfg
        n = vocab_size + 4
        self.embed = nn.Embedding(rng, n, dim)
        self.layers = [DecoderLayer(rng, dim, cfg) for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(dim)
        self.classifier = nn.Linear(rng, dim, n)

    @property
    def cls_id(self):
        return self.vocab_size + 1

    @property
    def sep_id(self):
        return self.vocab_size + 2

    @property
    def pad_id(self):
        return self.vocab_size + 3

    def teacher_forcing_input(self, transcripts: Sequence[Sequence[int]]):
        """``[CLS] y_1 .. y_{U-1}`` per transcript, padded; returns (ids, lengths)."""
        lengths = np.array([len(y) for y in transcripts])
        ids = np.full((len(transcripts), max(lengths.max(), 1)), self.pad_id, dtype=np.int64)
        for i, y in enumerate(transcripts):
            if len(y):
                ids[i, 0] = self.cls_id
                ids[i, 1:len(y)] = y[:-1]
        return ids, lengths

    def __call__(self, history: np.ndarray, history_lengths, memory: Tensor, memory_lengths,
                 rng=None) -> Tensor:
        """Logits (B, U, |V|+4); position u sees ``history[:, :u+1]`` and all of ``memory``."""
        if memory.shape[1] == 0:
            raise ValueError("attention decoder needs non-empty encoder features")
        b, u = history.shape
        h = self.embed(history) * np.sqrt(self.dim) + nn.sinusoidal_positions(u, self.dim)
        h = nn.drop(h, rng, self.cfg.dropout)
        self_mask = T.causal_mask(u)[None, None] & nn.key_mask(history_lengths, u)
        cross_mask = nn.key_mask(memory_lengths, memory.shape[1])
        for layer in self.layers:
            h = layer(h, memory, self_mask, cross_mask, rng)
        return self.classifier(self.norm(h))


def decoder_forward(decoder: AttentionDecoder, history: Sequence[int], h: Tensor) -> Tensor:
    """Teacher-forced distributions (U, |V|+4) for one utterance with features ``h`` (T x D)."""
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"need encoder features of shape (T, D) with T > 0, got {h.shape}")
    ids = np.asarray(history, dtype=np.int64)[None]
    logits = decoder(ids, [ids.shape[1]], h.reshape(1, *h.shape), [h.shape[0]])
    return T.softmax(logits)[0]


def kl_loss(student_logp: Tensor, teacher_ids, teacher_probs, position_mask=None,
            reverse: bool = True, floor: float = KL_FLOOR) -> Tensor:
    """KL divergence between student and teacher on the teacher's top-K support.

    ``student_logp`` holds log-probabilities (B, U, V) or (U, V). The student
    is restricted to each position's K teacher ids and renormalised there;
    teacher probabilities are floored at ``floor`` and renormalised. With
    ``reverse`` (default) the sum is ``sum q log(q / t)`` with the student q
    leading; otherwise ``sum t log(t / q)``. Positions are summed per
    utterance and utterances averaged.
    """
    single = student_logp.ndim == 2
    if single:
        student_logp = student_logp.reshape(1, *student_logp.shape)
        teacher_ids = np.asarray(teacher_ids)[None]
        teacher_probs = np.asarray(teacher_probs)[None]
    teacher_ids = np.asarray(teacher_ids, dtype=np.int64)
    if teacher_ids.shape[:2] != student_logp.shape[:2]:
        raise ValueError(f"position mismatch: student {student_logp.shape[:2]}, "
                         f"teacher {teacher_ids.shape[:2]}")
    t = np.maximum(np.asarray(teacher_probs, dtype=T.DTYPE), floor)
    t = t / t.sum(axis=-1, keepdims=True)
    log_t = np.log(t)

    sel = T.gather_last(student_logp, teacher_ids)
    lse = T.logsumexp(sel, axis=-1)
    log_q = sel - lse.reshape(*lse.shape, 1)
    if reverse:
        terms = T.exp(log_q) * (log_q - log_t)
    else:
        terms = (log_t - log_q) * t
    # rounding can leave a matched position at -1e-16; the true minimum is 0 with zero gradient
    per_pos = T.relu(terms.sum(axis=-1))
    if position_mask is not None:
        per_pos = per_pos * np.asarray(position_mask, dtype=T.DTYPE)
    return per_pos.sum(axis=1).mean()


def soft_label_batch(labels, u_max: int, k: int):
    """Stack SoftLabelSets into padded (B, U, K) ids/probs plus a (B, U) position mask."""
    b = len(labels)
    ids = np.zeros((b, u_max, k), dtype=np.int64)
    probs = np.full((b, u_max, k), 1.0 / k)
    mask = np.zeros((b, u_max))
    for i, sl in enumerate(labels):
        u = len(sl)
        ids[i, :u] = sl.ids
        probs[i, :u] = sl.probs
        mask[i, :u] = 1.0
    return ids, probs, mask


def distill_loss(final_kl, inter_kls: Sequence, weights: DistillWeights):
    """(1 - beta) KL_N + beta / M * sum_m KL_m; with M = 0 only the final term remains."""
    if len(inter_kls) != weights.m:
        raise ValueError(f"expected {weights.m} intermediate KL losses, got {len(inter_kls)}")
    if weights.m == 0:
        return final_kl
    inter = inter_kls[0]
    for x in inter_kls[1:]:
        inter = inter + x
    return (1.0 - weights.beta) * final_kl + (weights.beta / weights.m) * inter


def total_loss(ctc, distill, alpha: float):
    """(1 - alpha) CTC + alpha distill."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return (1.0 - alpha) * ctc + alpha * distill


def aed_greedy_decode(decoder: AttentionDecoder, h: Tensor, max_len: int) -> list[int]:
    """Autoregressive argmax decoding from features ``h`` (T x D) until [SEP] or ``max_len``."""
    out: list[int] = []
    if max_len <= 0:
        return out
    memory = h.reshape(1, *h.shape)
    with T.no_grad():
        while len(out) < max_len:
            ids = np.array([[decoder.cls_id] + out], dtype=np.int64)
            logits = decoder(ids, [ids.shape[1]], memory, [h.shape[0]]).data[0, -1]
            nxt = int(np.argmax(logits))
            if nxt == decoder.sep_id:
                break
            if nxt >= decoder.vocab_size:
                # another special: not a transcript token, stop rather than emit it
                break
            out.append(nxt)
    return out

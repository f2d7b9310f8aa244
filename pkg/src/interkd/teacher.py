"""Masked-LM teacher, per-position top-K soft labels, and their on-disk cache."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .optim import OptimizerState, optimizer_step
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    mask_prob: float = 0.15
    epochs: int = 4
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup: int = 400
    seed: int = 0


class MaskedLm(nn.Module):
    """Transformer encoder over ``[CLS] w_1 .. w_U [SEP]`` with a classifier on every position.

    Token ids follow :class:`~interkd.corpus.Vocab`: base tokens first, then
    [MASK], [CLS], [SEP], [PAD].
    """

    def __init__(self, rng, vocab_size: int, cfg: TeacherConfig):
        self.vocab_size = vocab_size
        self.cfg = cfg
        n = vocab_size + 4
        self.embed = nn.Embedding(rng, n, cfg.dim)
        self.layers = [nn.TransformerLayer(rng, cfg.dim, cfg.heads, cfg.ff_dim, cfg.dropout)
                       for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(cfg.dim)
        self.classifier = nn.Linear(rng, cfg.dim, n)

    @property
    def mask_id(self):
        return self.vocab_size

    @property
    def cls_id(self):
        return self.vocab_size + 1

    @property
    def sep_id(self):
        return self.vocab_size + 2

    @property
    def pad_id(self):
        return self.vocab_size + 3

    def wrap(self, sentences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Pad ``[CLS] s [SEP]`` rows; returns (ids B x L, lengths)."""
        lengths = np.array([len(s) + 2 for s in sentences])
        ids = np.full((len(sentences), lengths.max()), self.pad_id, dtype=np.int64)
        for i, s in enumerate(sentences):
            ids[i, 0] = self.cls_id
            ids[i, 1:len(s) + 1] = s
            ids[i, len(s) + 1] = self.sep_id
        return ids, lengths

    def __call__(self, ids: np.ndarray, lengths: np.ndarray, rng=None) -> Tensor:
        b, l = ids.shape
        h = self.embed(ids) * np.sqrt(self.cfg.dim) + nn.sinusoidal_positions(l, self.cfg.dim)
        h = nn.drop(h, rng, self.cfg.dropout)
        mask = nn.key_mask(lengths, l)
        for layer in self.layers:
            h = layer(h, mask, rng)
        return self.classifier(self.norm(h))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _mask_batch(model: MaskedLm, sentences, rng: np.random.Generator, prob: float):
    ids, lengths = model.wrap(sentences)
    targets = np.full(ids.shape, -1, dtype=np.int64)
    for i, s in enumerate(sentences):
        pick = np.flatnonzero(rng.random(len(s)) < prob)
        if pick.size == 0:
            pick = np.array([rng.integers(len(s))])
        pos = pick + 1
        targets[i, pos] = ids[i, pos]
        ids[i, pos] = model.mask_id
    return ids, lengths, targets


def masked_lm_loss(model: MaskedLm, ids, lengths, targets, rng=None) -> Tensor:
    """Mean cross-entropy over positions with ``targets >= 0``."""
    logp = T.log_softmax(model(ids, lengths, rng))
    rows, cols = np.nonzero(targets >= 0)
    picked = logp[rows, cols, targets[rows, cols]]
    return -picked.mean()


def masked_accuracy(model: MaskedLm, sentences, seed: int = 0, prob: float = 0.15,
                    batch_size: int = 256) -> float:
    """Top-1 accuracy over base tokens at randomly masked positions."""
    rng = np.random.default_rng(seed)
    hit = total = 0
    with T.no_grad():
        for start in range(0, len(sentences), batch_size):
            ids, lengths, targets = _mask_batch(model, sentences[start:start + batch_size], rng, prob)
            logits = model(ids, lengths).data[..., :model.vocab_size]
            sel = targets >= 0
            hit += int((logits.argmax(-1)[sel] == targets[sel]).sum())
            total += int(sel.sum())
    return hit / max(total, 1)


def mlm_train(sentences: Sequence[Sequence[int]], vocab_size: int, cfg: TeacherConfig,
              dev: Sequence[Sequence[int]] | None = None) -> tuple[MaskedLm, list[dict]]:
    """Train on the masked-token objective; returns the model and per-epoch history."""
    sentences = [list(s) for s in sentences if len(s)]
    if not sentences:
        raise ValueError("cannot train a masked LM on an empty corpus")
    rng = np.random.default_rng(cfg.seed)
    model = MaskedLm(rng, vocab_size, cfg)
    params = dict(model.named_parameters())
    opt = OptimizerState(peak_lr=cfg.peak_lr, warmup=cfg.warmup)
    history = []
    order = np.arange(len(sentences))
    for epoch in range(1, cfg.epochs + 1):
        rng.shuffle(order)
        total, steps = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [sentences[i] for i in order[start:start + cfg.batch_size]]
            ids, lengths, targets = _mask_batch(model, batch, rng, cfg.mask_prob)
            loss = masked_lm_loss(model, ids, lengths, targets, rng)
            loss.backward()
            optimizer_step(opt, params)
            total += loss.item()
            steps += 1
        record = {"epoch": epoch, "train_loss": total / steps}
        if dev:
            record["dev_masked_acc"] = masked_accuracy(model, dev, seed=cfg.seed, prob=cfg.mask_prob)
        log.info("teacher epoch %d: %s", epoch, record)
        history.append(record)
    return model, history


# ---------------------------------------------------------------------------
# soft labels


@dataclass
class SoftLabelSet:
    """Top-K teacher distribution per transcript position (renormalised over the K ids)."""

    ids: np.ndarray      # (U, K) int
    probs: np.ndarray    # (U, K) float
    key: str = ""

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self):
        return self.ids.shape[0]


def sentence_key(sentence: Sequence[int]) -> str:
    return hashlib.sha1(" ".join(map(str, sentence)).encode()).hexdigest()


def top_k_renormalised(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` entries per row (ties to the lower id), rescaled to sum to 1."""
    k = min(k, probs.shape[-1])
    ids = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    top = np.take_along_axis(probs, ids, axis=-1)
    return ids, top / top.sum(axis=-1, keepdims=True)


def teacher_distributions(teacher: MaskedLm, sentence: Sequence[int],
                          spans: Sequence[tuple[int, int]] | None = None) -> np.ndarray:
    """Teacher probability of every base token at each masked position, shape (U, |V|).

    Special-token columns are dropped and rows are not renormalised.

    ``spans`` groups positions masked together (word-level masking); by
    default every position is masked on its own.
    """
    u_len = len(sentence)
    if u_len == 0:
        raise ValueError("cannot extract soft labels for an empty sentence")
    spans = spans or [(u, u + 1) for u in range(u_len)]
    rows = []
    for a, b in spans:
        s = list(sentence)
        s[a:b] = [teacher.mask_id] * (b - a)
        rows.append(s)
    ids, lengths = teacher.wrap(rows)
    with T.no_grad():
        logits = teacher(ids, lengths).data
    full = np.exp(logits - T.logsumexp_np(logits, axis=-1, keepdims=True))
    out = np.empty((u_len, teacher.vocab_size))
    for row, (a, b) in enumerate(spans):
        out[a:b] = full[row, a + 1:b + 1, :teacher.vocab_size]
    return out


def extract_soft_labels(sentence: Sequence[int], teacher: MaskedLm, k: int = 10,
                        spans=None) -> SoftLabelSet:
    ids, probs = top_k_renormalised(teacher_distributions(teacher, sentence, spans), k)
    return SoftLabelSet(ids, probs, sentence_key(sentence))


def extract_many(sentences: Sequence[Sequence[int]], teacher: MaskedLm, k: int = 10,
                 rows_per_batch: int = 512) -> list[SoftLabelSet]:
    """Batched :func:`extract_soft_labels` over many sentences (token-level masking)."""
    jobs = [(i, u) for i, s in enumerate(sentences) for u in range(len(s))]
    if any(len(s) == 0 for s in sentences):
        raise ValueError("cannot extract soft labels for an empty sentence")
    dists = [np.empty((len(s), teacher.vocab_size)) for s in sentences]
    with T.no_grad():
        for start in range(0, len(jobs), rows_per_batch):
            chunk = jobs[start:start + rows_per_batch]
            rows = []
            for i, u in chunk:
                s = list(sentences[i])
                s[u] = teacher.mask_id
                rows.append(s)
            ids, lengths = teacher.wrap(rows)
            logits = teacher(ids, lengths).data
            pos = np.array([u + 1 for _, u in chunk])
            picked = logits[np.arange(len(chunk)), pos]
            p = np.exp(picked - T.logsumexp_np(picked, axis=-1, keepdims=True))
            for (i, u), row in zip(chunk, p):
                dists[i][u] = row[:teacher.vocab_size]
    out = []
    for s, d in zip(sentences, dists):
        ids, probs = top_k_renormalised(d, k)
        out.append(SoftLabelSet(ids, probs, sentence_key(s)))
    return out


# ---------------------------------------------------------------------------
# cache file
#
# b"IKDS" | u16 version | u16 K | 64-byte teacher hash (ascii hex) | u32 count
# count x ( u16 len | utt id | 40-byte sentence key | u16 U | i32 ids[U K] | f64 probs[U K] )

CACHE_MAGIC = b"IKDS"
CACHE_VERSION = 1


class SoftLabelCacheError(Exception):
    pass


def write_soft_labels(path: str | Path, k: int, teacher_hash: str, labels: dict[str, SoftLabelSet]):
    chunks = [CACHE_MAGIC, struct.pack("<HH", CACHE_VERSION, k),
              teacher_hash.encode().ljust(64, b" ")[:64], struct.pack("<I", len(labels))]
    for utt_id, sl in labels.items():
        if sl.k != k:
            raise SoftLabelCacheError(f"{utt_id}: soft labels have K={sl.k}, cache K={k}")
        raw = utt_id.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + sl.key.encode().ljust(40, b" ")[:40])
        chunks.append(struct.pack("<H", len(sl)))
        chunks.append(np.ascontiguousarray(sl.ids, dtype="<i4").tobytes())
        chunks.append(np.ascontiguousarray(sl.probs, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


@dataclass
class SoftLabelCache:
    k: int
    teacher_hash: str
    labels: dict[str, SoftLabelSet]


def read_soft_labels(path: str | Path) -> SoftLabelCache:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise SoftLabelCacheError(f"{path}: truncated soft-label cache")
        pos += n
        return buf[pos - n:pos]

    if take(4) != CACHE_MAGIC:
        raise SoftLabelCacheError(f"{path}: not a soft-label cache")
    version, k = struct.unpack("<HH", take(4))
    if version != CACHE_VERSION:
        raise SoftLabelCacheError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    teacher_hash = take(64).decode().strip()
    (count,) = struct.unpack("<I", take(4))
    labels = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        utt_id = take(n).decode()
        key = take(40).decode().strip()
        (u,) = struct.unpack("<H", take(2))
        ids = np.frombuffer(take(4 * u * k), dtype="<i4").reshape(u, k).astype(np.int64)
        probs = np.frombuffer(take(8 * u * k), dtype="<f8").reshape(u, k).astype(np.float64)
        labels[utt_id] = SoftLabelSet(ids, probs, key)
    return SoftLabelCache(k, teacher_hash, labels)

"""Token n-gram LM with stupid-backoff scores, optionally renormalised per context.

Score of ``w`` after context ``c``::

    S(w | c) = count(c w) / count(c)      if count(c w) > 0
             = 0.4 * S(w | c[1:])         otherwise
    S(w | ()) = (count(w) + 1) / (N + |V|)

With ``normalized=True`` (the default) ``P(w | c) = S(w | c) / sum_v S(v | c)``,
a proper distribution over the base vocabulary.

Text format: header lines starting with a backslash, then sorted records
``context TAB token TAB log relative frequency`` where context is the
space-joined history (``<s>`` marks sentence start, empty for unigrams).
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

BOS = "<s>"


class NgramLm:
    def __init__(self, order: int, tokens: Sequence[str], backoff: float = 0.4,
                 normalized: bool = True):
        if order < 1:
            raise ValueError(f"n-gram order must be >= 1, got {order}")
        self.order = order
        self.tokens = tuple(tokens)
        self.backoff = backoff
        self.normalized = normalized
        self.unigram_total = 0
        # context tuple (ids, -1 for <s>) -> {token id: log relative frequency}
        self.rel: dict[tuple[int, ...], dict[int, float]] = {}
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def _context(self, history: Sequence[int]) -> tuple[int, ...]:
        n = self.order - 1
        if n == 0:
            return ()
        h = tuple(int(x) for x in history[-n:])
        return (-1,) * (n - len(h)) + h

    def scores(self, history: Sequence[int]) -> np.ndarray:
        """Backoff scores (or probabilities when normalized) of every token after ``history``."""
        ctx = self._context(history)
        hit = self._cache.get(ctx)
        if hit is not None:
            return hit
        s = np.exp(np.array([self.rel[()][w] for w in range(self.vocab_size)]))
        for k in range(1, len(ctx) + 1):
            s = s * self.backoff
            seen = self.rel.get(ctx[-k:])
            if seen:
                for w, lr in seen.items():
                    s[w] = math.exp(lr)
        if self.normalized:
            s = s / s.sum()
        self._cache[ctx] = s
        return s

    def logprob(self, history: Sequence[int], token: int) -> float:
        if not 0 <= token < self.vocab_size:
            return -math.log(self.unigram_total + self.vocab_size)
        return float(np.log(self.scores(history)[token]))

    def sentence_logprob(self, sentence: Sequence[int]) -> float:
        return sum(self.logprob(sentence[:i], w) for i, w in enumerate(sentence))

    # -- persistence ------------------------------------------------------

    def _ctx_str(self, ctx: tuple[int, ...]) -> str:
        return " ".join(BOS if i < 0 else self.tokens[i] for i in ctx)

    def save(self, path: str | Path):
        lines = [f"\\order\t{self.order}", f"\\backoff\t{self.backoff!r}",
                 f"\\normalized\t{int(self.normalized)}", f"\\unigram_total\t{self.unigram_total}",
                 f"\\vocab\t{' '.join(self.tokens)}"]
        records = []
        for ctx, row in self.rel.items():
            c = self._ctx_str(ctx)
            for w, lr in row.items():
                records.append(f"{c}\t{self.tokens[w]}\t{lr!r}")
        lines.extend(sorted(records))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> NgramLm:
        header: dict[str, str] = {}
        body = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("\\"):
                key, _, value = line[1:].partition("\t")
                header[key] = value
            elif line:
                body.append(line)
        tokens = header["vocab"].split()
        lm = cls(int(header["order"]), tokens, float(header["backoff"]), header["normalized"] == "1")
        lm.unigram_total = int(header["unigram_total"])
        index = {t: i for i, t in enumerate(tokens)}
        for line in body:
            c, tok, lr = line.split("\t")
            ctx = tuple(-1 if t == BOS else index[t] for t in c.split())
            lm.rel.setdefault(ctx, {})[index[tok]] = float(lr)
        return lm


def ngram_train(sentences: Sequence[Sequence[int]], order: int, tokens: Sequence[str],
                backoff: float = 0.4, normalized: bool = True) -> NgramLm:
    if not sentences:
        raise ValueError("cannot train an n-gram LM on an empty corpus")
    lm = NgramLm(order, tokens, backoff, normalized)
    v = lm.vocab_size
    counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(lambda: defaultdict(int))
    pad = (-1,) * (order - 1)
    for s in sentences:
        seq = pad + tuple(int(x) for x in s)
        for i in range(len(pad), len(seq)):
            w = seq[i]
            for k in range(order):
                counts[seq[i - k:i]][w] += 1
    unigrams = counts[()]
    lm.unigram_total = sum(unigrams.values())
    lm.rel[()] = {w: math.log((unigrams.get(w, 0) + 1) / (lm.unigram_total + v)) for w in range(v)}
    for ctx, row in counts.items():
        if not ctx:
            continue
        total = sum(row.values())
        lm.rel[ctx] = {w: math.log(c / total) for w, c in row.items()}
    return lm


def ngram_logprob(lm: NgramLm, context: Sequence[int], token: int) -> float:
    return lm.logprob(context, token)

"""CTC prefix beam search with token n-gram shallow fusion.

A hypothesis' fused score is::

    log P_ctc(prefix) + lm_weight * log P_lm(prefix) + ins_penalty * len(prefix)

A positive ``ins_penalty`` is a per-token bonus that offsets the LM's bias
toward short outputs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ctc import collapse
from .tensor import logsumexp_np

NEG_INF = -math.inf


def _logaddexp(a: float, b: float) -> float:
    # scalar log(e^a + e^b); np.logaddexp is slow on Python floats
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


@dataclass
class BeamConfig:
    beam: int = 10
    lm_weight: float = 0.0
    ins_penalty: float = 0.0

    def validate(self):
        if self.beam < 1:
            raise ValueError(f"beam size must be >= 1, got {self.beam}")
        if self.lm_weight < 0:
            raise ValueError(f"LM weight must be >= 0, got {self.lm_weight}")


@dataclass
class BeamHypothesis:
    prefix: tuple[int, ...]
    log_blank: float = NEG_INF
    log_nonblank: float = NEG_INF
    lm_score: float = 0.0

    @property
    def log_total(self) -> float:
        return _logaddexp(self.log_blank, self.log_nonblank)

    def fused(self, cfg: BeamConfig) -> float:
        return self.log_total + cfg.lm_weight * self.lm_score + cfg.ins_penalty * len(self.prefix)


def _rank(hyps, cfg: BeamConfig) -> list[BeamHypothesis]:
    # stable: best score first, ties broken by the lexicographically smaller prefix
    return sorted(hyps, key=lambda h: (-h.fused(cfg), h.prefix))


def _check_lm(lm, n_tokens: int):
    if lm is not None and lm.vocab_size != n_tokens:
        raise ValueError(f"LM vocabulary has {lm.vocab_size} tokens, acoustic model has {n_tokens}")


def prefix_beam_search(logprobs: np.ndarray, lm=None, cfg: BeamConfig | None = None,
                       blank: int | None = None) -> list[BeamHypothesis]:
    """Ranked hypotheses for frame log-probabilities (T x |V'|).

    ``lm`` is anything with ``vocab_size`` and ``logprob(history, token)``;
    its score is added once for each emitted token.
    """
    cfg = cfg or BeamConfig()
    cfg.validate()
    logprobs = np.asarray(logprobs, dtype=np.float64)
    n_cls = logprobs.shape[1]
    blank = n_cls - 1 if blank is None else blank
    tokens = [c for c in range(n_cls) if c != blank]
    _check_lm(lm, len(tokens))
    use_lm = lm is not None and cfg.lm_weight != 0.0

    beam = [BeamHypothesis((), 0.0, NEG_INF, 0.0)]
    for frame in logprobs.tolist():
        nxt: dict[tuple[int, ...], BeamHypothesis] = {}

        def slot(prefix, lm_score):
            h = nxt.get(prefix)
            if h is None:
                h = nxt[prefix] = BeamHypothesis(prefix, NEG_INF, NEG_INF, lm_score)
            return h

        for hyp in beam:
            total = hyp.log_total
            stay = slot(hyp.prefix, hyp.lm_score)
            stay.log_blank = _logaddexp(stay.log_blank, total + frame[blank])
            last = hyp.prefix[-1] if hyp.prefix else None
            if last is not None:
                stay.log_nonblank = _logaddexp(stay.log_nonblank, hyp.log_nonblank + frame[last])
            for c in tokens:
                # a repeated token only starts a new emission after a blank
                src = hyp.log_blank if c == last else total
                mass = src + frame[c]
                if mass == NEG_INF:
                    continue
                prefix = hyp.prefix + (c,)
                ext = nxt.get(prefix)
                if ext is None:
                    lm_score = hyp.lm_score + (lm.logprob(hyp.prefix, c) if use_lm else 0.0)
                    ext = slot(prefix, lm_score)
                ext.log_nonblank = _logaddexp(ext.log_nonblank, mass)
        beam = _rank(nxt.values(), cfg)[:cfg.beam]
    return _rank(beam, cfg)


def exhaustive_search(logprobs: np.ndarray, lm=None, cfg: BeamConfig | None = None,
                      blank: int | None = None) -> list[BeamHypothesis]:
    """Every reachable label sequence, scored exactly by summing its alignments.

    Cost is |V'|^T; meant as a reference for tiny inputs.
    """
    cfg = cfg or BeamConfig()
    logprobs = np.asarray(logprobs, dtype=np.float64)
    t_len, n_cls = logprobs.shape
    blank = n_cls - 1 if blank is None else blank
    _check_lm(lm, n_cls - 1)
    paths: dict[tuple[int, ...], list[float]] = {}
    for align in itertools.product(range(n_cls), repeat=t_len):
        y = tuple(collapse(align, blank))
        paths.setdefault(y, []).append(sum(logprobs[t, a] for t, a in enumerate(align)))
    hyps = []
    for y, terms in paths.items():
        lm_score = 0.0
        if lm is not None and cfg.lm_weight != 0.0:
            lm_score = sum(lm.logprob(y[:i], w) for i, w in enumerate(y))
        hyps.append(BeamHypothesis(y, NEG_INF, float(logsumexp_np(np.array(terms))), lm_score))
    return _rank(hyps, cfg)


def tune_fusion(dev_logprobs: Sequence[np.ndarray], references: Sequence[Sequence[int]], lm,
                grid: Sequence[tuple[float, float]], beam: int = 10,
                score_fn: Callable | None = None) -> tuple[tuple[float, float], list[dict]]:
    """Grid search over (lm_weight, ins_penalty) minimising corpus WER on dev.

    Ties go to the smaller LM weight, then the smaller absolute penalty.
    Returns the chosen pair and one result row per grid point.
    """
    from .metrics import corpus_wer

    if not grid:
        raise ValueError("empty fusion grid")
    score_fn = score_fn or corpus_wer
    rows = []
    for lam, gamma in grid:
        cfg = BeamConfig(beam, lam, gamma)
        hyps = [list(prefix_beam_search(lp, lm, cfg)[0].prefix) for lp in dev_logprobs]
        rows.append({"lm_weight": lam, "ins_penalty": gamma, "wer": score_fn(references, hyps)})
    best = min(rows, key=lambda r: (r["wer"], r["lm_weight"], abs(r["ins_penalty"])))
    return (best["lm_weight"], best["ins_penalty"]), rows

"""Word error rate, real-time factor and the metrics TSV."""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from threadpoolctl import threadpool_limits


@dataclass(frozen=True)
class WerResult:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> Fraction:
        return Fraction(self.errors, self.ref_len)

    def __float__(self):
        return float(self.rate)


def edit_ops(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(S, I, D) of a minimum-cost unit-weight alignment.

    Among minimum-cost alignments the one with the most substitutions is
    chosen, which makes the counts symmetric: swapping ref and hyp swaps I
    and D and keeps S.
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, -substitutions, insertions, deletions); tuple order breaks ties
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, ins, d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, s, ins, d)
            else:
                diag = (c + 1, s - 1, ins, d)
            c, s, ins, d = prev[j]
            dele = (c + 1, s, ins, d + 1)
            c, s, ins, d = cur[j - 1]
            inse = (c + 1, s, ins + 1, d)
            cur.append(min(diag, dele, inse, key=lambda x: (x[0], x[1])))
        prev = cur
    _, s, ins, d = prev[m]
    return -s, ins, d


def wer(ref: Sequence, hyp: Sequence) -> WerResult:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    s, i, d = edit_ops(ref, hyp)
    return WerResult(s, i, d, len(ref))


def corpus_counts(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> WerResult:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    s = i = d = n = 0
    for r, h in zip(refs, hyps):
        rs, ri, rd = edit_ops(r, h)
        s, i, d, n = s + rs, i + ri, d + rd, n + len(r)
    if n == 0:
        raise ValueError("WER is undefined for empty references")
    return WerResult(s, i, d, n)


def corpus_wer(refs, hyps) -> float:
    return float(corpus_counts(refs, hyps).rate)


@dataclass(frozen=True)
class NominalClock:
    """Maps synthetic frames to seconds of notional audio."""

    frames_per_second: float = 100.0

    def __post_init__(self):
        if self.frames_per_second <= 0:
            raise ValueError("frames_per_second must be positive")

    def seconds(self, frames: int) -> float:
        return frames / self.frames_per_second


def measure_rtf(decode_fn: Callable, items: Sequence, num_frames: Callable[[object], int],
                clock: NominalClock = NominalClock(), warmup: int = 1) -> float:
    """Wall time of ``decode_fn`` over ``items`` divided by their nominal duration.

    The first ``warmup`` items are decoded once untimed. BLAS is pinned to one
    thread while measuring.
    """
    if not items:
        raise ValueError("cannot measure RTF on an empty set")
    with threadpool_limits(limits=1):
        for item in items[:warmup]:
            decode_fn(item)
        elapsed = 0
        for item in items:
            t0 = time.perf_counter_ns()
            decode_fn(item)
            elapsed += time.perf_counter_ns() - t0
    audio = sum(clock.seconds(num_frames(x)) for x in items)
    return max(elapsed, 1) * 1e-9 / audio


METRIC_COLUMNS = ("split", "system", "decode_mode", "wer", "S", "I", "D", "rtf")


@dataclass
class MetricRow:
    split: str
    system: str
    decode_mode: str
    counts: WerResult
    rtf: float

    def fields(self) -> list[str]:
        c = self.counts
        return [self.split, self.system, self.decode_mode, f"{float(c.rate):.6f}",
                str(c.substitutions), str(c.insertions), str(c.deletions), f"{self.rtf:.6g}"]


def write_metrics(path: str | Path, rows: Sequence[MetricRow]):
    lines = ["\t".join(METRIC_COLUMNS)] + ["\t".join(r.fields()) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        rec = dict(zip(header, line.split("\t")))
        for key in ("wer", "rtf"):
            rec[key] = float(rec[key])
        for key in ("S", "I", "D"):
            rec[key] = int(rec[key])
        out.append(rec)
    return out

"""Decoding runs, metrics files and the variant-by-mode ablation report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from statistics import mean
from typing import Sequence

from .beam import BeamConfig, prefix_beam_search, tune_fusion
from .config import ExperimentConfig
from .corpus import Utterance, Vocab
from .ctc import ctc_greedy_decode
from .metrics import (MetricRow, NominalClock, corpus_counts, measure_rtf, read_metrics,
                      write_metrics)
from .model import AsrModel
from .train import VARIANTS, load_asr, load_corpus, load_lm

log = logging.getLogger(__name__)

MODES = ("greedy", "beam1", "beam10")
SPLITS = ("dev", "test")


@dataclass
class DecodeResult:
    ids: list[str]
    hyps: list[list[int]]
    rtf: float


def mode_config(mode: str, cfg: ExperimentConfig) -> BeamConfig | None:
    """Beam settings behind a named decode mode; ``None`` means greedy."""
    if mode == "greedy":
        return None
    if mode == "beam1":
        return BeamConfig(1, cfg.decode.lm_weight, cfg.decode.ins_penalty)
    if mode == "beam10":
        return BeamConfig(10, cfg.decode.lm_weight, cfg.decode.ins_penalty)
    raise ValueError(f"unknown decode mode {mode!r}; choose from {', '.join(MODES)}")


def decode_utterances(model: AsrModel, utts: Sequence[Utterance], beam: BeamConfig | None = None,
                      lm=None, clock: NominalClock = NominalClock()) -> DecodeResult:
    """Decode one utterance at a time and time it; greedy when ``beam`` is None."""
    if beam is not None and lm is not None and lm.vocab_size != model.vocab_size:
        raise ValueError(f"LM vocabulary has {lm.vocab_size} tokens, model has {model.vocab_size}")
    out: dict[str, list[int]] = {}

    def run(utt: Utterance):
        lp = model.frame_logprobs(utt.features)
        if beam is None:
            out[utt.id] = ctc_greedy_decode(lp)
        else:
            out[utt.id] = list(prefix_beam_search(lp, lm, beam)[0].prefix)

    rtf = measure_rtf(run, list(utts), lambda u: u.features.shape[0], clock)
    return DecodeResult([u.id for u in utts], [out[u.id] for u in utts], rtf)


def write_hyps(path: str | Path, result: DecodeResult, vocab: Vocab):
    lines = [f"{i}\t{vocab.decode(h)}" for i, h in zip(result.ids, result.hyps)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_hyps(path: str | Path, vocab: Vocab) -> dict[str, list[int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        utt_id, _, text = line.partition("\t")
        out[utt_id] = vocab.encode(text) if text else []
    return out


def decode_run(run: str | Path, split: str, beam: BeamConfig | None, tag: str | None = None,
               which: str = "best") -> tuple[Path, DecodeResult]:
    """Decode a split with a trained run; writes ``hyps/<split>.<tag>.txt`` and its RTF."""
    model, meta, cfg = load_asr(run, which)
    corpus = load_corpus(cfg)
    lm = None
    if beam is not None and beam.lm_weight != 0.0:
        lm = load_lm(cfg.paths.teacher_dir)
    if tag is None:
        tag = "greedy" if beam is None else f"beam{beam.beam}-lm{beam.lm_weight:g}-ip{beam.ins_penalty:g}"
    result = decode_utterances(model, corpus.utterances(split), beam, lm,
                               NominalClock(cfg.decode.frames_per_second))
    hyp_dir = Path(run) / "hyps"
    hyp_dir.mkdir(exist_ok=True)
    path = hyp_dir / f"{split}.{tag}.txt"
    write_hyps(path, result, corpus.vocab)
    path.with_suffix(".json").write_text(json.dumps({"rtf": result.rtf, "checkpoint": which}),
                                         encoding="utf-8")
    return path, result


def evaluate_run(run: str | Path, splits: Sequence[str] = SPLITS, modes: Sequence[str] = MODES,
                 dump: int = 0) -> list[MetricRow]:
    """Decode every split in every mode, score, and write ``metrics.tsv`` in the run dir."""
    run = Path(run)
    _, meta, cfg = load_asr(run)
    corpus = load_corpus(cfg)
    rows = []
    for split in splits:
        utts = corpus.utterances(split)
        refs = [u.transcript for u in utts]
        for mode in modes:
            _, result = decode_run(run, split, mode_config(mode, cfg), tag=mode)
            rows.append(MetricRow(split, meta["variant"], mode, corpus_counts(refs, result.hyps),
                                  result.rtf))
            for u, h in list(zip(utts, result.hyps))[:dump]:
                print(f"{split}\t{mode}\t{u.id}\tREF: {corpus.vocab.decode(u.transcript)}")
                print(f"{split}\t{mode}\t{u.id}\tHYP: {corpus.vocab.decode(h)}")
    write_metrics(run / "metrics.tsv", rows)
    return rows


def tune_run_fusion(run: str | Path, beam: int | None = None, apply: bool = False,
                    which: str = "best") -> tuple[tuple[float, float], list[dict]]:
    """Grid-search (LM weight, insertion penalty) on dev for a trained run.

    The grid is ``decode.lm_weights`` x ``decode.ins_penalties`` from the run
    config. Results go to ``fusion.tsv``; with ``apply`` the chosen pair is
    written back to the run's ``config.txt`` so later beam decodes use it.
    """
    run = Path(run)
    model, _, cfg = load_asr(run, which)
    corpus = load_corpus(cfg)
    lm = load_lm(cfg.paths.teacher_dir)
    if lm.vocab_size != model.vocab_size:
        raise ValueError(f"LM vocabulary has {lm.vocab_size} tokens, model has {model.vocab_size}")
    dev = corpus.utterances("dev")
    grid = [(lam, gam) for lam in cfg.decode.lm_weights for gam in cfg.decode.ins_penalties]
    best, rows = tune_fusion(model.batch_logprobs([u.features for u in dev]),
                             [u.transcript for u in dev], lm, grid, beam or cfg.decode.beam)
    lines = ["lm_weight\tins_penalty\twer"] + [
        f"{r['lm_weight']!r}\t{r['ins_penalty']!r}\t{r['wer']:.6f}" for r in rows]
    (run / "fusion.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if apply:
        cfg.decode.lm_weight, cfg.decode.ins_penalty = best
        cfg.save(run / "config.txt")
    return best, rows


# ---------------------------------------------------------------------------
# report


@dataclass
class Report:
    columns: list[tuple[str, str]]          # (split, mode)
    rows: list[dict]                        # variant, seeds, wer{col}, rtf{col}, werr
    werr_column: tuple[str, str] | None
    missing: list[str]

    def tsv(self) -> str:
        head = ["system", "seeds"] + [f"{s}/{m}" for s, m in self.columns] + ["werr"]
        lines = ["\t".join(head)]
        for r in self.rows:
            cells = [r["system"], str(r["seeds"])]
            cells += [_pct(r["wer"].get(c)) for c in self.columns]
            cells.append(_pct(r["werr"]))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def render(self) -> str:
        """Fixed-width text: the WER table, then real-time factors separately."""
        head = ["system", "seeds"] + [f"{s}/{m}" for s, m in self.columns] + ["WERR"]
        body = [[r["system"], str(r["seeds"])] + [_pct(r["wer"].get(c)) for c in self.columns]
                + [_pct(r["werr"])] for r in self.rows]
        text = ["WER [%] (mean over seeds); WERR relative to ctc on "
                + ("/".join(self.werr_column) if self.werr_column else "n/a"),
                _grid(head, body), "", "RTF (single-threaded, mean over seeds)"]
        rtf_body = [[r["system"], str(r["seeds"])] + [_num(r["rtf"].get(c)) for c in self.columns]
                    for r in self.rows]
        text.append(_grid(head[:-1], rtf_body))
        if self.missing:
            text += ["", "missing runs: " + ", ".join(self.missing)]
        return "\n".join(text) + "\n"


def _pct(x) -> str:
    return "-" if x is None else f"{100.0 * x:.2f}"


def _num(x) -> str:
    return "-" if x is None else f"{x:.4g}"


def _grid(head: list[str], body: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]

    def fmt(row):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))

    return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body])


def build_report(run_dirs: Sequence[str | Path]) -> Report:
    """Aggregate ``metrics.tsv`` of many runs; seeds of one variant are averaged."""
    missing = []
    per_system: dict[str, list[list[dict]]] = {}
    for run in run_dirs:
        path = Path(run) / "metrics.tsv"
        if not path.exists():
            missing.append(str(run))
            continue
        recs = read_metrics(path)
        if not recs:
            missing.append(str(run))
            continue
        per_system.setdefault(recs[0]["system"], []).append(recs)

    columns = []
    for split in SPLITS:
        for mode in MODES:
            if any(r["split"] == split and r["decode_mode"] == mode
                   for runs in per_system.values() for recs in runs for r in recs):
                columns.append((split, mode))
    order = sorted(per_system, key=lambda s: (VARIANTS.index(s) if s in VARIANTS else len(VARIANTS), s))
    rows = []
    for system in order:
        wer, rtf = {}, {}
        for col in columns:
            vals = [r for recs in per_system[system] for r in recs
                    if (r["split"], r["decode_mode"]) == col]
            if vals:
                wer[col] = mean(r["wer"] for r in vals)
                rtf[col] = mean(r["rtf"] for r in vals)
        rows.append({"system": system, "seeds": len(per_system[system]), "wer": wer, "rtf": rtf})

    werr_col = next((c for c in [("test", "greedy"), ("dev", "greedy")] if c in columns),
                    columns[0] if columns else None)
    base = next((r for r in rows if r["system"] == "ctc"), None)
    for r in rows:
        b = base["wer"].get(werr_col) if base else None
        x = r["wer"].get(werr_col)
        r["werr"] = (b - x) / b if b and x is not None else None
    return Report(columns, rows, werr_col, missing)


def write_report(report: Report, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.tsv(), encoding="utf-8")
    (out / "report.txt").write_text(report.render(), encoding="utf-8")
    return out / "report.tsv", out / "report.txt"


"""Training stages: the frozen teacher bundle and the four ASR loss compositions."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .conformer import tap_layers
from .config import ExperimentConfig
from .corpus import Corpus, Utterance
from .ctc import ctc_greedy_decode, ctc_loss_batch, inter_ctc_combine
from .distill import DistillWeights, distill_loss, kl_loss, soft_label_batch, total_loss
from .metrics import corpus_wer
from .model import AsrModel, pad_features
from .ngram import NgramLm, ngram_train
from .optim import OptimizerState, optimizer_step
from .teacher import (MaskedLm, SoftLabelSet, extract_many, masked_accuracy, mlm_train,
                      read_soft_labels, sentence_key, write_soft_labels)

log = logging.getLogger(__name__)

VARIANTS = ("ctc", "aed-kd", "interaed-kd", "interctc-interaed-kd")

TEACHER_CKPT = "teacher.ckpt"
LM_FILE = "lm.txt"
SOFT_LABELS = "soft_labels.bin"


class MissingArtifactError(RuntimeError):
    """A stage's input (corpus, teacher, cache, checkpoint) is not on disk."""


class RunLedger:
    """Append-only JSON-lines record of a training run."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, record: dict):
        for ckpt in record.get("checkpoints", {}).values():
            if not Path(ckpt).exists():
                raise MissingArtifactError(f"ledger refers to missing checkpoint {ckpt}")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line]

    def epochs(self) -> list[dict]:
        return [r for r in self.records() if "epoch" in r]


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    try:
        return Corpus.load(cfg.paths.data_dir)
    except FileNotFoundError as exc:
        raise MissingArtifactError(f"{exc}; run gen-data first") from None


# ---------------------------------------------------------------------------
# teacher stage


@dataclass
class TeacherBundle:
    teacher: MaskedLm
    lm: NgramLm
    soft_labels: dict[str, SoftLabelSet]
    teacher_hash: str
    extracted: bool          # False when the cache was reused


def _teacher_meta(cfg: ExperimentConfig, corpus: Corpus) -> dict:
    # a teacher is reusable only for the same settings and the same text
    return {"teacher": dataclasses.asdict(cfg.teacher), "vocab_size": corpus.vocab.size,
            "language": corpus.spec.digest(), "corpus_seed": corpus.config.seed,
            "n_text": corpus.config.n_text, "ngram_order": cfg.decode.ngram_order}


def load_teacher(teacher_dir: str | Path) -> MaskedLm:
    from .teacher import TeacherConfig

    path = Path(teacher_dir) / TEACHER_CKPT
    if not path.exists():
        raise MissingArtifactError(f"missing teacher checkpoint {path}; run train-teacher first")
    params, meta = load_checkpoint(path, with_metadata=True)
    model = MaskedLm(np.random.default_rng(0), meta["vocab_size"], TeacherConfig(**meta["teacher"]))
    model.load_state_dict(params)
    return model


def load_lm(teacher_dir: str | Path) -> NgramLm:
    path = Path(teacher_dir) / LM_FILE
    if not path.exists():
        raise MissingArtifactError(f"missing n-gram LM {path}; run train-teacher first")
    return NgramLm.load(path)


def _cache_hit(path: Path, teacher_hash: str, k: int, train: Sequence[Utterance]):
    if not path.exists():
        return None
    try:
        cache = read_soft_labels(path)
    except Exception:  # unreadable cache is rebuilt, never trusted
        return None
    if cache.teacher_hash != teacher_hash or cache.k != k:
        return None
    for utt in train:
        sl = cache.labels.get(utt.id)
        if sl is None or sl.key != sentence_key(utt.transcript):
            return None
    return cache.labels


def train_teacher(cfg: ExperimentConfig) -> TeacherBundle:
    """Masked LM, n-gram LM and soft labels for every paired-train transcript.

    A teacher checkpoint trained under the same settings is reused, and the
    soft-label cache is reused when its header matches the teacher hash and K.
    """
    corpus = load_corpus(cfg)
    out = Path(cfg.paths.teacher_dir)
    out.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(out / "ledger.jsonl")
    v = corpus.vocab.size
    meta = _teacher_meta(cfg, corpus)
    ckpt = out / TEACHER_CKPT
    train = corpus.utterances("train")
    dev_text = [u.transcript for u in corpus.utterances("dev")]

    with threadpool_limits(limits=1):
        teacher = None
        if ckpt.exists():
            _, old = load_checkpoint(ckpt, with_metadata=True)
            if old == meta:
                teacher = load_teacher(out)
        if teacher is None:
            teacher, history = mlm_train(corpus.text(), v, cfg.teacher)
            save_checkpoint(teacher.state_dict(), ckpt, meta)
            for rec in history:
                ledger.append({"stage": "mlm", **rec})
            lm = ngram_train(corpus.text(), cfg.decode.ngram_order, corpus.vocab.tokens)
            lm.save(out / LM_FILE)
        lm = load_lm(out)
        digest = teacher.digest()
        labels = _cache_hit(out / SOFT_LABELS, digest, cfg.distill.k, train)
        extracted = labels is None
        if extracted:
            sets = extract_many([u.transcript for u in train], teacher, cfg.distill.k)
            labels = {u.id: s for u, s in zip(train, sets)}
            write_soft_labels(out / SOFT_LABELS, cfg.distill.k, digest, labels)
        acc = masked_accuracy(teacher, dev_text, seed=cfg.teacher.seed, prob=cfg.teacher.mask_prob)
    ledger.append({"stage": "soft_labels", "teacher_hash": digest, "k": cfg.distill.k,
                   "extracted": extracted, "count": len(labels), "dev_masked_acc": acc})
    log.info("teacher %s: dev masked accuracy %.4f, soft labels %s", digest[:12], acc,
             "extracted" if extracted else "reused (hash hit)")
    return TeacherBundle(teacher, lm, labels, digest, extracted)


def load_soft_labels(cfg: ExperimentConfig) -> dict[str, SoftLabelSet]:
    path = Path(cfg.paths.teacher_dir) / SOFT_LABELS
    if not path.exists():
        raise MissingArtifactError(f"KD training needs the soft-label cache {path}; "
                                   f"run train-teacher first")
    cache = read_soft_labels(path)
    if cache.k != cfg.distill.k:
        raise MissingArtifactError(f"soft-label cache has K={cache.k}, config wants "
                                   f"K={cfg.distill.k}; rerun train-teacher")
    return cache.labels


# ---------------------------------------------------------------------------
# ASR training


@dataclass(frozen=True)
class VariantPlan:
    """Which loss terms a variant trains with."""

    variant: str
    decoder: bool
    kd_taps: tuple[int, ...]        # intermediate layers with a KL term
    interctc_taps: tuple[int, ...]  # intermediate layers with a CTC term

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.kd_taps) | set(self.interctc_taps)))


def variant_plan(variant: str, cfg: ExperimentConfig) -> VariantPlan:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    n = cfg.encoder.num_layers
    m = max(cfg.distill.m, 1)
    taps = tuple(tap_layers(m, n))
    if variant == "ctc":
        return VariantPlan(variant, False, (), ())
    if variant == "aed-kd":
        return VariantPlan(variant, True, (), ())
    if variant == "interaed-kd":
        return VariantPlan(variant, True, taps, ())
    return VariantPlan(variant, True, taps, taps)


def run_dir(cfg: ExperimentConfig, variant: str) -> Path:
    return Path(cfg.paths.runs_dir) / f"{variant}-seed{cfg.train.seed}"


def make_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator,
                 pool: int = 8) -> list[np.ndarray]:
    """Shuffled fixed-size batches of similar length.

    Indices are shuffled, cut into pools of ``pool`` batches, sorted by length
    inside each pool, then batched; batch order is shuffled again.
    """
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    span = batch_size * pool
    batches = []
    for start in range(0, len(order), span):
        chunk = order[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def dev_ctc_loss(model: AsrModel, utts: Sequence[Utterance], batch_size: int = 50) -> float:
    """Mean final-layer CTC loss per utterance, eval mode."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(utts), batch_size):
            batch = utts[start:start + batch_size]
            x, lengths = pad_features([u.features for u in batch])
            enc = model.encoder(x, lengths)
            losses = ctc_loss_batch(model.ctc_head(enc.final), enc.lengths,
                                    [u.transcript for u in batch])
            total += float(losses.data.sum())
    return total / len(utts)


def greedy_hyps(model: AsrModel, utts: Sequence[Utterance], batch_size: int = 50) -> list[list[int]]:
    out = []
    for start in range(0, len(utts), batch_size):
        batch = utts[start:start + batch_size]
        out += [ctc_greedy_decode(lp) for lp in model.batch_logprobs([u.features for u in batch])]
    return out


class AsrTrainer:
    """One training run of one variant. ``counters`` tallies every loss term computed."""

    def __init__(self, cfg: ExperimentConfig, variant: str,
                 soft_labels: dict[str, SoftLabelSet] | None, vocab_size: int, feat_dim: int):
        self.cfg = cfg
        self.plan = variant_plan(variant, cfg)
        if self.plan.decoder and soft_labels is None:
            raise MissingArtifactError(f"variant {variant} needs the teacher soft-label cache")
        self.soft_labels = soft_labels
        self.model = AsrModel(vocab_size, feat_dim, cfg.encoder,
                              cfg.decoder if self.plan.decoder else None, seed=cfg.train.seed)
        self.params = dict(self.model.named_parameters())
        tc = cfg.train
        self.opt = OptimizerState(peak_lr=tc.peak_lr, warmup=tc.warmup, clip_norm=tc.clip_norm)
        self.shuffle_rng = np.random.default_rng([tc.seed, 2])
        self.dropout_rng = np.random.default_rng([tc.seed, 3])
        self.weights = DistillWeights(cfg.distill.alpha, cfg.distill.beta, cfg.distill.k,
                                      len(self.plan.kd_taps), list(self.plan.kd_taps))
        self.counters: Counter = Counter()

    def batch_loss(self, batch: Sequence[Utterance]) -> tuple[T.Tensor, dict[str, float]]:
        plan, rng = self.plan, self.dropout_rng
        x, lengths = pad_features([u.features for u in batch])
        ys = [u.transcript for u in batch]
        enc = self.model.encoder(x, lengths, plan.taps, rng)
        head = self.model.ctc_head
        ctc = ctc_loss_batch(head(enc.final), enc.lengths, ys).mean()
        self.counters["ctc"] += 1
        terms = {"ctc": ctc.item()}
        if plan.interctc_taps:
            inter = [ctc_loss_batch(head(enc.taps[l]), enc.lengths, ys).mean()
                     for l in plan.interctc_taps]
            self.counters["inter_ctc"] += len(inter)
            inter_ctc = sum(inter[1:], inter[0]) * (1.0 / len(inter))
            terms["inter_ctc"] = inter_ctc.item()
            ctc = inter_ctc_combine(ctc, inter_ctc, self.cfg.interctc.weight)
        if not plan.decoder:
            return ctc, terms

        labels = [self.soft_labels[u.id] for u in batch]
        dec = self.model.decoder
        hist, hist_len = dec.teacher_forcing_input(ys)
        ids, probs, pos_mask = soft_label_batch(labels, hist.shape[1], self.cfg.distill.k)

        # one decoder pass over the final layer and every tap, stacked on the batch axis
        memories = [enc.final] + [enc.taps[l] for l in plan.kd_taps]
        n, b = len(memories), len(batch)
        logits = dec(np.tile(hist, (n, 1)), np.tile(hist_len, n),
                     T.concat(memories, axis=0) if n > 1 else enc.final,
                     np.tile(enc.lengths, n), rng)
        logp = T.log_softmax(logits)
        kls = [kl_loss(logp[i * b:(i + 1) * b], ids, probs, pos_mask,
                       reverse=self.cfg.distill.reverse_kl, floor=self.cfg.distill.floor)
               for i in range(n)]
        final_kl, inter_kls = kls[0], kls[1:]
        self.counters["kl_final"] += 1
        self.counters["kl_inter"] += len(inter_kls)
        terms["kl_final"] = final_kl.item()
        for l, kl in zip(plan.kd_taps, inter_kls):
            terms[f"kl_tap{l}"] = kl.item()
        return total_loss(ctc, distill_loss(final_kl, inter_kls, self.weights),
                          self.cfg.distill.alpha), terms

    def train_epoch(self, utts: Sequence[Utterance]) -> dict[str, float]:
        sums: dict[str, float] = {}
        batches = make_batches([len(u.features) for u in utts], self.cfg.train.batch_size,
                               self.shuffle_rng)
        for idx in batches:
            loss, terms = self.batch_loss([utts[i] for i in idx])
            loss.backward()
            optimizer_step(self.opt, self.params)
            terms["total"] = loss.item()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
        return {k: v / len(batches) for k, v in sums.items()}


def train_asr(cfg: ExperimentConfig, variant: str) -> Path:
    """Train one variant; returns its run directory.

    Writes ``config.txt``, ``ledger.jsonl`` (one line per epoch) and the
    ``best.ckpt`` (lowest dev CTC loss) and ``last.ckpt`` checkpoints.
    """
    corpus = load_corpus(cfg)
    plan = variant_plan(variant, cfg)
    labels = load_soft_labels(cfg) if plan.decoder else None
    train = corpus.utterances("train")
    dev = corpus.utterances("dev")
    if labels is not None:
        missing = [u.id for u in train if u.id not in labels]
        if missing:
            raise MissingArtifactError(f"soft-label cache lacks {len(missing)} train "
                                       f"utterances (e.g. {missing[0]}); rerun train-teacher")
    out = run_dir(cfg, variant)
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("ledger.jsonl", "metrics.tsv"):
        (out / stale).unlink(missing_ok=True)
    cfg.save(out / "config.txt")
    ledger = RunLedger(out / "ledger.jsonl")

    with threadpool_limits(limits=1):
        trainer = AsrTrainer(cfg, variant, labels, corpus.vocab.size, corpus.config.feat_dim)
        ledger.append({"event": "start", "variant": variant, "seed": cfg.train.seed,
                       "kd_taps": list(plan.kd_taps), "interctc_taps": list(plan.interctc_taps),
                       "parameters": trainer.model.num_parameters()})
        log.info("%s seed %d: taps kd=%s interctc=%s", variant, cfg.train.seed,
                 list(plan.kd_taps), list(plan.interctc_taps))
        best = np.inf
        meta = {"variant": variant, "vocab_size": corpus.vocab.size,
                "feat_dim": corpus.config.feat_dim}
        for epoch in range(1, cfg.train.epochs + 1):
            t0 = time.perf_counter()
            stats = trainer.train_epoch(train)
            dev_loss = dev_ctc_loss(trainer.model, dev)
            dev_wer = corpus_wer([u.transcript for u in dev], greedy_hyps(trainer.model, dev))
            state = trainer.model.state_dict()
            save_checkpoint(state, out / "last.ckpt", {**meta, "epoch": epoch, "dev_ctc": dev_loss})
            ckpts = {"last": str(out / "last.ckpt")}
            if dev_loss < best:
                best = dev_loss
                save_checkpoint(state, out / "best.ckpt", {**meta, "epoch": epoch, "dev_ctc": dev_loss})
                ckpts["best"] = str(out / "best.ckpt")
            ledger.append({"epoch": epoch, "train": stats, "dev": {"ctc": dev_loss, "greedy_wer": dev_wer},
                           "lr": trainer.opt.lr, "seconds": round(time.perf_counter() - t0, 3),
                           "checkpoints": ckpts})
            log.info("%s epoch %d: train %.4f dev ctc %.4f wer %.4f", variant, epoch,
                     stats["total"], dev_loss, dev_wer)
        ledger.append({"event": "end", "counters": dict(trainer.counters), "best_dev_ctc": best})
    return out


def load_asr(run: str | Path, which: str = "best") -> tuple[AsrModel, dict, ExperimentConfig]:
    """Model, checkpoint metadata and config of a finished run."""
    run = Path(run)
    path = run / f"{which}.ckpt"
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint {path}; run train-asr first")
    cfg = ExperimentConfig.load(run / "config.txt")
    params, meta = load_checkpoint(path, with_metadata=True)
    plan = variant_plan(meta["variant"], cfg)
    model = AsrModel(meta["vocab_size"], meta["feat_dim"], cfg.encoder,
                     cfg.decoder if plan.decoder else None, seed=cfg.train.seed)
    model.load_state_dict(params)
    return model, meta, cfg

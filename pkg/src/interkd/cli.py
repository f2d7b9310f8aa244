"""Command-line entry point: ``interkd <command> [options]``.

Exit status is 0 on success, 2 on usage errors (bad flags, unreadable config)
and 1 when a stage fails at run time.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .beam import BeamConfig
from .config import ExperimentConfig

log = logging.getLogger("interkd")


class UsageError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        for item in args.set or []:
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"--set expects key=value, got {item!r}")
            cfg.set(key.strip(), value)
    except (FileNotFoundError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_init_config(args) -> int:
    cfg = _load_config(args)
    if args.out == "-":
        sys.stdout.write(cfg.dumps())
    else:
        cfg.save(args.out)
    return 0


def cmd_gen_data(args) -> int:
    from .corpus import build_corpora

    cfg = _load_config(args)
    out = Path(cfg.paths.data_dir)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    manifests = build_corpora(cfg.corpus, out)
    for split, m in manifests.items():
        print(f"{split}\t{len(m.records)} utterances")
    print(f"text\t{cfg.corpus.n_text} sentences")
    return 0


def cmd_train_teacher(args) -> int:
    from .train import train_teacher

    bundle = train_teacher(_load_config(args))
    state = "extracted" if bundle.extracted else "reused (hash hit)"
    print(f"teacher {bundle.teacher_hash[:16]}  soft labels {state}: {len(bundle.soft_labels)}")
    return 0


def cmd_train_asr(args) -> int:
    from .train import train_asr

    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    print(train_asr(cfg, args.variant))
    return 0


def cmd_decode(args) -> int:
    from .evaluate import decode_run

    if args.mode == "greedy":
        beam = None
    else:
        beam = BeamConfig(args.beam, args.lm_weight, args.ins_penalty)
        try:
            beam.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    path, result = decode_run(args.run, args.split, beam, which=args.checkpoint)
    print(f"{path}\t{len(result.hyps)} hypotheses\trtf={result.rtf:.4g}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_run

    for row in evaluate_run(args.run, args.splits, args.modes, dump=args.dump):
        print("\t".join(row.fields()))
    return 0


def cmd_tune_fusion(args) -> int:
    from .evaluate import tune_run_fusion

    (lam, gam), rows = tune_run_fusion(args.run, args.beam, args.apply, args.checkpoint)
    for r in rows:
        print(f"lm_weight={r['lm_weight']:g}\tins_penalty={r['ins_penalty']:g}\twer={r['wer']:.4f}")
    print(f"best\tlm_weight={lam:g}\tins_penalty={gam:g}" + ("\t(applied)" if args.apply else ""))
    return 0


def cmd_report(args) -> int:
    from .evaluate import build_report, write_report

    report = build_report(args.runs)
    if args.out:
        write_report(report, args.out)
    sys.stdout.write(report.render())
    if not report.rows:
        return 1
    return 1 if report.missing else 0


def build_parser() -> argparse.ArgumentParser:
    from .evaluate import MODES, SPLITS
    from .train import VARIANTS

    p = argparse.ArgumentParser(prog="interkd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file (defaults when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value; repeatable")
        return sp

    sp = with_config(sub.add_parser("init-config", help="write the effective config"))
    sp.add_argument("--out", default="-", help="output path, '-' for stdout")
    sp.set_defaults(func=cmd_init_config)

    sp = with_config(sub.add_parser("gen-data", help="generate the synthetic corpus"))
    sp.add_argument("--force", action="store_true", help="replace an existing corpus")
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("train-teacher",
                                    help="train masked LM and n-gram LM, cache soft labels"))
    sp.set_defaults(func=cmd_train_teacher)

    sp = with_config(sub.add_parser("train-asr", help="train one ASR variant"))
    sp.add_argument("--variant", required=True, choices=VARIANTS)
    sp.add_argument("--seed", type=int, help="override train.seed")
    sp.set_defaults(func=cmd_train_asr)

    sp = sub.add_parser("decode", help="decode one split with a trained run")
    sp.add_argument("--run", required=True, help="run directory written by train-asr")
    sp.add_argument("--split", default="dev", choices=SPLITS + ("train",))
    sp.add_argument("--mode", default="greedy", choices=("greedy", "beam"))
    sp.add_argument("--beam", type=int, default=10)
    sp.add_argument("--lm-weight", type=float, default=0.0)
    sp.add_argument("--ins-penalty", type=float, default=0.0)
    sp.add_argument("--checkpoint", default="best", choices=("best", "last"))
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("tune-fusion", help="grid-search LM weight and insertion penalty on dev")
    sp.add_argument("--run", required=True)
    sp.add_argument("--beam", type=int, help="beam size (default decode.beam)")
    sp.add_argument("--apply", action="store_true", help="store the best pair in the run config")
    sp.add_argument("--checkpoint", default="best", choices=("best", "last"))
    sp.set_defaults(func=cmd_tune_fusion)

    sp = sub.add_parser("eval", help="decode dev/test in every mode and write metrics.tsv")
    sp.add_argument("--run", required=True)
    sp.add_argument("--splits", nargs="+", default=list(SPLITS), choices=SPLITS)
    sp.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    sp.add_argument("--dump", type=int, default=0, metavar="N",
                    help="print reference and hypothesis of the first N utterances")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="ablation table over run directories")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--out", help="directory for report.tsv and report.txt")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"interkd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure of a stage
        if args.verbose:
            log.exception("command failed")
        print(f"interkd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

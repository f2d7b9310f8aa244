"""Default-corpus sweep: 3 variants x 3 seeds, greedy dev WER per run and the report.

usage: python3 demos/ordering_sweep.py OUT_DIR [--seeds 0 1 2]
"""

import argparse
import logging
import time
from pathlib import Path

from interkd.config import ExperimentConfig
from interkd.corpus import build_corpora
from interkd.evaluate import build_report, evaluate_run, write_report
from interkd.train import train_asr, train_teacher

VARIANTS = ("ctc", "interaed-kd", "interctc-interaed-kd")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    cfg = ExperimentConfig()
    cfg.paths.data_dir = str(out / "data")
    cfg.paths.teacher_dir = str(out / "teacher")
    cfg.paths.runs_dir = str(out / "runs")
    start = time.perf_counter()
    if not (out / "data").exists():
        build_corpora(cfg.corpus, cfg.paths.data_dir)
    train_teacher(cfg)
    runs = []
    for seed in args.seeds:
        cfg.train.seed = seed
        for v in VARIANTS:
            runs.append(train_asr(cfg, v))
            evaluate_run(runs[-1], splits=("dev",), modes=("greedy",))
    tsv, txt = write_report(build_report(runs), out / "report")
    print(txt.read_text())
    print(f"total {(time.perf_counter() - start) / 60:.1f} min")


if __name__ == "__main__":
    main()

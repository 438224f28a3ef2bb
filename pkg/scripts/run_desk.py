"""Train the desk-scale models, run the full evaluation and print an AUROC table.

    python scripts/run_desk.py [--config configs/desk.yaml] [--out runs/desk]
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

from noisec import experiment as ex
from noisec.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--models", default=None, help="reuse checkpoints from this run directory")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    train, test = ex.load_data(cfg)
    start = time.time()
    if args.models:
        ms = ex.load_models(cfg, args.models, train, test)
    else:
        ms = ex.train_models(cfg, train, test)
        ex.save_models(ms, cfg.out, cfg.hash())
    trained = time.time()
    report = ex.run_experiment(cfg, ms)
    report.write(cfg.out)
    done = time.time()

    for k, v in sorted(report.model_metrics.items()):
        print(f"{k:28s} {v:.4f}")
    detectors = list(cfg.detectors)
    print(f"\n{'setting':9s} {'attack':7s} " + " ".join(f"{d:>10s}" for d in detectors))
    for s in report.attacks:
        row = [report.cell(s.setting, s.attack, d).auroc for d in detectors]
        print(f"{s.setting:9s} {s.attack:7s} " + " ".join(f"{v:10.3f}" for v in row))
    print(f"\ntrain {trained - start:.0f}s  eval {done - trained:.0f}s  report in {cfg.out}")


if __name__ == "__main__":
    main()

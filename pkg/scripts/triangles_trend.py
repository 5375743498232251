"""Boundary-vs-interior trend on generated TRIANGLES.

Holds out one triangle-count class at a time and prints the AUROC of every uncertainty
type for each requested method, one row per (run, ood_class, method, type).

    python3 scripts/triangles_trend.py --runs 3 --classes 0 4 9 --methods de natpn
"""

import argparse
import time

import torch

from graphood.data import generate_triangles_dataset
from graphood.encoder import EncoderConfig
from graphood.protocol import ExperimentConfig, ModelCache, run_loco_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--per-class", type=int, default=300)
    ap.add_argument("--classes", type=int, nargs="+", default=[0, 4])
    ap.add_argument("--methods", nargs="+", default=["single", "de", "natpn"])
    ap.add_argument("--splits", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--ensemble-size", type=int, default=5)
    args = ap.parse_args()
    torch.set_num_threads(1)

    enc = EncoderConfig(hidden_dim=32, max_epochs=args.epochs, patience=15, learning_rate=5e-3, dropout_p=0.1,
                        propagation="sum", batch_size=64)
    cfg = ExperimentConfig(encoder=enc, ensemble_size=args.ensemble_size)
    print("run,ood_triangles,method,unc_type,auroc_mean,val_accuracy,seconds")
    for run in range(args.runs):
        d = generate_triangles_dataset(args.per_class, (10, 30), seed=100 + run)
        cache = ModelCache()  # single, mc, nuq and de share encoders within a run
        for c in args.classes:
            for m in args.methods:
                t = time.perf_counter()
                r = run_loco_experiment(d, m, c, args.splits, 10 * run, cfg, cache)
                acc = sum(r.val_accuracy) / len(r.val_accuracy)
                for unc, value in r.auroc_mean.items():
                    print(f"{run},{c + 1},{m},{unc},{value:.4f},{acc:.4f},{time.perf_counter() - t:.1f}", flush=True)


if __name__ == "__main__":
    main()

"""Per-feature KS separation of noise embeddings, read from a finished report.

For each attack, prints the mean -ln p of the two-sample KS test between
malicious and natural noise features, the same for matched benign noise, and
their ratio.  With --plot, also draws the per-feature curves (needs matplotlib).

    python scripts/feature_separation.py runs/desk/report.json [--plot out.png]
"""

import argparse
import json

import numpy as np


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("report")
    ap.add_argument("--plot", default=None)
    args = ap.parse_args()
    doc = json.loads(open(args.report).read())
    ks = doc["ks_neglogp"]

    print(f"{'cell':18s} {'malicious':>10s} {'benign':>10s} {'ratio':>8s}")
    for key in sorted(ks):
        mal, ben = np.mean(ks[key]["malicious"]), np.mean(ks[key]["benign"])
        ratio = mal / ben if ben > 0 else float("inf")
        print(f"{key:18s} {mal:10.2f} {ben:10.2f} {ratio:8.2f}")

    if args.plot:
        import matplotlib.pyplot as plt

        keys = sorted(ks)
        fig, axes = plt.subplots(len(keys), 1, figsize=(8, 2.2 * len(keys)), squeeze=False)
        for ax, key in zip(axes[:, 0], keys):
            ax.plot(ks[key]["malicious"], lw=0.8, label="malicious vs natural")
            ax.plot(ks[key]["benign"], lw=0.8, label="benign vs natural")
            ax.set_title(key, fontsize=9)
            ax.set_ylabel("-ln p")
        axes[0, 0].legend(fontsize=8)
        axes[-1, 0].set_xlabel("feature")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)


if __name__ == "__main__":
    main()

"""Recall at fixed precision versus Gaussian noise (and optionally downsampling).

    python scripts/noise_rp.py --sigmas 0.1 0.3 0.5 1.0 --out results/noise
"""
import argparse
import time
from pathlib import Path

from sgc.evaluation import rp_experiment, write_rp
from sgc.synthetic import Blob


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.1, 0.3, 0.5, 1.0])
    ap.add_argument("--fractions", type=float, nargs="+", default=[1.0])
    ap.add_argument("--features", type=int, default=500)
    ap.add_argument("--r-ratio", type=float, default=1.0)
    ap.add_argument("--precision", type=float, default=0.8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="directory for per-setting RP CSVs")
    args = ap.parse_args()

    models = [Blob.random(s, radius=30).sample(1.0, seed=s, id=f"m{s}") for s in (11, 12, 13)]
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    print(f"{'sigma':>6} {'frac':>6} {'recall@P':>9} {'max_recall':>10} {'secs':>5}")
    for frac in args.fractions:
        for sigma in args.sigmas:
            t = time.perf_counter()
            curve = rp_experiment(models, sigma, frac, args.seed, args.features, r_ratio=args.r_ratio)
            print(f"{sigma:6g} {frac:6g} {curve.recall_at_precision(args.precision):9.3f} "
                  f"{curve.recall.max():10.3f} {time.perf_counter() - t:5.0f}")
            if args.out:
                write_rp(args.out / f"rp_sigma{sigma:g}_frac{frac:g}.csv", curve)


if __name__ == "__main__":
    main()

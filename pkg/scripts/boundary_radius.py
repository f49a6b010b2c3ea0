"""Self-match rank-1 rate near a scan border for several LRF radii r/R.

A terrain model is cut in half; features of the half-view that lie within
(lo, hi]·R of the cut are matched against the full model plus 400 distractors.
"""
import argparse

import numpy as np

from sgc.descriptor import DescriptorStack, SgcParams, describe
from sgc.evaluation import boundary_distances, boundary_mask
from sgc.pointcloud import SpatialIndex, compute_resolution, random_sample
from sgc.synthetic import HeightField


def rank1(seed, ratios, band, features=150):
    model = HeightField.random(seed, extent=(0, 100, 0, 80)).sample((0, 100, 0, 80), 1.0, seed=seed, id="model")
    keep = np.flatnonzero(model.points[:, 0] < 50)
    view = model.subset(keep, id="view")
    pr = compute_resolution(model)
    R = 20 * pr
    vi, mi = SpatialIndex(view), SpatialIndex(model)
    bd = boundary_distances(view, boundary_mask(view, vi, pr), view.points)
    cand = np.flatnonzero((bd > band[0] * R) & (bd <= band[1] * R))
    cand = np.random.default_rng(seed).choice(cand, min(features, len(cand)), replace=False)
    pool = np.unique(np.concatenate([keep[cand], random_sample(model, 400, seed)]))
    out = {}
    for rr in ratios:
        p = SgcParams.from_resolution(pr, 20, rr, 8)
        dv, _ = describe(view, vi, cand, p, skip_ambiguous=False)
        dm, _ = describe(model, mi, pool, p, skip_ambiguous=False)
        S = DescriptorStack(dv).matrix(DescriptorStack(dm))
        pos = {d.feature_index: j for j, d in enumerate(dm)}
        truth = np.array([pos[keep[d.feature_index]] for d in dv])
        out[rr] = float(np.mean(np.argmax(S, axis=1) == truth))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.25, 0.5, 0.75, 1.0])
    ap.add_argument("--bands", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0],
                    help="band edges in units of R")
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    print("band      " + " ".join(f"r={r:<5g}" for r in args.ratios))
    for lo, hi in zip(args.bands, args.bands[1:]):
        runs = [rank1(s, args.ratios, (lo, hi)) for s in range(args.seeds)]
        print(f"({lo:g},{hi:g}]R  " + " ".join(f"{np.mean([r[x] for r in runs]):7.3f}" for x in args.ratios))


if __name__ == "__main__":
    main()

"""Multi-view reconstruction of a closed textured blob from six cap-shaped views."""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from sgc.matching import RECONSTRUCT_CONFIG, pose_error, reconstruct
from sgc.pointcloud import compute_resolution, save_cloud
from sgc.synthetic import ring_views


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--views", type=int, default=6)
    ap.add_argument("--r-ratio", type=float, default=RECONSTRUCT_CONFIG.r_ratio)
    ap.add_argument("--out", type=Path, default=None, help="write the merged cloud here (.ply)")
    args = ap.parse_args()
    scans, truth = ring_views(args.seed, n_views=args.views)
    pr = compute_resolution(scans[0])
    t = time.perf_counter()
    res = reconstruct(scans, replace(RECONSTRUCT_CONFIG, r_ratio=args.r_ratio))
    print(f"order {res.order}, unplaced {res.unplaced}, {time.perf_counter() - t:.0f}s, "
          f"merged {len(res.merged)} points")
    print("view  pre_deg pre_pr  post_deg post_pr")
    for v in range(1, len(scans)):
        if res.poses[v] is None:
            print(f"{v:4d}  unplaced")
            continue
        gt = truth[0].inverse() @ truth[v]
        a, b = pose_error(res.results[v].pre_icp, gt), pose_error(res.poses[v], gt)
        print(f"{v:4d}  {a[0]:7.2f} {a[1] / pr:6.2f}  {b[0]:8.3f} {b[1] / pr:7.3f}")
    if args.out:
        save_cloud(res.merged, args.out)


if __name__ == "__main__":
    main()

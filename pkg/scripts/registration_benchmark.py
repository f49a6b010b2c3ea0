"""Pairwise registration accuracy on synthetic two-view terrains."""
import argparse
import time

from sgc.matching import MatchConfig, RigidTransform, pose_error, register_pair
from sgc.synthetic import two_views


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--overlap", type=float, default=0.5)
    ap.add_argument("--noise", type=float, default=0.3, help="sigma in pr")
    ap.add_argument("--r-ratio", type=float, default=0.5)
    ap.add_argument("--n-features", type=int, default=1000)
    args = ap.parse_args()
    cfg = MatchConfig(r_ratio=args.r_ratio, n_features=args.n_features)
    ok_pre = ok_post = 0
    print("seed  pre_deg pre_pr  post_deg post_pr  icp_it overlap  secs")
    for seed in range(args.seeds):
        t = time.perf_counter()
        data, ref, R, tr = two_views(seed, overlap=args.overlap, noise=args.noise)
        res = register_pair(data, ref, cfg)
        if not res.matched:
            print(f"{seed:4d}  no match: {res.reason}")
            continue
        truth = RigidTransform(R, tr)
        pr = res.resolution
        a, b = pose_error(res.pre_icp, truth), pose_error(res.transform, truth)
        ok_pre += a[0] < 5 and a[1] < 3 * pr
        ok_post += b[0] < 1 and b[1] < pr
        print(f"{seed:4d}  {a[0]:7.2f} {a[1] / pr:6.2f}  {b[0]:8.3f} {b[1] / pr:7.3f}  {res.icp_iterations:6d} "
              f"{res.overlap:7.3f} {time.perf_counter() - t:5.1f}")
    print(f"within 5deg/3pr pre-ICP: {ok_pre}/{args.seeds}; within 1deg/1pr post-ICP: {ok_post}/{args.seeds}")


if __name__ == "__main__":
    main()

"""Descriptor-graph build recall, query agreement and speed versus corpus size."""
import argparse
import time

import numpy as np

from sgc.saliency import SaliencyParams, brute_force_knn, build_graph, exhaustive_query, graph_query, knn_recall
from sgc.synthetic import descriptor_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 5000])
    ap.add_argument("--k", type=int, default=16)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--oracle-max", type=int, default=2000, help="skip brute-force recall above this size")
    args = ap.parse_args()
    params = SaliencyParams(k=args.k)
    print("N      build_s  recall  top1_agree  graph_ms  exh_ms  speedup")
    for n in args.sizes:
        descs, _ = descriptor_corpus(n, seed=1)
        t = time.perf_counter()
        g = build_graph(descs, params)
        build = time.perf_counter() - t
        recall = knn_recall(g, brute_force_knn(g.stack, args.k)) if n <= args.oracle_max else float("nan")
        qs = np.random.default_rng(0).choice(len(descs), args.queries, replace=False)
        agree, tg, te = 0, 0.0, 0.0
        for qi, q in enumerate(qs):
            t = time.perf_counter()
            h = graph_query(g, descs[q], params, query_index=qi, use_saliency=False)
            tg += time.perf_counter() - t
            t = time.perf_counter()
            e = exhaustive_query(g, descs[q], params)
            te += time.perf_counter() - t
            agree += h[0].node == e[0].node
        m = len(qs)
        print(f"{len(descs):<6d} {build:7.1f}  {recall:6.3f}  {agree / m:10.3f}  {tg / m * 1e3:8.2f}  "
              f"{te / m * 1e3:6.2f}  {te / tg:7.1f}")


if __name__ == "__main__":
    main()

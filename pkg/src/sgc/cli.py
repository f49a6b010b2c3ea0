"""``sgc`` command-line front end.

Every failure prints one line ``sgc-error: <kind>: <message>`` to stderr and exits
nonzero (2 for invalid arguments, 1 for everything else).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path


from . import descriptor, evaluation, matching, pointcloud, saliency
from .descriptor import SgcParams
from .matching import MatchConfig
from .saliency import SaliencyParams

log = logging.getLogger("sgc")

THREADS_ENV = "SGC_THREADS"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


def _fail(kind, message, code=1):
    raise CliError(kind, message, code)


# -- config plumbing ----------------------------------------------------------

_CONFIG_SECTIONS = ("describe", "match", "graph")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        _fail("io", f"cannot read config {path}: {exc.strerror}")
    try:
        raw = evaluation.tomllib.loads(text)
    except evaluation.tomllib.TOMLDecodeError as exc:
        _fail("config", f"{path}: {exc}")
    unknown = set(raw) - set(_CONFIG_SECTIONS)
    if unknown:
        _fail("config", f"{path}: unknown sections {sorted(unknown)}")
    return raw


def _merge(cls, config_section: dict, overrides: dict, **fixed):
    """Dataclass defaults <- config file <- explicit flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(config_section) - names
    if unknown:
        _fail("config", f"unknown {cls.__name__} keys {sorted(unknown)}")
    kw = dict(config_section)
    kw.update({k: v for k, v in overrides.items() if v is not None and k in names})
    kw.update(fixed)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        _fail("validation", str(exc), 2)


def _match_config(args, cfg) -> MatchConfig:
    over = {"R_factor": args.R_factor, "r_ratio": args.r_ratio, "K": args.K, "n_features": args.n_features,
            "sampling": args.sampling, "threshold": args.threshold,
            "threshold_percentile": args.threshold_percentile, "top_n": args.top_n,
            "overlap_factor": args.overlap_factor, "icp_max_iter": args.icp_max_iter,
            "icp_factor": args.icp_factor, "min_overlap": args.min_overlap}
    if args.no_icp:
        over["icp"] = False
    return _merge(MatchConfig, cfg.get("match", {}), over, seed=args.seed, threads=args.threads)


def _graph_params(args, cfg) -> SaliencyParams:
    over = {"k": args.k, "alpha": args.alpha, "build_iterations": args.build_iterations,
            "query_seeds": args.query_seeds, "query_iterations": args.query_iterations}
    return _merge(SaliencyParams, cfg.get("graph", {}), over, seed=args.seed)


def _load(path) -> pointcloud.PointCloud:
    p = Path(path)
    if not p.exists():
        _fail("io", f"file not found: {p}")
    try:
        c = pointcloud.load_cloud(p)
    except pointcloud.CloudError as exc:
        _fail("format", f"{p}: {exc}")
    return pointcloud.PointCloud(c.points, c.normals, c.id or p.stem)


def _check_output(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        _fail("io", f"output directory does not exist: {parent}")
    return Path(path)


def _write_text(path, text: str):
    pointcloud._atomic_write(Path(path), text.encode("utf-8"))


def _matrix_text(T) -> str:
    return "\n".join(" ".join(f"{v:.12g}" for v in row) for row in T.matrix) + "\n"


# -- subcommands --------------------------------------------------------------

def cmd_describe(args, cfg):
    section = dict(cfg.get("describe", {}))
    n_features, sampling, Q = section.pop("n_features", 1000), section.pop("sampling", "uniform"), section.pop("Q", 256)
    n_features = n_features if args.n_features is None else args.n_features
    sampling = args.sampling or sampling
    Q = Q if args.Q is None else args.Q
    keys = {"R_factor": args.R_factor, "r_ratio": args.r_ratio, "K": args.K, "epsilon": args.epsilon}
    unknown = set(section) - set(keys)
    if unknown:
        _fail("config", f"unknown describe keys {sorted(unknown)}")
    for k, v in keys.items():
        if v is None and k in section:
            keys[k] = section[k]
    R_factor = 20.0 if keys["R_factor"] is None else keys["R_factor"]
    r_ratio = 1.0 if keys["r_ratio"] is None else keys["r_ratio"]
    K = 8 if keys["K"] is None else keys["K"]
    if n_features < 1:
        _fail("validation", "n_features must be >= 1", 2)
    if sampling not in ("uniform", "random"):
        _fail("validation", "sampling must be 'uniform' or 'random'", 2)
    if R_factor <= 0:
        _fail("validation", "R_factor must be positive", 2)
    try:
        SgcParams.from_resolution(1.0, R_factor, r_ratio, K, keys["epsilon"])
        descriptor._check_q(Q)
    except ValueError as exc:
        _fail("validation", str(exc), 2)
    out = _check_output(args.output)
    cloud = _load(args.cloud)
    index = pointcloud.SpatialIndex(cloud)
    pr = pointcloud.compute_resolution(cloud, index)
    params = SgcParams.from_resolution(pr, R_factor, r_ratio, K, keys["epsilon"])
    if sampling == "uniform":
        feats = pointcloud.uniform_sample(cloud, index, n_features, args.seed)
    else:
        feats = pointcloud.random_sample(cloud, n_features, args.seed)
    descs, fails = descriptor.describe(cloud, index, feats, params, threads=args.threads)
    for f in fails:
        log.info("feature %d skipped: %s", f.feature_index, f.reason)
    descriptor.write_descriptors(out, descs, Q=Q, scan_id=cloud.id)
    print(f"descriptors = {len(descs)}\nskipped = {len(fails)}\nresolution = {pr:.9g}\noutput = {out}")


def cmd_register(args, cfg):
    config = _match_config(args, cfg)
    out = _check_output(args.output)
    if args.transform_out:
        _check_output(args.transform_out)
    truth = None
    if args.gt:
        if not Path(args.gt).exists():
            _fail("io", f"file not found: {args.gt}")
        try:
            truth = matching.read_transform(args.gt)
        except ValueError as exc:
            _fail("format", str(exc))
    data, ref = _load(args.data), _load(args.ref)
    result = matching.register_pair(data, ref, config)
    matching.write_report(out, result, truth)
    if args.transform_out and result.transform is not None:
        _write_text(args.transform_out, _matrix_text(result.transform))
    print(f"status = {'matched' if result.matched else 'no-match'}\noverlap = {result.overlap:.6g}")
    if not result.matched:
        print(f"reason = {result.reason}")


def cmd_reconstruct(args, cfg):
    config = _match_config(args, cfg)
    given = cfg.get("match", {})
    for key in ("min_overlap", "r_ratio"):
        if getattr(args, key) is None and key not in given:
            config = replace(config, **{key: getattr(matching.RECONSTRUCT_CONFIG, key)})
    gparams = _graph_params(args, cfg)
    out = _check_output(args.output)
    poses_out = _check_output(args.poses)
    if len(args.scans) < 2:
        _fail("validation", "reconstruction needs at least 2 scans", 2)
    scans = [_load(p) for p in args.scans]
    res = matching.reconstruct(scans, config, gparams, use_saliency=not args.no_saliency)
    pointcloud.save_cloud(res.merged, out)
    lines = ["# pose of each scan in the frame of scan 0 (4x4, row-major)"]
    for i, (path, T) in enumerate(zip(args.scans, res.poses)):
        lines.append(f"[scan {i}] {Path(path).name}")
        lines.append("unplaced" if T is None else _matrix_text(T).rstrip("\n"))
    _write_text(poses_out, "\n".join(lines) + "\n")
    print(f"placed = {len(res.order)}\nunplaced = {len(res.unplaced)}\norder = {' '.join(map(str, res.order))}")
    if res.unplaced:
        raise CliError("unplaced", f"scans could not be placed: {res.unplaced}")


def cmd_graph(args, cfg):
    gparams = _graph_params(args, cfg)
    out = _check_output(args.output)
    if args.saliency_out:
        _check_output(args.saliency_out)
    descs = []
    for p in args.descriptors:
        if not Path(p).exists():
            _fail("io", f"file not found: {p}")
        try:
            got = descriptor.read_descriptors(p)
        except ValueError as exc:
            _fail("format", f"{p}: {exc}")
        sid = got[0].scan_id if got and got[0].scan_id else Path(p).stem
        descs.extend(replace_scan(d, sid) for d in got)
    if gparams.k >= len(descs):
        _fail("validation", f"k={gparams.k} must be smaller than the number of descriptors ({len(descs)})", 2)
    graph = saliency.build_graph(descs, gparams)
    saliency.write_graph(out, graph)
    print(f"nodes = {len(graph)}\nk = {graph.k}\nmean_indegree = {graph.mean_indegree:.9g}")
    if args.oracle:
        exact = saliency.brute_force_knn(graph.stack, gparams.k)
        print(f"recall = {saliency.knn_recall(graph, exact):.6f}")
    if args.saliency_out:
        rows = ["node,scan_id,feature_index,indegree,saliency"]
        for i, d in enumerate(descs):
            rows.append(f"{i},{d.scan_id},{d.feature_index},{graph.indegree[i]},{graph.saliency[i]:.12g}")
        _write_text(args.saliency_out, "\n".join(rows) + "\n")


def replace_scan(d, scan_id):
    return d if d.scan_id == scan_id else replace(d, scan_id=scan_id)


def cmd_eval(args, cfg):
    out_dir = Path(args.output)
    try:
        manifest = evaluation.load_manifest(args.manifest, default_seed=args.seed)
    except (evaluation.EvaluationError, ValueError, TypeError) as exc:
        _fail("manifest", str(exc), 2)
    for name, p in sorted(manifest.models.items()):
        if not (manifest.base / p).exists():
            _fail("manifest", f"model {name!r}: file not found: {manifest.base / p}", 2)
    written = evaluation.run_manifest(manifest, out_dir)
    for p in written:
        print(p)


def cmd_augment(args, cfg):
    if args.noise is None and args.downsample is None:
        _fail("validation", "give --noise and/or --downsample", 2)
    if args.noise is not None and args.noise < 0:
        _fail("validation", "noise sigma must be >= 0", 2)
    if args.downsample is not None and not 0 < args.downsample <= 1:
        _fail("validation", "downsample fraction must lie in (0, 1]", 2)
    out = _check_output(args.output)
    cloud = _load(args.cloud)
    pr = pointcloud.compute_resolution(cloud)
    if args.downsample is not None:
        cloud = evaluation.downsample(cloud, args.downsample, args.seed)
    if args.noise is not None:
        cloud = evaluation.add_gaussian_noise(cloud, args.noise, args.seed + 1, pr=pr)
    pointcloud.save_cloud(cloud, out)
    print(f"points = {len(cloud)}\nresolution_before = {pr:.9g}\noutput = {out}")


# -- parser -----------------------------------------------------------------

def _threads_default() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return int(raw)
    except ValueError:
        _fail("validation", f"{THREADS_ENV} must be an integer, got {raw!r}", 2)


def _descriptor_flags(p):
    g = p.add_argument_group("descriptor")
    g.add_argument("--R-factor", dest="R_factor", type=float, help="support half-width in pr (default 20)")
    g.add_argument("--r-ratio", dest="r_ratio", type=float, help="LRF radius as a fraction of R")
    g.add_argument("--K", dest="K", type=int, help="voxels per cube edge (default 8)")
    g.add_argument("--n-features", dest="n_features", type=int, help="feature points per scan (default 1000)")
    g.add_argument("--sampling", choices=("uniform", "random"))


def _match_flags(p):
    _descriptor_flags(p)
    g = p.add_argument_group("matching")
    g.add_argument("--threshold", type=float, help="absolute similarity threshold")
    g.add_argument("--threshold-percentile", dest="threshold_percentile", type=float)
    g.add_argument("--top-n", dest="top_n", type=int)
    g.add_argument("--overlap-factor", dest="overlap_factor", type=float)
    g.add_argument("--icp-max-iter", dest="icp_max_iter", type=int)
    g.add_argument("--icp-factor", dest="icp_factor", type=float)
    g.add_argument("--min-overlap", dest="min_overlap", type=float)
    g.add_argument("--no-icp", dest="no_icp", action="store_true")


def _graph_flags(p):
    g = p.add_argument_group("graph")
    g.add_argument("--k", type=int, help="out-degree (default 16)")
    g.add_argument("--alpha", type=float, help="saliency exponent (default 0.2)")
    g.add_argument("--build-iterations", dest="build_iterations", type=int)
    g.add_argument("--query-seeds", dest="query_seeds", type=int)
    g.add_argument("--query-iterations", dest="query_iterations", type=int)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sgc", description="SGC descriptors, registration and evaluation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    ap.add_argument("--config", help="TOML file with [describe], [match], [graph] tables")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", help="compute SGC descriptors for one cloud")
    p.add_argument("cloud")
    p.add_argument("-o", "--output", required=True)
    _descriptor_flags(p)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--Q", dest="Q", type=int, help="centroid quantisation levels (default 256)")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("register", help="align DATA onto REF")
    p.add_argument("data")
    p.add_argument("ref")
    p.add_argument("-o", "--output", required=True, help="report path")
    p.add_argument("--transform-out", dest="transform_out")
    p.add_argument("--gt", help="ground-truth 4x4 transform; adds error lines to the report")
    _match_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("reconstruct", help="align many scans into the frame of the first")
    p.add_argument("scans", nargs="+")
    p.add_argument("-o", "--output", required=True, help="merged cloud path")
    p.add_argument("--poses", required=True, help="pose file path")
    p.add_argument("--no-saliency", dest="no_saliency", action="store_true")
    _match_flags(p)
    _graph_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("graph", help="build a descriptor-graph from descriptor files")
    p.add_argument("descriptors", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--oracle", action="store_true", help="report recall against brute-force k-NN")
    p.add_argument("--saliency-out", dest="saliency_out", help="CSV dump of indegree and saliency")
    _graph_flags(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("eval", help="run an RP experiment manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="add noise and/or downsample a cloud")
    p.add_argument("cloud")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--noise", type=float, help="Gaussian sigma as a multiple of pr")
    p.add_argument("--downsample", type=float, help="fraction of points to keep")
    p.set_defaults(func=cmd_augment)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads is None:
            args.threads = _threads_default()
        if args.threads < 1:
            _fail("validation", "threads must be >= 1", 2)
        level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args.config)
        args.func(args, cfg)
    except CliError as exc:
        print(f"sgc-error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, matching.IcpError) as exc:
        print(f"sgc-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"sgc-error: io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

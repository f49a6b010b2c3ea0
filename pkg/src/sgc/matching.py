"""Pairwise scan registration from SGC correspondences, ICP refinement and multi-scan reconstruction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptor import DescriptorStack, SgcDescriptor, SgcParams, describe
from .lrf import LocalReferenceFrame
from .pointcloud import PointCloud, SpatialIndex, _atomic_write, compute_resolution, random_sample, uniform_sample
from .saliency import SaliencyParams, build_graph, graph_query

log = logging.getLogger(__name__)


class IcpError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """``(a @ b).apply(x) == a.apply(b.apply(x))``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply_lrf(self, frame: LocalReferenceFrame) -> LocalReferenceFrame:
        return frame.transformed(self.rotation, self.translation)


def rotation_angle(rotation) -> float:
    """Angle (radians) of a rotation matrix."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(math.acos(max(-1.0, min(1.0, c))))


def pose_error(est: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error) between two transforms."""
    d = est @ truth.inverse()
    return math.degrees(rotation_angle(d.rotation)), float(np.linalg.norm(est.translation - truth.translation))


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid map of ``src`` rows onto ``dst`` rows."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def transform_from_lrfs(lrf_d: LocalReferenceFrame, lrf_r: LocalReferenceFrame) -> RigidTransform:
    """Rigid map carrying ``lrf_d`` (origin and axes) onto ``lrf_r``."""
    R = lrf_r.axes.T @ lrf_d.axes
    return RigidTransform(R, lrf_r.origin - R @ lrf_d.origin)


def overlap_ratio(cloud_d: PointCloud, cloud_r: PointCloud, index_r: SpatialIndex, T: RigidTransform,
                  dist_threshold: float) -> float:
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    d, _ = index_r.nearest_distances(T.apply(cloud_d.points))
    ratio = np.count_nonzero(d <= dist_threshold) / min(len(cloud_d), len(cloud_r))
    return float(min(1.0, max(0.0, ratio)))


@dataclass
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    trace: list[float]


def icp_refine(cloud_d: PointCloud, cloud_r: PointCloud, index_r: SpatialIndex, T0: RigidTransform,
               max_iter: int = 150, dist_threshold: float = 1.0, tol: float = 1e-6) -> IcpResult:
    """Point-to-point ICP with distance-gated correspondences.

    The trace records the truncated rms ``sqrt(mean(min(d, dist_threshold)^2))`` over all
    data points, which the alternating nearest-neighbour / SVD steps cannot increase;
    iteration stops when it improves by less than ``tol``. ``rms`` in the result is the
    plain rms over the accepted pairs at the returned transform.
    """
    src = cloud_d.points
    T = T0
    trace: list[float] = []
    fits = 0
    prev = prev_d = prev_ok = None
    while True:
        d, j = index_r.nearest_distances(T.apply(src))
        ok = d <= dist_threshold
        n_ok = int(np.count_nonzero(ok))
        if n_ok < 3:
            raise IcpError(f"only {n_ok} correspondences within {dist_threshold:g}")
        err = float(np.sqrt(np.mean(np.minimum(d, dist_threshold) ** 2)))
        if trace and trace[-1] - err < tol:
            if err > trace[-1]:  # rounding only; keep the previous pose
                T, d, ok = prev, prev_d, prev_ok
            else:
                trace.append(err)
            break
        trace.append(err)
        if fits == max_iter:
            break
        prev, prev_d, prev_ok = T, d, ok
        T = kabsch(src[ok], cloud_r.points[j[ok]])
        fits += 1
    rms = float(np.sqrt(np.mean(d[ok] ** 2)))
    return IcpResult(T, rms, fits, trace)


@dataclass(frozen=True)
class MatchConfig:
    R_factor: float = 20.0
    r_ratio: float = 0.5
    K: int = 8
    n_features: int = 1000
    sampling: str = "uniform"
    threshold: float | None = None
    threshold_percentile: float = 60.0
    top_n: int = 5
    overlap_factor: float = 2.0
    icp: bool = True
    icp_max_iter: int = 150
    icp_factor: float = 1.5
    min_overlap: float = 0.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 < self.r_ratio <= 1:
            raise ValueError("r_ratio must be in (0, 1]")
        if self.R_factor <= 0 or self.n_features < 1 or self.top_n < 1:
            raise ValueError("R_factor, n_features and top_n must be positive")
        if self.sampling not in ("uniform", "random"):
            raise ValueError("sampling must be 'uniform' or 'random'")
        if not 0 <= self.threshold_percentile <= 100:
            raise ValueError("threshold_percentile must be in [0, 100]")

    def params(self, pr: float) -> SgcParams:
        return SgcParams.from_resolution(pr, self.R_factor, self.r_ratio, self.K)


@dataclass
class MatchCandidate:
    data_index: int
    ref_index: int
    score: float
    enhanced: float
    transform: RigidTransform
    overlap: float | None = None


@dataclass
class RegistrationResult:
    matched: bool
    transform: RigidTransform | None
    overlap: float
    candidates_tried: int
    icp_iterations: int
    rms: float
    pre_icp: RigidTransform | None = None
    candidates: list[MatchCandidate] = field(default_factory=list)
    icp_trace: list[float] = field(default_factory=list)
    threshold: float = float("nan")
    resolution: float = float("nan")
    reason: str = ""


def sample_features(cloud: PointCloud, index: SpatialIndex, config: MatchConfig, seed: int) -> np.ndarray:
    if config.sampling == "random":
        return random_sample(cloud, config.n_features, seed)
    return uniform_sample(cloud, index, config.n_features, seed)


def _no_match(reason, pr, threshold=float("nan")):
    return RegistrationResult(False, None, 0.0, 0, 0, float("nan"), threshold=threshold, resolution=pr,
                              reason=reason)


def select_transform(candidates: Sequence[MatchCandidate], cloud_d, cloud_r, index_r, top_n: int,
                     dist_threshold: float) -> MatchCandidate:
    """Evaluate the ``top_n`` candidates by overlap; ties go to the higher score (earlier)."""
    best = None
    for c in candidates[:top_n]:
        c.overlap = overlap_ratio(cloud_d, cloud_r, index_r, c.transform, dist_threshold)
        if best is None or c.overlap > best.overlap:
            best = c
    return best


def _threshold(best_scores, config: MatchConfig) -> float:
    if config.threshold is not None:
        return float(config.threshold)
    return float(np.percentile(best_scores, config.threshold_percentile))


def register_pair(scan_d: PointCloud, scan_r: PointCloud, config: MatchConfig = MatchConfig()) -> RegistrationResult:
    """Find the rigid transform mapping ``scan_d`` into ``scan_r``'s frame."""
    if len(scan_d) == 0 or len(scan_r) == 0:
        raise ValueError("scans must be non-empty")
    index_d, index_r = SpatialIndex(scan_d), SpatialIndex(scan_r)
    pr = 0.5 * (compute_resolution(scan_d, index_d) + compute_resolution(scan_r, index_r))
    params = config.params(pr)
    desc_d, _ = describe(scan_d, index_d, sample_features(scan_d, index_d, config, config.seed), params,
                         threads=config.threads)
    desc_r, _ = describe(scan_r, index_r, sample_features(scan_r, index_r, config, config.seed + 1), params,
                         threads=config.threads)
    if not desc_d or not desc_r:
        return _no_match("no usable descriptors", pr)
    S = DescriptorStack(desc_d).matrix(DescriptorStack(desc_r))
    best_j = np.argmax(S, axis=1)
    best = S[np.arange(len(desc_d)), best_j]
    thr = _threshold(best, config)
    keep = np.flatnonzero(best >= thr)
    if len(keep) == 0:
        return _no_match("no correspondence above threshold", pr, thr)
    keep = keep[np.lexsort((keep, -best[keep]))]
    candidates = [MatchCandidate(desc_d[i].feature_index, desc_r[best_j[i]].feature_index, float(best[i]),
                                 float(best[i]), transform_from_lrfs(desc_d[i].lrf, desc_r[best_j[i]].lrf))
                  for i in keep]
    return _finish(scan_d, scan_r, index_r, candidates, config, pr, thr)


def _finish(scan_d, scan_r, index_r, candidates, config, pr, thr):
    chosen = select_transform(candidates, scan_d, scan_r, index_r, config.top_n, config.overlap_factor * pr)
    tried = min(config.top_n, len(candidates))
    if chosen.overlap < config.min_overlap:
        res = _no_match(f"best overlap {chosen.overlap:.3f} below {config.min_overlap}", pr, thr)
        res.candidates, res.candidates_tried = candidates, tried
        return res
    T, trace, iters, rms = chosen.transform, [], 0, float("nan")
    if config.icp:
        try:
            icp = icp_refine(scan_d, scan_r, index_r, T, config.icp_max_iter, config.icp_factor * pr)
            T, trace, iters, rms = icp.transform, icp.trace, icp.iterations, icp.rms
        except IcpError as exc:
            log.warning("ICP skipped: %s", exc)
    overlap = overlap_ratio(scan_d, scan_r, index_r, T, config.overlap_factor * pr)
    return RegistrationResult(True, T, overlap, tried, iters, rms, chosen.transform, candidates, trace, thr, pr)


def write_report(path, result: RegistrationResult, truth: RigidTransform | None = None) -> None:
    """Plain-text report: summary keys, candidate table, 4x4 transform, ICP trace."""
    lines = ["# SGC registration report", f"status = {'matched' if result.matched else 'no-match'}"]
    if result.reason:
        lines.append(f"reason = {result.reason}")
    lines += [f"resolution = {result.resolution:.9g}", f"threshold = {result.threshold:.9g}",
              f"candidates_tried = {result.candidates_tried}", f"overlap = {result.overlap:.9g}",
              f"icp_iterations = {result.icp_iterations}", f"rms = {result.rms:.9g}", "",
              "[candidates]", "rank data_index ref_index score enhanced overlap"]
    for i, c in enumerate(result.candidates[: max(result.candidates_tried, 1)]):
        ov = "nan" if c.overlap is None else f"{c.overlap:.9g}"
        lines.append(f"{i} {c.data_index} {c.ref_index} {c.score:.9g} {c.enhanced:.9g} {ov}")
    for name, T in (("transform", result.transform), ("pre_icp_transform", result.pre_icp)):
        lines += ["", f"[{name}]"]
        if T is not None:
            lines += [" ".join(f"{v:.12g}" for v in row) for row in T.matrix]
    lines += ["", "[icp]", "iteration rms"]
    lines += [f"{i} {r:.9g}" for i, r in enumerate(result.icp_trace)]
    if truth is not None and result.transform is not None:
        lines += ["", "[ground_truth_error]"]
        for name, T in (("pre_icp", result.pre_icp), ("final", result.transform)):
            rot, trans = pose_error(T, truth)
            lines.append(f"{name} rotation_deg = {rot:.9g} translation = {trans:.9g}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_transform(path) -> RigidTransform:
    """Load a 4x4 row-major matrix from a whitespace text file (``#`` comments allowed)."""
    vals = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if ln and not ln.startswith("["):
            vals.extend(float(v) for v in ln.split())
    if len(vals) < 12:
        raise ValueError(f"{path}: expected a 4x4 (or 3x4) matrix")
    m = np.eye(4)
    m[:3, :] = np.array(vals[:12]).reshape(3, 4)
    return RigidTransform.from_matrix(m)


def voxel_dedup(points: np.ndarray, cell: float) -> np.ndarray:
    """Keep the first point of each occupied cell."""
    keys = np.floor(points / cell).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


@dataclass
class ReconstructionResult:
    merged: PointCloud
    poses: list[RigidTransform | None]
    order: list[int]
    unplaced: list[int]
    results: dict[int, RegistrationResult] = field(default_factory=dict)


RECONSTRUCT_CONFIG = MatchConfig(r_ratio=1.0, min_overlap=0.25)


def reconstruct(scans: Sequence[PointCloud], config: MatchConfig = RECONSTRUCT_CONFIG,
                graph_params: SaliencyParams = SaliencyParams(), use_saliency: bool = True) -> ReconstructionResult:
    """Greedy multi-scan alignment through one descriptor-graph over every scan.

    Scan 0 anchors the output frame. The default configuration uses the full LRF
    radius (r = R): views of one surface overlap mostly away from their borders,
    where the larger radius gives steadier frames. Each round, the unplaced scan whose best graph
    correspondence into the already-placed scans scores highest is registered against
    the merged cloud; scans that never pass the threshold/overlap checks stay unplaced.
    """
    if len(scans) < 2:
        raise ValueError("reconstruction needs at least 2 scans")
    names = [f"{i}:{s.id}" for i, s in enumerate(scans)]
    indices = [SpatialIndex(s) for s in scans]
    pr = float(np.mean([compute_resolution(s, ix) for s, ix in zip(scans, indices)]))
    params = config.params(pr)
    descs: list[SgcDescriptor] = []
    owner: list[int] = []
    for i, (s, ix) in enumerate(zip(scans, indices)):
        renamed = PointCloud(s.points, s.normals, names[i])
        d, _ = describe(renamed, ix, sample_features(renamed, ix, config, config.seed + i), params,
                        threads=config.threads)
        descs.extend(d)
        owner.extend([i] * len(d))
    owner_arr = np.asarray(owner)
    k = min(graph_params.k, len(descs) - 1)
    graph = build_graph(descs, SaliencyParams(**{**graph_params.__dict__, "k": k}))
    # per-node cross-scan hits, computed once
    hits = [graph_query(graph, d, graph_params, query_index=n, exclude_scan=d.scan_id, use_saliency=use_saliency)
            for n, d in enumerate(descs)]

    poses: list[RigidTransform | None] = [None] * len(scans)
    poses[0] = RigidTransform.identity()
    merged_pts = scans[0].points
    order, results = [0], {}
    pending = list(range(1, len(scans)))
    while pending:
        ranked = []
        for u in pending:
            matches = []
            for n in np.flatnonzero(owner_arr == u):
                for h in hits[n]:
                    if poses[owner[h.node]] is not None:
                        matches.append((h.enhanced, h.raw, int(n), h.node))
                        break
            if matches:
                ranked.append((max(m[0] for m in matches), u, matches))
        ranked.sort(key=lambda t: (-t[0], t[1]))
        merged = PointCloud(merged_pts, id="merged")
        merged_index = SpatialIndex(merged)
        placed_one = False
        for _, u, matches in ranked:
            scores = np.array([m[0] for m in matches])
            thr = _threshold(scores, config)
            matches = sorted((m for m in matches if m[0] >= thr), key=lambda m: (-m[0], m[2]))
            cands = []
            for enh, raw, n, j in matches:
                ref_frame = poses[owner[j]].apply_lrf(descs[j].lrf)
                cands.append(MatchCandidate(descs[n].feature_index, descs[j].feature_index, raw, enh,
                                            transform_from_lrfs(descs[n].lrf, ref_frame)))
            res = _finish(scans[u], merged, merged_index, cands, config, pr, thr) if cands else \
                _no_match("no correspondence above threshold", pr, thr)
            results[u] = res
            if res.matched:
                poses[u] = res.transform
                merged_pts = voxel_dedup(np.vstack([merged_pts, res.transform.apply(scans[u].points)]), pr / 2)
                order.append(u)
                pending.remove(u)
                placed_one = True
                break
        if not placed_one:
            break
    return ReconstructionResult(PointCloud(merged_pts, id="merged"), poses, order, pending, results)

"""Nuisance injection, synthetic scenes with ground truth, and RP / CMC evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .descriptor import DescriptorStack, SgcDescriptor, SgcParams, describe
from .matching import RigidTransform
from .pointcloud import PointCloud, SpatialIndex, _atomic_write, compute_resolution, random_sample
from .saliency import DescriptorGraph, SaliencyParams, exhaustive_query, graph_query

BOUNDARY_GAP_DEG = 120.0
BOUNDARY_PROBE_FACTOR = 4.0


class EvaluationError(ValueError):
    pass


# -- nuisances ---------------------------------------------------------------

def add_gaussian_noise(cloud: PointCloud, sigma: float, seed: int = 0, pr: float | None = None) -> PointCloud:
    """Perturb every coordinate by N(0, (sigma * pr)^2). Normals are dropped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return PointCloud(cloud.points, cloud.normals, cloud.id)
    pr = compute_resolution(cloud) if pr is None else pr
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, sigma * pr, cloud.points.shape), id=cloud.id)


def downsample_indices(n: int, fraction: float, seed: int = 0) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    m = math.ceil(fraction * n)
    if m == 0:
        raise EvaluationError("downsampling would leave no points")
    if m == n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))


def downsample(cloud: PointCloud, fraction: float, seed: int = 0) -> PointCloud:
    """Uniform random subset of ``ceil(fraction * N)`` points (original order kept)."""
    return cloud.subset(downsample_indices(len(cloud), fraction, seed))


# -- boundaries --------------------------------------------------------------

def _max_angular_gap(offsets: np.ndarray) -> float:
    """Largest angle (degrees) between consecutive neighbour directions in the tangent plane."""
    centred = offsets - offsets.mean(axis=0)
    _, _, vt = np.linalg.svd(np.vstack([centred, offsets]), full_matrices=False)
    u, v = vt[0], vt[1]
    keep = np.linalg.norm(offsets, axis=1) > 0
    ang = np.sort(np.arctan2(offsets[keep] @ v, offsets[keep] @ u))
    if len(ang) == 0:
        return 360.0
    gaps = np.diff(np.append(ang, ang[0] + 2 * np.pi))
    return float(np.degrees(gaps.max()))


def boundary_mask(cloud: PointCloud, index: SpatialIndex | None = None, pr: float | None = None,
                  gap_deg: float = BOUNDARY_GAP_DEG) -> np.ndarray:
    """Points whose neighbours within 4 pr leave an angular gap above ``gap_deg``.

    Points with fewer than three neighbours are counted as boundary.
    """
    index = SpatialIndex(cloud) if index is None else index
    pr = compute_resolution(cloud, index) if pr is None else pr
    probe = BOUNDARY_PROBE_FACTOR * pr
    out = np.zeros(len(cloud), dtype=bool)
    for i, nb in enumerate(index.tree.query_ball_point(cloud.points, probe)):
        nb = [j for j in nb if j != i]
        if len(nb) < 3:
            out[i] = True
            continue
        out[i] = _max_angular_gap(cloud.points[nb] - cloud.points[i]) > gap_deg
    return out


def boundary_distance(cloud: PointCloud, index: SpatialIndex | None, point, probe_radius: float = math.inf,
                      pr: float | None = None, mask: np.ndarray | None = None) -> float:
    """Distance from ``point`` to the nearest boundary point, or inf if none lies within ``probe_radius``.

    ``mask`` may carry a precomputed :func:`boundary_mask`.
    """
    if probe_radius <= 0:
        raise ValueError("probe_radius must be positive")
    index = SpatialIndex(cloud) if index is None else index
    pr = compute_resolution(cloud, index) if pr is None else pr
    point = np.asarray(point, dtype=np.float64)
    near = index.radius_query(point, BOUNDARY_PROBE_FACTOR * pr)
    near = near[np.linalg.norm(cloud.points[near] - point, axis=1) > 0]
    if len(near) < 3:
        raise EvaluationError(f"degenerate neighbourhood: {len(near)} neighbours within {4 * pr:g}")
    mask = boundary_mask(cloud, index, pr) if mask is None else mask
    return float(boundary_distances(cloud, mask, point[None], probe_radius)[0])


def boundary_distances(cloud: PointCloud, mask: np.ndarray, points, probe_radius: float = math.inf) -> np.ndarray:
    """Vectorised nearest-boundary distance for many query points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not mask.any():
        return np.full(len(points), np.inf)
    d, _ = cKDTree(cloud.points[mask]).query(points)
    return np.where(d <= probe_radius, d, np.inf)


# -- scenes and ground truth -------------------------------------------------

@dataclass
class GroundTruth:
    transforms: list[RigidTransform]
    model_ids: list[str]
    labels: np.ndarray                # model index of every scene point
    source_index: np.ndarray          # index of every scene point inside its model
    epsilon: float                    # correct-match tolerance

    def __post_init__(self):
        if len(self.transforms) != len(self.model_ids):
            raise ValueError("one transform per model")

    def to_model(self, scene_points, labels) -> np.ndarray:
        """Map scene points back into the frames of their models."""
        scene_points = np.atleast_2d(np.asarray(scene_points, dtype=np.float64))
        labels = np.atleast_1d(labels)
        out = np.empty_like(scene_points)
        for m, T in enumerate(self.transforms):
            sel = labels == m
            if sel.any():
                out[sel] = T.inverse().apply(scene_points[sel])
        return out


def make_scene(models: Sequence[PointCloud], transforms: Sequence[RigidTransform], seed: int | None = None,
               epsilon: float | None = None, id: str = "scene") -> tuple[PointCloud, GroundTruth]:
    """Union of posed models. ``seed`` (if given) shuffles the scene's point order.

    The correct-match tolerance defaults to twice the models' mean resolution.
    """
    if len(models) != len(transforms):
        raise ValueError("need one transform per model")
    if not models:
        raise ValueError("no models")
    pts = np.vstack([T.apply(m.points) for m, T in zip(models, transforms)])
    labels = np.concatenate([np.full(len(m), i) for i, m in enumerate(models)])
    source = np.concatenate([np.arange(len(m)) for m in models])
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(pts))
        pts, labels, source = pts[perm], labels[perm], source[perm]
    if epsilon is None:
        epsilon = 2.0 * float(np.mean([compute_resolution(m) for m in models]))
    gt = GroundTruth(list(transforms), [m.id for m in models], labels, source, epsilon)
    return PointCloud(pts, id=id), gt


# -- recall / precision ------------------------------------------------------

@dataclass
class RpCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    n_valid: int
    best_scores: np.ndarray = field(repr=False, default=None)
    correct: np.ndarray = field(repr=False, default=None)

    def recall_at_precision(self, p: float) -> float:
        """Highest recall among operating points with precision >= ``p`` (0 if none)."""
        ok = self.precision >= p
        return float(self.recall[ok].max()) if ok.any() else 0.0


def match_correctness(model_descs: Sequence[SgcDescriptor], scene_descs: Sequence[SgcDescriptor],
                      gt: GroundTruth, scores: np.ndarray | None = None):
    """Best model match per scene feature and whether it is correct.

    Returns ``(best_score, correct, valid)``. A scene feature is *valid* when some model
    feature of its true model lies within the tolerance of its ground-truth image.
    """
    if len(gt.transforms) == 0:
        raise EvaluationError("empty ground truth")
    if scores is None:
        scores = DescriptorStack(scene_descs).matrix(DescriptorStack(model_descs))
    lookup = {mid: i for i, mid in enumerate(gt.model_ids)}
    try:
        model_label = np.array([lookup[d.scan_id] for d in model_descs])
    except KeyError as exc:
        raise EvaluationError(f"model descriptor from unknown model {exc.args[0]!r}") from None
    model_pos = np.array([d.position for d in model_descs])
    scene_label = gt.labels[[d.feature_index for d in scene_descs]]
    image = gt.to_model(np.array([d.position for d in scene_descs]), scene_label)
    best = np.argmax(scores, axis=1)
    best_score = scores[np.arange(len(scene_descs)), best]
    correct = (model_label[best] == scene_label) & \
        (np.linalg.norm(model_pos[best] - image, axis=1) <= gt.epsilon)
    valid = np.zeros(len(scene_descs), dtype=bool)
    for m in range(len(gt.model_ids)):
        sel_m = model_label == m
        sel_s = scene_label == m
        if sel_m.any() and sel_s.any():
            d, _ = cKDTree(model_pos[sel_m]).query(image[sel_s])
            valid[sel_s] = d <= gt.epsilon
    return best_score, correct, valid


def rp_curve(model_descs: Sequence[SgcDescriptor], scene_descs: Sequence[SgcDescriptor], gt: GroundTruth,
             thresholds: Sequence[float] | None = None, n_thresholds: int = 64) -> RpCurve:
    """Sweep a similarity threshold over scene-to-model best matches.

    Default thresholds span the observed best-match scores, loosest first.
    """
    best, correct, valid = match_correctness(model_descs, scene_descs, gt)
    if thresholds is None:
        lo, hi = float(best.min()), float(best.max())
        thresholds = np.linspace(lo - 1e-9 * max(1.0, abs(lo)), hi, n_thresholds)
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    n_valid = int(valid.sum())
    prec, rec = [], []
    for t in thresholds:
        declared = best > t
        nd = int(declared.sum())
        nc = int((declared & correct).sum())
        prec.append(1.0 if nd == 0 else nc / nd)
        rec.append(0.0 if n_valid == 0 else min(1.0, nc / n_valid))
    return RpCurve(thresholds, np.array(prec), np.array(rec), n_valid, best, correct)


# -- cumulative match characteristic ------------------------------------------

@dataclass
class CmcCurve:
    ranks: np.ndarray
    hit_rate: np.ndarray
    mode: str
    mean_query_seconds: float

    def at(self, n: int) -> float:
        return float(self.hit_rate[min(n, len(self.ranks)) - 1])


def cmc_curve(graph: DescriptorGraph, queries: Sequence[SgcDescriptor], truths: Sequence[int],
              mode: str = "graph", n_max: int = 20, params: SaliencyParams = SaliencyParams(),
              use_saliency: bool = True, exclude_scans: Sequence[str | None] | None = None) -> CmcCurve:
    """Fraction of queries whose true node appears within the top n, for n = 1..n_max."""
    if mode not in ("graph", "exhaustive"):
        raise ValueError("mode must be 'graph' or 'exhaustive'")
    if len(queries) != len(truths):
        raise ValueError("one truth per query")
    truths = np.asarray(truths, dtype=np.intp)
    if len(truths) and (truths.min() < 0 or truths.max() >= len(graph)):
        raise EvaluationError("true correspondent not in graph")
    exclude_scans = [None] * len(queries) if exclude_scans is None else list(exclude_scans)
    first_hit = np.full(len(queries), np.iinfo(np.intp).max)
    elapsed = 0.0
    for qi, (q, t, ex) in enumerate(zip(queries, truths, exclude_scans)):
        start = time.perf_counter()
        if mode == "graph":
            hits = graph_query(graph, q, params, query_index=qi, exclude_scan=ex, use_saliency=use_saliency)
        else:
            hits = exhaustive_query(graph, q, params, exclude_scan=ex, use_saliency=use_saliency)
        elapsed += time.perf_counter() - start
        for rank, h in enumerate(hits[:n_max]):
            if h.node == t:
                first_hit[qi] = rank
                break
    ranks = np.arange(1, n_max + 1)
    rate = np.array([(first_hit < n).mean() if len(queries) else 0.0 for n in ranks])
    assert np.all(np.diff(rate) >= 0), "CMC must be non-decreasing"
    return CmcCurve(ranks, rate, mode, elapsed / max(1, len(queries)))


# -- output -----------------------------------------------------------------

def _csv(path, header, rows):
    lines = [",".join(header)] + [",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in r) for r in rows]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def _table(path, header, rows):
    lines = ["# " + " ".join(header)] + [" ".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in r)
                                         for r in rows]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def write_rp(path, curve: RpCurve, table: bool = False) -> None:
    """``threshold,precision,recall`` CSV, or a whitespace table for gnuplot/PGF."""
    rows = [(float(t), float(p), float(r)) for t, p, r in zip(curve.thresholds, curve.precision, curve.recall)]
    (_table if table else _csv)(path, ("threshold", "precision", "recall"), rows)


def write_cmc(path, curve: CmcCurve, table: bool = False) -> None:
    rows = [(int(n), float(h)) for n, h in zip(curve.ranks, curve.hit_rate)]
    (_table if table else _csv)(path, ("rank", "hit_rate"), rows)


# -- manifests ----------------------------------------------------------------

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class Manifest:
    """Declarative experiment: models, nuisance grid, descriptor and sampling settings."""

    models: dict                      # name -> path
    sigmas: tuple = (0.0,)
    fractions: tuple = (1.0,)
    seeds: tuple = (0,)
    features: int = 500
    R_factor: float = 20.0
    r_ratio: float = 1.0
    K: int = 8
    n_thresholds: int = 64
    name: str = "rp"
    base: Path = Path(".")

    def __post_init__(self):
        if not self.models:
            raise EvaluationError("manifest lists no models")
        if any(s < 0 for s in self.sigmas):
            raise EvaluationError("noise sigmas must be >= 0")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise EvaluationError("downsample fractions must lie in (0, 1]")
        if self.features < 1:
            raise EvaluationError("features must be >= 1")
        SgcParams.from_resolution(1.0, self.R_factor, self.r_ratio, self.K)


_MANIFEST_KEYS = {"models", "sigmas", "fractions", "seeds", "features", "R_factor", "r_ratio", "K",
                  "n_thresholds", "name"}


def load_manifest(path, default_seed: int = 0) -> Manifest:
    """Read a TOML manifest; relative model paths resolve against its directory.

    Recognised keys: top-level ``name``, ``seeds``, ``features``; ``[models]`` name = path;
    ``[nuisance]`` ``sigmas`` / ``fractions``; ``[descriptor]`` ``R_factor`` / ``r_ratio`` / ``K``.
    Without ``seeds`` the single seed ``default_seed`` is used.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise EvaluationError(f"manifest not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise EvaluationError(f"{path}: {exc}") from None
    flat = dict(raw)
    for section in ("nuisance", "descriptor", "experiment"):
        flat.update(flat.pop(section, {}) or {})
    unknown = set(flat) - _MANIFEST_KEYS
    if unknown:
        raise EvaluationError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in flat.items()}
    kw["models"] = dict(flat.get("models", {}))
    kw.setdefault("seeds", (default_seed,))
    return Manifest(base=path.parent, **kw)


def _random_pose(rng, spread):
    from scipy.spatial.transform import Rotation
    R = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(R, rng.uniform(-spread, spread, 3))


def rp_experiment(models: Sequence[PointCloud], sigma: float, fraction: float, seed: int, features: int,
                  R_factor: float = 20.0, r_ratio: float = 1.0, K: int = 8, n_thresholds: int = 64) -> RpCurve:
    """One grid point of the noise/downsampling protocol.

    Models are posed in a scene with random rigid motions (set apart so they do not
    touch), the scene is degraded, and ``features`` random model points per model are
    matched against the scene points nearest their ground-truth images.
    """
    rng = np.random.default_rng(seed)
    pr = float(np.mean([compute_resolution(m) for m in models]))
    extent = max(float(np.ptp(m.points, axis=0).max()) for m in models)
    poses = []
    for i in range(len(models)):
        T = _random_pose(rng, 0.0)
        offset = np.array([i * 3.0 * extent, 0.0, 0.0]) - T.apply(models[i].points).mean(axis=0)
        poses.append(RigidTransform(T.rotation, T.translation + offset))
    scene, gt = make_scene(models, poses, epsilon=2.0 * pr)
    keep = downsample_indices(len(scene), fraction, seed + 1)
    scene = add_gaussian_noise(scene.subset(keep), sigma, seed + 2, pr=pr)
    gt = GroundTruth(gt.transforms, gt.model_ids, gt.labels[keep], gt.source_index[keep], gt.epsilon)
    params = SgcParams.from_resolution(pr, R_factor, r_ratio, K)
    scene_index = SpatialIndex(scene)
    model_descs, scene_feats = [], []
    for m, (model, T) in enumerate(zip(models, poses)):
        idx = SpatialIndex(model)
        feats = random_sample(model, min(features, len(model)), seed * 1009 + m)
        d, _ = describe(model, idx, feats, params)
        model_descs.extend(d)
        _, near = scene_index.nearest_distances(T.apply(model.points[feats]))
        scene_feats.append(near)
    scene_feats = np.unique(np.concatenate(scene_feats))
    scene_descs, _ = describe(scene, scene_index, scene_feats, params)
    if not model_descs or not scene_descs:
        raise EvaluationError("no descriptors could be computed")
    return rp_curve(model_descs, scene_descs, gt, n_thresholds=n_thresholds)


def run_manifest(manifest: Manifest, out_dir, models: Sequence[PointCloud] | None = None) -> list[Path]:
    """Evaluate every (sigma, fraction, seed) of the grid; one CSV + one table per point."""
    from .pointcloud import load_cloud

    if models is None:
        models = []
        for name, p in sorted(manifest.models.items()):
            full = manifest.base / p
            if not full.exists():
                raise EvaluationError(f"model {name!r}: file not found: {full}")
            c = load_cloud(full)
            models.append(PointCloud(c.points, c.normals, name))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in manifest.seeds:
        for sigma in manifest.sigmas:
            for frac in manifest.fractions:
                curve = rp_experiment(models, sigma, frac, seed, manifest.features, manifest.R_factor,
                                      manifest.r_ratio, manifest.K, manifest.n_thresholds)
                stem = f"{manifest.name}_sigma{sigma:g}_frac{frac:g}"
                if len(manifest.seeds) > 1:
                    stem += f"_seed{seed}"
                write_rp(out_dir / f"{stem}.csv", curve)
                write_rp(out_dir / f"{stem}.dat", curve, table=True)
                written += [out_dir / f"{stem}.csv", out_dir / f"{stem}.dat"]
    return written

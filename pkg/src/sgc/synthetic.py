"""Synthetic desk-scale scans with known geometry, used by tests and experiment scripts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .pointcloud import PointCloud, compute_resolution


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def jittered_grid(x0, x1, y0, y1, spacing, rng, jitter=0.35):
    xs = np.arange(x0, x1, spacing)
    ys = np.arange(y0, y1, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return xy + rng.uniform(-jitter, jitter, xy.shape) * spacing


@dataclass
class HeightField:
    """z = sum of anisotropic Gaussian bumps over the plane."""

    centers: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray      # (n, 2) std devs along the bump's own axes
    angles: np.ndarray

    @classmethod
    def random(cls, seed: int, extent=(0.0, 120.0, 0.0, 80.0), n_bumps: int | None = None) -> "HeightField":
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = extent
        if n_bumps is None:
            # ~one bump per 100 square units keeps flat gaps small
            n_bumps = int((x1 - x0 + 20) * (y1 - y0 + 20) / 100)
        centers = np.column_stack([rng.uniform(x0 - 10, x1 + 10, n_bumps), rng.uniform(y0 - 10, y1 + 10, n_bumps)])
        amplitudes = rng.uniform(3.0, 9.0, n_bumps) * rng.choice([-1.0, 1.0], n_bumps)
        widths = rng.uniform(3.0, 10.0, (n_bumps, 2))
        angles = rng.uniform(0, np.pi, n_bumps)
        return cls(centers, amplitudes, widths, angles)

    def height(self, xy) -> np.ndarray:
        xy = np.atleast_2d(xy)
        d = xy[:, None, :] - self.centers[None]
        c, s = np.cos(self.angles), np.sin(self.angles)
        u = d[..., 0] * c + d[..., 1] * s
        v = -d[..., 0] * s + d[..., 1] * c
        g = np.exp(-0.5 * ((u / self.widths[:, 0]) ** 2 + (v / self.widths[:, 1]) ** 2))
        return g @ self.amplitudes

    def sample(self, region, spacing: float = 1.0, seed: int = 0, id: str = "") -> PointCloud:
        rng = np.random.default_rng(seed)
        xy = jittered_grid(*region, spacing, rng)
        return PointCloud(np.column_stack([xy, self.height(xy)]), id=id)


@dataclass
class Blob:
    """Closed star-shaped surface: a sphere radius modulated by Gaussian bumps on the sphere."""

    radius: float
    dirs: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray

    @classmethod
    def random(cls, seed: int, radius: float = 30.0, n_bumps: int = 70) -> "Blob":
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_bumps, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        amplitudes = rng.uniform(0.04, 0.14, n_bumps) * rng.choice([-1.0, 1.0], n_bumps)
        widths = rng.uniform(0.12, 0.35, n_bumps)
        return cls(radius, dirs, amplitudes, widths)

    @classmethod
    def textured(cls, seed: int, radius: float = 45.0) -> "Blob":
        """Terrain-like relief (bumps 3-9 units high, 3-10 wide, ~one per 100 square units) on a sphere.

        A nearly round blob leaves the two tangent eigenvalues of a support almost
        tied, which makes frames wobble about the normal; this relief avoids that.
        """
        rng = np.random.default_rng(seed)
        n = int(4 * np.pi * radius ** 2 / 100)
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        amplitudes = rng.uniform(3.0, 9.0, n) * rng.choice([-1.0, 1.0], n) / radius
        widths = rng.uniform(3.0, 10.0, n) / radius
        return cls(radius, dirs, amplitudes, widths)

    def radial(self, u) -> np.ndarray:
        cosang = np.clip(u @ self.dirs.T, -1.0, 1.0)
        ang = np.arccos(cosang)
        return self.radius * (1.0 + np.exp(-0.5 * (ang / self.widths) ** 2) @ self.amplitudes)

    def sample(self, spacing: float = 1.0, seed: int = 0, mask_dir=None, max_angle=np.pi,
               id: str = "") -> PointCloud:
        """Near-uniform surface sampling; optionally only directions within ``max_angle`` of ``mask_dir``."""
        rng = np.random.default_rng(seed)
        area = 4 * np.pi * (self.radius * 1.15) ** 2
        n = int(area / spacing ** 2 * 1.6)
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        if mask_dir is not None:
            m = np.asarray(mask_dir, dtype=np.float64)
            u = u[u @ (m / np.linalg.norm(m)) >= np.cos(max_angle)]
        pts = u * self.radial(u)[:, None]
        return PointCloud(_poisson_thin(pts, spacing * 0.8), id=id)


def _poisson_thin(pts, min_dist):
    """Greedy thinning so no two kept points are closer than ``min_dist``."""
    from scipy.spatial import cKDTree

    tree = cKDTree(pts)
    keep = np.ones(len(pts), dtype=bool)
    removed = np.zeros(len(pts), dtype=bool)
    for i, nb in enumerate(tree.query_ball_point(pts, min_dist)):
        if removed[i]:
            keep[i] = False
            continue
        for j in nb:
            if j > i:
                removed[j] = True
    return pts[keep]


def sphere(n: int, radius: float = 1.0, seed: int = 0) -> PointCloud:
    """Fibonacci-lattice sphere sampling."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    pts = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    if seed:
        pts = pts @ random_rotation(np.random.default_rng(seed)).T
    return PointCloud(pts * radius, id="sphere")


def plane_grid(nx: int, ny: int, spacing: float = 1.0) -> PointCloud:
    gx, gy = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    return PointCloud(np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]), id="grid")


def disk(radius: float, spacing: float = 1.0, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    xy = jittered_grid(-radius, radius + spacing, -radius, radius + spacing, spacing, rng, jitter=0.2)
    xy = xy[np.linalg.norm(xy, axis=1) <= radius]
    return PointCloud(np.column_stack([xy, np.zeros(len(xy))]), id="disk")


def two_views(seed: int, overlap: float = 0.5, noise: float = 0.0, spacing: float = 1.0,
              width: float = 80.0, height: float = 70.0):
    """Two scans of one terrain whose x-ranges overlap by ``overlap``.

    The data view is expressed in its own frame, centred on the scan:
    ``ref ≈ data @ R.T + t`` with the returned ground-truth ``(R, t)``.
    """
    rng = np.random.default_rng(seed)
    total = width * (2 - overlap)
    field = HeightField.random(seed, extent=(0.0, total, 0.0, height))
    ref = field.sample((0.0, width, 0.0, height), spacing, seed=seed * 7 + 1, id="ref")
    data = field.sample((total - width, total, 0.0, height), spacing, seed=seed * 7 + 2, id="data")
    R = random_rotation(rng)
    t = data.points.mean(axis=0)
    # data frame = inverse ground truth applied to world coordinates
    data_pts = (data.points - t) @ R
    if noise > 0:
        pr = compute_resolution(ref)
        ref = PointCloud(ref.points + rng.normal(0, noise * pr, ref.points.shape), id="ref")
        data_pts = data_pts + rng.normal(0, noise * pr, data_pts.shape)
    return PointCloud(data_pts, id="data"), ref, R, t


def ring_views(seed: int, n_views: int = 6, half_angle_deg: float = 70.0, spacing: float = 1.0,
               radius: float = 45.0):
    """Cap-shaped views of a textured blob from directions spaced around a wavy equator.

    Each view is expressed in its own centred, randomly rotated frame. Returns
    ``(views, poses)`` with ``world = poses[i].apply(views[i].points)``.
    """
    from .matching import RigidTransform

    rng = np.random.default_rng(seed)
    blob = Blob.textured(seed, radius)
    views, poses = [], []
    for v in range(n_views):
        a = 2 * np.pi * v / n_views
        d = np.array([np.cos(a), np.sin(a), 0.3 * np.sin(3 * a)])
        c = blob.sample(spacing, seed=seed * 100 + v, mask_dir=d, max_angle=np.radians(half_angle_deg))
        R = random_rotation(rng)
        t = c.points.mean(axis=0)
        views.append(PointCloud((c.points - t) @ R, id=f"view{v}"))
        poses.append(RigidTransform(R, t))
    return views, poses


def descriptor_corpus(n: int, seed: int = 0, n_scans: int = 4, R_factor: float = 20.0, K: int = 8,
                      noise: float = 0.0):
    """About ``n`` descriptors at random points of ``n_scans`` synthetic scans (terrains and blobs).

    Returns ``(descriptors, scans)``; descriptor scan ids are the scan ids.
    """
    from .descriptor import SgcParams, describe
    from .pointcloud import SpatialIndex, random_sample

    rng = np.random.default_rng(seed)
    scans = []
    for s in range(n_scans):
        if s % 2 == 0:
            f = HeightField.random(seed * 100 + s, extent=(0.0, 90.0, 0.0, 70.0))
            c = f.sample((0.0, 90.0, 0.0, 70.0), 1.0, seed=seed * 100 + s, id=f"scan{s}")
        else:
            c = Blob.random(seed * 100 + s, radius=25.0).sample(1.0, seed=seed * 100 + s, id=f"scan{s}")
        if noise > 0:
            c = PointCloud(c.points + rng.normal(0, noise * compute_resolution(c), c.points.shape), id=c.id)
        scans.append(c)
    pr = float(np.mean([compute_resolution(c) for c in scans]))
    params = SgcParams.from_resolution(pr, R_factor, 1.0, K)
    per = int(np.ceil(n / n_scans * 1.15))
    out = []
    for s, c in enumerate(scans):
        ix = SpatialIndex(c)
        d, _ = describe(c, ix, random_sample(c, per, seed * 100 + s), params)
        out.extend(d)
    keep = np.sort(rng.choice(len(out), size=min(n, len(out)), replace=False))
    return [out[i] for i in keep], scans


def repeated_patch_surface(seed: int, size: float = 120.0, cap_radius: float = 5.0, cap_spacing: float = 32.0):
    """Height function: distinctive terrain for x < ~0.4 size, then a flat plain with identical hemispheres.

    Hemisphere centres sit on a lattice ``cap_spacing`` apart, so supports smaller than
    that see exactly repeated geometry (flat or one sphere cap).
    """
    x_split = 0.4 * size
    field = HeightField.random(seed, extent=(0.0, x_split, 0.0, size))
    xs = np.arange(x_split + 0.5 * cap_spacing, size - 0.25 * cap_spacing, cap_spacing)
    ys = np.arange(0.5 * cap_spacing, size, cap_spacing)
    caps = np.array([(x, y) for x in xs for y in ys])

    def height(xy):
        xy = np.atleast_2d(xy)
        h = field.height(xy) * np.clip((x_split + 8.0 - xy[:, 0]) / 8.0, 0.0, 1.0)
        for c in caps:
            d2 = ((xy - c) ** 2).sum(axis=1)
            inside = d2 < cap_radius ** 2
            h[inside] = np.maximum(h[inside], np.sqrt(cap_radius ** 2 - d2[inside]))
        return h

    return height


def sample_height(height, region, spacing: float = 1.0, seed: int = 0, id: str = "") -> PointCloud:
    xy = jittered_grid(*region, spacing, np.random.default_rng(seed))
    return PointCloud(np.column_stack([xy, height(xy)]), id=id)


def saliency_corpus(seed: int = 0, n_scans: int = 4, features: int = 300, noise: float = 0.3,
                    R_factor: float = 15.0, K: int = 8, size: float = 120.0):
    """Graph nodes and noisy re-scan queries over :func:`repeated_patch_surface` scans.

    Every scan is sampled twice with independent jitter; the second sampling gets
    Gaussian noise of ``noise`` pr. Graph descriptors are taken at random points of
    the first sampling, each query at the re-scan point nearest a graph feature, whose
    node is the query's true correspondent. Returns ``(descriptors, queries, truths)``.
    """
    from .descriptor import SgcParams, describe
    from .pointcloud import SpatialIndex, random_sample

    heights = [repeated_patch_surface(seed * 100 + s, size) for s in range(n_scans)]
    region = (0.0, size, 0.0, size)
    scans = [sample_height(h, region, 1.0, seed * 100 + s, id=f"patch{s}") for s, h in enumerate(heights)]
    pr = float(np.mean([compute_resolution(c) for c in scans]))
    params = SgcParams.from_resolution(pr, R_factor, 1.0, K)
    rng = np.random.default_rng(seed)
    descs, queries, truths = [], [], []
    for s, (c, h) in enumerate(zip(scans, heights)):
        d, _ = describe(c, SpatialIndex(c), random_sample(c, features, seed * 100 + s), params)
        rescan = sample_height(h, region, 1.0, seed * 100 + s + 50, id=f"rescan{s}")
        rescan = PointCloud(rescan.points + rng.normal(0.0, noise * pr, rescan.points.shape), id=rescan.id)
        rix = SpatialIndex(rescan)
        _, near = rix.nearest_distances(np.array([x.position for x in d]))
        q, _ = describe(rescan, rix, near, params)
        by_index = {x.feature_index: x for x in q}
        for x, n in zip(d, near):
            if n in by_index:
                truths.append(len(descs))
                queries.append(by_index[n])
            descs.append(x)
    return descs, queries, np.array(truths)

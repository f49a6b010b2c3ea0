"""Spherical supports and a repeatable local reference frame built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, SpatialIndex

MIN_SUPPORT = 4
TIE_TOL = 1e-6


class SupportError(ValueError):
    pass


class DegenerateSupportError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Support:
    center: np.ndarray
    radius: float
    point_indices: np.ndarray
    points: np.ndarray
    parent: str = ""

    def __len__(self):
        return len(self.point_indices)


@dataclass(frozen=True, eq=False)
class LocalReferenceFrame:
    origin: np.ndarray
    axes: np.ndarray  # rows are the x, y, z axes
    ambiguous: bool = False

    def to_local(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.origin) @ self.axes.T

    def to_global(self, local) -> np.ndarray:
        return np.asarray(local, dtype=np.float64) @ self.axes + self.origin

    def transformed(self, rotation, translation) -> "LocalReferenceFrame":
        rotation = np.asarray(rotation, dtype=np.float64)
        return LocalReferenceFrame(rotation @ self.origin + translation, self.axes @ rotation.T,
                                   self.ambiguous)


def extract_support(cloud: PointCloud, index: SpatialIndex, p, r: float) -> Support:
    if r <= 0:
        raise ValueError("support radius must be positive")
    p = np.asarray(p, dtype=np.float64)
    idx = index.radius_query(p, r)
    if len(idx) == 0:
        raise SupportError(f"no points within {r:g} of {p}")
    return Support(p, float(r), idx, cloud.points[idx], cloud.id)


def _orient(axis, offsets, tol):
    # projections within tol of zero (e.g. the centre point itself after round-off) do not vote
    proj = offsets @ axis
    pos = int(np.count_nonzero(proj > tol))
    neg = int(np.count_nonzero(proj < -tol))
    if pos == neg:
        s = proj.sum()
        return (-axis if s < 0 else axis), abs(s) <= tol * len(proj)
    return (-axis if neg > pos else axis), False


def compute_lrf(support: Support, normal=None) -> LocalReferenceFrame:
    """Distance-weighted PCA frame with majority-vote sign disambiguation.

    Axes are ordered by decreasing eigenvalue. The first and third axes take the sign
    that the majority of support offsets project positively onto; the second is
    ``z x x``. A supplied normal fixes the third axis' sign (the second flips with it
    to stay right-handed).
    """
    if len(support) < MIN_SUPPORT:
        raise DegenerateSupportError(f"support has {len(support)} points, need {MIN_SUPPORT}")
    p = support.center
    d = support.points - p
    w = support.radius - np.linalg.norm(d, axis=1)
    w = np.clip(w, 0.0, None)
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateSupportError("all support weights vanish")
    cov = (d * w[:, None]).T @ d / wsum
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[0] <= 0 or vals[1] <= 1e-12 * vals[0]:
        raise DegenerateSupportError("support covariance has rank < 2")
    ambiguous = (vals[0] - vals[1]) <= TIE_TOL * vals[0] or (vals[1] - vals[2]) <= TIE_TOL * vals[0]
    tol = 1e-12 * support.radius
    x, tie_x = _orient(vecs[:, 0], d, tol)
    z, tie_z = _orient(vecs[:, 2], d, tol)
    if normal is not None:
        n = np.asarray(normal, dtype=np.float64)
        tie_z = False
        if z @ n < 0:
            z = -z
    y = np.cross(z, x)
    axes = np.vstack([x, y, z])
    return LocalReferenceFrame(p.copy(), axes, bool(ambiguous or tie_x or tie_z))


def lrf_at(cloud: PointCloud, index: SpatialIndex, p, r: float, normal=None) -> LocalReferenceFrame:
    return compute_lrf(extract_support(cloud, index, p, r), normal)

"""SGC descriptors: per-voxel centroid/count features inside an LRF-aligned cube.

Voxels are flattened x-fastest, then y, then z: ``flat = ix + K * (iy + K * iz)``.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .lrf import DegenerateSupportError, LocalReferenceFrame, SupportError, extract_support, compute_lrf
from .pointcloud import PointCloud, SpatialIndex, _atomic_write

MAGIC = b"SGC1"
_RECORD_HEAD = struct.Struct("<IIdddI3d9d")
_VOXEL_DTYPE = np.dtype([("C", "<u4"), ("N", "<u4")])


@dataclass(frozen=True)
class SgcParams:
    R: float
    r: float | None = None
    K: int = 8
    epsilon: float | None = None

    def __post_init__(self):
        if not (isinstance(self.K, (int, np.integer)) and self.K >= 1):
            raise ValueError(f"K must be an integer >= 1, got {self.K}")
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if self.r is None:
            object.__setattr__(self, "r", float(self.R))
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", (0.01 * self.voxel_edge) ** 2)
        if not 0 < self.r <= self.R * (1 + 1e-12):
            raise ValueError(f"need 0 < r <= R, got r={self.r}, R={self.R}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def from_resolution(cls, pr: float, R_factor: float = 20.0, r_ratio: float = 1.0, K: int = 8,
                        epsilon: float | None = None) -> "SgcParams":
        """Parameters in units of cloud resolution; ``r_ratio`` = r / R (0.5 for boundary mode)."""
        R = R_factor * pr
        return cls(R=R, r=r_ratio * R, K=K, epsilon=epsilon)

    @property
    def voxel_edge(self) -> float:
        return 2.0 * self.R / self.K

    @property
    def n_voxels(self) -> int:
        return self.K ** 3


@dataclass(frozen=True, eq=False)
class SgcDescriptor:
    counts: np.ndarray      # (K^3,) int64
    centroids: np.ndarray   # (K^3, 3) offsets from each voxel's minimum corner
    lrf: LocalReferenceFrame
    params: SgcParams
    feature_index: int = -1
    scan_id: str = ""

    @property
    def position(self) -> np.ndarray:
        return self.lrf.origin

    @property
    def nonempty(self) -> np.ndarray:
        return np.flatnonzero(self.counts)


def voxel_coords(flat, K: int) -> np.ndarray:
    flat = np.asarray(flat)
    return np.stack([flat % K, (flat // K) % K, flat // (K * K)], axis=-1)


def compute_descriptor(cloud: PointCloud, index: SpatialIndex, feature_index: int,
                       lrf: LocalReferenceFrame, params: SgcParams) -> SgcDescriptor:
    """Bin the cube [-R, R)^3 of the LRF into K^3 voxels and record centroid offsets and counts."""
    R, K, L = params.R, params.K, params.voxel_edge
    p = lrf.origin
    idx = index.radius_query(p, R * math.sqrt(3.0) * (1 + 1e-9))
    u = lrf.to_local(cloud.points[idx]) if len(idx) else np.zeros((0, 3))
    u = u[np.all(np.abs(u) < R, axis=1)]
    b = np.clip(np.floor((u + R) / L).astype(np.int64), 0, K - 1)
    flat = b[:, 0] + K * (b[:, 1] + K * b[:, 2])
    V = K ** 3
    counts = np.bincount(flat, minlength=V).astype(np.int64)
    sums = np.stack([np.bincount(flat, weights=u[:, a], minlength=V) for a in range(3)], axis=1)
    centroids = np.zeros((V, 3))
    nz = counts > 0
    corner = voxel_coords(np.flatnonzero(nz), K) * L - R
    centroids[nz] = np.clip(sums[nz] / counts[nz, None] - corner, 0.0, np.nextafter(L, 0.0))
    return SgcDescriptor(counts, centroids, lrf, params, int(feature_index), cloud.id)


class DescribeFailure(NamedTuple):
    feature_index: int
    reason: str


def describe(cloud: PointCloud, index: SpatialIndex, feature_indices: Sequence[int], params: SgcParams,
             skip_ambiguous: bool = True, threads: int = 1):
    """LRF + descriptor for each feature point.

    Returns ``(descriptors, failures)``; points whose support is empty, degenerate or
    (with ``skip_ambiguous``) sign/eigen-ambiguous are reported in ``failures``.
    """
    def one(i):
        i = int(i)
        p = cloud.points[i]
        normal = None if cloud.normals is None else cloud.normals[i]
        if normal is not None and not np.all(np.isfinite(normal)):
            normal = None
        try:
            frame = compute_lrf(extract_support(cloud, index, p, params.r), normal)
        except (SupportError, DegenerateSupportError) as exc:
            return DescribeFailure(i, str(exc))
        if skip_ambiguous and frame.ambiguous:
            return DescribeFailure(i, "ambiguous LRF")
        return compute_descriptor(cloud, index, i, frame, params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, feature_indices))
    else:
        results = [one(i) for i in feature_indices]
    descs = [r for r in results if isinstance(r, SgcDescriptor)]
    fails = [r for r in results if isinstance(r, DescribeFailure)]
    return descs, fails


class Compressed(NamedTuple):
    codes: np.ndarray   # (K^3,) uint32
    counts: np.ndarray  # (K^3,) uint32
    Q: int


def _check_q(Q: int):
    if not 2 <= Q <= 1625:  # Q^3 must fit in uint32
        raise ValueError(f"quantization level must be in [2, 1625], got {Q}")


def compress(descriptor: SgcDescriptor, Q: int = 256) -> Compressed:
    """Pack each centroid into one integer ``(zq * Q + yq) * Q + xq``."""
    _check_q(Q)
    L = descriptor.params.voxel_edge
    q = np.minimum(np.floor(descriptor.centroids / L * Q), Q - 1).astype(np.int64)
    q = np.maximum(q, 0)
    codes = (q[:, 2] * Q + q[:, 1]) * Q + q[:, 0]
    codes[descriptor.counts == 0] = 0
    return Compressed(codes.astype(np.uint32), descriptor.counts.astype(np.uint32), Q)


def decompress(compressed: Compressed, params: SgcParams) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`compress`; centroids land on quantization-cell centres."""
    codes = np.asarray(compressed.codes, dtype=np.int64)
    counts = np.asarray(compressed.counts, dtype=np.int64)
    Q = compressed.Q
    _check_q(Q)
    if np.any(codes >= Q ** 3) or np.any(codes < 0):
        raise ValueError("compressed code out of range")
    q = np.stack([codes % Q, (codes // Q) % Q, codes // (Q * Q)], axis=1)
    centroids = (q + 0.5) * (params.voxel_edge / Q)
    centroids[counts == 0] = 0.0
    return counts, centroids


def voxel_similarity(n_m: int, c_m, n_n: int, c_n, epsilon: float) -> float:
    if n_m == 0 or n_n == 0:
        return 0.0
    diff = np.asarray(c_m, dtype=np.float64) - np.asarray(c_n, dtype=np.float64)
    return math.log(n_m * n_n / (float(diff @ diff) + epsilon))


def _pair_epsilon(pm: SgcParams, pn: SgcParams) -> float:
    if pm.K != pn.K:
        raise ValueError(f"descriptor grids differ: K={pm.K} vs K={pn.K}")
    return pm.epsilon if pm.epsilon == pn.epsilon else 0.5 * (pm.epsilon + pn.epsilon)


def descriptor_similarity(dm: SgcDescriptor, dn: SgcDescriptor) -> float:
    """Sum of the log-ratio voxel score over voxels non-empty in both descriptors."""
    eps = _pair_epsilon(dm.params, dn.params)
    both = np.flatnonzero((dm.counts > 0) & (dn.counts > 0))
    if len(both) == 0:
        return 0.0
    diff = dm.centroids[both] - dn.centroids[both]
    d2 = np.einsum("ij,ij->i", diff, diff)
    return float(np.sum(np.log(dm.counts[both] * dn.counts[both] / (d2 + eps))))


class DescriptorStack:
    """Dense arrays over many descriptors for vectorised scoring."""

    def __init__(self, descriptors: Sequence[SgcDescriptor]):
        if not descriptors:
            raise ValueError("empty descriptor list")
        self.descriptors = list(descriptors)
        self.params = descriptors[0].params
        for d in descriptors:
            _pair_epsilon(self.params, d.params)
        self.epsilon = float(np.mean([d.params.epsilon for d in descriptors]))
        self.counts = np.stack([d.counts for d in descriptors]).astype(np.float64)
        self.log_counts = np.log(np.where(self.counts > 0, self.counts, 1.0))
        self.centroids = np.stack([d.centroids for d in descriptors])
        self.scan_ids = [d.scan_id for d in descriptors]

    def __len__(self):
        return len(self.descriptors)

    def scores(self, query: SgcDescriptor, rows=None) -> np.ndarray:
        """Similarity of ``query`` to every descriptor (or to ``rows``)."""
        _pair_epsilon(self.params, query.params)
        nz = query.nonempty
        if rows is None:
            cnt = self.log_counts[:, nz]
            occ = self.counts[:, nz] > 0
            cen = self.centroids[:, nz]
        else:
            rows = np.asarray(rows, dtype=np.intp)
            ix = np.ix_(rows, nz)
            cnt = self.log_counts[ix]
            occ = self.counts[ix] > 0
            cen = self.centroids[ix]
        diff = cen - query.centroids[nz]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        term = np.log(query.counts[nz]) + cnt - np.log(d2 + self.epsilon)
        return np.where(occ, term, 0.0).sum(axis=1)

    def matrix(self, other: "DescriptorStack | None" = None) -> np.ndarray:
        """All-pairs similarity, accumulated voxel by voxel over co-occupied rows."""
        other = self if other is None else other
        _pair_epsilon(self.params, other.params)
        eps = 0.5 * (self.epsilon + other.epsilon)
        S = np.zeros((len(self), len(other)))
        occ_a = self.counts > 0
        occ_b = other.counts > 0
        for v in np.flatnonzero(occ_a.any(axis=0) & occ_b.any(axis=0)):
            ia = np.flatnonzero(occ_a[:, v])
            ib = np.flatnonzero(occ_b[:, v])
            ca = self.centroids[ia, v]
            cb = other.centroids[ib, v]
            d2 = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
            S[np.ix_(ia, ib)] += self.log_counts[ia, v][:, None] + other.log_counts[ib, v][None, :] \
                - np.log(d2 + eps)
        return S


def write_descriptors(path, descriptors: Sequence[SgcDescriptor], Q: int = 256, scan_id: str | None = None):
    """SGC1 file: magic, count, scan id, then length-prefixed compressed records."""
    if scan_id is None:
        scan_id = descriptors[0].scan_id if descriptors else ""
    sid = scan_id.encode("utf-8")
    parts = [MAGIC, struct.pack("<IH", len(descriptors), len(sid)), sid]
    for d in descriptors:
        comp = compress(d, Q)
        p = d.params
        head = _RECORD_HEAD.pack(p.K, Q, p.R, p.r, p.epsilon, max(d.feature_index, 0) & 0xFFFFFFFF,
                                 *d.position, *d.lrf.axes.reshape(-1))
        vox = np.empty(p.n_voxels, dtype=_VOXEL_DTYPE)
        vox["C"] = comp.codes
        vox["N"] = comp.counts
        payload = head + vox.tobytes()
        parts.append(struct.pack("<I", len(payload)))
        parts.append(payload)
    _atomic_write(Path(path), b"".join(parts))


def read_descriptors(path) -> list[SgcDescriptor]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SGC1 descriptor file")
    count, sid_len = struct.unpack_from("<IH", data, 4)
    off = 10
    scan_id = data[off: off + sid_len].decode("utf-8")
    off += sid_len
    out = []
    for _ in range(count):
        (size,) = struct.unpack_from("<I", data, off)
        off += 4
        rec = _RECORD_HEAD.unpack_from(data, off)
        K, Q, R, r, eps, fidx = rec[:6]
        pos = np.array(rec[6:9])
        axes = np.array(rec[9:18]).reshape(3, 3)
        params = SgcParams(R=R, r=r, K=K, epsilon=eps)
        vox = np.frombuffer(data, dtype=_VOXEL_DTYPE, count=K ** 3, offset=off + _RECORD_HEAD.size)
        counts, centroids = decompress(Compressed(vox["C"].copy(), vox["N"].copy(), Q), params)
        out.append(SgcDescriptor(counts, centroids, LocalReferenceFrame(pos, axes), params, fidx, scan_id))
        off += size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} descriptors")
    return out

"""Point clouds: representation, PLY/XYZ I/O, spatial queries, sampling and normals."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

FORMATS = ("ply-ascii", "ply-binary-le", "xyz")


class CloudError(ValueError):
    """Raised for malformed or degenerate point-cloud input."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must have shape (n, 3), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise CloudError("normals must match points in shape")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, rotation, translation) -> "PointCloud":
        rotation = np.asarray(rotation, dtype=np.float64)
        pts = self.points @ rotation.T + np.asarray(translation, dtype=np.float64)
        nrm = None if self.normals is None else self.normals @ rotation.T
        return PointCloud(pts, nrm, self.id)

    def subset(self, indices, id: str | None = None) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.intp)
        nrm = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], nrm, self.id if id is None else id)


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".xyz" or suffix == ".txt":
        return "xyz"
    if suffix == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        return "ply-binary-le" if b"binary_little_endian" in head else "ply-ascii"
    raise CloudError(f"cannot infer cloud format from {path.name!r}")


# PLY scalar type name -> struct code
_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise CloudError("malformed header: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_types or None)])
    while True:
        line = fh.readline()
        if not line:
            raise CloudError("malformed header: missing end_header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise CloudError("malformed header: property before element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], None, (tokens[2], tokens[3])))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise CloudError(f"malformed header: unknown type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], tokens[1], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _vertex_arrays(names, table):
    cols = {name: i for i, name in enumerate(names)}
    if not all(c in cols for c in "xyz"):
        raise CloudError("malformed header: vertex element lacks x/y/z")
    pts = table[:, [cols["x"], cols["y"], cols["z"]]]
    normals = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = table[:, [cols["nx"], cols["ny"], cols["nz"]]]
    return pts, normals


def _load_ply(path: Path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise CloudError("malformed header: no vertex element")
        _, count, props = vertex
        if any(p[2] is not None for p in props):
            raise CloudError("list properties on vertices are not supported")
        names = [p[0] for p in props]
        if fmt == "ascii":
            # elements are stored in header order; skip whatever precedes vertices
            skip = sum(e[1] for e in elements[: elements.index(vertex)])
            lines = fh.read().decode("ascii").splitlines()
            rows = [ln for ln in lines if ln.strip()][skip: skip + count]
            if len(rows) < count:
                raise CloudError("truncated PLY body")
            table = np.array([[float(v) for v in r.split()[: len(names)]] for r in rows],
                             dtype=np.float64).reshape(count, len(names))
        else:
            for e in elements[: elements.index(vertex)]:
                if any(p[2] is not None for p in e[2]):
                    raise CloudError("list-property elements before vertices are not supported")
                fh.read(e[1] * struct.calcsize("<" + "".join(_PLY_TYPES[p[1]] for p in e[2])))
            dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise CloudError("truncated PLY body")
            rec = np.frombuffer(raw, dtype=dtype, count=count)
            table = np.column_stack([rec[n].astype(np.float64) for n in names]) if count else \
                np.zeros((0, len(names)))
    return _vertex_arrays(names, table)


def _load_xyz(path: Path):
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            fields = ln.split()
            if len(fields) not in (3, 6):
                raise CloudError(f"xyz line must have 3 or 6 fields: {ln!r}")
            rows.append([float(v) for v in fields])
    if not rows:
        return np.zeros((0, 3)), None
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise CloudError("xyz lines mix 3- and 6-field records")
    table = np.array(rows, dtype=np.float64)
    return table[:, :3], (table[:, 3:6] if table.shape[1] == 6 else None)


def load_cloud(path, format: str | None = None) -> PointCloud:
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt not in FORMATS:
        raise CloudError(f"unknown format {fmt!r}")
    pts, normals = _load_xyz(path) if fmt == "xyz" else _load_ply(path)
    if len(pts) == 0:
        raise CloudError(f"zero vertices in {path}")
    return PointCloud(pts, normals, path.stem)


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cloud(cloud: PointCloud, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or ("xyz" if path.suffix.lower() in (".xyz", ".txt") else "ply-binary-le")
    if fmt not in FORMATS:
        raise CloudError(f"unknown format {fmt!r}")
    table = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    if fmt == "xyz":
        body = "".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in table)
        _atomic_write(path, body.encode("ascii"))
        return
    names = ["x", "y", "z"] + ([] if cloud.normals is None else ["nx", "ny", "nz"])
    kind = "ascii" if fmt == "ply-ascii" else "binary_little_endian"
    ptype = "float" if fmt == "ply-ascii" else "double"
    header = [ "ply", f"format {kind} 1.0", f"element vertex {len(table)}"]
    header += [f"property {ptype} {n}" for n in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if fmt == "ply-ascii":
        body = "".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in table).encode("ascii")
    else:
        body = np.ascontiguousarray(table, dtype="<f8").tobytes()
    _atomic_write(path, head + body)


class SpatialIndex:
    """KD-tree over a cloud's points with exact radius and k-nearest queries."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self.points = pts
        self.tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def radius_query(self, center, radius: float) -> np.ndarray:
        if radius <= 0:
            raise ValueError("radius must be positive")
        center = np.asarray(center, dtype=np.float64)
        idx = np.asarray(self.tree.query_ball_point(center, radius), dtype=np.intp)
        if len(idx):
            # the tree's pruning may differ from the direct test at the boundary by one ulp
            d = np.linalg.norm(self.points[idx] - center, axis=1)
            idx = idx[d <= radius]
        return np.sort(idx)

    def nearest_query(self, query, k: int = 1) -> np.ndarray:
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        query = np.asarray(query, dtype=np.float64)
        _, idx = self.tree.query(query, k=k)
        idx = np.atleast_1d(idx)
        kth = np.linalg.norm(self.points[idx[-1]] - query)
        # pull in every point tied with the k-th so ties resolve by lower index
        cand = np.asarray(self.tree.query_ball_point(query, kth * (1 + 1e-12) + 1e-300), dtype=np.intp)
        cand = np.union1d(cand, idx)
        d = np.linalg.norm(self.points[cand] - query, axis=1)
        order = np.lexsort((cand, d))
        return cand[order[:k]]

    def nearest_distances(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Distance and index of the nearest indexed point for each query row."""
        d, i = self.tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return d, i


def radius_query(index: SpatialIndex, center, radius: float) -> np.ndarray:
    return index.radius_query(center, radius)


def nearest_query(index: SpatialIndex, query, k: int = 1) -> np.ndarray:
    return index.nearest_query(query, k)


def compute_resolution(cloud: PointCloud | np.ndarray, index: SpatialIndex | None = None) -> float:
    """Mean distance from each point to its nearest other point."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 2:
        raise CloudError("resolution needs at least 2 points")
    tree = index.tree if index is not None else cKDTree(pts)
    d, _ = tree.query(pts, k=2)
    return float(np.mean(d[:, 1]))


def _occupied_cells(pts, origin, cell):
    keys = np.floor((pts - origin) / cell).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1)


def uniform_sample(cloud: PointCloud, index: SpatialIndex | None, M: int, seed: int = 0) -> np.ndarray:
    """Voxel-grid sampling: one representative per occupied cell, at most ``M`` cells.

    The cell size is the smallest (found by bisection) whose occupied-cell count does
    not exceed ``M``; the grid origin is jittered by ``seed``. Each cell keeps the
    member nearest to the cell's centroid.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    pts = cloud.points
    n = len(pts)
    if M >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    jitter = rng.random(3)
    lo_pt = pts.min(axis=0)
    extent = float(np.max(pts.max(axis=0) - lo_pt))
    if extent == 0:
        return np.array([0], dtype=np.intp)
    lo, hi = extent * 1e-9, extent * 2.0 + 1e-12

    def count(cell):
        return int(_occupied_cells(pts, lo_pt - jitter * cell, cell).max()) + 1

    for _ in range(60):
        if count(lo) > M:
            break
        lo /= 2.0
    else:
        # duplicates: even the finest grid has <= M occupied cells
        hi = lo
    for _ in range(60 if hi > lo else 0):
        mid = np.sqrt(lo * hi)
        if count(mid) > M:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-6:
            break
    cells = _occupied_cells(pts, lo_pt - jitter * hi, hi)
    ncell = cells.max() + 1
    sums = np.zeros((ncell, 3))
    np.add.at(sums, cells, pts)
    centroid = sums / np.bincount(cells, minlength=ncell)[:, None]
    d = np.linalg.norm(pts - centroid[cells], axis=1)
    order = np.lexsort((np.arange(n), d, cells))
    first = np.ones(n, dtype=bool)
    first[1:] = cells[order[1:]] != cells[order[:-1]]
    return np.sort(order[first])


def random_sample(cloud: PointCloud, M: int, seed: int = 0) -> np.ndarray:
    """Uniformly random feature-point indices (without replacement)."""
    n = len(cloud)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=min(M, n), replace=False))


def estimate_normals(cloud: PointCloud, index: SpatialIndex | None, radius: float):
    """PCA normals over radius neighbourhoods, oriented consistently along an MST.

    Returns ``(cloud_with_normals, flagged)``: ``flagged`` lists points with fewer than
    3 neighbours, whose normal rows are NaN.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    index = index or SpatialIndex(cloud)
    pts = cloud.points
    n = len(pts)
    neigh = index.tree.query_ball_point(pts, radius)
    normals = np.full((n, 3), np.nan)
    flagged = []
    rows, cols = [], []
    for i, nb in enumerate(neigh):
        nb = [j for j in nb if j != i]
        if len(nb) < 3:
            flagged.append(i)
            continue
        q = pts[nb + [i]]
        q = q - q.mean(axis=0)
        _, vecs = np.linalg.eigh(q.T @ q)
        normals[i] = vecs[:, 0]
        rows.extend([i] * len(nb))
        cols.extend(nb)
    valid = ~np.isnan(normals[:, 0])
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    keep = valid[cols]
    rows, cols = rows[keep], cols[keep]
    if len(rows):
        w = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
        graph = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
        graph = graph.maximum(graph.T)
        tree = minimum_spanning_tree(graph)
        tree = tree + tree.T
        _, labels = connected_components(tree, directed=False)
        centre = pts[valid].mean(axis=0)
        for comp in np.unique(labels[valid]):
            members = np.flatnonzero((labels == comp) & valid)
            # seed: farthest point from the centroid, oriented outward
            seed = members[np.argmax(np.linalg.norm(pts[members] - centre, axis=1))]
            if normals[seed] @ (pts[seed] - centre) < 0:
                normals[seed] = -normals[seed]
            order, pred = breadth_first_order(tree, seed, directed=False)
            for node in order[1:]:
                if normals[node] @ normals[pred[node]] < 0:
                    normals[node] = -normals[node]
    return PointCloud(pts, normals, cloud.id), np.asarray(flagged, dtype=np.intp)

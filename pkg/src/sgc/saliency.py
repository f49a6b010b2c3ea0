"""Descriptor-graph: approximate k-NN over SGC descriptors, saliency and graph queries."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .descriptor import DescriptorStack, SgcDescriptor
from .pointcloud import _atomic_write

GRAPH_MAGIC = b"SGCG"


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyParams:
    k: int = 16
    alpha: float = 0.2
    build_iterations: int = 8
    query_seeds: int = 16
    query_iterations: int = 4
    rerank_pool: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.query_seeds < 1 or self.rerank_pool < 1:
            raise ValueError("query_seeds and rerank_pool must be >= 1")


@dataclass(eq=False)
class DescriptorGraph:
    neighbors: np.ndarray           # (N, k) out-neighbour ids, best first
    scores: np.ndarray              # (N, k) cached raw similarities
    scan_ids: list[str]
    stack: DescriptorStack | None = None
    indegree: np.ndarray = field(default=None)
    mean_indegree: float = float("nan")
    saliency: np.ndarray = field(default=None)
    _reverse: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self):
        return len(self.neighbors)

    @property
    def descriptors(self) -> list[SgcDescriptor]:
        return self.stack.descriptors

    def reverse_index(self) -> np.ndarray:
        """Cached in-neighbour table used by queries (capped at k per node)."""
        if self._reverse is None:
            self._reverse = self.reverse()
        return self._reverse

    def reverse(self, cap: int | None = None) -> np.ndarray:
        """In-neighbours per node, strongest edge first, padded with -1 to ``cap`` columns."""
        return reverse_neighbors(self.neighbors, self.scores, self.k if cap is None else cap)


def reverse_neighbors(neighbors: np.ndarray, scores: np.ndarray, cap: int) -> np.ndarray:
    n, k = neighbors.shape
    src = np.repeat(np.arange(n), k)
    dst = neighbors.ravel()
    order = np.lexsort((src, -scores.ravel(), dst))
    dst_sorted = dst[order]
    starts = np.searchsorted(dst_sorted, np.arange(n))
    rank = np.arange(len(order)) - starts[dst_sorted]
    keep = rank < cap
    out = np.full((n, cap), -1, dtype=np.intp)
    out[dst_sorted[keep], rank[keep]] = src[order][keep]
    return out


def _as_stack(descriptors) -> DescriptorStack:
    return descriptors if isinstance(descriptors, DescriptorStack) else DescriptorStack(descriptors)


def _check_size(n, k):
    if n <= k:
        raise GraphError(f"need more than k={k} descriptors, got {n}")


def _top_k(ids, scores, k):
    # best score first; ties resolved by lower node id
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def brute_force_knn(descriptors, k: int) -> DescriptorGraph:
    """Exact k-NN graph by scoring every pair."""
    stack = _as_stack(descriptors)
    n = len(stack)
    _check_size(n, k)
    S = stack.matrix()
    np.fill_diagonal(S, -np.inf)
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    g = DescriptorGraph(order, np.take_along_axis(S, order, axis=1), list(stack.scan_ids), stack)
    return compute_saliency(g)


def build_graph(descriptors, params: SaliencyParams = SaliencyParams()) -> DescriptorGraph:
    """Randomly initialised k-NN graph refined by neighbour propagation and random search.

    Each round a node's candidates are its neighbours' neighbours, its in-neighbours and
    their neighbours, plus ``ceil(log2 N)`` random nodes; better candidates displace the
    worst current neighbours.
    """
    stack = _as_stack(descriptors)
    n, k = len(stack), params.k
    _check_size(n, k)
    rng = np.random.default_rng(params.seed)
    n_random = math.ceil(math.log2(n))
    neighbors = np.empty((n, k), dtype=np.intp)
    scores = np.empty((n, k))
    for i in range(n):
        ids = rng.choice(n - 1, size=k, replace=False)
        ids[ids >= i] += 1
        neighbors[i], scores[i] = _top_k(ids, stack.scores(stack.descriptors[i], ids), k)
    for _ in range(params.build_iterations):
        changed = 0
        rev = reverse_neighbors(neighbors, scores, k)
        for i in range(n):
            r = rev[i][rev[i] >= 0]
            cand = np.concatenate([neighbors[neighbors[i]].ravel(), r, neighbors[r].ravel(),
                                   rng.integers(0, n, n_random)])
            cand = np.setdiff1d(cand, np.append(neighbors[i], i))
            if len(cand) == 0:
                continue
            cs = stack.scores(stack.descriptors[i], cand)
            better = cs > scores[i, -1]
            if not better.any():
                continue
            ids = np.concatenate([neighbors[i], cand[better]])
            sc = np.concatenate([scores[i], cs[better]])
            neighbors[i], scores[i] = _top_k(ids, sc, k)
            changed += 1
        if changed == 0:
            break
    return compute_saliency(DescriptorGraph(neighbors, scores, list(stack.scan_ids), stack))


def saliency_from_indegree(indegree, mean_indegree: float) -> np.ndarray:
    return expit(mean_indegree - np.asarray(indegree, dtype=np.float64))


def compute_saliency(graph: DescriptorGraph) -> DescriptorGraph:
    """Indegrees, mean positive indegree and the sigmoid saliency ``1 / (1 + e^(I - mean))``."""
    indeg = np.bincount(graph.neighbors.ravel(), minlength=len(graph))
    pos = indeg[indeg > 0]
    if len(pos) == 0:
        raise GraphError("graph has no edges")
    graph.indegree = indeg
    graph.mean_indegree = float(pos.mean())
    graph.saliency = saliency_from_indegree(indeg, graph.mean_indegree)
    return graph


def enhanced_similarity(s, sali, alpha: float):
    return np.power(sali, alpha) * s


@dataclass(frozen=True)
class QueryHit:
    node: int
    raw: float
    enhanced: float


def _eligible_mask(graph: DescriptorGraph, exclude_scan, allowed_scans):
    ids = np.asarray(graph.scan_ids, dtype=object)
    mask = np.ones(len(graph), dtype=bool)
    if exclude_scan is not None:
        mask &= ids != exclude_scan
    if allowed_scans is not None:
        mask &= np.isin(ids, list(allowed_scans))
    return mask


def _rerank(graph, ids, raw, params, use_saliency):
    order = np.lexsort((ids, -raw))[: params.rerank_pool]
    ids, raw = ids[order], raw[order]
    if use_saliency:
        enh = enhanced_similarity(raw, graph.saliency[ids], params.alpha)
    else:
        enh = raw.copy()
    order = np.lexsort((ids, -enh))
    return [QueryHit(int(ids[j]), float(raw[j]), float(enh[j])) for j in order]


def graph_query(graph: DescriptorGraph, query: SgcDescriptor, params: SaliencyParams = SaliencyParams(),
                query_index: int = 0, exclude_scan: str | None = None, allowed_scans=None,
                use_saliency: bool = True) -> list[QueryHit]:
    """Best-first search from random entry nodes along out- and in-edges, then saliency re-ranking.

    Nodes whose scan id equals ``exclude_scan`` (or is not in ``allowed_scans``) are
    traversed but never returned.
    """
    n = len(graph)
    if n == 0:
        raise GraphError("empty graph")
    eligible = _eligible_mask(graph, exclude_scan, allowed_scans)
    if not eligible.any():
        return []
    rng = np.random.default_rng([params.seed, query_index])
    n_random = math.ceil(math.log2(max(n, 2)))
    visited = np.zeros(n, dtype=bool)
    best = np.full(n, -np.inf)
    expanded = np.zeros(n, dtype=bool)
    pool = np.flatnonzero(eligible)
    seeds = rng.choice(pool, size=min(params.query_seeds, len(pool)), replace=False)
    visited[seeds] = True
    best[seeds] = graph.stack.scores(query, seeds)
    beam = params.query_seeds
    rev = graph.reverse_index()
    for _ in range(params.query_iterations):
        seen = np.flatnonzero(visited & ~expanded)
        if len(seen) == 0:
            break
        front = seen[np.lexsort((seen, -best[seen]))[:beam]]
        expanded[front] = True
        back = rev[front].ravel()
        cand = np.concatenate([graph.neighbors[front].ravel(), back[back >= 0], rng.integers(0, n, n_random)])
        cand = np.unique(cand)
        cand = cand[~visited[cand]]
        if len(cand) == 0:
            continue
        visited[cand] = True
        best[cand] = graph.stack.scores(query, cand)
    hits = np.flatnonzero(visited & eligible)
    return _rerank(graph, hits, best[hits], params, use_saliency)


def exhaustive_query(graph: DescriptorGraph, query: SgcDescriptor, params: SaliencyParams = SaliencyParams(),
                     exclude_scan: str | None = None, allowed_scans=None, use_saliency: bool = False,
                     limit: int | None = None) -> list[QueryHit]:
    """Score every eligible node; optionally re-rank the best ``rerank_pool`` by saliency."""
    eligible = _eligible_mask(graph, exclude_scan, allowed_scans)
    ids = np.flatnonzero(eligible)
    if len(ids) == 0:
        return []
    raw = graph.stack.scores(query, ids)
    if use_saliency:
        return _rerank(graph, ids, raw, params, True)
    order = np.lexsort((ids, -raw))[:limit]
    return [QueryHit(int(ids[j]), float(raw[j]), float(raw[j])) for j in order]


def knn_recall(approx: DescriptorGraph, exact: DescriptorGraph) -> float:
    """Mean fraction of each node's exact k-NN that the approximate graph also lists."""
    hits = [len(np.intersect1d(a, e)) for a, e in zip(approx.neighbors, exact.neighbors)]
    return float(np.mean(hits) / exact.k)


def write_graph(path, graph: DescriptorGraph) -> None:
    """Binary layout: magic, k, N, scan table, then per node scan index, k ids, k scores, indegree, saliency."""
    table = sorted(set(graph.scan_ids))
    lookup = {s: i for i, s in enumerate(table)}
    parts = [GRAPH_MAGIC, struct.pack("<III", graph.k, len(graph), len(table))]
    for s in table:
        b = s.encode("utf-8")
        parts.append(struct.pack("<H", len(b)) + b)
    node = np.dtype([("scan", "<u4"), ("ids", "<u4", (graph.k,)), ("scores", "<f8", (graph.k,)),
                     ("indegree", "<u4"), ("saliency", "<f8")])
    rec = np.empty(len(graph), dtype=node)
    rec["scan"] = [lookup[s] for s in graph.scan_ids]
    rec["ids"] = graph.neighbors
    rec["scores"] = graph.scores
    rec["indegree"] = graph.indegree
    rec["saliency"] = graph.saliency
    parts.append(rec.tobytes())
    _atomic_write(Path(path), b"".join(parts))


def read_graph(path, descriptors: Sequence[SgcDescriptor] | None = None) -> DescriptorGraph:
    data = Path(path).read_bytes()
    if data[:4] != GRAPH_MAGIC:
        raise GraphError(f"{path}: not an SGCG graph file")
    k, n, nt = struct.unpack_from("<III", data, 4)
    off = 16
    table = []
    for _ in range(nt):
        (ln,) = struct.unpack_from("<H", data, off)
        table.append(data[off + 2: off + 2 + ln].decode("utf-8"))
        off += 2 + ln
    node = np.dtype([("scan", "<u4"), ("ids", "<u4", (k,)), ("scores", "<f8", (k,)),
                     ("indegree", "<u4"), ("saliency", "<f8")])
    rec = np.frombuffer(data, dtype=node, count=n, offset=off)
    stack = None
    if descriptors is not None:
        if len(descriptors) != n:
            raise GraphError(f"graph has {n} nodes but {len(descriptors)} descriptors were given")
        stack = _as_stack(descriptors)
    g = DescriptorGraph(rec["ids"].astype(np.intp), rec["scores"].copy(),
                        [table[i] for i in rec["scan"]], stack)
    g.indegree = rec["indegree"].astype(np.int64)
    pos = g.indegree[g.indegree > 0]
    g.mean_indegree = float(pos.mean()) if len(pos) else float("nan")
    g.saliency = rec["saliency"].copy()
    return g

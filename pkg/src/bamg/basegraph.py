"""Directed proximity graphs, lune occlusion, NSG-style construction and the
monotone-path verifier."""

from __future__ import annotations

import logging
import os
import struct
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .core import Dataset, NeighborList, distance, medoid, select_smallest, sq_distances

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"BGRF"
GRAPH_VERSION = 1


class Graph:
    """Directed graph over VIDs ``0..n-1`` stored as CSR (``indptr``/``indices``).

    Out-neighbour order is significant and preserved by every operation.
    """

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, validate: bool = True):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int32)
        self.stats: dict = {}
        if validate:
            self.validate()

    @classmethod
    def from_lists(cls, adjacency: Sequence[Iterable[int]], validate: bool = True) -> "Graph":
        lists = [np.asarray(list(a), dtype=np.int32) for a in adjacency]
        degs = np.array([len(a) for a in lists], dtype=np.int64)
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum(degs, out=indptr[1:])
        indices = np.concatenate(lists) if lists and indptr[-1] else np.empty(0, np.int32)
        return cls(indptr, indices, validate=validate)

    @classmethod
    def from_padded(cls, adj: np.ndarray, deg: np.ndarray, validate: bool = True) -> "Graph":
        deg = np.asarray(deg, dtype=np.int64)
        indptr = np.zeros(len(deg) + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        mask = np.arange(adj.shape[1])[None, :] < deg[:, None]
        return cls(indptr, adj[mask], validate=validate)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def to_lists(self) -> list[list[int]]:
        return [self.neighbors(u).tolist() for u in range(self.n)]

    def has_edge(self, u: int, v: int) -> bool:
        return bool(np.any(self.neighbors(u) == v))

    def edges(self) -> np.ndarray:
        """All edges as an (E x 2) array of (src, dst)."""
        src = np.repeat(np.arange(self.n, dtype=np.int32), self.degrees())
        return np.stack([src, self.indices], axis=1)

    def to_padded(self, width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        deg = self.degrees().astype(np.int32)
        w = max(int(deg.max(initial=0)), 1) if width is None else width
        adj = np.full((self.n, w), -1, dtype=np.int32)
        for u in range(self.n):
            nb = self.neighbors(u)[:w]
            adj[u, :len(nb)] = nb
        return adj, np.minimum(deg, w)

    def reverse(self) -> "Graph":
        e = self.edges()
        order = np.lexsort((e[:, 0], e[:, 1]))
        counts = np.bincount(e[:, 1], minlength=self.n)
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return Graph(indptr, e[order, 0], validate=False)

    def validate(self) -> None:
        n = self.n
        if self.indptr[0] != 0 or np.any(np.diff(self.indptr) < 0):
            raise ValueError("malformed indptr")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError("neighbor VID out of range")
        src = np.repeat(np.arange(n), self.degrees())
        if np.any(src == self.indices):
            raise ValueError("self-loop in graph")
        if self.indices.size:
            key = src.astype(np.int64) * n + self.indices
            if len(np.unique(key)) != len(key):
                raise ValueError("duplicate out-neighbor in graph")

    def __eq__(self, other) -> bool:
        return (isinstance(other, Graph) and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.num_edges})"

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Binary encoding: header, then per node a uint32 degree and uint32 VIDs."""
        deg = self.degrees().astype("<u4")
        body = np.empty(self.n + self.num_edges, dtype="<u4")
        pos = np.arange(self.n) + self.indptr[:-1]
        body[pos] = deg
        mask = np.ones(body.size, dtype=bool)
        mask[pos] = False
        body[mask] = self.indices
        header = GRAPH_MAGIC + struct.pack("<BIQ", GRAPH_VERSION, self.n, self.num_edges)
        return header + body.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Graph":
        hlen = len(GRAPH_MAGIC) + struct.calcsize("<BIQ")
        if buf[:4] != GRAPH_MAGIC:
            raise ValueError("not a graph file (bad magic)")
        version, n, m = struct.unpack("<BIQ", buf[4:hlen])
        if version != GRAPH_VERSION:
            raise ValueError(f"unsupported graph format version {version}")
        body = np.frombuffer(buf, dtype="<u4", offset=hlen)
        if body.size != n + m:
            raise ValueError("graph file truncated or oversized")
        adjacency, pos = [], 0
        for _ in range(n):
            d = int(body[pos])
            adjacency.append(body[pos + 1:pos + 1 + d])
            pos += d + 1
        return cls.from_lists(adjacency)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Graph":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def to_text(self) -> str:
        """Debug format: one line per node, ``vid: n1 n2 ...``."""
        return "".join(f"{u}: {' '.join(map(str, self.neighbors(u)))}\n" for u in range(self.n))

    @classmethod
    def from_text(cls, text: str) -> "Graph":
        rows = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, _, rest = line.partition(":")
            rows[int(head)] = [int(t) for t in rest.split()]
        n = max(rows) + 1 if rows else 0
        return cls.from_lists([rows.get(u, []) for u in range(n)])


@dataclass
class GraphBuildParams:
    """Knobs for the NSG-style base graph."""

    R: int = 24
    L_build: int = 64
    C_cand: int = 512
    seed: int = 0
    knn_k: int = 32
    exact_knn_limit: int = 10_000
    nn_descent_iters: int = 12

    def __post_init__(self):
        if not 1 <= self.R <= self.C_cand:
            raise ValueError(f"need 1 <= R <= C_cand, got R={self.R}, C_cand={self.C_cand}")
        if self.L_build < self.R:
            raise ValueError(f"need L_build >= R, got L_build={self.L_build}, R={self.R}")
        if self.knn_k < 1:
            raise ValueError("knn_k must be positive")


# ---------------------------------------------------------------------------
# occlusion primitives
# ---------------------------------------------------------------------------

def in_lune(u: int, q: int, v: int, ds: Dataset) -> bool:
    """True iff ``v`` lies strictly inside the lune of ``u`` and ``q``."""
    for x in (u, q, v):
        if not 0 <= x < ds.n:
            raise IndexError(f"VID {x} out of range")
    if v == u or v == q:
        return False
    duq = distance(ds[u], ds[q])
    return distance(ds[u], ds[v]) < duq and distance(ds[q], ds[v]) < duq


def mrng_select(u: int, candidates: NeighborList, ds: Dataset, R: int | None = None) -> list[int]:
    """MRNG edge selection over candidates sorted ascending by distance to ``u``.

    A candidate ``q`` is kept unless an already-kept node lies in
    ``lune(u, q)``; scanning stops after ``R`` nodes are kept.
    """
    kept: list[int] = []
    limit = len(candidates) if R is None else R
    xs = ds.vectors
    for q in candidates.ids.tolist():
        if q == u:
            continue
        if kept:
            duq = distance(xs[u], xs[q])
            kv = xs[kept]
            du = sq_distances(kv, xs[u])
            dq = sq_distances(kv, xs[q])
            if np.any((du < duq) & (dq < duq)):
                continue
        kept.append(q)
        if len(kept) >= limit:
            break
    return kept


def _sorted_candidates(ds: Dataset, u: int, ids: np.ndarray) -> NeighborList:
    ids = np.asarray(ids, dtype=np.int64)
    ids = ids[ids != u]
    d = sq_distances(ds.vectors[ids], ds[u])
    order = np.lexsort((ids, d))
    return NeighborList(ids[order], d[order])


def exact_mrng(ds: Dataset, nodes: Sequence[int] | None = None) -> list[list[int]]:
    """Brute-force MRNG (no degree cap) over ``nodes`` (default: all VIDs).

    Returns per-node neighbour lists in the same node order as ``nodes``,
    with global VIDs.
    """
    nodes = np.arange(ds.n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    return [mrng_select(int(u), _sorted_candidates(ds, int(u), nodes), ds) for u in nodes]


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _d2(X, i, j):
    s = 0.0
    for t in range(X.shape[1]):
        diff = np.float64(X[i, t]) - np.float64(X[j, t])
        s += diff * diff
    return s


@njit(cache=True)
def _d2q(X, i, q):
    s = 0.0
    for t in range(X.shape[1]):
        diff = np.float64(X[i, t]) - q[t]
        s += diff * diff
    return s


@njit(cache=True)
def _beam_collect(X, adj, deg, entry, q, L, mark, stamp, vis_ids, vis_d):
    """Greedy beam search toward ``q``; records every node whose distance was
    evaluated into ``vis_ids``/``vis_d`` and returns how many."""
    pool_id = np.empty(L + 1, dtype=np.int32)
    pool_d = np.empty(L + 1, dtype=np.float64)
    pool_c = np.zeros(L + 1, dtype=np.bool_)
    d0 = _d2q(X, entry, q)
    mark[entry] = stamp
    vis_ids[0] = entry
    vis_d[0] = d0
    nvis = 1
    pool_id[0] = entry
    pool_d[0] = d0
    size = 1
    k = 0
    while k < size:
        if pool_c[k]:
            k += 1
            continue
        pool_c[k] = True
        v = pool_id[k]
        nk = size
        for j in range(deg[v]):
            w = adj[v, j]
            if w < 0 or mark[w] == stamp:
                continue
            mark[w] = stamp
            dw = _d2q(X, w, q)
            vis_ids[nvis] = w
            vis_d[nvis] = dw
            nvis += 1
            if size == L and (dw > pool_d[L - 1] or (dw == pool_d[L - 1] and w > pool_id[L - 1])):
                continue
            pos = size
            while pos > 0 and (pool_d[pos - 1] > dw or (pool_d[pos - 1] == dw and pool_id[pos - 1] > w)):
                pos -= 1
            top = size if size < L else L - 1
            for t in range(top, pos, -1):
                pool_id[t] = pool_id[t - 1]
                pool_d[t] = pool_d[t - 1]
                pool_c[t] = pool_c[t - 1]
            pool_id[pos] = w
            pool_d[pos] = dw
            pool_c[pos] = False
            if size < L:
                size += 1
            if pos < nk:
                nk = pos
        if nk <= k:
            k = nk
        else:
            k += 1
    return nvis


@njit(cache=True)
def _sort_by_dist_then_id(ids, d, n):
    a = np.argsort(ids[:n], kind="mergesort")
    ids2 = ids[:n][a]
    d2 = d[:n][a]
    b = np.argsort(d2, kind="mergesort")
    return ids2[b], d2[b]


@njit(cache=True)
def _mrng_prune(X, u, cand_ids, cand_d, ncand, R, out_row):
    cnt = 0
    for a in range(ncand):
        q = cand_ids[a]
        if q == u:
            continue
        duq = cand_d[a]
        ok = True
        for b in range(cnt):
            v = out_row[b]
            if v == q:
                ok = False
                break
            if _d2(X, u, v) < duq and _d2(X, q, v) < duq:
                ok = False
                break
        if ok:
            out_row[cnt] = q
            cnt += 1
            if cnt == R:
                break
    return cnt


@njit(cache=True)
def _nsg_link(X, knn, knn_deg, entry, L, C, R):
    n = X.shape[0]
    out = np.full((n, R), -1, dtype=np.int32)
    outd = np.zeros(n, dtype=np.int32)
    mark = np.zeros(n, dtype=np.int32)
    vis_ids = np.empty(n, dtype=np.int32)
    vis_d = np.empty(n, dtype=np.float64)
    q = np.empty(X.shape[1], dtype=np.float64)
    for u in range(n):
        for t in range(X.shape[1]):
            q[t] = X[u, t]
        stamp = u + 1
        nvis = _beam_collect(X, knn, knn_deg, entry, q, L, mark, stamp, vis_ids, vis_d)
        for j in range(knn_deg[u]):
            w = knn[u, j]
            if mark[w] != stamp:
                mark[w] = stamp
                vis_ids[nvis] = w
                vis_d[nvis] = _d2(X, u, w)
                nvis += 1
        ids, ds = _sort_by_dist_then_id(vis_ids, vis_d, nvis)
        m = nvis if nvis < C + 1 else C + 1  # +1 because u itself may be present
        outd[u] = _mrng_prune(X, u, ids, ds, m, R, out[u])
    return out, outd


@njit(cache=True)
def _inter_insert(X, out, outd, R):
    n = X.shape[0]
    first = out.copy()
    firstd = outd.copy()
    cid = np.empty(R + 1, dtype=np.int32)
    cd = np.empty(R + 1, dtype=np.float64)
    row = np.empty(R, dtype=np.int32)
    for u in range(n):
        for j in range(firstd[u]):
            v = first[u, j]
            present = False
            for t in range(outd[v]):
                if out[v, t] == u:
                    present = True
                    break
            if present:
                continue
            if outd[v] < R:
                out[v, outd[v]] = u
                outd[v] += 1
                continue
            for t in range(outd[v]):
                cid[t] = out[v, t]
                cd[t] = _d2(X, v, out[v, t])
            cid[R] = u
            cd[R] = _d2(X, v, u)
            ids, ds = _sort_by_dist_then_id(cid, cd, R + 1)
            cnt = _mrng_prune(X, v, ids, ds, R + 1, R, row)
            for t in range(R):
                out[v, t] = row[t] if t < cnt else -1
            outd[v] = cnt
    return out, outd


@njit(cache=True)
def _nn_descent(X, K, iters, seed, delta):
    np.random.seed(seed)
    n = X.shape[0]
    ids = np.empty((n, K), dtype=np.int32)
    dd = np.empty((n, K), dtype=np.float64)
    new = np.ones((n, K), dtype=np.bool_)
    for i in range(n):
        cnt = 0
        while cnt < K:
            v = np.random.randint(0, n)
            if v == i:
                continue
            dup = False
            for t in range(cnt):
                if ids[i, t] == v:
                    dup = True
                    break
            if dup:
                continue
            ids[i, cnt] = v
            dd[i, cnt] = _d2(X, i, v)
            cnt += 1
        order = np.argsort(dd[i], kind="mergesort")
        ids[i] = ids[i][order]
        dd[i] = dd[i][order]
    S = max(4, K // 2)  # sampled new neighbours per node and round
    for it in range(iters):
        newl = np.full((n, 2 * S), -1, dtype=np.int32)
        oldl = np.full((n, 2 * S), -1, dtype=np.int32)
        nnew = np.zeros(n, dtype=np.int32)
        nold = np.zeros(n, dtype=np.int32)
        seen_new = np.zeros(n, dtype=np.int32)
        seen_old = np.zeros(n, dtype=np.int32)
        for i in range(n):
            taken = 0
            for j in range(K):
                v = ids[i, j]
                if new[i, j]:
                    if taken == S:
                        continue
                    taken += 1
                    new[i, j] = False
                    # forward
                    if nnew[i] < 2 * S:
                        newl[i, nnew[i]] = v
                        nnew[i] += 1
                    # reverse, reservoir-style cap
                    seen_new[v] += 1
                    if nnew[v] < 2 * S:
                        newl[v, nnew[v]] = i
                        nnew[v] += 1
                    else:
                        r = np.random.randint(0, seen_new[v])
                        if r < S:
                            newl[v, S + r % S] = i
                else:
                    if nold[i] < 2 * S:
                        oldl[i, nold[i]] = v
                        nold[i] += 1
                    seen_old[v] += 1
                    if nold[v] < 2 * S:
                        oldl[v, nold[v]] = i
                        nold[v] += 1
                    else:
                        r = np.random.randint(0, seen_old[v])
                        if r < S:
                            oldl[v, S + r % S] = i
        updates = 0
        for i in range(n):
            for a in range(nnew[i]):
                p = newl[i, a]
                for b in range(a + 1, nnew[i]):
                    r = newl[i, b]
                    if p == r:
                        continue
                    d = _d2(X, p, r)
                    updates += _heap_push(ids, dd, new, p, r, d, K)
                    updates += _heap_push(ids, dd, new, r, p, d, K)
                for b in range(nold[i]):
                    r = oldl[i, b]
                    if p == r:
                        continue
                    d = _d2(X, p, r)
                    updates += _heap_push(ids, dd, new, p, r, d, K)
                    updates += _heap_push(ids, dd, new, r, p, d, K)
        if updates <= delta * n * K:
            break
    return ids, dd


@njit(cache=True)
def _heap_push(ids, dd, new, i, v, d, K):
    """Insert ``v`` into the sorted neighbour row of ``i``; returns 1 on change."""
    if d > dd[i, K - 1] or (d == dd[i, K - 1] and v >= ids[i, K - 1]):
        return 0
    for t in range(K):
        if ids[i, t] == v:
            return 0
    pos = K - 1
    while pos > 0 and (dd[i, pos - 1] > d or (dd[i, pos - 1] == d and ids[i, pos - 1] > v)):
        ids[i, pos] = ids[i, pos - 1]
        dd[i, pos] = dd[i, pos - 1]
        new[i, pos] = new[i, pos - 1]
        pos -= 1
    ids[i, pos] = v
    dd[i, pos] = d
    new[i, pos] = True
    return 1


# ---------------------------------------------------------------------------
# NSG construction
# ---------------------------------------------------------------------------

def knn_graph(ds: Dataset, k: int, exact_limit: int = 10_000, seed: int = 0,
              iters: int = 12) -> np.ndarray:
    """(n x k) approximate k-NN table; exact below ``exact_limit`` nodes."""
    n = ds.n
    k = min(k, n - 1)
    if n <= exact_limit:
        x = ds.vectors.astype(np.float64)
        norms = np.einsum("ij,ij->i", x, x)
        out = np.empty((n, k), dtype=np.int32)
        for start in range(0, n, 1024):
            blk = x[start:start + 1024]
            d = norms[start:start + 1024, None] + norms[None, :] - 2.0 * blk @ x.T
            for r in range(d.shape[0]):
                d[r, start + r] = np.inf
                out[start + r] = select_smallest(d[r], k)
        return out
    ids, _ = _nn_descent(ds.vectors, k, iters, seed, 0.001)
    return ids


def build_nsg(ds: Dataset, params: GraphBuildParams | None = None) -> Graph:
    """Approximate-MRNG (NSG-style) graph with out-degree cap ``R``.

    Stages: k-NN seeding, candidate gathering by beam search from the medoid,
    MRNG pruning, reverse-edge insertion, then connectivity repair so that
    every node is reachable from the medoid.  ``graph.stats`` records the
    entry node and the number of repair edges.
    """
    p = params or GraphBuildParams()
    if ds.n == 1:
        g = Graph.from_lists([[]])
        g.stats = {"entry": 0, "repair_edges": 0, "R": p.R}
        return g
    entry = medoid(ds.vectors)
    knn = knn_graph(ds, p.knn_k, p.exact_knn_limit, p.seed, p.nn_descent_iters)
    knn_deg = np.full(ds.n, knn.shape[1], dtype=np.int32)
    out, outd = _nsg_link(ds.vectors, knn, knn_deg, entry, max(p.L_build, 1), p.C_cand, p.R)
    out, outd = _inter_insert(ds.vectors, out, outd, p.R)
    lists = [out[u, :outd[u]].tolist() for u in range(ds.n)]
    repairs = _repair_connectivity(ds, lists, out, outd, entry, p.L_build)
    g = Graph.from_lists(lists)
    g.stats = {"entry": entry, "repair_edges": repairs, "R": p.R}
    return g


def reachable_from(lists_or_graph, start: int, n: int | None = None) -> np.ndarray:
    """Boolean mask of nodes reachable from ``start`` by directed edges."""
    if isinstance(lists_or_graph, Graph):
        g = lists_or_graph
        nbrs = g.neighbors
        n = g.n
    else:
        nbrs = lists_or_graph.__getitem__
        n = len(lists_or_graph) if n is None else n
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    stack = [start]
    while stack:
        u = stack.pop()
        for v in nbrs(u):
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return seen


def _repair_connectivity(ds, lists, adj, deg, entry, L) -> int:
    n = ds.n
    seen = reachable_from(lists, entry, n)
    repairs = 0
    mark = np.zeros(n, dtype=np.int32)
    vis_ids = np.empty(n, dtype=np.int32)
    vis_d = np.empty(n, dtype=np.float64)
    stamp = 0
    while not seen.all():
        x = int(np.flatnonzero(~seen)[0])
        stamp += 1
        nvis = _beam_collect(ds.vectors, adj, deg, entry, ds.vectors[x].astype(np.float64),
                             L, mark, stamp, vis_ids, vis_d)
        ids, dists = vis_ids[:nvis], vis_d[:nvis]
        ok = seen[ids]
        ids, dists = ids[ok], dists[ok]
        r = int(ids[np.lexsort((ids, dists))[0]])
        lists[r].append(x)
        repairs += 1
        seen[x] = True
        stack = [x]
        while stack:
            u = stack.pop()
            for v in lists[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
    if repairs:
        log.info("connectivity repair added %d edges", repairs)
    return repairs


def greedy_search(g: Graph, ds: Dataset, q, entry: int, L: int = 1) -> list[int]:
    """In-memory beam search with exact distances; returns pool VIDs ascending."""
    adj, deg = g.to_padded()
    mark = np.zeros(g.n, dtype=np.int32)
    vis_ids = np.empty(g.n, dtype=np.int32)
    vis_d = np.empty(g.n, dtype=np.float64)
    nvis = _beam_collect(ds.vectors, adj, deg.astype(np.int32), entry,
                         np.asarray(q, dtype=np.float64), L, mark, 1, vis_ids, vis_d)
    ids, d = vis_ids[:nvis], vis_d[:nvis]
    order = np.lexsort((ids, d))[:L]
    return ids[order].tolist()


# ---------------------------------------------------------------------------
# monotone paths
# ---------------------------------------------------------------------------

def has_monotonic_path(g: Graph, ds: Dataset, u: int, q: int) -> bool:
    """True iff some path ``u -> ... -> q`` strictly decreases distance to ``q``
    at every hop (BFS over admissible edges)."""
    if u == q:
        raise ValueError("u and q must differ")
    dq = sq_distances(ds.vectors, ds[q])
    seen = {u}
    frontier = deque([u])
    while frontier:
        a = frontier.popleft()
        for b in g.neighbors(a).tolist():
            if b in seen or not dq[b] < dq[a]:
                continue
            if b == q:
                return True
            seen.add(b)
            frontier.append(b)
    return False


def monotone_sources(g: Graph, ds: Dataset, q: int, nodes: np.ndarray | None = None) -> np.ndarray:
    """Mask of all nodes with a monotone path to ``q``.

    Walks admissible edges backwards from ``q``.  With ``nodes`` given, the
    search is restricted to the subgraph induced by those nodes.
    """
    n = g.n
    allowed = np.ones(n, dtype=bool) if nodes is None else np.isin(np.arange(n), nodes)
    dq = sq_distances(ds.vectors, ds[q])
    rev = g.reverse()
    ok = np.zeros(n, dtype=bool)
    ok[q] = True
    stack = [q]
    while stack:
        b = stack.pop()
        for a in rev.neighbors(b).tolist():
            if not ok[a] and allowed[a] and dq[b] < dq[a]:
                ok[a] = True
                stack.append(a)
    return ok

"""Multi-layer in-memory navigation graph.

Each upper layer keeps one representative per connected component of every
block of the layer below, and is itself a BAMG over those representatives.
Layers are small, so they hold their raw vectors in memory and are searched
with exact distances to pick entry nodes for the disk-resident base graph.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .basegraph import Graph, GraphBuildParams, build_nsg
from .blocks import BlockAssignment, assign_blocks, intra_block_graph
from .bmrng import PruneParams, build_bamg
from .core import Dataset, medoid

log = logging.getLogger(__name__)

_MAGIC = b"BNAV"
_VERSION = 1


@dataclass
class NavLayer:
    """One upper layer: local node ``i`` is base VID ``base_vids[i]``."""

    graph: Graph
    assignment: BlockAssignment
    base_vids: np.ndarray
    vectors: np.ndarray = field(repr=False)
    entry: int = 0

    @property
    def n(self) -> int:
        return len(self.base_vids)


@dataclass
class NavLayers:
    """Upper layers, bottom (largest) first.  The base layer lives on disk and
    is not stored here; ``base_medoid`` is the fallback entry."""

    layers: list[NavLayer]
    gamma: int
    base_medoid: int
    base_n: int
    forced_drop: bool = False

    @property
    def depth(self) -> int:
        return len(self.layers)

    def sizes(self) -> list[int]:
        return [self.base_n] + [lay.n for lay in self.layers]

    def shrink_factors(self) -> list[float]:
        s = self.sizes()
        return [s[i] / s[i + 1] for i in range(len(s) - 1)]

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<IIIIIB", _VERSION, len(self.layers), self.gamma,
                                     self.base_medoid, self.base_n, int(self.forced_drop))]
        for lay in self.layers:
            dim = lay.vectors.shape[1]
            gbytes = lay.graph.to_bytes()
            parts.append(struct.pack("<IIIIQ", lay.n, lay.assignment.capacity, lay.entry, dim,
                                     len(gbytes)))
            parts.append(lay.base_vids.astype("<u4").tobytes())
            parts.append(lay.assignment.label.astype("<u4").tobytes())
            parts.append(np.ascontiguousarray(lay.vectors, dtype="<f4").tobytes())
            parts.append(gbytes)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "NavLayers":
        if data[:4] != _MAGIC:
            raise ValueError("not a navigation-graph file")
        off = 4
        ver, nl, gamma, bm, bn, forced = struct.unpack_from("<IIIIIB", data, off)
        if ver != _VERSION:
            raise ValueError(f"unsupported navigation-graph version {ver}")
        off += struct.calcsize("<IIIIIB")
        layers = []
        hs = struct.calcsize("<IIIIQ")
        for _ in range(nl):
            n, cap, entry, dim, glen = struct.unpack_from("<IIIIQ", data, off)
            off += hs
            base = np.frombuffer(data, "<u4", n, off).astype(np.int64)
            off += 4 * n
            label = np.frombuffer(data, "<u4", n, off).astype(np.int64)
            off += 4 * n
            vecs = np.frombuffer(data, "<f4", n * dim, off).reshape(n, dim).copy()
            off += 4 * n * dim
            g = Graph.from_bytes(data[off:off + glen])
            off += glen
            layers.append(NavLayer(g, BlockAssignment.from_labels(label, cap), base, vecs, entry))
        return cls(layers, gamma, bm, bn, bool(forced))


# ---------------------------------------------------------------------------
# key nodes
# ---------------------------------------------------------------------------

def _reach_within(intra: Graph, starts, covered: np.ndarray) -> None:
    stack = [int(s) for s in starts if not covered[s]]
    for s in stack:
        covered[s] = True
    while stack:
        u = stack.pop()
        for v in intra.neighbors(u).tolist():
            if not covered[v]:
                covered[v] = True
                stack.append(v)


def select_key_nodes(g: Graph, b: BlockAssignment) -> np.ndarray:
    """Representatives per block, ascending VIDs.

    Zero in-degree nodes of each block-induced subgraph come first; while
    some node of the block is not reachable from the chosen set, the
    uncovered node with the smallest in-block in-degree (then smallest VID)
    is added.
    """
    if g.n != b.n:
        raise ValueError("graph and assignment sizes differ")
    intra = intra_block_graph(g, b)
    indeg = np.bincount(intra.indices, minlength=g.n)
    covered = np.zeros(g.n, dtype=bool)
    keys: list[int] = []
    for mem in b.members:
        mem = np.sort(mem)
        zero = mem[indeg[mem] == 0]
        keys.extend(zero.tolist())
        _reach_within(intra, zero, covered)
        # candidates ordered by (in-degree, VID); pick the first still uncovered
        order = mem[np.lexsort((mem, indeg[mem]))]
        for v in order.tolist():
            if not covered[v]:
                keys.append(v)
                _reach_within(intra, [v], covered)
    return np.array(sorted(keys), dtype=np.int64)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _layer_graph(ds: Dataset, capacity: int, p: PruneParams, gp: GraphBuildParams,
                 ablate_bmrng: bool) -> tuple[Graph, BlockAssignment, int]:
    if ds.n == 1:
        g = Graph.from_lists([[]])
        return g, BlockAssignment.from_members([[0]], capacity, 1), 0
    nsg = build_nsg(ds, gp)
    b = assign_blocks(nsg, capacity, ds)
    g = nsg if ablate_bmrng else build_bamg(ds, nsg, b, p)
    return g, b, int(nsg.stats["entry"])


def build_navigation(ds: Dataset, base: Graph, base_b: BlockAssignment, p: PruneParams,
                     gamma: int = 64, graph_params: GraphBuildParams | None = None,
                     ablate_bmrng: bool = False) -> NavLayers:
    """Stack upper layers on top of the base graph until one has at most
    ``gamma`` nodes.  Every layer uses the base block capacity.

    If a layer fails to shrink, the process stops with a single layer that
    holds only the medoid of the current node set.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if not (base.n == base_b.n == ds.n):
        raise ValueError("inconsistent base graph, assignment and dataset")
    gp = graph_params or GraphBuildParams()
    capacity = base_b.capacity
    layers: list[NavLayer] = []
    cur_g, cur_b = base, base_b
    cur_vids = np.arange(ds.n, dtype=np.int64)
    forced = False
    while len(cur_vids) > gamma:
        keys = select_key_nodes(cur_g, cur_b)
        if len(keys) >= len(cur_vids):
            log.warning("navigation layer did not shrink (%d nodes); keeping the medoid only",
                        len(keys))
            forced = True
            keys = np.array([medoid(ds.vectors[cur_vids])], dtype=np.int64)
        vids = cur_vids[keys]
        sub = ds.subset(vids)
        # layer-local R and build pool shrink with tiny layers
        R = max(1, min(gp.R, sub.n - 1))
        lgp = GraphBuildParams(R=R, L_build=max(gp.L_build, R), C_cand=max(gp.C_cand, R),
                               seed=gp.seed, knn_k=max(1, min(gp.knn_k, sub.n - 1)),
                               exact_knn_limit=gp.exact_knn_limit,
                               nn_descent_iters=gp.nn_descent_iters)
        g, b, entry = _layer_graph(sub, capacity, p, lgp, ablate_bmrng)
        layers.append(NavLayer(g, b, vids, sub.vectors.copy(), entry))
        cur_g, cur_b, cur_vids = g, b, vids
        if forced:
            break
    return NavLayers(layers, int(gamma), medoid(ds.vectors), ds.n, forced)


# ---------------------------------------------------------------------------
# entry selection
# ---------------------------------------------------------------------------

@njit(cache=True)
def _multi_beam(X, indptr, indices, seeds, q, L):
    """Beam search with exact distances from several seeds; returns the pool
    (ids ascending by distance, ties by id)."""
    n = X.shape[0]
    pool_id = np.empty(L + 1, dtype=np.int64)
    pool_d = np.empty(L + 1, dtype=np.float64)
    checked = np.zeros(L + 1, dtype=np.bool_)
    seen = np.zeros(n, dtype=np.bool_)
    size = 0
    for s in seeds:
        if seen[s]:
            continue
        seen[s] = True
        d = 0.0
        for t in range(X.shape[1]):
            diff = np.float64(X[s, t]) - q[t]
            d += diff * diff
        pos = size
        while pos > 0 and (pool_d[pos - 1] > d or (pool_d[pos - 1] == d and pool_id[pos - 1] > s)):
            pos -= 1
        if pos >= L:
            continue
        for j in range(min(size, L - 1), pos, -1):
            pool_id[j] = pool_id[j - 1]
            pool_d[j] = pool_d[j - 1]
            checked[j] = checked[j - 1]
        pool_id[pos] = s
        pool_d[pos] = d
        checked[pos] = False
        size = min(size + 1, L)
    k = 0
    while k < size:
        if checked[k]:
            k += 1
            continue
        checked[k] = True
        u = pool_id[k]
        nk = size
        for j in range(indptr[u], indptr[u + 1]):
            v = indices[j]
            if seen[v]:
                continue
            seen[v] = True
            d = 0.0
            for t in range(X.shape[1]):
                diff = np.float64(X[v, t]) - q[t]
                d += diff * diff
            if size == L and (d > pool_d[L - 1] or (d == pool_d[L - 1] and v > pool_id[L - 1])):
                continue
            pos = size
            while pos > 0 and (pool_d[pos - 1] > d or (pool_d[pos - 1] == d and pool_id[pos - 1] > v)):
                pos -= 1
            for j2 in range(min(size, L - 1), pos, -1):
                pool_id[j2] = pool_id[j2 - 1]
                pool_d[j2] = pool_d[j2 - 1]
                checked[j2] = checked[j2 - 1]
            pool_id[pos] = v
            pool_d[pos] = d
            checked[pos] = False
            size = min(size + 1, L)
            if pos < nk:
                nk = pos
        k = nk if nk < k else k + 1
    return pool_id[:size].copy(), pool_d[:size].copy()


def nav_entry(nl: NavLayers, q, beam: int = 32, count: int = 8) -> list[int]:
    """Entry VIDs for the base graph, best first.

    Starts at the top layer's medoid and carries the best ``beam`` nodes down
    through each layer.  Without upper layers the base medoid is returned.
    """
    if not nl.layers:
        return [nl.base_medoid]
    q = np.asarray(q, dtype=np.float64)
    beam = max(beam, count)
    seeds_base: np.ndarray | None = None
    ids = np.empty(0, dtype=np.int64)
    for lay in reversed(nl.layers):
        if seeds_base is None:
            seeds = np.array([lay.entry], dtype=np.int64)
        else:
            local = np.searchsorted(lay.base_vids, seeds_base)
            ok = (local < lay.n) & (lay.base_vids[np.minimum(local, lay.n - 1)] == seeds_base)
            seeds = local[ok]
            if len(seeds) == 0:
                seeds = np.array([lay.entry], dtype=np.int64)
        ids, _ = _multi_beam(lay.vectors, lay.graph.indptr, lay.graph.indices, seeds, q, beam)
        seeds_base = lay.base_vids[ids]
    return seeds_base[:count].tolist()

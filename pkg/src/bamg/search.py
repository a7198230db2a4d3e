"""Query processing on the disk indexes.

``search_bamg`` is the block-first search: the first unchecked candidate's
block is loaded (one I/O unless already cached for this query) and searched
in memory before any other block is touched.  ``search_baseline`` is the
classic one-node-per-I/O beam search over the baseline layout.  Both rank
with PQ estimates and refine with exact distances.
"""

from __future__ import annotations

import bisect
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import sq_distances
from .navgraph import NavLayers, nav_entry
from .pq import estimate_distances
from .storage import BaselineIndex, DiskIndex, GraphBlock, IoCounter


@dataclass
class SearchParams:
    """``alpha`` bounds the in-block pops per block visit.  ``refine`` is
    ``"full"`` (every pool member) or ``"2k"`` (the best ``2k`` by estimate)."""

    k: int = 10
    l: int = 64
    alpha: int = 4
    entry_count: int = 8
    nav_beam: int = 32
    no_nav: bool = False
    refine: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l < self.k:
            raise ValueError(f"l={self.l} must be >= k={self.k}")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.entry_count < 1:
            raise ValueError("entry_count must be >= 1")
        if self.refine not in ("full", "2k"):
            raise ValueError("refine must be 'full' or '2k'")


@dataclass
class SearchResult:
    ids: np.ndarray
    dists: np.ndarray
    io: IoCounter
    expansions: int = 0


class CandidatePool:
    """Bounded list of ``(estimate, id)`` ascending, with a checked flag per id.

    An id evicted by truncation can never re-enter: the tail bound only
    tightens, so membership alone prevents duplicates.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.capacity = capacity
        self.keys: list[tuple[float, int]] = []
        self.checked: dict[int, bool] = {}
        self._first = 0

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, node: int) -> bool:
        return node in self.checked

    def insert(self, node: int, est: float) -> bool:
        if node in self.checked:
            return False
        key = (est, node)
        if len(self.keys) == self.capacity and key >= self.keys[-1]:
            return False
        pos = bisect.bisect_left(self.keys, key)
        self.keys.insert(pos, key)
        self.checked[node] = False
        if len(self.keys) > self.capacity:
            _, gone = self.keys.pop()
            del self.checked[gone]
        if pos < self._first:
            self._first = pos
        return True

    def next_unchecked(self) -> int | None:
        keys, checked = self.keys, self.checked
        i = self._first
        while i < len(keys) and checked[keys[i][1]]:
            i += 1
        self._first = i
        return keys[i][1] if i < len(keys) else None

    def mark_checked(self, node: int) -> None:
        self.checked[node] = True

    def ids(self) -> list[int]:
        return [k[1] for k in self.keys]

    def check(self) -> None:
        assert len(self.keys) <= self.capacity
        assert all(a < b for a, b in zip(self.keys, self.keys[1:])), "pool out of order"
        assert len(self.checked) == len(self.keys)


def search_within_block(block: GraphBlock, v: int, q_table: np.ndarray, codes: np.ndarray,
                        pool: CandidatePool, alpha: int, explored: set, capacity: int) -> int:
    """Expand ``v`` and walk toward the query inside its (decoded) block.

    Every popped node inserts all its neighbours into the pool.  An intra-block
    neighbour not yet explored is queued when its estimate beats the best seen
    in this call; either way it is then marked explored.  At most ``alpha``
    nodes are popped.  No I/O happens here.  Returns the number of pops.
    """
    base = block.block_id * capacity
    size = len(block)
    queue = deque([v])
    best = float(estimate_distances(q_table, codes[[v]])[0])
    pops = 0
    while queue and pops < alpha:
        x = queue.popleft()
        pops += 1
        nb = block.neighbors(x - base)
        if len(nb) == 0:
            continue
        est = estimate_distances(q_table, codes[nb])
        nbl, estl = nb.tolist(), est.tolist()
        for u, du in zip(nbl, estl):
            pool.insert(u, du)
        for u, du in zip(nbl, estl):
            if base <= u < base + size and u not in explored:
                if du < best:
                    queue.append(u)
                    best = du
                explored.add(u)
    return pops


def _refine(pool_ids: list[int], vectors: np.ndarray, q, k: int):
    d = sq_distances(vectors, q)
    ids = np.asarray(pool_ids, dtype=np.int64)
    order = np.lexsort((ids, d))[:k]
    return ids[order], d[order]


def search_bamg(ix: DiskIndex, nl: NavLayers | None, q, sp: SearchParams) -> SearchResult:
    """Block-first search on the block-aware index, then exact refinement."""
    if sp.k > ix.n:
        raise ValueError(f"k={sp.k} exceeds index size {ix.n}")
    if ix.pq is None:
        raise ValueError("index has no PQ codes")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (ix.dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {ix.dim}")
    ctr = IoCounter()
    qt = ix.pq.query_table(q)
    codes = ix.codes_by_oid
    if sp.no_nav or nl is None:
        rng = np.random.default_rng(sp.seed)
        entries = rng.choice(ix.n, size=min(sp.entry_count, ix.n), replace=False).tolist()
    else:
        entries = nav_entry(nl, q, sp.nav_beam, sp.entry_count)
    pool = CandidatePool(sp.l)
    eo = ix.oid_of_vid[np.asarray(entries, dtype=np.int64)]
    for o, e in zip(eo.tolist(), estimate_distances(qt, codes[eo]).tolist()):
        pool.insert(o, e)
    cache: dict[int, GraphBlock] = {}
    explored: set[int] = set()
    expansions = 0
    while True:
        v = pool.next_unchecked()
        if v is None:
            break
        block = ix.read_graph_block(v // ix.c, ctr, cache)
        search_within_block(block, v, qt, codes, pool, sp.alpha, explored, ix.c)
        pool.mark_checked(v)
        expansions += 1
    oids = pool.ids()
    if sp.refine == "2k":
        oids = oids[:2 * sp.k]
    vecs = ix.read_raw_vectors(oids, ctr)
    ids, d = _refine(oids, vecs, q, sp.k)
    return SearchResult(ix.vid_of_oid[ids], d, ctr, expansions)


def search_baseline(bx: BaselineIndex, q, sp: SearchParams) -> SearchResult:
    """One node record per I/O: pop the best unchecked candidate, read its
    block, score it exactly and queue its neighbours by PQ estimate."""
    if sp.k > bx.n:
        raise ValueError(f"k={sp.k} exceeds index size {bx.n}")
    if bx.pq is None:
        raise ValueError("index has no PQ codes")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (bx.dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {bx.dim}")
    ctr = IoCounter()
    qt = bx.pq.query_table(q)
    pool = CandidatePool(sp.l)
    pool.insert(bx.entry, float(estimate_distances(qt, bx.codes[[bx.entry]])[0]))
    visited: list[int] = []
    vecs: list[np.ndarray] = []
    while True:
        v = pool.next_unchecked()
        if v is None:
            break
        vec, nb = bx.read_node(v, ctr)
        pool.mark_checked(v)
        visited.append(v)
        vecs.append(vec)
        if len(nb):
            for u, du in zip(nb.tolist(), estimate_distances(qt, bx.codes[nb]).tolist()):
                pool.insert(u, du)
    ids, d = _refine(visited, np.asarray(vecs), q, sp.k)
    return SearchResult(ids, d, ctr, len(visited))


def recall_at_k(found: np.ndarray, truth: np.ndarray, k: int) -> float:
    return len(set(np.asarray(found)[:k].tolist()) & set(np.asarray(truth)[:k].tolist())) / k


@dataclass
class Metrics:
    recall: float
    nio: float
    graph_reads: float
    raw_reads: float
    qps: float
    per_query_recall: np.ndarray = field(repr=False, default=None)

    def as_row(self) -> dict:
        return {"recall": self.recall, "nio": self.nio, "graph_reads": self.graph_reads,
                "raw_reads": self.raw_reads, "qps": self.qps}


def evaluate(queries: np.ndarray, ground_truth: np.ndarray, engine: Callable[[np.ndarray], SearchResult],
             k: int, threads: int = 1) -> Metrics:
    """Recall@k, mean NIO (graph + raw) and wall-clock QPS over a batch."""
    queries = np.asarray(queries)
    gt = np.asarray(ground_truth)
    if gt.ndim != 2 or len(gt) < len(queries):
        raise ValueError("ground truth must cover every query")
    if gt.shape[1] < k:
        raise ValueError(f"ground truth has {gt.shape[1]} columns, need k={k}")
    t0 = time.perf_counter()
    if threads <= 1:
        results = [engine(q) for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(engine, queries))
    elapsed = time.perf_counter() - t0
    rec = np.array([recall_at_k(r.ids, gt[i], k) for i, r in enumerate(results)])
    g = np.array([r.io.graph_block_reads for r in results], dtype=float)
    raw = np.array([r.io.raw_block_reads for r in results], dtype=float)
    return Metrics(float(rec.mean()), float((g + raw).mean()), float(g.mean()), float(raw.mean()),
                   len(queries) / elapsed if elapsed > 0 else float("inf"), rec)

"""Block assignment: packing VIDs into fixed-capacity disk blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .basegraph import Graph, _d2
from .core import Dataset


@dataclass
class BlockAssignment:
    """Partition of ``0..n-1`` into blocks of at most ``capacity`` members.

    ``members[i]`` lists the VIDs of block ``i`` in slot order; ``label[v]``
    is the block of ``v``.
    """

    capacity: int
    label: np.ndarray
    members: list[np.ndarray] = field(repr=False)

    @classmethod
    def from_members(cls, members, capacity: int, n: int | None = None) -> "BlockAssignment":
        members = [np.asarray(m, dtype=np.int64) for m in members]
        n = sum(len(m) for m in members) if n is None else n
        label = np.full(n, -1, dtype=np.int64)
        for b, m in enumerate(members):
            label[m] = b
        ba = cls(capacity, label, members)
        ba.validate()
        return ba

    @classmethod
    def from_labels(cls, label, capacity: int) -> "BlockAssignment":
        """Members ordered by ascending VID within each block."""
        label = np.asarray(label, dtype=np.int64)
        m = int(label.max()) + 1 if label.size else 0
        order = np.argsort(label, kind="stable")
        bounds = np.searchsorted(label[order], np.arange(m + 1))
        members = [order[bounds[i]:bounds[i + 1]] for i in range(m)]
        return cls.from_members(members, capacity, len(label))

    @property
    def n(self) -> int:
        return len(self.label)

    @property
    def m(self) -> int:
        return len(self.members)

    def block_of(self, v: int) -> int:
        return int(self.label[v])

    def validate(self) -> None:
        if self.capacity < 1:
            raise ValueError("block capacity must be >= 1")
        seen = np.zeros(self.n, dtype=np.int64)
        for b, mem in enumerate(self.members):
            if len(mem) > self.capacity:
                raise ValueError(f"block {b} has {len(mem)} > {self.capacity} members")
            if len(mem) and (mem.min() < 0 or mem.max() >= self.n):
                raise ValueError(f"block {b} holds an out-of-range VID")
            seen[mem] += 1
            if np.any(self.label[mem] != b):
                raise ValueError(f"labels disagree with members of block {b}")
        if np.any(seen != 1):
            raise ValueError("blocks do not partition the VID range")
        if self.m < -(-self.n // self.capacity):
            raise ValueError("fewer blocks than ceil(n / capacity)")


@dataclass
class BlockStats:
    intra_edge_fraction: float
    ncr_per_block: np.ndarray = field(repr=False)
    rho: float


@njit(cache=True)
def _greedy_pack(X, fwd_ptr, fwd_idx, rev_ptr, rev_idx, c):
    n = X.shape[0]
    label = np.full(n, -1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)  # assignment order, block after block
    score = np.zeros(n, dtype=np.int64)
    dseed = np.zeros(n, dtype=np.float64)
    touched = np.empty(n, dtype=np.int64)
    # compact pool of unassigned VIDs with O(1) removal
    pool = np.arange(n)
    where = np.arange(n)
    npool = n
    seed_ptr = 0
    filled = 0
    block = 0
    while npool > 0:
        while label[seed_ptr] != -1:
            seed_ptr += 1
        seed = seed_ptr
        ntouch = 0
        size = 0
        cur = seed
        while True:
            # place cur
            label[cur] = block
            order[filled] = cur
            filled += 1
            size += 1
            p = where[cur]
            last = pool[npool - 1]
            pool[p] = last
            where[last] = p
            npool -= 1
            if size == c or npool == 0:
                break
            for side in range(2):
                ptr = fwd_ptr if side == 0 else rev_ptr
                idx = fwd_idx if side == 0 else rev_idx
                for j in range(ptr[cur], ptr[cur + 1]):
                    x = idx[j]
                    if label[x] != -1:
                        continue
                    if score[x] == 0:
                        touched[ntouch] = x
                        ntouch += 1
                        dseed[x] = _d2(X, x, seed)
                    score[x] += 1
            best = -1
            for t in range(ntouch):
                x = touched[t]
                if label[x] != -1:
                    continue
                if best < 0 or score[x] > score[best] or (
                        score[x] == score[best] and (dseed[x] < dseed[best] or (
                            dseed[x] == dseed[best] and x < best))):
                    best = x
            if best < 0:
                # no unassigned node shares an edge with the block: nearest to the seed
                bd = np.inf
                for t in range(npool):
                    x = pool[t]
                    d = _d2(X, x, seed)
                    if d < bd or (d == bd and x < best):
                        bd = d
                        best = x
            cur = best
        for t in range(ntouch):
            score[touched[t]] = 0
        block += 1
    return label, order


def assign_blocks(g: Graph, capacity: int, ds: Dataset) -> BlockAssignment:
    """Greedy locality packing of graph nodes into blocks of ``capacity``.

    Seeds are taken in ascending VID among unassigned nodes.  A block grows
    by the unassigned node with the most edges (either direction) into the
    block; ties go to the node nearest the seed, then the smaller VID.  When
    no unassigned node touches the block the nearest unassigned node to the
    seed is taken, so every block except the last holds exactly ``capacity``
    nodes.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    if g.n != ds.n:
        raise ValueError("graph and dataset sizes differ")
    rev = g.reverse()
    label, order = _greedy_pack(ds.vectors, g.indptr, g.indices, rev.indptr, rev.indices, capacity)
    m = int(label.max()) + 1
    members = [order[b * capacity:(b + 1) * capacity] for b in range(m)]
    return BlockAssignment.from_members(members, capacity, g.n)


def assign_blocks_random(n: int, capacity: int, seed: int = 0) -> BlockAssignment:
    """Uniformly random balanced partition; every block but the last is full."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    perm = np.random.default_rng(seed).permutation(n)
    members = [np.sort(perm[i:i + capacity]) for i in range(0, n, capacity)]
    return BlockAssignment.from_members(members, capacity, n)


def intra_block_graph(g: Graph, b: BlockAssignment) -> Graph:
    """Subgraph keeping only edges whose endpoints share a block."""
    src = np.repeat(np.arange(g.n), g.degrees())
    keep = b.label[src] == b.label[g.indices]
    counts = np.bincount(src[keep], minlength=g.n)
    indptr = np.zeros(g.n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return Graph(indptr, g.indices[keep], validate=False)


def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def block_stats(g: Graph, b: BlockAssignment) -> BlockStats:
    """Intra-block edge fraction and per-block node-to-component ratio."""
    if g.n != b.n:
        raise ValueError("graph and assignment sizes differ")
    src = np.repeat(np.arange(g.n), g.degrees())
    same = b.label[src] == b.label[g.indices]
    frac = float(same.mean()) if g.num_edges else 0.0
    parent = list(range(g.n))
    for u, v in zip(src[same].tolist(), g.indices[same].tolist()):
        ru, rv = _find(parent, u), _find(parent, v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    ncr = np.empty(b.m, dtype=np.float64)
    for i, mem in enumerate(b.members):
        comps = len({_find(parent, int(v)) for v in mem})
        ncr[i] = len(mem) / comps
    return BlockStats(frac, ncr, float(ncr.mean()))

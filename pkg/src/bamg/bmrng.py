"""Block-aware monotonic graphs.

Exact construction of the block-aware monotonic relative neighbourhood graph
for small inputs, the monotonic I/O path verifier, the bounded cross-block
prune and the linear-time BAMG conversion of an NSG.

A monotonic I/O path from ``u`` to ``q`` is a sequence of segments.  Each
segment is a path inside one block along which the distance to ``q``
strictly decreases.  Consecutive segments are joined by a cross-block edge,
and the last node of each segment is strictly closer to ``q`` than the last
node of the previous segment.  The first node of a segment may be farther
from ``q`` than where the previous segment ended.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .basegraph import Graph, _d2
from .blocks import BlockAssignment, assign_blocks_random, intra_block_graph
from .core import Dataset, pairwise_sq_distances, sq_distances

EXACT_LIMIT = 5_000


class DeskScaleError(ValueError):
    """Raised when an exact (quadratic) construction is asked for too many nodes."""


@dataclass
class PruneParams:
    """``alpha``: nodes allowed on an intra-block path (``alpha - 1`` hops).
    ``beta``: closeness factor on the true (non-squared) distance."""

    alpha: int = 4
    beta: float = 1.1

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not self.beta >= 1.0:
            raise ValueError("beta must be >= 1")

    def check_capacity(self, c: int) -> None:
        if self.alpha > c:
            raise ValueError(f"alpha={self.alpha} exceeds block capacity {c}")

    @property
    def beta_sq(self) -> float:
        # squared distances are compared, so the factor is squared too
        return float(self.beta) ** 2


@dataclass
class IoPath:
    """Witness of a monotonic I/O path: one node list per visited block."""

    blocks: list[int]
    segments: list[list[int]]
    dists: list[list[float]] = field(default_factory=list)

    @property
    def nodes(self) -> list[int]:
        return [v for seg in self.segments for v in seg]

    def __len__(self) -> int:
        return len(self.blocks)


def check_io_path(path: IoPath, g: Graph, b: BlockAssignment, ds: Dataset, u: int, q: int) -> None:
    """Re-validate a witness from scratch; raises AssertionError on violation."""
    dq = sq_distances(ds.vectors, ds[q])
    nodes = path.nodes
    assert nodes and nodes[0] == u and nodes[-1] == q, "path must run from u to q"
    assert len(path.blocks) == len(path.segments)
    for a, c in zip(nodes, nodes[1:]):
        assert g.has_edge(a, c), f"missing edge ({a}, {c})"
    prev_last = np.inf
    for i, (blk, seg) in enumerate(zip(path.blocks, path.segments)):
        assert seg, "empty segment"
        assert all(b.label[v] == blk for v in seg), f"segment {i} leaves block {blk}"
        if i:
            assert blk != path.blocks[i - 1], "consecutive segments share a block"
        for a, c in zip(seg, seg[1:]):
            assert dq[c] < dq[a], f"non-monotone intra-block step ({a}, {c})"
        assert dq[seg[-1]] < prev_last, f"block transition into {blk} is not monotone"
        prev_last = dq[seg[-1]]


# ---------------------------------------------------------------------------
# verifier kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _heap_push(hk, hv, size, key, val):
    i = size
    hk[i] = key
    hv[i] = val
    while i > 0:
        p = (i - 1) // 2
        if hk[p] >= hk[i]:
            break
        hk[p], hk[i] = hk[i], hk[p]
        hv[p], hv[i] = hv[i], hv[p]
        i = p
    return size + 1


@njit(cache=True)
def _heap_pop(hk, hv, size):
    key = hk[0]
    val = hv[0]
    size -= 1
    hk[0] = hk[size]
    hv[0] = hv[size]
    i = 0
    while True:
        lft = 2 * i + 1
        if lft >= size:
            break
        c = lft
        if lft + 1 < size and hk[lft + 1] > hk[lft]:
            c = lft + 1
        if hk[i] >= hk[c]:
            break
        hk[c], hk[i] = hk[i], hk[c]
        hv[c], hv[i] = hv[i], hv[c]
        i = c
    return key, val, size


@njit(cache=True)
def _verify_widest(indptr, indices, label, dq, u, q):
    """Best-first search keeping, per node, the loosest threshold under which
    the path may still transition.  Returns the parent array (or -2 at q if
    unreachable)."""
    n = len(dq)
    T = np.full(n, -1.0)
    parent = np.full(n, -1, dtype=np.int64)
    cap = len(indices) + n + 1
    hk = np.empty(cap, dtype=np.float64)
    hv = np.empty(cap, dtype=np.int64)
    T[u] = np.inf
    size = _heap_push(hk, hv, 0, np.inf, u)
    done = np.zeros(n, dtype=np.bool_)
    while size > 0:
        t, w, size = _heap_pop(hk, hv, size)
        if done[w] or t < T[w]:
            continue
        done[w] = True
        if w == q:
            return parent, True
        for j in range(indptr[w], indptr[w + 1]):
            x = indices[j]
            if label[x] == label[w]:
                if not dq[x] < dq[w]:
                    continue
                cand = t
            else:
                if not dq[w] < t:
                    continue
                cand = dq[w]
            if cand > T[x] and not done[x]:
                T[x] = cand
                parent[x] = w
                if size >= cap:
                    continue
                size = _heap_push(hk, hv, size, cand, x)
    return parent, False


@njit(cache=True)
def _verify_fewest_blocks(indptr, indices, label, dq, u, q):
    """Level-by-level search: after level ``k`` every label is the loosest
    threshold achievable with at most ``k + 1`` blocks."""
    n = len(dq)
    cap_levels = 16
    T = np.full((cap_levels, n), -1.0)
    P = np.full((cap_levels, n), -1, dtype=np.int64)
    PL = np.full((cap_levels, n), -1, dtype=np.int64)
    hk = np.empty(len(indices) + n + 1, dtype=np.float64)
    hv = np.empty(len(indices) + n + 1, dtype=np.int64)
    changed = np.empty(n, dtype=np.int64)
    flag = np.zeros(n, dtype=np.int64)
    # level 0: intra-block monotone closure of u
    T[0, u] = np.inf
    size = _heap_push(hk, hv, 0, np.inf, u)
    nchanged = 0
    level = 0
    while True:
        while size > 0:
            t, w, size = _heap_pop(hk, hv, size)
            if t < T[level, w]:
                continue
            if flag[w] != level + 1:
                flag[w] = level + 1
                changed[nchanged] = w
                nchanged += 1
            for j in range(indptr[w], indptr[w + 1]):
                x = indices[j]
                if label[x] != label[w] or not dq[x] < dq[w]:
                    continue
                if t > T[level, x]:
                    T[level, x] = t
                    P[level, x] = w
                    PL[level, x] = level
                    size = _heap_push(hk, hv, size, t, x)
        if T[level, q] >= 0:
            return level + 1, T[:level + 1], P[:level + 1], PL[:level + 1]
        if nchanged == 0:
            return -1, T[:level + 1], P[:level + 1], PL[:level + 1]
        # next level
        if level + 1 == cap_levels:
            cap_levels *= 2
            T2 = np.full((cap_levels, n), -1.0)
            P2 = np.full((cap_levels, n), -1, dtype=np.int64)
            PL2 = np.full((cap_levels, n), -1, dtype=np.int64)
            T2[:level + 1] = T[:level + 1]
            P2[:level + 1] = P[:level + 1]
            PL2[:level + 1] = PL[:level + 1]
            T, P, PL = T2, P2, PL2
        nxt = level + 1
        for x in range(n):
            T[nxt, x] = T[level, x]
            if T[level, x] >= 0:
                P[nxt, x] = x
                PL[nxt, x] = level
        prev_changed = changed[:nchanged].copy()
        nchanged = 0
        size = 0
        for i in range(len(prev_changed)):
            w = prev_changed[i]
            t = T[level, w]
            if not dq[w] < t:
                continue
            for j in range(indptr[w], indptr[w + 1]):
                x = indices[j]
                if label[x] == label[w]:
                    continue
                cand = dq[w]
                if cand > T[nxt, x]:
                    T[nxt, x] = cand
                    P[nxt, x] = w
                    PL[nxt, x] = level
                    size = _heap_push(hk, hv, size, cand, x)
        level = nxt


def _check_consistent(g: Graph, b: BlockAssignment, ds: Dataset) -> None:
    if not (g.n == b.n == ds.n):
        raise ValueError(f"inconsistent sizes: graph {g.n}, assignment {b.n}, dataset {ds.n}")


def _segments_from_nodes(nodes: list[int], b: BlockAssignment, cuts: list[int],
                         dq: np.ndarray) -> IoPath:
    segs, start = [], 0
    for c in cuts + [len(nodes)]:
        segs.append(nodes[start:c])
        start = c
    return IoPath([int(b.label[s[0]]) for s in segs], segs,
                  [[float(dq[v]) for v in s] for s in segs])


def verify_io_path(g: Graph, b: BlockAssignment, ds: Dataset, u: int, q: int,
                   shortest: bool = False, dq: np.ndarray | None = None) -> IoPath | None:
    """Find a monotonic I/O path from ``u`` to ``q``; ``None`` if none exists.

    With ``shortest=True`` the returned witness visits the fewest blocks.
    Every witness is re-validated before it is returned.
    """
    _check_consistent(g, b, ds)
    if u == q:
        raise ValueError("u and q must differ")
    if dq is None:
        dq = sq_distances(ds.vectors, ds[q])
    label = b.label
    if not shortest:
        parent, ok = _verify_widest(g.indptr, g.indices, label, dq, u, q)
        if not ok:
            return None
        nodes = [q]
        while nodes[-1] != u:
            nodes.append(int(parent[nodes[-1]]))
        nodes.reverse()
        cuts = [i for i in range(1, len(nodes)) if label[nodes[i]] != label[nodes[i - 1]]]
    else:
        nblocks, T, P, PL = _verify_fewest_blocks(g.indptr, g.indices, label, dq, u, q)
        if nblocks < 0:
            return None
        nodes, cuts_rev = [q], []
        x, k = q, nblocks - 1
        while not (x == u and P[k, x] < 0):
            px, pk = int(P[k, x]), int(PL[k, x])
            if pk == k - 1 and px == x:
                k -= 1
                continue
            if pk == k - 1:
                cuts_rev.append(len(nodes))
            nodes.append(px)
            x, k = px, pk
        nodes.reverse()
        cuts = sorted(len(nodes) - c for c in cuts_rev)
    path = _segments_from_nodes(nodes, b, cuts, dq)
    check_io_path(path, g, b, ds, u, q)
    return path


def all_pairs_io_paths(g: Graph, b: BlockAssignment, ds: Dataset, limit_failures: int = 10):
    """Run :func:`verify_io_path` for every ordered pair.

    Returns ``(checked, failures)`` where ``failures`` lists up to
    ``limit_failures`` pairs ``(u, q)`` without a monotonic I/O path.
    """
    _check_consistent(g, b, ds)
    failures, checked = [], 0
    for q in range(ds.n):
        dq = sq_distances(ds.vectors, ds[q])
        for u in range(ds.n):
            if u == q:
                continue
            checked += 1
            if verify_io_path(g, b, ds, u, q, dq=dq) is None and len(failures) < limit_failures:
                failures.append((u, q))
    return checked, failures


# ---------------------------------------------------------------------------
# exact construction
# ---------------------------------------------------------------------------

@njit(cache=True)
def _exact_intra(D, blk_ptr, blk_members, n):
    """Brute-force MRNG inside every block; returns padded rows."""
    width = 1
    for b in range(len(blk_ptr) - 1):
        sz = blk_ptr[b + 1] - blk_ptr[b]
        if sz > width:
            width = sz
    out = np.full((n, width), -1, dtype=np.int64)
    outd = np.zeros(n, dtype=np.int64)
    for b in range(len(blk_ptr) - 1):
        mem = blk_members[blk_ptr[b]:blk_ptr[b + 1]]
        for u in mem:
            dist = np.empty(len(mem))
            for i in range(len(mem)):
                dist[i] = D[u, mem[i]]
            order = mem[np.argsort(dist, kind="mergesort")]
            cnt = 0
            for q in order:
                if q == u:
                    continue
                duq = D[u, q]
                ok = True
                for t in range(cnt):
                    v = out[u, t]
                    if D[u, v] < duq and D[q, v] < duq:
                        ok = False
                        break
                if ok:
                    out[u, cnt] = q
                    cnt += 1
            outd[u] = cnt
    return out, outd


@njit(cache=True)
def _greedy_in_block(D, intra, intrad, v, q):
    w = v
    while True:
        best = -1
        bd = D[w, q]
        for t in range(intrad[w]):
            x = intra[w, t]
            dx = D[x, q]
            if dx < bd or (best >= 0 and dx == bd and x < best):
                bd = dx
                best = x
        if best < 0:
            return w
        w = best


@njit(cache=True)
def _exact_cross(D, label, intra, intrad, u):
    n = D.shape[0]
    ids = np.arange(n)
    cand = ids[label != label[u]]
    order = cand[np.argsort(D[u, cand], kind="mergesort")]
    kept = np.empty(intrad[u] + len(order), dtype=np.int64)
    nk = 0
    for t in range(intrad[u]):
        kept[nk] = intra[u, t]
        nk += 1
    first_cross = nk
    for q in order:
        duq = D[u, q]
        occluded = False
        for t in range(nk):
            v = kept[t]
            if label[v] == label[u]:
                w = v
            else:
                w = _greedy_in_block(D, intra, intrad, v, q)
            if w != u and w != q and D[u, w] < duq and D[q, w] < duq:
                occluded = True
                break
        if not occluded:
            kept[nk] = q
            nk += 1
    return kept[first_cross:nk]


def build_bmrng_exact(ds: Dataset, b: BlockAssignment) -> Graph:
    """Exact block-aware MRNG for ``ds`` under assignment ``b``.

    Intra-block edges form the exact MRNG of each block.  Cross-block
    candidates of ``u`` are scanned nearest first; ``q`` is dropped when a
    kept same-block neighbour lies in ``lune(u, q)``, or when a greedy walk
    toward ``q`` inside the block of a kept cross-block neighbour ends in
    ``lune(u, q)``.  Quadratic memory and time, so refused above 5,000 nodes.
    """
    if ds.n > EXACT_LIMIT:
        raise DeskScaleError(f"exact BMRNG is limited to {EXACT_LIMIT} nodes, got {ds.n}")
    if b.n != ds.n:
        raise ValueError("assignment and dataset sizes differ")
    D = pairwise_sq_distances(ds.vectors)
    blk_ptr = np.zeros(b.m + 1, dtype=np.int64)
    np.cumsum([len(m) for m in b.members], out=blk_ptr[1:])
    blk_members = np.concatenate(b.members).astype(np.int64)
    intra, intrad = _exact_intra(D, blk_ptr, blk_members, ds.n)
    label = b.label.astype(np.int64)
    rows = []
    for u in range(ds.n):
        cross = _exact_cross(D, label, intra, intrad, u)
        rows.append(intra[u, :intrad[u]].tolist() + cross.tolist())
    return Graph.from_lists(rows)


# ---------------------------------------------------------------------------
# bounded cross-block prune and BAMG
# ---------------------------------------------------------------------------

@njit(cache=True)
def _bounded_close(X, iptr, iidx, v, q, alpha, beta_sq, duq, mark, stamp, frontier, nxt):
    """True iff some monotone (toward q) intra-block path from ``v`` with at
    most ``alpha`` nodes ends at ``w`` with ``d(w, q) * beta_sq < duq``."""
    dv = _d2(X, v, q)
    if dv * beta_sq < duq:
        return True
    mark[v] = stamp
    frontier[0] = v
    nf = 1
    for depth in range(1, alpha):
        nn = 0
        for i in range(nf):
            w = frontier[i]
            dw = _d2(X, w, q)
            for j in range(iptr[w], iptr[w + 1]):
                x = iidx[j]
                if mark[x] == stamp:
                    continue
                dx = _d2(X, x, q)
                if not dx < dw:
                    continue
                if dx * beta_sq < duq:
                    return True
                mark[x] = stamp
                nxt[nn] = x
                nn += 1
        if nn == 0:
            return False
        for i in range(nn):
            frontier[i] = nxt[i]
        nf = nn
    return False


@njit(cache=True)
def _bamg_select(X, ptr, idx, label, iptr, iidx, alpha, beta_sq):
    n = X.shape[0]
    keep = np.zeros(len(idx), dtype=np.bool_)
    sib = np.empty((len(idx), 2), dtype=np.int64)
    nsib = 0
    mark = np.zeros(n, dtype=np.int64)
    frontier = np.empty(n, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    stamp = 0
    for u in range(n):
        lo, hi = ptr[u], ptr[u + 1]
        m = hi - lo
        cpos = np.empty(m, dtype=np.int64)
        cd = np.empty(m, dtype=np.float64)
        nc = 0
        for j in range(lo, hi):
            if label[idx[j]] == label[u]:
                keep[j] = True
            else:
                cpos[nc] = j
                cd[nc] = _d2(X, u, idx[j])
                nc += 1
        if nc == 0:
            continue
        cpos = cpos[:nc]
        cd = cd[:nc]
        cids = idx[cpos]
        o1 = np.argsort(cids, kind="mergesort")
        cpos, cd, cids = cpos[o1], cd[o1], cids[o1]
        o2 = np.argsort(cd, kind="mergesort")
        cpos, cd, cids = cpos[o2], cd[o2], cids[o2]
        rout = np.empty(nc, dtype=np.int64)
        nr = 0
        for a in range(nc):
            q = cids[a]
            duq = cd[a]
            occluded = False
            for t in range(nr):
                v = rout[t]
                stamp += 1
                if _bounded_close(X, iptr, iidx, v, q, alpha, beta_sq, duq,
                                  mark, stamp, frontier, nxt):
                    occluded = True
                    break
                if label[v] == label[q]:
                    sib[nsib, 0] = v
                    sib[nsib, 1] = q
                    nsib += 1
                    break
            if not occluded:
                rout[nr] = q
                nr += 1
                keep[cpos[a]] = True
    return keep, sib[:nsib]


def prune_cross_block(u: int, q: int, v: int, g: Graph, b: BlockAssignment, ds: Dataset,
                      p: PruneParams) -> bool:
    """Whether retained cross-block neighbour ``v`` of ``u`` occludes ``(u, q)``.

    Searches every intra-block path from ``v`` (at most ``alpha`` nodes) along
    which the distance to ``q`` strictly decreases, and occludes when an
    endpoint ``w`` satisfies ``beta * dist(w, q) < dist(u, q)``.
    """
    intra = intra_block_graph(g, b)
    n = ds.n
    return bool(_bounded_close(ds.vectors, intra.indptr, intra.indices, v, q, p.alpha,
                               p.beta_sq, _d2(ds.vectors, u, q), np.zeros(n, dtype=np.int64),
                               1, np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64)))


def build_bamg(ds: Dataset, nsg: Graph, b: BlockAssignment, p: PruneParams) -> Graph:
    """Convert an NSG into a block-aware monotonic graph.

    Intra-block edges are copied.  Cross-block neighbours of each node are
    scanned nearest first and dropped when a kept cross-block neighbour
    occludes them (:func:`prune_cross_block`).  When a kept neighbour ``v``
    and a candidate ``q`` share a block, the sibling edges ``(v, q)`` and
    ``(q, v)`` are added.  Sibling edges never take part in later occlusion
    checks.  ``graph.stats`` reports kept, pruned and sibling edge counts.
    """
    if not (nsg.n == b.n == ds.n):
        raise ValueError(f"inconsistent sizes: nsg {nsg.n}, assignment {b.n}, dataset {ds.n}")
    intra = intra_block_graph(nsg, b)
    label = b.label.astype(np.int64)
    keep, sib = _bamg_select(ds.vectors, nsg.indptr, nsg.indices, label,
                             intra.indptr, intra.indices, int(p.alpha), p.beta_sq)
    src = np.repeat(np.arange(nsg.n), nsg.degrees())
    is_intra = label[src] == label[nsg.indices]
    rows: list[list[int]] = []
    for u in range(nsg.n):
        lo, hi = nsg.indptr[u], nsg.indptr[u + 1]
        nb = nsg.indices[lo:hi]
        k = keep[lo:hi]
        it = is_intra[lo:hi]
        # intra first (NSG order), then retained cross-block neighbours nearest first
        cross = nb[k & ~it]
        if len(cross):
            d = sq_distances(ds.vectors[cross], ds[u])
            cross = cross[np.lexsort((cross, d))]
        rows.append(nb[it].tolist() + cross.tolist())
    present = [set(r) for r in rows]
    added = 0
    for v, q in sib.tolist():
        for a, c in ((v, q), (q, v)):
            if a != c and c not in present[a]:
                present[a].add(c)
                rows[a].append(c)
                added += 1
    g = Graph.from_lists(rows)
    n_intra = int(is_intra.sum())
    n_cross = int((~is_intra).sum())
    kept_cross = int((keep & ~is_intra).sum())
    g.stats = {
        "intra_kept": n_intra,
        "cross_candidates": n_cross,
        "cross_kept": kept_cross,
        "cross_pruned": n_cross - kept_cross,
        "sibling_pairs": int(len(sib)),
        "sibling_edges_added": added,
        "alpha": int(p.alpha),
        "beta": float(p.beta),
    }
    return g


def cross_block_degrees(g: Graph, b: BlockAssignment) -> tuple[np.ndarray, np.ndarray]:
    """Per-node (intra-block, cross-block) out-degrees."""
    src = np.repeat(np.arange(g.n), g.degrees())
    same = b.label[src] == b.label[g.indices]
    intra = np.bincount(src[same], minlength=g.n)
    cross = np.bincount(src[~same], minlength=g.n)
    return intra, cross


# ---------------------------------------------------------------------------
# expected I/O path length trend
# ---------------------------------------------------------------------------

def io_path_length_trend(ds: Dataset, capacities, trials: int = 200, seed: int = 0) -> dict:
    """Mean fewest-block monotonic I/O path length per block capacity.

    For each capacity a uniformly random balanced assignment and the exact
    BMRNG are built, then the same ``trials`` random ordered pairs are
    measured for every capacity.
    """
    if ds.n > 2_000:
        raise DeskScaleError("trend measurement is limited to 2,000 nodes")
    rng = np.random.default_rng(seed)
    us = rng.integers(0, ds.n, size=trials)
    qs = (us + rng.integers(1, ds.n, size=trials)) % ds.n
    out = {}
    for i, c in enumerate(capacities):
        b = assign_blocks_random(ds.n, c, seed=seed + 1 + i)
        g = build_bmrng_exact(ds, b)
        lengths = []
        for u, q in zip(us.tolist(), qs.tolist()):
            path = verify_io_path(g, b, ds, u, q, shortest=True)
            if path is None:
                raise AssertionError(f"no monotonic I/O path for ({u}, {q}) at c={c}")
            lengths.append(len(path))
        out[c] = float(np.mean(lengths))
    return out


def block_sharing_probability(n: int, capacity: int, pairs: int, seed: int = 0,
                              assignments: int = 20) -> float:
    """Monte-Carlo probability that two distinct random nodes share a block
    under uniformly random balanced assignments."""
    rng = np.random.default_rng(seed)
    per = -(-pairs // assignments)
    hits = total = 0
    for i in range(assignments):
        label = assign_blocks_random(n, capacity, seed=int(rng.integers(2**31))).label
        u = rng.integers(0, n, size=per)
        v = (u + rng.integers(1, n, size=per)) % n
        hits += int(np.count_nonzero(label[u] == label[v]))
        total += per
    return hits / total

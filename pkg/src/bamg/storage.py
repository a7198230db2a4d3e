"""On-disk index layouts and block-read accounting.

Block-aware layout (``graph.blk`` + ``vectors.blk``)
    The graph file is a sequence of ``block_bytes`` blocks.  A block starts
    with a 4-byte header (uint16 record count, uint16 reserved) followed by
    ``c`` fixed-size records ``(oid u32, vid u32, degree u16, nbr u32 * R_max)``.
    Neighbour references are OIDs, ``oid = block * c + slot``; unused slots
    hold ``0xFFFFFFFF``.  Raw vectors of graph block ``i`` live in a
    contiguous group of raw blocks in slot order, so the raw location of an
    OID is pure arithmetic.

Baseline layout (``graph.blk`` only)
    DiskANN-style node records ``(vector f32 * dim, degree u32, nbr u32 * R_max)``
    in VID order, packed into ``block_bytes`` blocks.

``meta.bin`` holds the magic ``BAMG1``, a format version byte, a
length-prefixed JSON header and (block-aware layout only) the OID to VID
table.  ``pq.bin`` holds the PQ codebook and VID-order codes.  All integers
are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basegraph import Graph
from .blocks import BlockAssignment
from .core import Dataset, sq_distances
from .pq import PQCodebook

SENTINEL = 0xFFFFFFFF
MAGIC = b"BAMG1"
FORMAT_VERSION = 1
BLOCK_HEADER_BYTES = 4
INDEX_FILES = ("graph.blk", "vectors.blk", "meta.bin", "pq.bin", "nav.bin")


@dataclass(frozen=True)
class LayoutParams:
    block_bytes: int = 4096
    R_max: int = 31

    def __post_init__(self):
        if self.R_max < 1:
            raise ValueError("R_max must be >= 1")
        if self.R_max > 0xFFFF:
            raise ValueError("R_max must fit the 16-bit degree field")
        if self.capacity < 1:
            raise ValueError(f"block of {self.block_bytes} bytes cannot hold one "
                             f"{self.record_bytes}-byte record")

    @property
    def record_bytes(self) -> int:
        return 4 + 4 + 2 + 4 * self.R_max

    @property
    def capacity(self) -> int:
        return (self.block_bytes - BLOCK_HEADER_BYTES) // self.record_bytes

    c = capacity

    def record_dtype(self) -> np.dtype:
        return np.dtype([("oid", "<u4"), ("vid", "<u4"), ("deg", "<u2"),
                         ("nbrs", "<u4", (self.R_max,))])

    def block_dtype(self) -> np.dtype:
        pad = self.block_bytes - BLOCK_HEADER_BYTES - self.capacity * self.record_bytes
        fields = [("count", "<u2"), ("reserved", "<u2"),
                  ("rec", self.record_dtype(), (self.capacity,))]
        if pad:
            fields.append(("pad", "u1", (pad,)))
        return np.dtype(fields)


@dataclass(frozen=True)
class RawPlacement:
    """Where raw vectors go: ``vpb`` vectors per raw block, or, when one
    vector is larger than a block, ``span`` consecutive blocks per vector."""

    block_bytes: int
    dim: int
    capacity: int

    @property
    def vector_bytes(self) -> int:
        return 4 * self.dim

    @property
    def vpb(self) -> int:
        return self.block_bytes // self.vector_bytes

    @property
    def span(self) -> int:
        return -(-self.vector_bytes // self.block_bytes)

    @property
    def group(self) -> int:
        """Raw blocks per graph block."""
        if self.vpb >= 1:
            return -(-self.capacity // self.vpb)
        return self.capacity * self.span

    def locate(self, oid: int) -> tuple[int, int, int]:
        """(first raw block, byte offset inside it, raw blocks spanned)."""
        blk, slot = divmod(int(oid), self.capacity)
        if self.vpb >= 1:
            sub, pos = divmod(slot, self.vpb)
            return blk * self.group + sub, pos * self.vector_bytes, 1
        return blk * self.group + slot * self.span, 0, self.span

    def blocks_of(self, oids) -> set[int]:
        out: set[int] = set()
        for o in oids:
            first, _, span = self.locate(o)
            out.update(range(first, first + span))
        return out


@dataclass
class IoCounter:
    graph_block_reads: int = 0
    raw_block_reads: int = 0

    @property
    def nio(self) -> int:
        return self.graph_block_reads + self.raw_block_reads

    def __iadd__(self, other: "IoCounter") -> "IoCounter":
        self.graph_block_reads += other.graph_block_reads
        self.raw_block_reads += other.raw_block_reads
        return self


@dataclass
class GraphBlock:
    """A decoded graph block: ``count`` records, neighbour lists padded with
    the sentinel."""

    block_id: int
    oids: np.ndarray
    vids: np.ndarray
    degs: np.ndarray
    nbrs: np.ndarray

    def __len__(self) -> int:
        return len(self.oids)

    def neighbors(self, slot: int) -> np.ndarray:
        return self.nbrs[slot, :self.degs[slot]]

    def records(self) -> list[tuple[int, int, list[int]]]:
        return [(int(o), int(v), self.neighbors(i).tolist())
                for i, (o, v) in enumerate(zip(self.oids, self.vids))]


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _write_meta(path: Path, header: dict, tables: list[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(blob)) + blob)
        for t in tables:
            f.write(np.ascontiguousarray(t).tobytes())


def read_meta(path: str | os.PathLike) -> tuple[dict, bytes]:
    """Parse ``meta.bin``; returns the header and the bytes after it."""
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:5]!r}")
    if data[5] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {data[5]}")
    (hlen,) = struct.unpack_from("<I", data, 6)
    header = json.loads(data[10:10 + hlen].decode())
    return header, data[10 + hlen:]


def _truncate(g: Graph, ds: Dataset, R_max: int) -> tuple[list[np.ndarray], int]:
    """Adjacency with every list cut to ``R_max`` by dropping the farthest
    neighbours (original order kept); returns the lists and the edge count dropped."""
    rows, dropped = [], 0
    for u in range(g.n):
        nb = g.neighbors(u)
        if len(nb) > R_max:
            d = sq_distances(ds.vectors[nb], ds[u])
            keep = np.sort(np.lexsort((nb, d))[:R_max])
            dropped += len(nb) - R_max
            nb = nb[keep]
        rows.append(nb)
    return rows, dropped


def _pread_exact(fd: int, nbytes: int, offset: int) -> bytes:
    data = os.pread(fd, nbytes, offset)
    if len(data) != nbytes:
        raise OSError(f"short read: wanted {nbytes} bytes at offset {offset}, got {len(data)}")
    return data


def _save_pq(path: Path, cb: PQCodebook | None, codes: np.ndarray | None) -> None:
    if cb is None:
        path.write_bytes(b"")
    else:
        path.write_bytes(cb.to_bytes(codes))


def _load_pq(path: Path):
    data = path.read_bytes() if path.exists() else b""
    if not data:
        return None, None
    return PQCodebook.from_bytes(data)


# ---------------------------------------------------------------------------
# block-aware layout
# ---------------------------------------------------------------------------

def write_index(g: Graph, b: BlockAssignment, ds: Dataset, cb: PQCodebook | None,
                codes: np.ndarray | None, lp: LayoutParams, path: str | os.PathLike,
                extra: dict | None = None) -> "DiskIndex":
    """Write the block-aware layout to directory ``path`` and open it.

    ``extra`` is merged into the JSON header.  The writer's report
    (truncated edge count) is kept in the header under ``truncated_edges``.
    """
    if not (g.n == b.n == ds.n):
        raise ValueError(f"inconsistent sizes: graph {g.n}, assignment {b.n}, dataset {ds.n}")
    c = lp.capacity
    if b.capacity != c:
        raise ValueError(f"assignment capacity {b.capacity} != layout capacity {c}")
    if ds.n >= SENTINEL or b.m * c >= SENTINEL:
        raise ValueError("index too large for 32-bit OIDs")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    rows, dropped = _truncate(g, ds, lp.R_max)

    oid_of = np.empty(ds.n, dtype=np.int64)
    vid_of = np.full(b.m * c, SENTINEL, dtype="<u4")
    for blk, mem in enumerate(b.members):
        oids = blk * c + np.arange(len(mem))
        oid_of[mem] = oids
        vid_of[oids] = mem

    blocks = np.zeros(b.m, dtype=lp.block_dtype())
    rec = blocks["rec"]
    rec["nbrs"] = SENTINEL
    for blk, mem in enumerate(b.members):
        blocks["count"][blk] = len(mem)
        for s, v in enumerate(mem.tolist()):
            r = rec[blk, s]
            nb = oid_of[rows[v]]
            r["oid"] = blk * c + s
            r["vid"] = v
            r["deg"] = len(nb)
            r["nbrs"][:len(nb)] = nb
    (out / "graph.blk").write_bytes(blocks.tobytes())

    rp = RawPlacement(lp.block_bytes, ds.dim, c)
    raw = np.zeros(b.m * rp.group * lp.block_bytes, dtype=np.uint8)
    vbytes = ds.vectors.astype("<f4").view(np.uint8).reshape(ds.n, -1)
    for v in range(ds.n):
        first, off, _ = rp.locate(int(oid_of[v]))
        start = first * lp.block_bytes + off
        raw[start:start + rp.vector_bytes] = vbytes[v]
    (out / "vectors.blk").write_bytes(raw.tobytes())

    header = {
        "layout": "bamg", "n": ds.n, "dim": ds.dim, "block_bytes": lp.block_bytes,
        "R_max": lp.R_max, "capacity": c, "graph_blocks": b.m,
        "raw_blocks": b.m * rp.group, "truncated_edges": dropped,
    }
    header.update(extra or {})
    _write_meta(out / "meta.bin", header, [vid_of])
    _save_pq(out / "pq.bin", cb, codes)
    if not (out / "nav.bin").exists():
        (out / "nav.bin").write_bytes(b"")
    return DiskIndex(out)


class DiskIndex:
    """Read side of the block-aware layout.  Immutable; positional reads only,
    so one instance serves concurrent queries."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.header, rest = read_meta(self.path / "meta.bin")
        h = self.header
        if h.get("layout") != "bamg":
            raise ValueError(f"{self.path}: not a block-aware index")
        self.n, self.dim = int(h["n"]), int(h["dim"])
        self.lp = LayoutParams(int(h["block_bytes"]), int(h["R_max"]))
        self.c = self.lp.capacity
        if self.c != h["capacity"]:
            raise ValueError("stored capacity disagrees with layout arithmetic")
        self.m = int(h["graph_blocks"])
        self.raw = RawPlacement(self.lp.block_bytes, self.dim, self.c)
        self.vid_of_oid = np.frombuffer(rest, dtype="<u4", count=self.m * self.c).astype(np.int64)
        occupied = self.vid_of_oid != SENTINEL
        self.oid_of_vid = np.full(self.n, -1, dtype=np.int64)
        self.oid_of_vid[self.vid_of_oid[occupied]] = np.flatnonzero(occupied)
        self.pq, codes = _load_pq(self.path / "pq.bin")
        self.codes_by_oid = None
        if codes is not None:
            self.codes_by_oid = np.zeros((self.m * self.c, codes.shape[1]), dtype=np.uint8)
            self.codes_by_oid[self.oid_of_vid] = codes
        self._dtype = self.lp.block_dtype()
        self._gfd = os.open(self.path / "graph.blk", os.O_RDONLY)
        self._vfd = os.open(self.path / "vectors.blk", os.O_RDONLY)

    def close(self) -> None:
        # idempotent: a second close must not hit a descriptor number reused elsewhere
        for attr in ("_gfd", "_vfd"):
            fd = getattr(self, attr, None)
            if fd is not None:
                setattr(self, attr, None)
                os.close(fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        self.close()

    def oid_of(self, vid: int) -> int:
        return int(self.oid_of_vid[vid])

    def vid_of(self, oid: int) -> int:
        v = int(self.vid_of_oid[oid])
        if v == SENTINEL:
            raise ValueError(f"OID {oid} is not occupied")
        return v

    def block_of_oid(self, oid: int) -> int:
        return int(oid) // self.c

    def read_graph_block(self, block_id: int, ctr: IoCounter,
                         cache: dict | None = None) -> GraphBlock:
        """Decode one graph block.  A hit in the per-query ``cache`` costs no
        I/O; otherwise one block read is charged."""
        if not 0 <= block_id < self.m:
            raise ValueError(f"block {block_id} out of range [0, {self.m})")
        if cache is not None and block_id in cache:
            return cache[block_id]
        raw = _pread_exact(self._gfd, self.lp.block_bytes, block_id * self.lp.block_bytes)
        ctr.graph_block_reads += 1
        rec = np.frombuffer(raw, dtype=self._dtype)[0]
        cnt = int(rec["count"])
        if cnt > self.c:
            raise ValueError(f"block {block_id}: record count {cnt} exceeds capacity")
        r = rec["rec"][:cnt]
        oids = r["oid"].astype(np.int64)
        expect = block_id * self.c + np.arange(cnt)
        if not np.array_equal(oids, expect):
            raise ValueError(f"block {block_id}: stored OIDs disagree with their positions")
        blk = GraphBlock(block_id, oids, r["vid"].astype(np.int64), r["deg"].astype(np.int64),
                         r["nbrs"].astype(np.int64))
        if cache is not None:
            cache[block_id] = blk
        return blk

    def read_raw_vectors(self, oids, ctr: IoCounter) -> np.ndarray:
        """Exact vectors for ``oids``; each distinct raw block is read once."""
        oids = [int(o) for o in oids]
        for o in oids:
            if o == SENTINEL or not 0 <= o < len(self.vid_of_oid) or self.vid_of_oid[o] == SENTINEL:
                raise ValueError(f"OID {o} is not occupied")
        bb = self.lp.block_bytes
        need = sorted(self.raw.blocks_of(oids))
        buf: dict[int, bytes] = {}
        # coalesce consecutive raw blocks into one positional read
        i = 0
        while i < len(need):
            j = i
            while j + 1 < len(need) and need[j + 1] == need[j] + 1:
                j += 1
            data = _pread_exact(self._vfd, (j - i + 1) * bb, need[i] * bb)
            for k in range(i, j + 1):
                buf[need[k]] = data[(k - i) * bb:(k - i + 1) * bb]
            i = j + 1
        ctr.raw_block_reads += len(need)
        out = np.empty((len(oids), self.dim), dtype=np.float32)
        for t, o in enumerate(oids):
            first, off, span = self.raw.locate(o)
            chunk = b"".join(buf[first + s] for s in range(span))
            out[t] = np.frombuffer(chunk, dtype="<f4", count=self.dim, offset=off)
        return out

    def load_all(self) -> tuple[Graph, BlockAssignment, Dataset]:
        """Decode the whole index back to VID space (uncounted)."""
        ctr = IoCounter()
        rows: list[list[int]] = [[] for _ in range(self.n)]
        members = []
        for blk in range(self.m):
            gb = self.read_graph_block(blk, ctr)
            members.append(gb.vids.copy())
            for s in range(len(gb)):
                rows[int(gb.vids[s])] = self.vid_of_oid[gb.neighbors(s)].tolist()
        vecs = self.read_raw_vectors(self.oid_of_vid, ctr)
        return Graph.from_lists(rows), BlockAssignment.from_members(members, self.c, self.n), Dataset(vecs)


# ---------------------------------------------------------------------------
# baseline layout
# ---------------------------------------------------------------------------

def baseline_record_bytes(dim: int, R_max: int) -> int:
    return 4 * dim + 4 + 4 * R_max


def write_index_baseline(g: Graph, ds: Dataset, cb: PQCodebook | None, codes: np.ndarray | None,
                         lp: LayoutParams, path: str | os.PathLike, entry: int = 0,
                         extra: dict | None = None) -> "BaselineIndex":
    """Write a DiskANN-style layout (vector and neighbour VIDs per record, VID order)."""
    if g.n != ds.n:
        raise ValueError("graph and dataset sizes differ")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    rows, dropped = _truncate(g, ds, lp.R_max)
    rb = baseline_record_bytes(ds.dim, lp.R_max)
    dt = np.dtype([("vec", "<f4", (ds.dim,)), ("deg", "<u4"), ("nbrs", "<u4", (lp.R_max,))])
    recs = np.zeros(ds.n, dtype=dt)
    recs["vec"] = ds.vectors
    recs["nbrs"] = SENTINEL
    for v, nb in enumerate(rows):
        recs["deg"][v] = len(nb)
        recs["nbrs"][v, :len(nb)] = nb
    bb = lp.block_bytes
    npb = bb // rb
    if npb >= 1:
        nblocks = -(-ds.n // npb)
        buf = np.zeros((nblocks, bb), dtype=np.uint8)
        flat = np.zeros(nblocks * npb * rb, dtype=np.uint8)
        flat[:ds.n * rb] = recs.view(np.uint8)
        buf[:, :npb * rb] = flat.reshape(nblocks, npb * rb)
    else:
        span = -(-rb // bb)
        nblocks = ds.n * span
        buf = np.zeros((ds.n, span * bb), dtype=np.uint8)
        buf[:, :rb] = recs.view(np.uint8).reshape(ds.n, rb)
    (out / "graph.blk").write_bytes(buf.tobytes())
    header = {
        "layout": "baseline", "n": ds.n, "dim": ds.dim, "block_bytes": bb,
        "R_max": lp.R_max, "record_bytes": rb, "graph_blocks": int(nblocks),
        "entry": int(entry), "truncated_edges": dropped,
    }
    header.update(extra or {})
    _write_meta(out / "meta.bin", header, [])
    _save_pq(out / "pq.bin", cb, codes)
    return BaselineIndex(out)


class BaselineIndex:
    """Read side of the baseline layout."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.header, _ = read_meta(self.path / "meta.bin")
        h = self.header
        if h.get("layout") != "baseline":
            raise ValueError(f"{self.path}: not a baseline index")
        self.n, self.dim = int(h["n"]), int(h["dim"])
        self.lp = LayoutParams(int(h["block_bytes"]), int(h["R_max"]))
        self.record_bytes = baseline_record_bytes(self.dim, self.lp.R_max)
        if self.record_bytes != h["record_bytes"]:
            raise ValueError("stored record size disagrees with layout arithmetic")
        self.entry = int(h["entry"])
        bb = self.lp.block_bytes
        self.nodes_per_block = bb // self.record_bytes
        self.span = 1 if self.nodes_per_block else -(-self.record_bytes // bb)
        self._dt = np.dtype([("vec", "<f4", (self.dim,)), ("deg", "<u4"),
                             ("nbrs", "<u4", (self.lp.R_max,))])
        self.pq, self.codes = _load_pq(self.path / "pq.bin")
        self._fd = os.open(self.path / "graph.blk", os.O_RDONLY)

    def close(self) -> None:
        fd = getattr(self, "_fd", None)
        if fd is not None:
            self._fd = None
            os.close(fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        self.close()

    def blocks_of(self, vid: int) -> range:
        if self.nodes_per_block:
            b = vid // self.nodes_per_block
            return range(b, b + 1)
        return range(vid * self.span, (vid + 1) * self.span)

    def read_node(self, vid: int, ctr: IoCounter,
                  cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(exact vector, neighbour VIDs) of ``vid``; charges every block touched
        that is not already in ``cache``."""
        if not 0 <= vid < self.n:
            raise ValueError(f"VID {vid} out of range")
        bb = self.lp.block_bytes
        blocks = self.blocks_of(vid)
        parts = []
        for blk in blocks:
            if cache is not None and blk in cache:
                parts.append(cache[blk])
                continue
            data = _pread_exact(self._fd, bb, blk * bb)
            ctr.graph_block_reads += 1
            if cache is not None:
                cache[blk] = data
            parts.append(data)
        data = b"".join(parts)
        off = (vid % self.nodes_per_block) * self.record_bytes if self.nodes_per_block else 0
        rec = np.frombuffer(data, dtype=self._dt, count=1, offset=off)[0]
        return rec["vec"].copy(), rec["nbrs"][:int(rec["deg"])].astype(np.int64)

    def load_all(self) -> tuple[Graph, Dataset]:
        ctr = IoCounter()
        rows, vecs = [], np.empty((self.n, self.dim), dtype=np.float32)
        for v in range(self.n):
            vecs[v], nb = self.read_node(v, ctr)
            rows.append(nb.tolist())
        return Graph.from_lists(rows), Dataset(vecs)


def open_index(path: str | os.PathLike):
    """Open either layout, dispatching on the stored header."""
    header, _ = read_meta(Path(path) / "meta.bin")
    if header.get("layout") == "baseline":
        return BaselineIndex(path)
    return DiskIndex(path)


@dataclass
class BuildFiles:
    """Paths of the files that make up one index directory."""

    root: Path
    names: tuple[str, ...] = field(default=INDEX_FILES)

    def existing(self) -> list[Path]:
        return [self.root / n for n in self.names if (self.root / n).exists()]

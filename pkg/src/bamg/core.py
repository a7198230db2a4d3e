"""Vector datasets, squared Euclidean distance, fvecs/ivecs I/O and the exact
brute-force k-NN oracle.

All distances in this package are *squared* Euclidean distances.  Ordering by
squared distance is identical to ordering by the true metric, and strict
comparisons between two distances are preserved.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class FormatError(ValueError):
    """Raised when a vector file does not follow the fvecs/ivecs framing."""


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of ``n`` float32 vectors of dimension ``dim``.

    The vector at row ``i`` has VID ``i``.
    """

    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vecs = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vecs.shape}")
        if vecs.shape[0] < 1:
            raise ValueError("a dataset needs at least one vector")
        if vecs.shape[1] < 1:
            raise ValueError("vector dimension must be positive")
        if not np.isfinite(vecs).all():
            raise ValueError("dataset contains NaN or infinite components")
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)

    @property
    def n(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, vid: int) -> np.ndarray:
        return self.vectors[vid]

    def subset(self, vids: Sequence[int]) -> "Dataset":
        """Dataset over ``vids``; the new VID ``i`` is the old ``vids[i]``."""
        return Dataset(self.vectors[np.asarray(vids, dtype=np.int64)])


@dataclass
class NeighborList:
    """Result of a k-NN query: VIDs ascending by squared distance."""

    ids: np.ndarray
    dists: np.ndarray
    query: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.dists = np.asarray(self.dists, dtype=np.float64)
        if self.ids.shape != self.dists.shape:
            raise ValueError("ids and dists must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.dists.tolist()))

    def check(self) -> None:
        """Raise AssertionError unless ordering and uniqueness invariants hold."""
        assert np.all(np.diff(self.dists) >= 0), "distances not ascending"
        assert len(np.unique(self.ids)) == len(self.ids), "duplicate VIDs"


def distance(a, b) -> float:
    """Squared Euclidean distance between two vectors, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def sq_distances(vectors: np.ndarray, q) -> np.ndarray:
    """Squared distances from every row of ``vectors`` to ``q`` (float64)."""
    q = np.asarray(q, dtype=np.float64)
    if vectors.shape[1] != q.shape[-1]:
        raise ValueError(f"dimension mismatch: {vectors.shape[1]} vs {q.shape[-1]}")
    diff = vectors.astype(np.float64) - q
    return np.einsum("ij,ij->i", diff, diff)


def pairwise_sq_distances(vectors: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Full n x n squared distance matrix in float64 (direct-difference form)."""
    x = vectors.astype(np.float64)
    n = x.shape[0]
    out = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, chunk):
        block = x[start:start + chunk]
        diff = block[:, None, :] - x[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def select_smallest(dists: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest values, ascending, ties by smaller index."""
    n = len(dists)
    if k >= n:
        return np.lexsort((np.arange(n), dists))
    kth = np.partition(dists, k - 1)[k - 1]
    cand = np.flatnonzero(dists <= kth)
    order = np.lexsort((cand, dists[cand]))
    return cand[order[:k]]


def exact_knn(ds: Dataset, q, k: int) -> NeighborList:
    """The exact ``k`` nearest neighbours of ``q`` by brute force."""
    if k < 1 or k > ds.n:
        raise ValueError(f"k must be in [1, {ds.n}], got {k}")
    d = sq_distances(ds.vectors, q)
    ids = select_smallest(d, k)
    return NeighborList(ids, d[ids], np.asarray(q))


def exact_knn_batch(ds: Dataset, queries: np.ndarray, k: int, threads: int = 1) -> np.ndarray:
    """Ground-truth table (nq x k VIDs) for a batch of queries.

    Parallel execution returns exactly the sequential result; each query is
    computed independently.
    """
    queries = np.asarray(queries, dtype=np.float32)
    if threads <= 1:
        rows = [exact_knn(ds, q, k).ids for q in queries]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda q: exact_knn(ds, q, k).ids, queries))
    return np.asarray(rows, dtype=np.int64).reshape(len(queries), k)


def medoid(vectors: np.ndarray) -> int:
    """VID of the vector closest to the centroid (ties by smaller VID)."""
    centre = vectors.astype(np.float64).mean(axis=0)
    return int(select_smallest(sq_distances(vectors, centre), 1)[0])


# ---------------------------------------------------------------------------
# fvecs / ivecs
# ---------------------------------------------------------------------------

def _read_vecs(path: str | os.PathLike, value_dtype: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.empty((0, 0), dtype=value_dtype)
    if raw.size % 4:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of 4 bytes")
    words = raw.view("<i4")
    d = int(words[0])
    if d <= 0:
        raise FormatError(f"{path}: non-positive dimension {d} in record 0")
    if words.size % (d + 1):
        # either truncated or a later record declares a different dimension
        _locate_bad_record(words, d, path)
        raise FormatError(f"{path}: truncated file (size not a multiple of record size)")
    table = words.reshape(-1, d + 1)
    bad = np.flatnonzero(table[:, 0] != d)
    if bad.size:
        raise FormatError(
            f"{path}: record {bad[0]} declares d={table[bad[0], 0]}, expected {d}")
    return np.ascontiguousarray(table[:, 1:]).view(value_dtype)


def _locate_bad_record(words: np.ndarray, d: int, path) -> None:
    pos, rec = 0, 0
    while pos < words.size:
        if int(words[pos]) != d:
            raise FormatError(f"{path}: record {rec} declares d={int(words[pos])}, expected {d}")
        pos += d + 1
        rec += 1


def load_fvecs(path: str | os.PathLike) -> Dataset:
    """Read an fvecs file (int32 dim, then dim float32 per record)."""
    table = _read_vecs(path, "<f4")
    if table.shape[0] == 0:
        raise FormatError(f"{path}: empty fvecs file")
    return Dataset(table.astype(np.float32))


def load_ivecs(path: str | os.PathLike) -> np.ndarray:
    """Read an ivecs file into an (n x d) int64 table; empty file gives (0, 0)."""
    table = _read_vecs(path, "<i4")
    return table.astype(np.int64)


def _write_vecs(path, table: np.ndarray, value_dtype: str) -> None:
    table = np.asarray(table)
    if table.ndim != 2:
        raise ValueError("expected a 2-D table")
    n, d = table.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = np.ascontiguousarray(table, dtype=value_dtype).view("<i4")
    out.tofile(path)


def write_fvecs(path: str | os.PathLike, data) -> None:
    vecs = data.vectors if isinstance(data, Dataset) else np.asarray(data, dtype=np.float32)
    _write_vecs(path, vecs, "<f4")


def write_ivecs(path: str | os.PathLike, table) -> None:
    _write_vecs(path, np.asarray(table, dtype=np.int64).astype("<i4"), "<i4")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def uniform_dataset(n: int, dim: int, seed: int = 0) -> Dataset:
    """``n`` points drawn uniformly from the unit cube."""
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, dim), dtype=np.float32))


def clustered_vectors(n: int, dim: int, n_clusters: int = 32, seed: int = 0,
                      spread: float = 1.0, latent_dim: int | None = None) -> np.ndarray:
    """Draw ``n`` vectors from a seeded Gaussian mixture.

    Cluster centres are uniform in ``[0, 10)^dim``.  Each cluster is an
    anisotropic Gaussian whose per-axis scale decays geometrically, so the
    effective dimensionality of a cluster is about ``latent_dim`` (default
    ``dim``); real embedding collections look like this rather than like
    isotropic noise.
    """
    rng = np.random.default_rng(seed)
    centres = rng.random((n_clusters, dim)) * 10.0
    latent = dim if latent_dim is None else latent_dim
    scales = spread * np.exp(-np.arange(dim) / max(latent, 1))
    labels = rng.integers(0, n_clusters, size=n)
    out = np.empty((n, dim), dtype=np.float64)
    for c in range(n_clusters):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        # random rotation per cluster keeps the decaying spectrum off the axes
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        z = rng.standard_normal((idx.size, dim)) * scales
        out[idx] = centres[c] + z @ basis.T
    return out.astype(np.float32)


def clustered_dataset(n: int, dim: int, n_clusters: int = 32, seed: int = 0,
                      spread: float = 1.0, latent_dim: int | None = None) -> Dataset:
    return Dataset(clustered_vectors(n, dim, n_clusters, seed, spread, latent_dim))


def clustered_split(n: int, nq: int, dim: int, n_clusters: int = 32, seed: int = 0,
                    spread: float = 1.0, latent_dim: int | None = None):
    """Base set and held-out queries drawn from the same mixture."""
    allv = clustered_vectors(n + nq, dim, n_clusters, seed, spread, latent_dim)
    return Dataset(allv[:n]), allv[n:]

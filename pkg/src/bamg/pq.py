"""Product quantization: per-subspace k-means codebooks, encoding and
asymmetric distance computation (ADC)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import Dataset

_HEADER = struct.Struct("<4sIIIIQ")  # magic, m_sub, sub_dim, k_codes, dim, n codes
_MAGIC = b"BPQ1"


def default_m_sub(dim: int) -> int:
    """About ``dim / 4`` subspaces, rounded to a divisor of ``dim``."""
    target = max(1, dim // 4)
    divisors = [m for m in range(1, dim + 1) if dim % m == 0]
    return min(divisors, key=lambda m: (abs(m - target), m))


@dataclass
class PQCodebook:
    """``centroids`` has shape (m_sub, k_codes, sub_dim).  Vectors are
    zero-padded to ``m_sub * sub_dim`` columns."""

    centroids: np.ndarray
    dim: int
    seed: int = 0
    distortion_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 3:
            raise ValueError("centroids must be (m_sub, k_codes, sub_dim)")
        if self.k_codes > 256:
            raise ValueError("k_codes must be <= 256")
        if not np.isfinite(self.centroids).all():
            raise ValueError("centroids must be finite")
        if self.m_sub * self.sub_dim < self.dim:
            raise ValueError("codebook does not cover the vector dimension")

    @property
    def m_sub(self) -> int:
        return self.centroids.shape[0]

    @property
    def k_codes(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    def pad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: codebook {self.dim}, vectors {x.shape[-1]}")
        width = self.m_sub * self.sub_dim
        if width == self.dim:
            return x
        out = np.zeros(x.shape[:-1] + (width,), dtype=np.float32)
        out[..., :self.dim] = x
        return out

    def query_table(self, q) -> np.ndarray:
        """(m_sub, k_codes) float32 table of squared partial distances."""
        qp = self.pad(q).astype(np.float64).reshape(self.m_sub, 1, self.sub_dim)
        diff = self.centroids.astype(np.float64) - qp
        return np.einsum("mkd,mkd->mk", diff, diff).astype(np.float32)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        single = codes.ndim == 1
        codes = np.atleast_2d(codes).astype(np.int64)
        parts = self.centroids[np.arange(self.m_sub)[None, :], codes]  # (n, m, sub_dim)
        out = parts.reshape(len(codes), -1)[:, :self.dim]
        return out[0] if single else out

    def to_bytes(self, codes: np.ndarray) -> bytes:
        codes = np.ascontiguousarray(codes, dtype=np.uint8)
        head = _HEADER.pack(_MAGIC, self.m_sub, self.sub_dim, self.k_codes, self.dim, len(codes))
        return head + self.centroids.astype("<f4").tobytes() + codes.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["PQCodebook", np.ndarray]:
        magic, m, sd, k, dim, n = _HEADER.unpack_from(data, 0)
        if magic != _MAGIC:
            raise ValueError("not a PQ sidecar file")
        off = _HEADER.size
        cent = np.frombuffer(data, dtype="<f4", count=m * k * sd, offset=off).reshape(m, k, sd)
        off += cent.nbytes
        codes = np.frombuffer(data, dtype=np.uint8, count=n * m, offset=off).reshape(n, m)
        return cls(cent.copy(), dim), codes.copy()


@njit(cache=True)
def _assign(X, C):
    """Nearest centroid (ties to smaller index) and its squared distance."""
    n, d = X.shape
    k = C.shape[0]
    lab = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        bj = 0
        for j in range(k):
            s = 0.0
            for t in range(d):
                diff = np.float64(X[i, t]) - np.float64(C[j, t])
                s += diff * diff
            if s < best:
                best = s
                bj = j
        lab[i] = bj
        dist[i] = best
    return lab, dist


@njit(cache=True)
def _update(X, lab, dist, C):
    n, d = X.shape
    k = C.shape[0]
    sums = np.zeros((k, d))
    cnt = np.zeros(k, dtype=np.int64)
    for i in range(n):
        cnt[lab[i]] += 1
        for t in range(d):
            sums[lab[i], t] += X[i, t]
    out = C.copy()
    for j in range(k):
        if cnt[j] > 0:
            for t in range(d):
                out[j, t] = sums[j, t] / cnt[j]
    # empty clusters take the farthest point of the currently largest cluster
    for j in range(k):
        if cnt[j] > 0:
            continue
        big = np.argmax(cnt)
        far = -1
        fd = -1.0
        for i in range(n):
            if lab[i] == big and dist[i] > fd:
                fd = dist[i]
                far = i
        if far < 0 or cnt[big] < 2:
            continue
        for t in range(d):
            out[j, t] = X[far, t]
        lab[far] = j
        dist[far] = 0.0
        cnt[big] -= 1
        cnt[j] = 1
    return out


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    X64 = X.astype(np.float64)
    C = np.empty((k, X.shape[1]), dtype=np.float64)
    C[0] = X64[rng.integers(n)]
    d = ((X64 - C[0]) ** 2).sum(1)
    for j in range(1, k):
        tot = d.sum()
        idx = int(rng.choice(n, p=d / tot)) if tot > 0 else int(rng.integers(n))
        C[j] = X64[idx]
        d = np.minimum(d, ((X64 - C[j]) ** 2).sum(1))
    return C


def kmeans(X: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd k-means with k-means++ seeding.

    Returns ``(centroids, history)`` where ``history[i]`` is the total
    distortion after the assignment step of iteration ``i``, plus the final
    distortion.
    """
    X = np.ascontiguousarray(X, dtype=np.float32)
    C = _kmeanspp(X, k, rng)
    history = []
    for _ in range(iters):
        lab, dist = _assign(X, C)
        history.append(float(dist.sum()))
        C = _update(X, lab, dist, C)
    _, dist = _assign(X, C)
    history.append(float(dist.sum()))
    return C, history


def train_pq(ds: Dataset, m_sub: int | None = None, k_codes: int = 256, iters: int = 12,
             seed: int = 0, max_train: int | None = None) -> PQCodebook:
    """Train a product quantizer with one k-means per subspace.

    ``max_train`` caps the training sample (drawn without replacement).
    """
    m_sub = default_m_sub(ds.dim) if m_sub is None else m_sub
    if m_sub < 1:
        raise ValueError("m_sub must be >= 1")
    if not 1 <= k_codes <= 256:
        raise ValueError("k_codes must be in [1, 256]")
    if ds.n < k_codes:
        raise ValueError(f"need at least k_codes={k_codes} vectors, got {ds.n}")
    rng = np.random.default_rng(seed)
    X = ds.vectors
    if max_train is not None and ds.n > max_train:
        X = X[np.sort(rng.choice(ds.n, size=max(max_train, k_codes), replace=False))]
    sub_dim = -(-ds.dim // m_sub)
    shell = PQCodebook(np.zeros((m_sub, 1, sub_dim), np.float32), ds.dim)
    Xp = shell.pad(X)
    cents = np.empty((m_sub, k_codes, sub_dim), dtype=np.float32)
    hist = np.zeros(iters + 1)
    for s in range(m_sub):
        C, h = kmeans(Xp[:, s * sub_dim:(s + 1) * sub_dim], k_codes, iters, rng)
        cents[s] = C
        hist += np.asarray(h)
    return PQCodebook(cents, ds.dim, seed, hist.tolist())


def encode(cb: PQCodebook, data) -> np.ndarray:
    """(n, m_sub) uint8 codes; each subvector maps to its nearest centroid."""
    X = data.vectors if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, np.float32))
    Xp = cb.pad(X)
    out = np.empty((len(Xp), cb.m_sub), dtype=np.uint8)
    sd = cb.sub_dim
    for s in range(cb.m_sub):
        lab, _ = _assign(np.ascontiguousarray(Xp[:, s * sd:(s + 1) * sd]), cb.centroids[s])
        out[:, s] = lab
    return out


def estimate_distance(table: np.ndarray, code) -> float:
    """Squared ADC distance of one code row."""
    code = np.asarray(code, dtype=np.int64)
    return float(table[np.arange(len(code)), code].astype(np.float64).sum())


def estimate_distances(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Vectorized ADC over many code rows (float64)."""
    codes = np.asarray(codes)
    m = table.shape[0]
    return table[np.arange(m)[None, :], codes].astype(np.float64).sum(axis=1)

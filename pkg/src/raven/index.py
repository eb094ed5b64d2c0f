"""Maximum inner product search over an :class:`EmbeddingStore`.

Two backends share one ranking routine so their outputs are directly
comparable: an exhaustive scan and an inverted-file index whose coarse
quantizer is trained with k-means. Results are sorted by score descending with
ties broken by ascending id.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, NamedTuple, Optional, Sequence, Union

import numpy as np

from .embed_store import EmbeddingStore
from .errors import FormatError, RavenError

DEFAULT_TOP_K = 50
KMEANS_MAX_ITER = 25
KMEANS_TOL = 1e-4
KMEANS_RESTARTS = 4

IVF_MAGIC = b"RVIX"
IVF_VERSION = 1
_IVF_HEADER = struct.Struct("<4sIII")
_U64 = struct.Struct("<Q")
_U16 = struct.Struct("<H")


class ScoredHit(NamedTuple):
    id: str
    score: float


def score(query: Sequence[float], memory: Sequence[float]) -> float:
    """Inner product of two equal-length vectors."""
    q = np.asarray(query, dtype=np.float64)
    m = np.asarray(memory, dtype=np.float64)
    if q.shape != m.shape or q.ndim != 1:
        raise RavenError(f"dimension mismatch: {q.shape} vs {m.shape}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(m))):
        raise RavenError("non-finite component in score input")
    return float(np.dot(q, m))


def _check_query(store: EmbeddingStore, query: Sequence[float], k: int) -> np.ndarray:
    if store.count == 0:
        raise RavenError("empty memory")
    if k < 1:
        raise RavenError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != store.dimension:
        raise RavenError(f"dimension mismatch: query has {q.size}, store has {store.dimension}")
    if not np.all(np.isfinite(q)):
        raise RavenError("non-finite component in query")
    return q


def _row_scores(store: EmbeddingStore, rows: Optional[np.ndarray], q: np.ndarray) -> np.ndarray:
    # Row-wise multiply-and-sum reduces each row independently, so a row's
    # score does not depend on which other rows are scanned with it.
    mat = store.matrix64 if rows is None else store.matrix64[rows]
    return np.multiply(mat, q).sum(axis=1)


def _rank(store: EmbeddingStore, rows: np.ndarray, scores: np.ndarray, k: int) -> list[ScoredHit]:
    if rows.size == 0:
        return []
    k = min(k, rows.size)
    if k < rows.size:
        # Keep every row tied with the k-th score so id tie-breaks stay exact.
        kth = np.partition(scores, rows.size - k)[rows.size - k]
        keep = scores >= kth
        rows, scores = rows[keep], scores[keep]
    order = np.lexsort((store.id_rank[rows], -scores))[:k]
    return [ScoredHit(store.ids[int(rows[i])], float(scores[i])) for i in order]


def search_exact(store: EmbeddingStore, query: Sequence[float], k: int = DEFAULT_TOP_K) -> list[ScoredHit]:
    """Return the ``min(k, count)`` largest inner products against the whole store."""
    q = _check_query(store, query, k)
    rows = np.arange(store.count)
    return _rank(store, rows, _row_scores(store, None, q), k)


# -- inverted file ----------------------------------------------------------


@dataclass
class IvfIndex:
    """Coarse-quantizer index: centroids plus one posting list per centroid."""

    centroids: np.ndarray
    postings: list[list[str]]
    dimension: int
    empty_clusters: list[int] = field(default_factory=list)
    iterations: int = 0
    _rows: list[np.ndarray] = field(default_factory=list, repr=False)
    _rows_owner: Optional[int] = field(default=None, repr=False)

    @property
    def nlist(self) -> int:
        return len(self.postings)

    def rows_for(self, store: EmbeddingStore) -> list[np.ndarray]:
        """Posting lists as store row indices (cached)."""
        if self._rows_owner != id(store):
            missing = [id_ for plist in self.postings for id_ in plist if id_ not in store]
            if missing:
                raise RavenError(f"index references id {missing[0]!r} absent from the store")
            self._rows = [np.array([store.row_of(i) for i in plist], dtype=np.int64) for plist in self.postings]
            self._rows_owner = id(store)
        return self._rows


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, nlist: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each step draws several D^2-weighted candidates and
    keeps the one that lowers the total squared distance most."""
    n = points.shape[0]
    trials = 2 + int(np.log(nlist))
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen]).ravel()
    for _ in range(1, nlist):
        total = closest.sum()
        if total > 0:
            cands = rng.choice(n, size=trials, p=closest / total)
        else:
            # All remaining points coincide with a chosen centroid.
            cands = rng.choice(np.setdiff1d(np.arange(n), chosen), size=1)
        cand_d = np.minimum(closest[:, None], _sq_dists(points, points[cands]))
        best = int(np.argmin(cand_d.sum(axis=0)))
        chosen.append(int(cands[best]))
        closest = cand_d[:, best]
    return points[chosen].copy()


def _lloyd(
    points: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, int]:
    nlist = centroids.shape[0]
    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    it = 0
    for it in range(1, max_iter + 1):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        counts = np.bincount(assign, minlength=nlist)
        new = centroids.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        shift = np.linalg.norm(new - centroids)
        scale = np.linalg.norm(centroids)
        centroids = new
        assign = np.argmin(_sq_dists(points, centroids), axis=1)
        if shift <= tol * max(scale, np.finfo(float).tiny):
            break
    return centroids, assign, it


def kmeans(
    points: np.ndarray,
    nlist: int,
    seed: int,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    n_init: int = KMEANS_RESTARTS,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    Returns ``(centroids, assignment, iterations)`` of the run with the lowest
    within-cluster squared distance. A run stops when the Frobenius norm of
    the centroid update falls below ``tol`` times the norm of the previous
    centroids. An emptied cluster keeps its previous centroid.
    """
    if n_init < 1:
        raise RavenError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best: Optional[tuple[np.ndarray, np.ndarray, int]] = None
    best_inertia = np.inf
    for _ in range(n_init):
        run = _lloyd(points, _kmeans_pp(points, nlist, rng), max_iter, tol)
        inertia = float(_sq_dists(points, run[0])[np.arange(points.shape[0]), run[1]].sum())
        # Strict improvement only, so earlier restarts win ties.
        if best is None or inertia < best_inertia:
            best, best_inertia = run, inertia
    assert best is not None
    return best


def build_ivf(
    store: EmbeddingStore,
    nlist: int,
    seed: int = 0,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
) -> IvfIndex:
    if store.count == 0:
        raise RavenError("empty memory")
    if nlist < 1 or nlist > store.count:
        raise RavenError(f"nlist must be in [1, {store.count}], got {nlist}")
    points = store.matrix64
    centroids, assign, iterations = kmeans(points, nlist, seed, max_iter, tol)
    centroids = centroids.astype("<f4")
    # Final assignment uses the stored (f32) centroids so a reloaded index is identical.
    assign = np.argmin(_sq_dists(points, centroids.astype(np.float64)), axis=1)
    postings: list[list[str]] = [[] for _ in range(nlist)]
    for row, c in enumerate(assign):
        postings[int(c)].append(store.ids[row])
    empty = [c for c, plist in enumerate(postings) if not plist]
    return IvfIndex(centroids, postings, store.dimension, empty, iterations)


def probe_order(index: IvfIndex, query: np.ndarray) -> np.ndarray:
    """Cluster ids sorted by centroid inner product with the query, descending."""
    cs = np.multiply(index.centroids.astype(np.float64), query).sum(axis=1)
    return np.lexsort((np.arange(index.nlist), -cs))


def search_ivf(
    index: IvfIndex,
    store: EmbeddingStore,
    query: Sequence[float],
    k: int = DEFAULT_TOP_K,
    nprobe: int = 1,
) -> list[ScoredHit]:
    """Scan the ``nprobe`` clusters whose centroids score highest against the query."""
    q = _check_query(store, query, k)
    if index.dimension != store.dimension:
        raise RavenError("index and store dimensions differ")
    if not 1 <= nprobe <= index.nlist:
        raise RavenError(f"nprobe must be in [1, {index.nlist}], got {nprobe}")
    plists = index.rows_for(store)
    probed = probe_order(index, q)[:nprobe]
    rows = np.concatenate([plists[int(c)] for c in probed])
    return _rank(store, rows, _row_scores(store, rows, q), k)


def search_batch(
    store: EmbeddingStore,
    queries: np.ndarray,
    k: int = DEFAULT_TOP_K,
    index: Optional[IvfIndex] = None,
    nprobe: int = 1,
    threads: int = 1,
) -> list[list[ScoredHit]]:
    """Run many queries; output order follows input order regardless of ``threads``."""

    def one(q: np.ndarray) -> list[ScoredHit]:
        if index is None:
            return search_exact(store, q, k)
        return search_ivf(index, store, q, k, nprobe)

    # Populate lazy caches before fanning out to threads.
    if index is not None:
        index.rows_for(store)
    _ = store.matrix64, store.id_rank
    if threads <= 1:
        return [one(q) for q in queries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, queries))


def recall_at_k(found: Sequence[ScoredHit], truth: Sequence[ScoredHit]) -> float:
    if not truth:
        return 1.0
    want = {h.id for h in truth}
    return len(want & {h.id for h in found}) / len(want)


# -- persistence --------------------------------------------------------------


def write_ivf(index: IvfIndex, target: Union[str, Path, BinaryIO]) -> None:
    """Layout: b"RVIX" | version u32 | nlist u32 | d u32 | nlist*d f32 centroids |
    per list: count u64, then (id_len u16, id utf-8) * count."""
    if isinstance(target, (str, Path)):
        with open(target, "wb") as fh:
            write_ivf(index, fh)
        return
    target.write(_IVF_HEADER.pack(IVF_MAGIC, IVF_VERSION, index.nlist, index.dimension))
    target.write(np.asarray(index.centroids, dtype="<f4").tobytes())
    for plist in index.postings:
        target.write(_U64.pack(len(plist)))
        for id_ in plist:
            raw = id_.encode("utf-8")
            target.write(_U16.pack(len(raw)))
            target.write(raw)


def _take(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated index file")
    return data


def read_ivf(source: Union[str, Path, BinaryIO]) -> IvfIndex:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_ivf(fh)
    magic, version, nlist, dim = _IVF_HEADER.unpack(_take(source, _IVF_HEADER.size))
    if magic != IVF_MAGIC:
        raise FormatError("not an index file (bad magic)")
    if version != IVF_VERSION:
        raise FormatError(f"unsupported index version {version}")
    if nlist < 1 or dim < 1:
        raise FormatError("index header declares empty geometry")
    centroids = np.frombuffer(_take(source, 4 * nlist * dim), dtype="<f4").reshape(nlist, dim).copy()
    if not np.all(np.isfinite(centroids)):
        raise FormatError("non-finite centroid")
    postings: list[list[str]] = []
    seen: set[str] = set()
    for _ in range(nlist):
        (count,) = _U64.unpack(_take(source, 8))
        plist = []
        for _ in range(count):
            (n,) = _U16.unpack(_take(source, 2))
            id_ = _take(source, n).decode("utf-8")
            if id_ in seen:
                raise FormatError(f"id {id_!r} appears in more than one posting list")
            seen.add(id_)
            plist.append(id_)
        postings.append(plist)
    empty = [c for c, p in enumerate(postings) if not p]
    return IvfIndex(centroids, postings, dim, empty)

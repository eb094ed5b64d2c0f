"""Precomputed embedding storage.

Vectors arrive already encoded (the image/text encoder runs elsewhere). A store
holds them as a dense float32 matrix with a declared dimension, plus the id
order used for deterministic tie-breaking downstream.

Binary layout (little-endian)::

    b"RVEM" | version u32 | dimension u32 | count u64 | normalized u8
    count x ( id_len u16 | id utf-8 | dimension x f32 )

A JSONL form with one ``{"id": ..., "vector": [...]}`` object per line is also
accepted for small fixtures.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

import numpy as np

from .errors import FormatError, RavenError

MAGIC = b"RVEM"
FORMAT_VERSION = 1
DEFAULT_DIMENSION = 512
NORM_TOLERANCE = 1e-5

_HEADER = struct.Struct("<4sIIQB")
_ID_LEN = struct.Struct("<H")

PathOrStream = Union[str, Path, BinaryIO]


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.vector, other.vector)

    __hash__ = None  # type: ignore[assignment]


@dataclass
class EmbeddingStore:
    """Immutable id -> vector table with a fixed dimension.

    ``vectors`` is read-only once constructed; build new stores instead of
    mutating one that readers may share.
    """

    dimension: int
    ids: list[str]
    vectors: np.ndarray
    normalized: bool
    _row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.dimension <= 0:
            raise RavenError(f"dimension must be positive, got {self.dimension}")
        vectors = np.ascontiguousarray(self.vectors, dtype="<f4")
        if vectors.ndim != 2 or vectors.shape[1] != self.dimension:
            raise RavenError(
                f"vector matrix shape {vectors.shape} does not match dimension {self.dimension}"
            )
        if vectors.shape[0] != len(self.ids):
            raise RavenError("ids and vectors have different lengths")
        row: dict[str, int] = {}
        for i, id_ in enumerate(self.ids):
            if id_ in row:
                raise RavenError(f"duplicate id {id_!r}")
            row[id_] = i
        if not np.all(np.isfinite(vectors)):
            bad = int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])
            raise RavenError(f"non-finite component in record {self.ids[bad]!r}")
        if self.normalized and len(self.ids):
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0) > NORM_TOLERANCE
            if off.any():
                bad = int(np.flatnonzero(off)[0])
                raise RavenError(
                    f"store flagged normalized but record {self.ids[bad]!r} has norm {norms[bad]:.8f}"
                )
        vectors.setflags(write=False)
        self.vectors = vectors
        self.ids = list(self.ids)
        self._row = row

    @property
    def count(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, id_: object) -> bool:
        return id_ in self._row

    def row_of(self, id_: str) -> int:
        return self._row[id_]

    def vector(self, id_: str) -> np.ndarray:
        return self.vectors[self._row[id_]]

    def records(self) -> Iterator[EmbeddingRecord]:
        for id_, vec in zip(self.ids, self.vectors):
            yield EmbeddingRecord(id_, vec)

    @cached_property
    def matrix64(self) -> np.ndarray:
        """float64 copy of the vectors, used for scoring."""
        m = self.vectors.astype(np.float64)
        m.setflags(write=False)
        return m

    @cached_property
    def id_rank(self) -> np.ndarray:
        """Position of each row's id in ascending id order (tie-break key)."""
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[order] = np.arange(len(self.ids))
        return rank

    def normalized_copy(self) -> "EmbeddingStore":
        return EmbeddingStore(self.dimension, self.ids, normalize_rows(self.vectors, self.ids), True)


def normalize_rows(vectors: np.ndarray, ids: Optional[list[str]] = None) -> np.ndarray:
    """Scale each row to unit L2 norm. Zero rows are rejected."""
    v64 = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v64, axis=1)
    zero = norms == 0.0
    if zero.any():
        bad = int(np.flatnonzero(zero)[0])
        name = ids[bad] if ids is not None else str(bad)
        raise RavenError(f"zero vector cannot be normalized (id {name!r})")
    return (v64 / norms[:, None]).astype("<f4")


def build_store(
    records: Iterable[tuple[str, Iterable[float]]],
    dimension: int = DEFAULT_DIMENSION,
    normalize: bool = True,
) -> EmbeddingStore:
    """Validate ``(id, vector)`` pairs and assemble a store."""
    if dimension <= 0:
        raise RavenError(f"dimension must be positive, got {dimension}")
    ids: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for id_, vec in records:
        try:
            arr = np.asarray(vec if isinstance(vec, np.ndarray) else list(vec), dtype=np.float64)
        except (TypeError, ValueError):
            raise FormatError(f"vector of id {id_!r} is not a list of numbers") from None
        if arr.ndim != 1 or arr.shape[0] != dimension:
            raise RavenError(
                f"dimension mismatch for id {id_!r}: expected {dimension}, got {arr.size}"
            )
        if id_ in seen:
            raise RavenError(f"duplicate id {id_!r}")
        if not np.all(np.isfinite(arr)):
            raise RavenError(f"non-finite component in record {id_!r}")
        seen.add(id_)
        ids.append(id_)
        rows.append(arr)
    matrix = np.vstack(rows) if rows else np.zeros((0, dimension))
    if normalize and rows:
        vectors = normalize_rows(matrix, ids)
    else:
        vectors = matrix.astype("<f4")
    if not np.all(np.isfinite(vectors)):
        bad = int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])
        raise RavenError(f"component of record {ids[bad]!r} overflows float32")
    return EmbeddingStore(dimension, ids, vectors, normalize)


def lookup(store: EmbeddingStore, id_: str) -> Optional[EmbeddingRecord]:
    """Return the record for ``id_`` or ``None`` if it was never ingested."""
    if id_ not in store:
        return None
    return EmbeddingRecord(id_, store.vector(id_))


# -- reading ---------------------------------------------------------------


def _open(source: PathOrStream) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        return open(source, "rb"), True
    return source, False


def ingest(
    source: PathOrStream,
    normalize: bool = True,
    dimension: Optional[int] = None,
) -> EmbeddingStore:
    """Read a binary or JSONL embedding file into a validated store.

    For binary files the header declares the dimension; a ``dimension``
    argument, if given, must agree with it. JSONL files carry no header, so
    ``dimension`` falls back to :data:`DEFAULT_DIMENSION`.
    """
    stream, owned = _open(source)
    try:
        head = stream.read(4)
        if head == MAGIC:
            return _read_binary(stream, normalize, dimension)
        text = (head + stream.read()).decode("utf-8").splitlines()
        return build_store(_iter_jsonl(text), dimension or DEFAULT_DIMENSION, normalize)
    finally:
        if owned:
            stream.close()


def _iter_jsonl(text: Iterable[str]) -> Iterator[tuple[str, list[float]]]:
    for lineno, line in enumerate(text, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            id_, vec = obj["id"], obj["vector"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"line {lineno}: expected {{id, vector}} object ({exc})") from None
        if not isinstance(id_, str) or not isinstance(vec, list):
            raise FormatError(f"line {lineno}: id must be a string and vector an array")
        yield id_, vec


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated embedding file while reading {what}")
    return data


def _read_binary(
    stream: BinaryIO, normalize: bool, dimension: Optional[int]
) -> EmbeddingStore:
    rest = _read_exact(stream, _HEADER.size - 4, "header")
    _, version, dim, count, flag = _HEADER.unpack(MAGIC + rest)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported embedding format version {version}")
    if dim == 0:
        raise FormatError("declared dimension must be > 0")
    if dimension is not None and dimension != dim:
        raise RavenError(f"file declares dimension {dim}, caller expects {dimension}")
    row_bytes = 4 * dim
    ids: list[str] = []
    vectors = np.empty((count, dim), dtype="<f4")
    for i in range(count):
        (id_len,) = _ID_LEN.unpack(_read_exact(stream, 2, "id length"))
        id_ = _read_exact(stream, id_len, "id").decode("utf-8")
        vectors[i] = np.frombuffer(_read_exact(stream, row_bytes, f"vector of {id_!r}"), dtype="<f4")
        ids.append(id_)
    if stream.read(1):
        raise FormatError("trailing bytes after declared record count")
    seen: set[str] = set()
    for id_ in ids:
        if id_ in seen:
            raise RavenError(f"duplicate id {id_!r}")
        seen.add(id_)
    bad_rows = ~np.isfinite(vectors).all(axis=1)
    if bad_rows.any():
        raise RavenError(f"non-finite component in record {ids[int(np.flatnonzero(bad_rows)[0])]!r}")
    if normalize and count:
        vectors = normalize_rows(vectors, ids)
    return EmbeddingStore(dim, ids, vectors, bool(flag) or normalize)


# -- writing ---------------------------------------------------------------


def write_store(store: EmbeddingStore, target: PathOrStream) -> None:
    """Persist ``store`` in the binary format."""
    if isinstance(target, (str, Path)):
        with open(target, "wb") as fh:
            _write_binary(store, fh)
    else:
        _write_binary(store, target)


def _write_binary(store: EmbeddingStore, fh: BinaryIO) -> None:
    fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, store.dimension, store.count, int(store.normalized)))
    for id_, vec in zip(store.ids, store.vectors):
        raw = id_.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise RavenError(f"id too long for binary format: {id_[:40]!r}...")
        fh.write(_ID_LEN.pack(len(raw)))
        fh.write(raw)
        fh.write(np.asarray(vec, dtype="<f4").tobytes())


def write_jsonl(records: Iterable[tuple[str, Iterable[float]]], target: Union[str, Path]) -> None:
    with open(target, "w", encoding="utf-8") as fh:
        for id_, vec in records:
            fh.write(json.dumps({"id": id_, "vector": [float(x) for x in vec]}) + "\n")

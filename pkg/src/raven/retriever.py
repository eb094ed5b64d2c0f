"""Query-side retrieval pipeline.

search (exact or IVF) -> near-duplicate removal -> caption-corpus mapping ->
top-1 selection. Missing metadata or caption rows are ordinary values here;
nothing downstream of the search raises because a memory item is incomplete.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .embed_store import EmbeddingStore
from .errors import FormatError, RavenError
from .index import DEFAULT_TOP_K, IvfIndex, ScoredHit, search_exact, search_ivf

DEFAULT_DEDUP_THRESHOLD = 0.95

csv.field_size_limit(1 << 30)


@dataclass(frozen=True)
class MappedCaptions:
    top_caption: str
    all_captions: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "all_captions", tuple(self.all_captions))
        if not self.top_caption:
            raise RavenError("top_caption must be non-empty")
        if not self.all_captions or self.all_captions[0] != self.top_caption:
            raise RavenError("all_captions must start with top_caption")

    @classmethod
    def from_captions(cls, captions: Sequence[str]) -> "MappedCaptions":
        return cls(captions[0], tuple(captions))


@dataclass(frozen=True)
class MemoryEntry:
    id: str
    image_ref: str = ""
    alt_text: str = ""
    mapped: Optional[MappedCaptions] = None


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    hits: tuple[tuple[MemoryEntry, float], ...]
    top1: Optional[MemoryEntry] = None

    @property
    def status(self) -> str:
        """``full`` when a top-1 (image + captions) exists, ``captions_only``
        when some hit has captions but no usable image, else ``missing``."""
        if self.top1 is not None:
            return "full"
        if self.caption_source is not None:
            return "captions_only"
        return "missing"

    @property
    def caption_source(self) -> Optional[MemoryEntry]:
        """Entry whose text feeds augmentation: top-1, else the best captioned hit."""
        if self.top1 is not None:
            return self.top1
        for entry, _ in self.hits:
            if entry.mapped is not None:
                return entry
        return None

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "hits": [
                {
                    "id": e.id,
                    "score": s,
                    "image_ref": e.image_ref,
                    "alt_text": e.alt_text,
                    "mapped": None
                    if e.mapped is None
                    else {"top_caption": e.mapped.top_caption, "all_captions": list(e.mapped.all_captions)},
                }
                for e, s in self.hits
            ],
            "top1": None if self.top1 is None else self.top1.id,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "RetrievalResult":
        try:
            hits = []
            by_id = {}
            for h in obj["hits"]:
                m = h.get("mapped")
                mapped = None if m is None else MappedCaptions(m["top_caption"], tuple(m["all_captions"]))
                entry = MemoryEntry(h["id"], h.get("image_ref", ""), h.get("alt_text", ""), mapped)
                by_id[entry.id] = entry
                hits.append((entry, float(h["score"])))
            top = obj.get("top1")
            return cls(str(obj["query_id"]), tuple(hits), None if top is None else by_id[top])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed retrieval record: {exc!r}") from None


# -- operations -------------------------------------------------------------


def fuse_query(
    image_vec: Sequence[float],
    text_vec: Optional[Sequence[float]] = None,
    normalized: bool = True,
) -> np.ndarray:
    """Unweighted mean of an image and a text embedding.

    With no text vector the image vector is returned unchanged. The mean is
    re-normalized to unit length when the target store is normalized.
    """
    v = np.asarray(image_vec, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise RavenError("non-finite component in image vector")
    if text_vec is None:
        return v
    w = np.asarray(text_vec, dtype=np.float64)
    if w.shape != v.shape:
        raise RavenError(f"dimension mismatch: image {v.shape} vs text {w.shape}")
    if not np.all(np.isfinite(w)):
        raise RavenError("non-finite component in text vector")
    fused = (v + w) / 2.0
    if normalized:
        norm = np.linalg.norm(fused)
        if norm == 0.0:
            raise RavenError("fused query is the zero vector")
        fused = fused / norm
    return fused


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    # sqrt(aa * bb) rather than |a||b|: identical inputs give exactly 1.0.
    return float(np.dot(a, b) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b))))


def dedup(hits: Sequence[ScoredHit], store: EmbeddingStore, threshold: float = DEFAULT_DEDUP_THRESHOLD) -> list[ScoredHit]:
    """Greedy near-duplicate removal in rank order.

    A hit is dropped when its cosine similarity to any already kept hit is
    ``>= threshold``; survivors keep their relative order.
    """
    if not 0.0 < threshold <= 1.0:
        raise RavenError(f"threshold must be in (0, 1], got {threshold}")
    if not store.normalized:
        raise RavenError("dedup requires a normalized store (threshold is a cosine)")
    kept: list[ScoredHit] = []
    kept_vecs: list[np.ndarray] = []
    for hit in hits:
        vec = store.matrix64[store.row_of(hit.id)]
        if any(_cosine(vec, other) >= threshold for other in kept_vecs):
            continue
        kept.append(hit)
        kept_vecs.append(vec)
    return kept


def map_to_corpus(ids: Iterable[str], corpus: Mapping[str, MappedCaptions]) -> list[Optional[MappedCaptions]]:
    return [corpus.get(id_) for id_ in ids]


def has_image(entry: MemoryEntry) -> bool:
    return bool(entry.image_ref)


# -- tables -------------------------------------------------------------------


def _read_tsv(path: Union[str, Path], required: Sequence[str]) -> Iterable[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        yield from reader


def load_caption_corpus(path: Union[str, Path]) -> dict[str, MappedCaptions]:
    """Read the ``id, top_caption, all_captions`` TSV (all_captions is a JSON array)."""
    corpus: dict[str, MappedCaptions] = {}
    for lineno, row in enumerate(_read_tsv(path, ("id", "top_caption", "all_captions")), 2):
        try:
            captions = json.loads(row["all_captions"])
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: all_captions is not JSON ({exc})") from None
        if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
            raise FormatError(f"{path}:{lineno}: all_captions must be a JSON array of strings")
        top = row["top_caption"]
        if not top:
            continue  # an uncaptioned row is the same as no row
        if not captions or captions[0] != top:
            captions = [top] + [c for c in captions if c != top]
        corpus[row["id"]] = MappedCaptions(top, tuple(captions))
    return corpus


def load_memory_metadata(path: Union[str, Path]) -> dict[str, tuple[str, str]]:
    """Read the ``id, image_ref, alt_text`` TSV into ``{id: (image_ref, alt_text)}``."""
    return {
        row["id"]: (row["image_ref"] or "", row["alt_text"] or "")
        for row in _read_tsv(path, ("id", "image_ref", "alt_text"))
    }


def write_caption_corpus(corpus: Mapping[str, MappedCaptions], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "top_caption", "all_captions"])
        for id_, m in corpus.items():
            w.writerow([id_, m.top_caption, json.dumps(list(m.all_captions), ensure_ascii=False)])


def write_memory_metadata(meta: Mapping[str, tuple[str, str]], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "image_ref", "alt_text"])
        for id_, (ref, alt) in meta.items():
            w.writerow([id_, ref, alt])


# -- pipeline -----------------------------------------------------------------


@dataclass
class RetrievalConfig:
    backend: str = "exact"
    top_k: int = DEFAULT_TOP_K
    nprobe: int = 1
    dedup_threshold: float = DEFAULT_DEDUP_THRESHOLD

    def __post_init__(self) -> None:
        if self.backend not in ("exact", "ivf"):
            raise RavenError(f"unknown backend {self.backend!r}")
        if self.top_k < 1:
            raise RavenError("top_k must be >= 1")
        if self.nprobe < 1:
            raise RavenError("nprobe must be >= 1")
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise RavenError("dedup_threshold must be in (0, 1]")


@dataclass
class Retriever:
    """Bundles the memory side (store, optional IVF index, metadata, caption
    corpus) so queries only need a vector."""

    store: EmbeddingStore
    metadata: Mapping[str, tuple[str, str]] = field(default_factory=dict)
    corpus: Mapping[str, MappedCaptions] = field(default_factory=dict)
    index: Optional[IvfIndex] = None
    config: RetrievalConfig = field(default_factory=RetrievalConfig)
    image_checker: Callable[[MemoryEntry], bool] = has_image

    def search(self, query: Sequence[float], k: int) -> list[ScoredHit]:
        if self.config.backend == "ivf":
            if self.index is None:
                raise RavenError("ivf backend selected but no index loaded")
            return search_ivf(self.index, self.store, query, k, self.config.nprobe)
        return search_exact(self.store, query, k)

    def entry(self, id_: str, mapped: Optional[MappedCaptions]) -> MemoryEntry:
        image_ref, alt_text = self.metadata.get(id_, ("", ""))
        return MemoryEntry(id_, image_ref, alt_text, mapped)

    def retrieve(self, query: Sequence[float], k: Optional[int] = None, query_id: str = "") -> RetrievalResult:
        k = self.config.top_k if k is None else k
        raw = self.search(query, k)
        kept = dedup(raw, self.store, self.config.dedup_threshold)
        mapped = map_to_corpus((h.id for h in kept), self.corpus)
        hits = tuple((self.entry(h.id, m), h.score) for h, m in zip(kept, mapped))
        top1 = next((e for e, _ in hits if e.mapped is not None and self.image_checker(e)), None)
        return RetrievalResult(query_id, hits, top1)


def retrieve(
    query: Sequence[float],
    k: int,
    config: RetrievalConfig,
    store: EmbeddingStore,
    metadata: Optional[Mapping[str, tuple[str, str]]] = None,
    corpus: Optional[Mapping[str, MappedCaptions]] = None,
    index: Optional[IvfIndex] = None,
    query_id: str = "",
) -> RetrievalResult:
    """Functional form of :meth:`Retriever.retrieve`."""
    r = Retriever(store, metadata or {}, corpus or {}, index, config)
    return r.retrieve(query, k, query_id)


def write_retrievals(results: Iterable[RetrievalResult], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_retrievals(path: Union[str, Path]) -> dict[str, RetrievalResult]:
    out: dict[str, RetrievalResult] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            r = RetrievalResult.from_dict(obj)
            out[r.query_id] = r
    return out

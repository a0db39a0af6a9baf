"""Rank chunks for a query with an exact cosine index and an Okapi BM25
index, then fuse the two rankings with weighted reciprocal-rank fusion.

Exact brute-force search stands in for an approximate vector store: at the
scale of a crawled website corpus it is fast, and it removes approximate-
recall nondeterminism from every downstream measurement.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ragmark.chunk import Chunk, read_chunks, tokenize, write_chunks
from ragmark.embed import EmbeddingVector, read_vector_record, write_vector_record

DEFAULT_K1 = 1.5
DEFAULT_B = 0.75
DEFAULT_RRF_C = 60.0

SOURCE_BM25 = "bm25"
SOURCE_VECTOR = "vector"
SOURCE_FUSED = "fused"


def bm25_terms(text: str) -> list[str]:
    """Lowercased word tokens with pure-punctuation tokens dropped."""
    return [t for t in tokenize(text.lower()) if any(c.isalnum() for c in t)]


@dataclass(frozen=True)
class RankedList:
    items: tuple[tuple[str, float], ...]
    source: str

    def __post_init__(self) -> None:
        ids = [cid for cid, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate chunk_id in ranked list")
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("scores must be non-increasing")

    def ids(self) -> list[str]:
        return [cid for cid, _ in self.items]


def _ranked(pairs: Iterable[tuple[str, float]], source: str) -> RankedList:
    ordered = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return RankedList(items=tuple(ordered), source=source)


class Bm25Index:
    """Inverted index with Okapi BM25 scoring state."""

    def __init__(
        self,
        postings: dict[str, list[tuple[str, int]]],
        doc_lengths: dict[str, int],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ) -> None:
        if not doc_lengths:
            raise ValueError("index must cover at least one chunk")
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.doc_count = len(doc_lengths)
        self.avg_doc_length = sum(doc_lengths.values()) / self.doc_count
        self.k1 = k1
        self.b = b

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))


def bm25_build(chunks: Sequence[Chunk], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> Bm25Index:
    if not chunks:
        raise ValueError("cannot build a BM25 index over zero chunks")
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for chunk in chunks:
        if chunk.chunk_id in doc_lengths:
            raise ValueError(f"duplicate chunk_id: {chunk.chunk_id}")
        terms = bm25_terms(chunk.text)
        doc_lengths[chunk.chunk_id] = len(terms)
        for term, tf in sorted(Counter(terms).items()):
            postings.setdefault(term, []).append((chunk.chunk_id, tf))
    return Bm25Index(postings=postings, doc_lengths=doc_lengths, k1=k1, b=b)


def bm25_score(index: Bm25Index, query: str, k: int) -> RankedList:
    """Top-k chunks by Okapi BM25, positive scores only, ties broken by
    ascending chunk_id. Duplicate query terms count once.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[str, float] = {}
    for term in dict.fromkeys(bm25_terms(query)):
        idf = index.idf(term)
        if idf == 0.0:
            continue
        for chunk_id, tf in index.postings[term]:
            length_norm = index.k1 * (
                1.0 - index.b + index.b * index.doc_lengths[chunk_id] / index.avg_doc_length
            )
            scores[chunk_id] = scores.get(chunk_id, 0.0) + idf * tf * (index.k1 + 1.0) / (
                tf + length_norm
            )
    positive = [(cid, s) for cid, s in scores.items() if s > 0.0]
    return RankedList(items=_ranked(positive, SOURCE_BM25).items[:k], source=SOURCE_BM25)


class VectorIndex:
    """Exact cosine search over a dense matrix of unit vectors."""

    def __init__(self, chunk_ids: list[str], matrix: np.ndarray) -> None:
        if len(chunk_ids) != matrix.shape[0]:
            raise ValueError("one row per chunk_id required")
        if len(set(chunk_ids)) != len(chunk_ids):
            raise ValueError("chunk_ids must be unique")
        self.chunk_ids = chunk_ids
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("zero vector in index")
        self.matrix = (matrix / norms).astype(np.float64)
        self.dim = matrix.shape[1]

    @classmethod
    def build(cls, entries: Sequence[tuple[str, EmbeddingVector]]) -> "VectorIndex":
        if not entries:
            raise ValueError("cannot build a vector index over zero entries")
        dims = {vec.dim for _, vec in entries}
        if len(dims) != 1:
            raise ValueError(f"mixed vector dimensions: {sorted(dims)}")
        matrix = np.array([vec.values for _, vec in entries], dtype=np.float64)
        return cls([cid for cid, _ in entries], matrix)


def vector_search(index: VectorIndex, query_vec: EmbeddingVector, k: int) -> RankedList:
    """Exact top-k by cosine similarity with deterministic tie-breaks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if query_vec.dim != index.dim:
        raise ValueError(f"query dim {query_vec.dim} does not match index dim {index.dim}")
    q = query_vec.as_array()
    qnorm = float(np.linalg.norm(q))
    if qnorm == 0.0:
        raise ValueError("cannot search with a zero query vector")
    scores = index.matrix @ (q / qnorm)
    pairs = [(cid, float(s)) for cid, s in zip(index.chunk_ids, scores)]
    return RankedList(items=_ranked(pairs, SOURCE_VECTOR).items[:k], source=SOURCE_VECTOR)


def fuse(
    a: RankedList,
    b: RankedList,
    weight_a: float = 0.5,
    weight_b: float = 0.5,
    rrf_c: float = DEFAULT_RRF_C,
) -> RankedList:
    """Weighted reciprocal-rank fusion.

    Each chunk scores weight/(rrf_c + rank) per list it appears in, with
    1-based ranks; an absent chunk contributes nothing from that list.
    """
    if weight_a < 0 or weight_b < 0 or weight_a + weight_b <= 0:
        raise ValueError("weights must be non-negative and sum to a positive value")
    if rrf_c <= 0:
        raise ValueError("rrf_c must be positive")
    scores: dict[str, float] = {}
    for ranked, weight in ((a, weight_a), (b, weight_b)):
        if weight == 0:
            continue
        for rank, (chunk_id, _) in enumerate(ranked.items, start=1):
            scores[chunk_id] = scores.get(chunk_id, 0.0) + weight / (rrf_c + rank)
    return _ranked(scores.items(), SOURCE_FUSED)


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    k: int
    fused: RankedList
    bm25: RankedList
    vector: RankedList
    context_text: str
    chunk_texts: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "k": self.k,
            "fused": [list(item) for item in self.fused.items],
            "bm25": [list(item) for item in self.bm25.items],
            "vector": [list(item) for item in self.vector.items],
            "context_text": self.context_text,
            "chunk_texts": list(self.chunk_texts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievalResult":
        def ranked(source: str, items) -> RankedList:
            return RankedList(items=tuple((cid, float(s)) for cid, s in items), source=source)

        return cls(
            query=data["query"],
            k=data["k"],
            fused=ranked(SOURCE_FUSED, data["fused"]),
            bm25=ranked(SOURCE_BM25, data["bm25"]),
            vector=ranked(SOURCE_VECTOR, data["vector"]),
            context_text=data["context_text"],
            chunk_texts=tuple(data.get("chunk_texts", ())),
        )


def assemble_result(
    query: str,
    k: int,
    bm25_list: RankedList,
    vector_list: RankedList,
    chunk_texts: Mapping[str, str],
    weight_bm25: float = 0.5,
    weight_vector: float = 0.5,
    rrf_c: float = DEFAULT_RRF_C,
) -> RetrievalResult:
    fused_full = fuse(bm25_list, vector_list, weight_bm25, weight_vector, rrf_c)
    fused = RankedList(items=fused_full.items[:k], source=SOURCE_FUSED)
    texts = tuple(chunk_texts[cid] for cid, _ in fused.items)
    return RetrievalResult(
        query=query,
        k=k,
        fused=fused,
        bm25=bm25_list,
        vector=vector_list,
        context_text="\n\n".join(texts),
        chunk_texts=texts,
    )


class HybridRetriever:
    """Equal-weight ensemble of BM25 and exact cosine retrieval."""

    def __init__(
        self,
        bm25_index: Bm25Index,
        vector_index: VectorIndex,
        chunk_texts: Mapping[str, str],
        embed_query: Callable[[str], EmbeddingVector],
        weight_bm25: float = 0.5,
        weight_vector: float = 0.5,
        rrf_c: float = DEFAULT_RRF_C,
        bm25_k: int | None = None,
        query_prefix: str = "",
    ) -> None:
        self.bm25_index = bm25_index
        self.vector_index = vector_index
        self.chunk_texts = chunk_texts
        self.embed_query = embed_query
        self.weight_bm25 = weight_bm25
        self.weight_vector = weight_vector
        self.rrf_c = rrf_c
        self.bm25_k = bm25_k
        self.query_prefix = query_prefix

    def retrieve(self, query: str, k: int) -> RetrievalResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        bm25_list = bm25_score(self.bm25_index, query, self.bm25_k or k)
        query_vec = self.embed_query(self.query_prefix + query)
        vector_list = vector_search(self.vector_index, query_vec, k)
        return assemble_result(
            query,
            k,
            bm25_list,
            vector_list,
            self.chunk_texts,
            self.weight_bm25,
            self.weight_vector,
            self.rrf_c,
        )


VECTORS_FILE = "vectors.bin"
VECTOR_IDS_FILE = "vectors.ids"
BM25_FILE = "bm25.tsv"
CHUNKS_FILE = "chunks.jsonl"
META_FILE = "meta.json"


def write_vectors_file(path: str | Path, entries: Sequence[tuple[str, EmbeddingVector]]) -> None:
    """Self-contained vector file: length-prefixed chunk_id, then a binary
    vector record per entry.
    """
    with open(path, "wb") as fh:
        for chunk_id, vec in entries:
            encoded = chunk_id.encode("utf-8")
            fh.write(len(encoded).to_bytes(2, "little"))
            fh.write(encoded)
            write_vector_record(fh, vec.values)


def read_vectors_file(path: str | Path, provider_id: str = "stored") -> list[tuple[str, EmbeddingVector]]:
    entries = []
    with open(path, "rb") as fh:
        while True:
            prefix = fh.read(2)
            if not prefix:
                break
            id_len = int.from_bytes(prefix, "little")
            chunk_id = fh.read(id_len).decode("utf-8")
            values = read_vector_record(fh)
            if values is None:
                raise ValueError(f"truncated vector file: {path}")
            entries.append(
                (chunk_id, EmbeddingVector(values=tuple(values), dim=len(values), provider_id=provider_id))
            )
    return entries


def save_index(
    out_dir: str | Path,
    chunks: Sequence[Chunk],
    vectors: Sequence[tuple[str, EmbeddingVector]],
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
    meta: dict | None = None,
) -> None:
    """Persist an index directory: binary vector table with an id sidecar,
    BM25 postings as sorted ``term<TAB>chunk_id<TAB>tf`` lines, the chunk
    set, and provider metadata.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = bm25_build(chunks, k1=k1, b=b)
    with open(out / BM25_FILE, "w", encoding="utf-8") as fh:
        for term in sorted(index.postings):
            for chunk_id, tf in sorted(index.postings[term]):
                fh.write(f"{term}\t{chunk_id}\t{tf}\n")
    with open(out / VECTORS_FILE, "wb") as fh:
        for _, vec in vectors:
            write_vector_record(fh, vec.values)
    (out / VECTOR_IDS_FILE).write_text(
        "".join(f"{cid}\n" for cid, _ in vectors), encoding="utf-8"
    )
    write_chunks(chunks, out / CHUNKS_FILE)
    payload = {
        "k1": k1,
        "b": b,
        "doc_count": index.doc_count,
        "doc_lengths": index.doc_lengths,
        "dim": vectors[0][1].dim if vectors else 0,
        "provider_id": vectors[0][1].provider_id if vectors else "",
    }
    payload.update(meta or {})
    (out / META_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


@dataclass
class LoadedIndex:
    chunks: list[Chunk]
    bm25: Bm25Index
    vectors: VectorIndex
    meta: dict = field(default_factory=dict)

    def chunk_text_map(self) -> dict[str, str]:
        return {c.chunk_id: c.text for c in self.chunks}


def load_index(index_dir: str | Path) -> LoadedIndex:
    root = Path(index_dir)
    meta = json.loads((root / META_FILE).read_text(encoding="utf-8"))
    chunks = read_chunks(root / CHUNKS_FILE)

    postings: dict[str, list[tuple[str, int]]] = {}
    with open(root / BM25_FILE, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            term, chunk_id, tf = line.split("\t")
            postings.setdefault(term, []).append((chunk_id, int(tf)))
    doc_lengths = {cid: int(n) for cid, n in meta["doc_lengths"].items()}
    bm25 = Bm25Index(postings=postings, doc_lengths=doc_lengths, k1=meta["k1"], b=meta["b"])

    ids = (root / VECTOR_IDS_FILE).read_text(encoding="utf-8").splitlines()
    rows = []
    with open(root / VECTORS_FILE, "rb") as fh:
        while True:
            values = read_vector_record(fh)
            if values is None:
                break
            rows.append(values)
    if len(rows) != len(ids):
        raise ValueError(f"vector table has {len(rows)} records for {len(ids)} ids")
    vectors = VectorIndex(ids, np.array(rows, dtype=np.float64))
    return LoadedIndex(chunks=chunks, bm25=bm25, vectors=vectors, meta=meta)

"""Vector representations of texts: pluggable providers, a content-addressed
on-disk cache, and the cosine arithmetic used throughout scoring.

All vectors are L2-normalized at ingestion so the inner product of stored
vectors equals their cosine similarity.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from ragmark.chunk import tokenize

EMBED_API_KEY_ENV = "RAGMARK_EMBED_API_KEY"

KIND_HTTP = "http_api"
KIND_DETERMINISTIC = "deterministic_test"

# Small enough for fast property tests, large enough that random bucket
# collisions are rare.
DEFAULT_TEST_DIM = 256


class EmbeddingError(RuntimeError):
    """Provider failure or contract violation while embedding."""


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int
    provider_id: str

    def __post_init__(self) -> None:
        if len(self.values) != self.dim:
            raise ValueError(f"expected {self.dim} values, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("vector contains non-finite values")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class EmbeddingProviderSpec:
    kind: str
    model_name: str
    dim: int
    endpoint: str = ""
    seed: int = 0
    query_prefix: str = ""

    def __post_init__(self) -> None:
        if self.kind not in (KIND_HTTP, KIND_DETERMINISTIC):
            raise ValueError(f"unknown provider kind: {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.kind == KIND_HTTP and not self.endpoint:
            raise ValueError("http_api provider requires an endpoint")


def _normalize(values: Sequence[float], provider_id: str, dim: int) -> EmbeddingVector:
    arr = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        arr = np.zeros(dim)
        arr[0] = 1.0
    else:
        arr = arr / norm
    # float32 is the storage precision; rounding here keeps returned values
    # bit-identical to what the cache will hand back later.
    arr32 = arr.astype(np.float32)
    return EmbeddingVector(values=tuple(float(v) for v in arr32), dim=dim, provider_id=provider_id)


def deterministic_embed(text: str, dim: int = DEFAULT_TEST_DIM, seed: int = 0) -> EmbeddingVector:
    """Hashed bag-of-words embedding for offline runs.

    Each lowercased token is hashed into a bucket with a +/-1 contribution;
    the count vector is L2-normalized. Identical texts give identical
    vectors and token order does not matter. An empty token list yields the
    unit vector on axis 0 (documented sentinel, also used if signed counts
    cancel to zero).
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    provider_id = f"det-d{dim}-s{seed}"
    key = seed.to_bytes(8, "little", signed=True)
    counts = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text.lower()):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=16, key=key).digest()
        bucket = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] & 1 else -1.0
        counts[bucket] += sign
    return _normalize(counts, provider_id, dim)


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Cosine of the angle between two non-zero vectors, clamped to [-1, 1]."""
    if u.dim != v.dim:
        raise ValueError(f"dimension mismatch: {u.dim} vs {v.dim}")
    ua, va = u.as_array(), v.as_array()
    nu, nv = float(np.linalg.norm(ua)), float(np.linalg.norm(va))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine is undefined for zero vectors")
    if u.values == v.values:
        return 1.0  # identity is exact; division would round it below 1
    return max(-1.0, min(1.0, float(np.dot(ua, va)) / (nu * nv)))


class EmbeddingProvider(Protocol):
    provider_id: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]: ...


class DeterministicProvider:
    """Offline provider backed by deterministic_embed."""

    def __init__(self, dim: int = DEFAULT_TEST_DIM, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed
        self.provider_id = f"det-d{dim}-s{seed}"

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        return [list(deterministic_embed(t, self.dim, self.seed).values) for t in texts]


class HttpEmbeddingProvider:
    """Client for an HTTP embedding endpoint.

    Request: JSON with the model name and the list of input strings.
    Response: one vector per input, in the same order, under
    ``data[i].embedding``.
    """

    def __init__(
        self,
        spec: EmbeddingProviderSpec,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff_base: float = 1.0,
        session: requests.Session | None = None,
    ) -> None:
        if spec.kind != KIND_HTTP:
            raise ValueError("HttpEmbeddingProvider requires an http_api spec")
        self.spec = spec
        self.dim = spec.dim
        self.provider_id = spec.model_name
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_API_KEY_ENV)
        self.timeout = timeout
        self.retries = retries
        self.backoff_base = backoff_base
        self.session = session or requests.Session()

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.spec.model_name, "input": list(texts)}
        delay = self.backoff_base
        last_error = "unknown error"
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(
                    self.spec.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if resp.status_code // 100 == 2:
                    data = resp.json()["data"]
                    if len(data) != len(texts):
                        raise EmbeddingError(
                            f"provider returned {len(data)} vectors for {len(texts)} inputs"
                        )
                    return [item["embedding"] for item in data]
                last_error = f"status {resp.status_code}: {resp.text[:200]}"
                if resp.status_code // 100 == 4:
                    break
            if attempt < self.retries:
                time.sleep(delay)
                delay *= 2
        raise EmbeddingError(f"embedding request failed: {last_error}")


def build_provider(spec: EmbeddingProviderSpec, **http_kwargs) -> EmbeddingProvider:
    if spec.kind == KIND_DETERMINISTIC:
        return DeterministicProvider(dim=spec.dim, seed=spec.seed)
    return HttpEmbeddingProvider(spec, **http_kwargs)


_RECORD_HEADER = struct.Struct("<I")


def write_vector_record(fh, values: Sequence[float]) -> None:
    arr = np.asarray(values, dtype="<f4")
    fh.write(_RECORD_HEADER.pack(len(arr)))
    fh.write(arr.tobytes())


def read_vector_record(fh) -> list[float] | None:
    header = fh.read(_RECORD_HEADER.size)
    if not header:
        return None
    if len(header) < _RECORD_HEADER.size:
        raise EmbeddingError("truncated vector record header")
    (dim,) = _RECORD_HEADER.unpack(header)
    payload = fh.read(dim * 4)
    if len(payload) < dim * 4:
        raise EmbeddingError("truncated vector record payload")
    return [float(v) for v in np.frombuffer(payload, dtype="<f4")]


def _safe_component(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


class EmbeddingCache:
    """Content-addressed file cache: one binary record per (provider, text).

    Writes go through a temp file and an atomic rename, so concurrent
    writers of the same key are idempotent and distinct keys never clash.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, provider_id: str, text: str) -> Path:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return self.root / _safe_component(provider_id) / f"{digest}.vec"

    def get(self, provider_id: str, text: str) -> list[float] | None:
        path = self._path(provider_id, text)
        if not path.is_file():
            return None
        with open(path, "rb") as fh:
            return read_vector_record(fh)

    def put(self, provider_id: str, text: str, values: Sequence[float]) -> None:
        path = self._path(provider_id, text)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                write_vector_record(fh, values)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise


def embed_texts(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    cache: EmbeddingCache | None = None,
    batch_size: int = 64,
) -> list[EmbeddingVector]:
    """Embed texts in input order, serving cache hits without touching the
    provider and normalizing/caching fresh vectors.
    """
    if not texts:
        raise ValueError("texts must be non-empty")
    results: list[EmbeddingVector | None] = [None] * len(texts)
    misses: dict[str, list[int]] = {}
    for i, text in enumerate(texts):
        cached = cache.get(provider.provider_id, text) if cache is not None else None
        if cached is not None:
            if len(cached) != provider.dim:
                raise EmbeddingError(
                    f"cached vector has dim {len(cached)}, provider expects {provider.dim}"
                )
            results[i] = EmbeddingVector(
                values=tuple(cached), dim=provider.dim, provider_id=provider.provider_id
            )
        else:
            misses.setdefault(text, []).append(i)

    miss_texts = list(misses)
    for start in range(0, len(miss_texts), batch_size):
        batch = miss_texts[start : start + batch_size]
        try:
            raw_vectors = provider.embed_batch(batch)
        except EmbeddingError as exc:
            raise EmbeddingError(
                f"batch starting at miss {start} ({len(batch)} texts) failed: {exc}"
            ) from exc
        for text, raw in zip(batch, raw_vectors):
            if len(raw) != provider.dim:
                raise EmbeddingError(
                    f"provider returned dim {len(raw)}, expected {provider.dim}"
                )
            vector = _normalize(raw, provider.provider_id, provider.dim)
            if cache is not None:
                cache.put(provider.provider_id, text, vector.values)
            for i in misses[text]:
                results[i] = vector
    assert all(r is not None for r in results)
    return results  # type: ignore[return-value]

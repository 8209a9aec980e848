"""Embedding store and exact cosine nearest-neighbor retrieval.

Retrieval is a full scan plus sort: the pools this pipeline deals with are a
few thousand vectors at most, so exactness is cheap and reproducible.  Ties
break by ascending id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import MarginSelError
from .llm_client import BackendConfig, HttpBackend


class DimensionMismatch(MarginSelError):
    def __init__(self, entry_id: str):
        self.entry_id = entry_id
        super().__init__(f"vector for {entry_id!r} has a different dimension")


class EmbeddingParseError(MarginSelError):
    pass


class ZeroNorm(MarginSelError):
    pass


class UnknownId(MarginSelError):
    def __init__(self, entry_id: str):
        self.entry_id = entry_id
        super().__init__(f"no embedding stored for id {entry_id!r}")


@dataclass(frozen=True)
class EmbeddingStore:
    dimension: int
    vectors: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self.vectors

    def get(self, entry_id: str) -> np.ndarray:
        try:
            return self.vectors[entry_id]
        except KeyError:
            raise UnknownId(entry_id) from None


def build_store(items: Iterable[tuple[str, Sequence[float]]]) -> EmbeddingStore:
    vectors: dict[str, np.ndarray] = {}
    dimension = -1
    for entry_id, raw in items:
        vec = np.asarray(raw, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise EmbeddingParseError(f"vector for {entry_id!r} is not a flat array")
        if not np.all(np.isfinite(vec)):
            raise EmbeddingParseError(f"vector for {entry_id!r} has NaN/Inf entries")
        if dimension < 0:
            dimension = vec.size
        elif vec.size != dimension:
            raise DimensionMismatch(entry_id)
        if entry_id in vectors:
            raise EmbeddingParseError(f"duplicate embedding id {entry_id!r}")
        vectors[entry_id] = vec
    return EmbeddingStore(dimension=dimension, vectors=vectors)


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Load a JSON-lines embedding file with fields ``id`` and ``vector``.
    Lines starting with '#' and blank lines are skipped."""

    def records():
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip() or line.startswith("#"):
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise EmbeddingParseError(f"line {line_no}: invalid JSON: {exc.msg}")
                if not isinstance(record, dict) or "id" not in record or "vector" not in record:
                    raise EmbeddingParseError(f"line {line_no}: need 'id' and 'vector' fields")
                if not isinstance(record["vector"], list) or not all(
                    isinstance(x, (int, float)) for x in record["vector"]
                ):
                    raise EmbeddingParseError(f"line {line_no}: vector is not numeric")
                yield record["id"], record["vector"]

    return build_store(records())


def fetch_embeddings(
    config: BackendConfig, items: Sequence[tuple[str, str]]
) -> EmbeddingStore:
    """Fetch embeddings for (id, text) pairs from an HTTP embedding endpoint."""
    backend = HttpBackend(config)
    return build_store((entry_id, backend.embed(text)) for entry_id, text in items)


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionMismatch("<pair>")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine undefined for a zero vector")
    return float(np.dot(va, vb) / (na * nb))


def knn_retrieve(
    store: EmbeddingStore,
    query_id: str,
    k: int,
    candidate_ids: Sequence[str],
    exclude_ids: Iterable[str] = (),
) -> list[str]:
    """The k candidates most cosine-similar to the query, descending, ties by
    ascending id.  The query itself and excluded ids never appear; fewer than
    k come back only when the pool runs out."""
    if k < 0:
        raise ValueError("k must be >= 0")
    query = store.get(query_id)
    excluded = set(exclude_ids) | {query_id}
    scored = []
    for cid in candidate_ids:
        if cid in excluded:
            continue
        scored.append((-cosine(store.get(cid), query), cid))
    scored.sort()
    return [cid for _, cid in scored[:k]]

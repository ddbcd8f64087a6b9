"""Exact dense retrieval over the experience pool.

Entries are embedded from their action keys into unit vectors held in a
flat matrix; queries run an exact inner-product scan (equivalent to cosine
similarity after normalization) and take the top K with ties broken by
insertion order. Pool sizes here are small enough that exact search is
free, and it makes every ranking reproducible and testable.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatchError
from .experience import ExperienceEntry, ExperiencePool
from .gateway import embed, render_hint_pairs
from .transcript import text_digest

logger = logging.getLogger(__name__)

DEFAULT_K = 8

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RetrievedHint:
    entry: ExperienceEntry
    similarity: float
    rank: int


@dataclass
class VectorIndex:
    """Immutable flat index: one unit vector per pool entry, same order."""

    dimension: int
    keys: list[str]
    matrix: np.ndarray
    entries: list[ExperienceEntry]

    def __post_init__(self):
        if len(self.keys) != len(self.entries) or len(self.keys) != self.matrix.shape[0]:
            raise ValueError("keys, entries, and matrix rows must align")
        if len(set(self.keys)) != len(self.keys):
            raise ValueError("index keys must be unique")
        if self.matrix.size and self.matrix.shape[1] != self.dimension:
            raise DimensionMismatchError(
                f"matrix width {self.matrix.shape[1]} != dimension {self.dimension}"
            )
        norms = np.linalg.norm(self.matrix, axis=1) if self.matrix.size else np.array([])
        if norms.size and np.max(np.abs(norms - 1.0)) > NORM_TOLERANCE:
            raise ValueError("index vectors must be unit-normalized")

    def __len__(self) -> int:
        return len(self.keys)

    def matrix_digest(self) -> str:
        return text_digest(self.matrix.astype(np.float64).tobytes().hex())


def index_build(pool: ExperiencePool, embed_fn: Callable[[str], np.ndarray]) -> VectorIndex:
    """Embed every entry's action key; failures skip the entry with a warning."""
    if len(pool) == 0:
        raise ValueError("cannot build an index over an empty pool")
    keys: list[str] = []
    rows: list[np.ndarray] = []
    entries: list[ExperienceEntry] = []
    dimension: Optional[int] = None
    for entry in pool.entries:
        if not entry.action_key.strip():
            raise ValueError("entry with empty action_key cannot be indexed")
        try:
            vec = np.asarray(embed_fn(entry.action_key), dtype=np.float64)
        except Exception as exc:
            logger.warning("embedding failed for %r: %s", entry.action_key[:50], exc)
            continue
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            logger.warning("zero embedding for %r, skipped", entry.action_key[:50])
            continue
        if abs(norm - 1.0) > NORM_TOLERANCE:
            vec = vec / norm
        if dimension is None:
            dimension = vec.shape[0]
        elif vec.shape[0] != dimension:
            raise DimensionMismatchError(
                f"embedding dim {vec.shape[0]} != index dim {dimension}"
            )
        keys.append(entry.id)
        rows.append(vec)
        entries.append(entry)
    if not rows:
        raise ValueError("no entries could be embedded")
    return VectorIndex(
        dimension=dimension,
        keys=keys,
        matrix=np.vstack(rows),
        entries=entries,
    )


def retrieve(
    index: VectorIndex,
    query_text: str,
    k: int,
    embed_fn: Callable[[str], np.ndarray],
    *,
    partition: Optional[Callable[[ExperienceEntry], bool]] = None,
) -> list[RetrievedHint]:
    """Top-min(K, N) entries by inner product, ties in insertion order.

    An optional partition predicate narrows the candidate rows before the
    similarity scan (per-role or per-subject sub-pools).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("index is empty")
    if not query_text.strip():
        raise ValueError("query text must be non-empty")
    candidates = np.arange(len(index))
    if partition is not None:
        mask = np.array([partition(e) for e in index.entries], dtype=bool)
        candidates = candidates[mask]
        if candidates.size == 0:
            return []
    query = np.asarray(embed_fn(query_text), dtype=np.float64)
    norm = float(np.linalg.norm(query))
    if norm == 0.0:
        raise ValueError("query embedded to a zero vector")
    if abs(norm - 1.0) > NORM_TOLERANCE:
        query = query / norm
    if query.shape[0] != index.dimension:
        raise DimensionMismatchError(
            f"query dim {query.shape[0]} != index dim {index.dimension}"
        )
    # per-row reduction: identical rows must score bit-identically or the
    # insertion-order tie rule below breaks (BLAS gemv varies accumulation
    # order by row position)
    scores = (index.matrix[candidates] * query).sum(axis=1)
    order = np.argsort(-scores, kind="stable")[: min(k, candidates.size)]
    hints = []
    for rank, position in enumerate(order, start=1):
        row = int(candidates[position])
        hints.append(
            RetrievedHint(
                entry=index.entries[row],
                similarity=float(scores[position]),
                rank=rank,
            )
        )
    return hints


def render_hints(hints: list[RetrievedHint]) -> str:
    """The fenced hint block in rank order; empty string for zero hints."""
    return render_hint_pairs(
        [(h.entry.action_key, h.entry.experience_text) for h in hints]
    )


class PoolRetriever:
    """Pool + index + backend bundled behind a two-argument retrieve call."""

    def __init__(
        self,
        pool: ExperiencePool,
        backend,
        *,
        partition: Optional[Callable[[ExperienceEntry], bool]] = None,
    ):
        self.pool = pool
        self._backend = backend
        self._partition = partition
        self.index = index_build(pool, lambda text: embed(text, backend))

    def retrieve(self, query_text: str, k: int = DEFAULT_K) -> list[RetrievedHint]:
        return retrieve(
            self.index,
            query_text,
            k,
            lambda text: embed(text, self._backend),
            partition=self._partition,
        )


# --- Index sidecar (skip re-embedding when the pool is unchanged) -------------


def save_index(index: VectorIndex, path: str | Path, pool_digest: str) -> None:
    rows = [
        base64.b64encode(index.matrix[i].astype(np.float64).tobytes()).decode("ascii")
        for i in range(len(index))
    ]
    payload = {
        "dimension": index.dimension,
        "pool_digest": pool_digest,
        "keys": list(index.keys),
        "vectors": rows,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_index(
    path: str | Path, pool: ExperiencePool, expected_pool_digest: str
) -> Optional[VectorIndex]:
    """Rebuild the index from its sidecar; None when the pool has drifted."""
    path = Path(path)
    if not path.exists():
        return None
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("pool_digest") != expected_pool_digest:
        logger.warning("index sidecar %s is stale, ignoring", path)
        return None
    by_id = {entry.id: entry for entry in pool.entries}
    entries = []
    for key in payload["keys"]:
        if key not in by_id:
            logger.warning("index sidecar references unknown entry %s", key[:12])
            return None
        entries.append(by_id[key])
    matrix = np.vstack(
        [
            np.frombuffer(base64.b64decode(row), dtype=np.float64)
            for row in payload["vectors"]
        ]
    ) if payload["vectors"] else np.zeros((0, payload["dimension"]))
    return VectorIndex(
        dimension=payload["dimension"],
        keys=list(payload["keys"]),
        matrix=matrix,
        entries=entries,
    )

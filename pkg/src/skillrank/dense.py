"""Exhaustive cosine-similarity retrieval over precomputed embeddings.

Embeddings are produced offline and ingested from text files; vectors are
L2-normalized on load so cosine similarity is a plain dot product. The corpus
is small enough (~67k docs) that a flat scan is exact and fast.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .types import ScoredList


class EmbeddingStore:
    """Doc-id keyed unit vectors of a single dimensionality."""

    def __init__(self, dim: int, ids: list[str], matrix: np.ndarray, normalized: bool = True):
        if matrix.shape != (len(ids), dim):
            raise ValueError(f"matrix shape {matrix.shape} does not match {len(ids)} ids x dim {dim}")
        self.dim = dim
        self.ids = ids
        self.matrix = matrix.astype(np.float32)
        self.normalized = normalized
        self._row = {doc_id: i for i, doc_id in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._row

    def vector(self, doc_id: str) -> np.ndarray:
        return self.matrix[self._row[doc_id]]


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Read the text vector format: "dim=<d> count=<n>" header, then
    "doc_id<TAB>f1 f2 ... fd" per line. Vectors are L2-normalized on load.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            parts = dict(item.split("=") for item in header.split())
            dim, count = int(parts["dim"]), int(parts["count"])
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:1: bad header {header!r}") from exc
        ids: list[str] = []
        rows: list[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, _, values = line.partition("\t")
            vec = np.array(values.split(), dtype=np.float64)
            if vec.shape[0] != dim:
                raise ValueError(f"{path}:{lineno}: vector for {doc_id} has dim {vec.shape[0]}, expected {dim}")
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ValueError(f"{path}:{lineno}: zero vector for doc {doc_id}")
            ids.append(doc_id)
            rows.append((vec / norm).astype(np.float32))
    if len(ids) != count:
        raise ValueError(f"{path}: header says count={count} but found {len(ids)} vectors")
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate doc ids")
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingStore(dim=dim, ids=ids, matrix=matrix)


def save_embeddings(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    """Write vectors in the format load_embeddings reads (no normalization applied)."""
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={matrix.shape[1]} count={len(ids)}\n")
        for doc_id, row in zip(ids, matrix):
            fh.write(doc_id + "\t" + " ".join(repr(float(v)) for v in row) + "\n")


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return (vec / norm).astype(np.float32)


def cosine_topk(store: EmbeddingStore, qvec: np.ndarray, k: int, query_id: str = "") -> ScoredList:
    """Top-k docs by cosine similarity, descending; ties break by doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = np.asarray(qvec, dtype=np.float32)
    if qvec.shape != (store.dim,):
        raise ValueError(f"query dim {qvec.shape} does not match store dim {store.dim}")
    sims = store.matrix @ qvec
    ids = np.array(store.ids)
    order = np.lexsort((ids, -sims))[: min(k, len(ids))]
    entries = [(str(ids[i]), float(sims[i])) for i in order]
    return ScoredList(query_id=query_id, entries=entries, stage="dense")


def interleave_pools(a: ScoredList, b: ScoredList, depth: int) -> list[str]:
    """Alternate a[0], b[0], a[1], b[1], ... over each list's top-`depth`,
    dropping ids already emitted. Output length is at most 2 * depth.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    a_ids = a.doc_ids()[:depth]
    b_ids = b.doc_ids()[:depth]
    pool: list[str] = []
    seen: set[str] = set()
    for i in range(max(len(a_ids), len(b_ids))):
        for ids in (a_ids, b_ids):
            if i < len(ids) and ids[i] not in seen:
                seen.add(ids[i])
                pool.append(ids[i])
    return pool


def pool_quality_check(
    store: EmbeddingStore,
    qvec: np.ndarray,
    threshold: float = 0.6,
    min_count: int = 5,
) -> tuple[bool, int]:
    """Pass iff at least `min_count` docs have cosine similarity >= `threshold`."""
    qvec = np.asarray(qvec, dtype=np.float32)
    if qvec.shape != (store.dim,):
        raise ValueError(f"query dim {qvec.shape} does not match store dim {store.dim}")
    sims = store.matrix @ qvec
    count = int(np.count_nonzero(sims >= threshold))
    return count >= min_count, count

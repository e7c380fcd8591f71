"""
Retrieval Indexes

Lexical (Okapi BM25) and dense (cosine) indexes over a chunk store, their
hybrid mix, and the oracle retriever that hands back an instance's recorded
evidence. Indexes are immutable once built, so one index can serve any number
of concurrent queries.
"""

import json
import logging
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from app.services import HarnessError
from app.services.corpus import Chunk, ChunkStore

logger = logging.getLogger(__name__)

Embedder = Callable[[Sequence[str]], np.ndarray]


class RetrievalIndexError(HarnessError):
    """Raised for empty builds, mismatched indexes and invalid queries."""


_TERM = re.compile(r'[a-z0-9]+')


def lexical_terms(text: str) -> List[str]:
    """Lowercase, split on non-alphanumerics, no stemming."""
    return _TERM.findall(text.lower())


@dataclass(frozen=True)
class HybridWeights:
    """Mixing weights for dense and lexical scores."""
    dense_weight: float = 0.7
    lexical_weight: float = 0.3

    def __post_init__(self):
        if self.dense_weight < 0 or self.lexical_weight < 0:
            raise RetrievalIndexError("hybrid weights must be >= 0")
        if self.dense_weight + self.lexical_weight <= 0:
            raise RetrievalIndexError("hybrid weights must not both be 0")

    def mix(self, dense_score: float, lexical_normalized: float) -> float:
        return self.dense_weight * dense_score + self.lexical_weight * lexical_normalized


@dataclass
class RankedHit:
    """One retrieved chunk."""
    chunk_id: str
    dense_score: float
    lexical_score_normalized: float
    mixed_score: float
    rank: int
    lexical_score: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


class LexicalIndex:
    """
    Okapi BM25 over chunk texts.

    idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)) keeps every weight positive,
    so a chunk lacking all query terms scores exactly 0.
    """

    def __init__(self, chunk_ids: List[str], term_freqs: List[Dict[str, int]], k1: float = 1.2, b: float = 0.75):
        if not chunk_ids:
            raise RetrievalIndexError("cannot build a lexical index over zero chunks")
        self.chunk_ids = list(chunk_ids)
        self.k1 = k1
        self.b = b
        self.lengths = np.array([sum(tf.values()) for tf in term_freqs], dtype=np.float64)
        self.doc_count = len(chunk_ids)
        self.avg_length = float(self.lengths.mean()) if self.doc_count else 0.0
        self.postings: Dict[str, Dict[int, int]] = {}
        for position, tf in enumerate(term_freqs):
            for term, count in tf.items():
                self.postings.setdefault(term, {})[position] = count

    def idf(self, term: str) -> float:
        n = len(self.postings.get(term, {}))
        return math.log(1.0 + (self.doc_count - n + 0.5) / (n + 0.5))

    def scores(self, query: str) -> np.ndarray:
        """BM25 score of every chunk, in index order. Repeated query terms count once."""
        totals = np.zeros(self.doc_count, dtype=np.float64)
        avg = self.avg_length or 1.0
        for term in sorted(set(lexical_terms(query))):
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for position, tf in postings.items():
                norm = self.k1 * (1 - self.b + self.b * self.lengths[position] / avg)
                totals[position] += idf * tf * (self.k1 + 1) / (tf + norm)
        return totals

    def statistics(self) -> Dict:
        return {
            'doc_count': self.doc_count,
            'avg_length': self.avg_length,
            'vocabulary': len(self.postings),
            'k1': self.k1,
            'b': self.b,
        }

    def to_dict(self) -> Dict:
        term_freqs: List[Dict[str, int]] = [{} for _ in self.chunk_ids]
        for term, postings in self.postings.items():
            for position, count in postings.items():
                term_freqs[position][term] = count
        return {'chunk_ids': self.chunk_ids, 'k1': self.k1, 'b': self.b, 'term_freqs': term_freqs}

    @classmethod
    def from_dict(cls, data: Dict) -> 'LexicalIndex':
        return cls(data['chunk_ids'], data['term_freqs'], data.get('k1', 1.2), data.get('b', 0.75))


class VectorIndex:
    """L2-normalized embeddings, searched by inner product."""

    def __init__(self, chunk_ids: List[str], vectors: np.ndarray):
        if not chunk_ids:
            raise RetrievalIndexError("cannot build a dense index over zero chunks")
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(chunk_ids):
            raise RetrievalIndexError(f"expected {len(chunk_ids)} vectors, got shape {vectors.shape}")
        norms = np.linalg.norm(vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise RetrievalIndexError("dense index vectors must be L2-normalized")
        self.chunk_ids = list(chunk_ids)
        self.vectors = vectors
        self.dimension = vectors.shape[1]

    def vector(self, chunk_id: str) -> np.ndarray:
        return self.vectors[self.chunk_ids.index(chunk_id)]

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        query_vector = np.asarray(query_vector, dtype=np.float64).reshape(-1)
        if query_vector.shape[0] != self.dimension:
            raise RetrievalIndexError(f"query dimension {query_vector.shape[0]} != index dimension {self.dimension}")
        return self.vectors @ query_vector


def build_lexical(chunks: Iterable[Chunk], k1: float = 1.2, b: float = 0.75) -> LexicalIndex:
    """
    Build a BM25 index.

    Args:
        chunks: Chunks to index, in store order
        k1: Term-frequency saturation
        b: Length normalization strength

    Returns:
        LexicalIndex
    """
    chunks = list(chunks)
    if not chunks:
        raise RetrievalIndexError("cannot build a lexical index over zero chunks")
    index = LexicalIndex([c.chunk_id for c in chunks], [dict(Counter(lexical_terms(c.text))) for c in chunks], k1, b)
    logger.info(f"Built lexical index: {index.doc_count} chunks, {len(index.postings)} terms")
    return index


def build_dense(chunks: Iterable[Chunk], embedder: Embedder) -> VectorIndex:
    """Embed every chunk text through the embedding endpoint."""
    chunks = list(chunks)
    if not chunks:
        raise RetrievalIndexError("cannot build a dense index over zero chunks")
    vectors = embedder([c.text for c in chunks])
    index = VectorIndex([c.chunk_id for c in chunks], vectors)
    logger.info(f"Built dense index: {len(chunks)} chunks, dimension {index.dimension}")
    return index


def _check_k(k: int):
    if k < 1:
        raise RetrievalIndexError(f"k must be >= 1, got {k}")


def _top_positions(scores: np.ndarray, chunk_ids: List[str], m: int) -> List[int]:
    """Positions of the m best scores, ties by chunk_id ascending."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], chunk_ids[i]))
    return order[:m]


def _normalize(scores: np.ndarray) -> np.ndarray:
    high = float(scores.max())
    low = float(scores.min())
    if high == low:
        return np.ones_like(scores) if high > 0 else np.zeros_like(scores)
    return (scores - low) / (high - low)


def search_bm25(lexical: LexicalIndex, query: str, k: int) -> List[RankedHit]:
    _check_k(k)
    raw = lexical.scores(query)
    normalized = _normalize(raw)
    hits = []
    for rank, position in enumerate(_top_positions(raw, lexical.chunk_ids, k), start=1):
        hits.append(RankedHit(lexical.chunk_ids[position], 0.0, float(normalized[position]),
                              float(normalized[position]), rank, float(raw[position])))
    return hits


def search_dense(dense: VectorIndex, query_vector: np.ndarray, k: int) -> List[RankedHit]:
    _check_k(k)
    cosine = dense.scores(query_vector)
    return [
        RankedHit(dense.chunk_ids[position], float(cosine[position]), 0.0, float(cosine[position]), rank)
        for rank, position in enumerate(_top_positions(cosine, dense.chunk_ids, k), start=1)
    ]


def hybrid_scores(lexical: LexicalIndex, dense: VectorIndex, query: str, query_vector: np.ndarray,
                  weights: HybridWeights):
    """(cosine, raw bm25, normalized bm25, mixed) for every chunk, in index order."""
    if lexical.chunk_ids != dense.chunk_ids:
        raise RetrievalIndexError("lexical and dense indexes cover different chunk sets")
    cosine = dense.scores(query_vector)
    raw = lexical.scores(query)
    # Min-max over the whole store, not the candidate union: scores must not depend on the pool
    normalized = _normalize(raw)
    mixed = weights.dense_weight * cosine + weights.lexical_weight * normalized
    return cosine, raw, normalized, mixed


def search_hybrid(lexical: LexicalIndex, dense: VectorIndex, query: str, k: int,
                  weights: HybridWeights = HybridWeights(), embedder: Optional[Embedder] = None,
                  query_vector: Optional[np.ndarray] = None) -> List[RankedHit]:
    """
    Top-k chunks by dense_weight * cosine + lexical_weight * normalized BM25.

    BM25 is min-max normalized per query over the scored corpus. Candidates are
    the top 4k of each family; the pool widens until no chunk outside it could
    reach the k-th mixed score, so the result equals exhaustive scoring.

    Args:
        lexical: BM25 index
        dense: Vector index over the same chunks
        query: Query text
        k: Number of hits
        weights: Mixing weights
        embedder: Embeds the query when query_vector is not given
        query_vector: Precomputed normalized query embedding

    Returns:
        Hits ranked 1..k, ties broken by chunk_id ascending
    """
    _check_k(k)
    if query_vector is None:
        if embedder is None:
            raise RetrievalIndexError("search_hybrid needs an embedder or a query vector")
        query_vector = embedder([query])[0]
    cosine, raw, normalized, mixed = hybrid_scores(lexical, dense, query, query_vector, weights)
    ids = lexical.chunk_ids
    total = len(ids)

    pool_size = min(total, 4 * k)
    while True:
        dense_top = _top_positions(cosine, ids, pool_size)
        lexical_top = _top_positions(raw, ids, pool_size)
        pool = sorted(set(dense_top) | set(lexical_top), key=lambda i: (-mixed[i], ids[i]))
        chosen = pool[:k]
        if pool_size >= total or len(chosen) < k:
            break
        # Best possible mixed score of any chunk outside both candidate lists
        bound = weights.mix(float(cosine[dense_top[-1]]), float(normalized[lexical_top[-1]]))
        if bound < mixed[chosen[-1]]:
            break
        pool_size = min(total, pool_size * 2)

    return [
        RankedHit(ids[i], float(cosine[i]), float(normalized[i]), float(mixed[i]), rank, float(raw[i]))
        for rank, i in enumerate(chosen, start=1)
    ]


def evidence_ids(instance) -> List[str]:
    ids = getattr(instance, 'evidence_chunk_ids', None)
    if ids is None:
        ids = getattr(instance, 'chunk_ids', None)
    return list(ids or [])


def oracle_retrieve(instance, store: ChunkStore) -> List[RankedHit]:
    """
    Return the instance's recorded evidence bundle as the retrieval result.

    Args:
        instance: Anything exposing evidence_chunk_ids
        store: Chunk store the ids must resolve in

    Returns:
        One hit per evidence chunk in bundle order, each with mixed_score 1
    """
    ids = evidence_ids(instance)
    if not ids:
        raise RetrievalIndexError("oracle retrieval needs a non-empty evidence bundle")
    for chunk_id in ids:
        if chunk_id not in store:
            raise RetrievalIndexError(f"dangling chunk reference '{chunk_id}'")
    return [RankedHit(chunk_id, 1.0, 1.0, 1.0, rank) for rank, chunk_id in enumerate(ids, start=1)]


class Retriever:
    """Selects one retrieval strategy: bm25, dense, hybrid or oracle."""

    def __init__(self, kind: str, store: ChunkStore, lexical: Optional[LexicalIndex] = None,
                 dense: Optional[VectorIndex] = None, embedder: Optional[Embedder] = None,
                 weights: HybridWeights = HybridWeights()):
        if kind not in ('bm25', 'dense', 'hybrid', 'oracle'):
            raise RetrievalIndexError(f"unknown retriever kind '{kind}'")
        if kind in ('bm25', 'hybrid') and lexical is None:
            raise RetrievalIndexError(f"{kind} retrieval needs a lexical index")
        if kind in ('dense', 'hybrid') and (dense is None or embedder is None):
            raise RetrievalIndexError(f"{kind} retrieval needs a dense index and an embedder")
        self.kind = kind
        self.store = store
        self.lexical = lexical
        self.dense = dense
        self.embedder = embedder
        self.weights = weights

    def describe(self) -> Dict:
        info = {'kind': self.kind}
        if self.kind == 'hybrid':
            info.update({'dense_weight': self.weights.dense_weight, 'lexical_weight': self.weights.lexical_weight})
        return info

    def retrieve(self, query: str, k: int, instance=None) -> List[RankedHit]:
        if self.kind == 'oracle':
            if instance is None:
                raise RetrievalIndexError("oracle retrieval needs the instance")
            return oracle_retrieve(instance, self.store)
        if self.kind == 'bm25':
            return search_bm25(self.lexical, query, k)
        query_vector = self.embedder([query])[0]
        if self.kind == 'dense':
            return search_dense(self.dense, query_vector, k)
        return search_hybrid(self.lexical, self.dense, query, k, self.weights, query_vector=query_vector)


# ---------------------------------------------------------------------------
# Persistence beside the chunk store
# ---------------------------------------------------------------------------

def save_indexes(directory: str, lexical: Optional[LexicalIndex] = None, dense: Optional[VectorIndex] = None):
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    if lexical is not None:
        with open(path / 'lexical_index.json', 'w', encoding='utf-8') as f:
            json.dump(lexical.to_dict(), f, sort_keys=True)
    if dense is not None:
        np.savez(path / 'dense_index.npz', chunk_ids=np.array(dense.chunk_ids), vectors=dense.vectors)
    logger.info(f"Saved indexes to {directory}")


def load_lexical(directory: str) -> Optional[LexicalIndex]:
    path = Path(directory) / 'lexical_index.json'
    if not path.exists():
        return None
    with open(path, 'r', encoding='utf-8') as f:
        return LexicalIndex.from_dict(json.load(f))


def load_dense(directory: str) -> Optional[VectorIndex]:
    path = Path(directory) / 'dense_index.npz'
    if not path.exists():
        return None
    data = np.load(path)
    return VectorIndex([str(c) for c in data['chunk_ids']], data['vectors'])

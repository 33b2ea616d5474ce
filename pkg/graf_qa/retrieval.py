"""Token normalization, BM25 ranking, corpus chunking, and query-relevant subgraph sampling."""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .kg_store import KnowledgeGraph
from .utils.files import iter_numbered_lines

logger = logging.getLogger(__name__)

TokenSeq = List[str]

DEFAULT_K1 = 1.5
DEFAULT_B = 0.75

_token_pattern = re.compile(r"[^\W_]+")


class LemmaTableError(ValueError):
    """Raised for malformed lemma table files."""


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _resolve_lemma(surface: str, table: Mapping[str, str]) -> str:
    path = [surface]
    current = surface
    while current in table and table[current] != current:
        current = table[current]
        if current in path:
            # A cycle in the table collapses onto its smallest member.
            return min(path[path.index(current):])
        path.append(current)
    return current


class Normalizer:
    """Lowercase, split on non-alphanumeric boundaries, then look up lemmas.

    Lemma chains (``a -> b -> c``) are collapsed at construction so that
    normalizing an already-normalized sequence is a no-op.
    """

    def __init__(self, lemmas: Optional[Mapping[str, str]] = None) -> None:
        table: Dict[str, str] = {}
        for surface, lemma in (lemmas or {}).items():
            surface_tokens = _token_pattern.findall(surface.lower())
            lemma_tokens = _token_pattern.findall(lemma.lower())
            if len(surface_tokens) != 1 or len(lemma_tokens) != 1:
                logger.warning("Ignoring multi-token lemma entry %r -> %r", surface, lemma)
                continue
            table[surface_tokens[0]] = lemma_tokens[0]
        self.lemmas: Dict[str, str] = {surface: _resolve_lemma(surface, table) for surface in table}

    def __call__(self, text: str) -> TokenSeq:
        tokens = _token_pattern.findall(text.lower())
        if not self.lemmas:
            return tokens
        return [self.lemmas.get(token, token) for token in tokens]


_identity_normalizer = Normalizer()


def normalize(text: str, normalizer: Optional[Normalizer] = None) -> TokenSeq:
    return (normalizer or _identity_normalizer)(text)


def load_lemma_table(path: Union[str, Path]) -> Dict[str, str]:
    """Read ``surface<TAB>lemma`` lines."""
    table: Dict[str, str] = {}
    for number, line in iter_numbered_lines(path):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise LemmaTableError(f"{path}:{number}: expected 'surface<TAB>lemma'")
        table[parts[0].strip()] = parts[1].strip()
    logger.info("Loaded %d lemma entries from %s", len(table), path)
    return table


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------


class Bm25Index:
    """Okapi BM25 over pre-tokenized documents; document ids are positions."""

    def __init__(self, documents: Sequence[Sequence[str]], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> None:
        if k1 <= 0:
            raise ValueError(f"k1 must be positive, got {k1}")
        if not 0.0 <= b <= 1.0:
            raise ValueError(f"b must be within [0, 1], got {b}")
        self.k1 = float(k1)
        self.b = float(b)
        self.documents: Tuple[Tuple[str, ...], ...] = tuple(tuple(doc) for doc in documents)
        self.term_freqs: List[Counter] = [Counter(doc) for doc in self.documents]
        self.doc_lens: List[int] = [len(doc) for doc in self.documents]
        self.df: Counter = Counter()
        for freqs in self.term_freqs:
            self.df.update(freqs.keys())
        self.avgdl = sum(self.doc_lens) / len(self.documents) if self.documents else 0.0

    @classmethod
    def from_documents(
        cls,
        texts: Sequence[str],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        normalizer: Optional[Normalizer] = None,
    ) -> "Bm25Index":
        return cls([normalize(text, normalizer) for text in texts], k1=k1, b=b)

    def __len__(self) -> int:
        return len(self.documents)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((len(self.documents) - df + 0.5) / (df + 0.5) + 1)

    def score(self, doc_id: int, query: Sequence[str]) -> float:
        freqs = self.term_freqs[doc_id]
        dl = self.doc_lens[doc_id]
        total = 0.0
        for term in query:
            tf = freqs.get(term, 0)
            if not tf:
                continue
            total += self.idf(term) * tf * (self.k1 + 1) / (tf + self.k1 * (1 - self.b + self.b * dl / self.avgdl))
        return total

    def scores(self, query: Sequence[str]) -> List[float]:
        return [self.score(doc_id, query) for doc_id in range(len(self.documents))]


def _top(scores: Sequence[float], k: int) -> List[Tuple[int, float]]:
    order = sorted(range(len(scores)), key=lambda doc_id: (-scores[doc_id], doc_id))
    return [(doc_id, scores[doc_id]) for doc_id in order[:k]]


def bm25_rank(index: Bm25Index, query: Sequence[str], k: int) -> List[Tuple[int, float]]:
    """Top ``k`` ``(doc_id, score)`` pairs, score-descending, ties by ascending id."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    return _top(index.scores(query), k)


# ---------------------------------------------------------------------------
# Chunking (RAG documents)
# ---------------------------------------------------------------------------


def chunk_corpus(articles: Sequence[Sequence[str]], size: int = 50, overlap: int = 25) -> List[TokenSeq]:
    """Split each article into ``size``-token windows starting ``size - overlap`` apart."""
    if size < 1:
        raise ValueError(f"chunk size must be at least 1, got {size}")
    if not 0 <= overlap < size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < size, got overlap={overlap}, size={size}")
    step = size - overlap
    chunks: List[TokenSeq] = []
    for article in articles:
        tokens = list(article)
        chunks.extend(tokens[start:start + size] for start in range(0, len(tokens), step))
    return chunks


def retrieve_chunks(
    index: Optional[Bm25Index],
    chunks: Sequence[Sequence[str]],
    query: str,
    k: int = 10,
    normalizer: Optional[Normalizer] = None,
) -> List[Tuple[int, float, str]]:
    """Rank ``chunks`` for ``query`` and return ``(chunk_id, score, text)`` for the top ``k``."""
    if index is None:
        index = Bm25Index([normalize(" ".join(chunk), normalizer) for chunk in chunks])
    elif len(index) != len(chunks):
        raise ValueError(f"index covers {len(index)} documents but {len(chunks)} chunks were given")
    ranked = bm25_rank(index, normalize(query, normalizer), k)
    return [(chunk_id, score, " ".join(chunks[chunk_id])) for chunk_id, score in ranked]


# ---------------------------------------------------------------------------
# Subgraph sampling
# ---------------------------------------------------------------------------


def entity_context_document(kg: KnowledgeGraph, entity_id: int, normalizer: Optional[Normalizer] = None) -> TokenSeq:
    """Entity name followed by each incident relation label and neighbor name."""
    tokens = normalize(kg.display_name(entity_id), normalizer)
    for edge_id, neighbor in kg.neighbors(entity_id):
        tokens.extend(normalize(kg.edges[edge_id].relation, normalizer))
        tokens.extend(normalize(kg.display_name(neighbor), normalizer))
    return tokens


class EntityIndex:
    """Two BM25 indexes over the entities of one graph.

    Ranking is not BM25 over the single context document (name, incident
    relation labels, neighbor names) alone: a separate BM25 score over the
    bare entity name is added to the context-document score. An entity named
    by the query therefore outranks entities that only mention it as a
    neighbor. ``contexts.scores`` alone gives the single-document ranking.
    """

    def __init__(
        self,
        kg: KnowledgeGraph,
        normalizer: Optional[Normalizer] = None,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ) -> None:
        self.kg = kg
        self.normalizer = normalizer
        ids = range(kg.num_entities)
        self.names = Bm25Index([normalize(kg.display_name(i), normalizer) for i in ids], k1=k1, b=b)
        self.contexts = Bm25Index([entity_context_document(kg, i, normalizer) for i in ids], k1=k1, b=b)

    def scores(self, query: Sequence[str]) -> List[float]:
        return [name + context for name, context in zip(self.names.scores(query), self.contexts.scores(query))]

    def rank(self, query: Sequence[str], k: int) -> List[Tuple[int, float]]:
        if k < 0:
            raise ValueError(f"k must be non-negative, got {k}")
        return _top(self.scores(query), k)


def build_entity_index(
    kg: KnowledgeGraph,
    normalizer: Optional[Normalizer] = None,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> EntityIndex:
    index = EntityIndex(kg, normalizer, k1=k1, b=b)
    logger.debug("Built entity index over %d entities", kg.num_entities)
    return index


@dataclass(frozen=True)
class SubGraph:
    """A query-relevant slice of a knowledge graph.

    ``graph`` is the induced subgraph; ``source_ids[i]`` is the id in the full
    graph of local entity ``i``; seeds are the first ``len(seeds)`` local ids.
    """

    graph: KnowledgeGraph
    seeds: Tuple[int, ...]
    source_ids: Tuple[int, ...]

    @property
    def num_entities(self) -> int:
        return self.graph.num_entities

    def is_empty(self) -> bool:
        return self.graph.is_empty()

    @classmethod
    def empty(cls) -> "SubGraph":
        return cls(KnowledgeGraph(), (), ())


def _bounded_bfs(kg: KnowledgeGraph, seeds: Sequence[int], depth: int, max_entities: int) -> List[int]:
    order = list(seeds)
    visited = set(order)
    frontier = list(seeds)
    for _ in range(depth):
        following: List[int] = []
        for entity_id in frontier:
            for neighbor in kg.neighbor_ids(entity_id):
                if neighbor in visited:
                    continue
                if len(order) >= max_entities:
                    return order
                visited.add(neighbor)
                order.append(neighbor)
                following.append(neighbor)
        if not following:
            break
        frontier = following
    return order


def sample_subgraph(
    kg: KnowledgeGraph,
    query: str,
    top_k: int = 10,
    depth: int = 1,
    max_entities: int = 50,
    *,
    index: Optional[EntityIndex] = None,
    normalizer: Optional[Normalizer] = None,
) -> SubGraph:
    """BM25-seeded, depth-bounded undirected BFS around the entities most relevant to ``query``."""
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    if depth < 0:
        raise ValueError(f"depth must be non-negative, got {depth}")
    if max_entities < top_k:
        raise ValueError(f"max_entities ({max_entities}) must be at least top_k ({top_k})")
    if kg.is_empty():
        return SubGraph.empty()

    if index is None:
        index = build_entity_index(kg, normalizer)
    elif index.kg is not kg:
        raise ValueError("entity index was built for a different graph")

    query_tokens = normalize(query, index.normalizer)
    seeds = [entity_id for entity_id, _ in index.rank(query_tokens, top_k)]
    order = _bounded_bfs(kg, seeds, depth, max_entities)
    subgraph = SubGraph(kg.induced_subgraph(order), tuple(range(len(seeds))), tuple(order))
    logger.debug(
        "Sampled %d entities (%d seeds, %d edges) for query %r",
        subgraph.num_entities,
        len(seeds),
        subgraph.graph.num_edges,
        query[:60],
    )
    return subgraph


def subgraph_to_dict(subgraph: SubGraph) -> Dict[str, Any]:
    graph = subgraph.graph
    return {
        "entities": [graph.display_name(i) for i in range(graph.num_entities)],
        "seeds": [graph.display_name(i) for i in subgraph.seeds],
        "source_ids": list(subgraph.source_ids),
        "edges": [
            {"head": triplet.head, "relation": triplet.relation, "tail": triplet.tail}
            for triplet in graph.triplets()
        ],
    }


__all__ = [
    "Bm25Index",
    "EntityIndex",
    "LemmaTableError",
    "Normalizer",
    "SubGraph",
    "TokenSeq",
    "bm25_rank",
    "build_entity_index",
    "chunk_corpus",
    "entity_context_document",
    "load_lemma_table",
    "normalize",
    "retrieve_chunks",
    "sample_subgraph",
    "subgraph_to_dict",
]

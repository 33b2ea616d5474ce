"""Triplet parsing, knowledge-graph construction, persistence, and neighborhood queries."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from .utils.files import atomic_write_text, iter_numbered_lines

logger = logging.getLogger(__name__)

STOP_MARKER = "STOP"

_triplet_line = re.compile(r"^\(\s*([^;]+?)\s*;\s*([^;]+?)\s*;\s*([^;]+?)\s*\)$")


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be read or written."""


@dataclass(frozen=True)
class Triplet:
    head: str
    relation: str
    tail: str

    def __post_init__(self) -> None:
        for name in ("head", "relation", "tail"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"triplet {name} must be a non-empty string, got {value!r}")

    def render(self) -> str:
        return f"({self.head};{self.relation};{self.tail})"


@dataclass(frozen=True)
class Edge:
    head: int
    relation: str
    tail: int

    def other(self, entity_id: int) -> int:
        return self.tail if entity_id == self.head else self.head


class ParseResult(NamedTuple):
    triplets: List[Triplet]
    skipped: int


def canonical_key(text: str) -> str:
    """Case-insensitive, whitespace-collapsed match key."""
    return " ".join(text.split()).lower()


def _display_form(text: str) -> str:
    return " ".join(text.split())


def _match_triplet(line: str) -> Optional[Triplet]:
    match = _triplet_line.match(line.strip())
    if not match:
        return None
    head, relation, tail = (group.strip() for group in match.groups())
    if not (head and relation and tail):
        return None
    return Triplet(head, relation, tail)


def parse_triplet_block(text: str) -> ParseResult:
    """Parse ``(head;relation;tail)`` lines up to an optional ``STOP`` line.

    Non-matching lines are skipped and counted; blank lines are ignored.
    """
    triplets: List[Triplet] = []
    skipped = 0
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped == STOP_MARKER:
            break
        triplet = _match_triplet(stripped)
        if triplet is None:
            skipped += 1
            continue
        triplets.append(triplet)
    if skipped:
        logger.debug("Skipped %d unparseable triplet line(s)", skipped)
    return ParseResult(triplets, skipped)


def parse_triplet_blocks(text: str) -> ParseResult:
    """Parse every ``STOP``-terminated block of a multi-document extraction file."""
    triplets: List[Triplet] = []
    skipped = 0
    block: List[str] = []
    for line in text.splitlines() + [STOP_MARKER]:
        block.append(line)
        if line.strip() == STOP_MARKER:
            parsed = parse_triplet_block("\n".join(block))
            triplets.extend(parsed.triplets)
            skipped += parsed.skipped
            block = []
    return ParseResult(triplets, skipped)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


class KnowledgeGraph:
    """Entities and directed, labeled relations.

    Entity ids are positions in ``entities`` (canonical keys, first-seen
    order). Traversal treats edges as undirected; ``adjacency[i]`` lists the
    ids of edges incident to entity ``i`` in edge-id order.
    """

    def __init__(
        self,
        entities: Sequence[str] = (),
        edges: Sequence[Edge] = (),
        display_names: Optional[Mapping[str, str]] = None,
    ) -> None:
        self.entities: Tuple[str, ...] = tuple(entities)
        self.edges: Tuple[Edge, ...] = tuple(edges)
        self.display_names: Dict[str, str] = {
            key: (display_names or {}).get(key, key) for key in self.entities
        }
        self._index: Dict[str, int] = {key: position for position, key in enumerate(self.entities)}
        if len(self._index) != len(self.entities):
            raise ValueError("duplicate canonical entity in graph")

        adjacency: List[List[int]] = [[] for _ in self.entities]
        seen_edges = set()
        for edge_id, edge in enumerate(self.edges):
            for endpoint in (edge.head, edge.tail):
                if not 0 <= endpoint < len(self.entities):
                    raise ValueError(f"edge {edge_id} endpoint {endpoint} is not an entity")
            key = (edge.head, canonical_key(edge.relation), edge.tail)
            if key in seen_edges:
                raise ValueError(f"duplicate edge {edge_id}: {self.render_edge(edge_id)}")
            seen_edges.add(key)
            adjacency[edge.head].append(edge_id)
            if edge.tail != edge.head:
                adjacency[edge.tail].append(edge_id)
        self.adjacency: Tuple[Tuple[int, ...], ...] = tuple(tuple(ids) for ids in adjacency)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def is_empty(self) -> bool:
        return not self.entities

    def index_of(self, name: str) -> Optional[int]:
        return self._index.get(canonical_key(name))

    def display_name(self, entity_id: int) -> str:
        return self.display_names[self.entities[entity_id]]

    def render_edge(self, edge_id: int) -> str:
        edge = self.edges[edge_id]
        return f"({self.display_name(edge.head)};{edge.relation};{self.display_name(edge.tail)})"

    def _resolve(self, entity: Union[int, str]) -> int:
        if isinstance(entity, str):
            resolved = self.index_of(entity)
            if resolved is None:
                raise KeyError(f"unknown entity {entity!r}")
            return resolved
        return entity

    def neighbors(self, entity: Union[int, str]) -> List[Tuple[int, int]]:
        """``(edge_id, neighbor_id)`` for every edge incident to ``entity``."""
        entity_id = self._resolve(entity)
        return [(edge_id, self.edges[edge_id].other(entity_id)) for edge_id in self.adjacency[entity_id]]

    def neighbor_ids(self, entity: Union[int, str]) -> Tuple[int, ...]:
        """Distinct neighbors in edge-id order (an entity with a self-loop is its own neighbor)."""
        ordered: Dict[int, None] = {}
        for _, neighbor in self.neighbors(entity):
            ordered.setdefault(neighbor, None)
        return tuple(ordered)

    def induced_subgraph(self, entity_ids: Sequence[int]) -> "KnowledgeGraph":
        """Keep ``entity_ids`` (in the given order) and the edges among them."""
        remap = {old: new for new, old in enumerate(dict.fromkeys(entity_ids))}
        kept_edges = [
            Edge(remap[edge.head], edge.relation, remap[edge.tail])
            for edge in self.edges
            if edge.head in remap and edge.tail in remap
        ]
        kept_entities = [self.entities[old] for old in remap]
        return KnowledgeGraph(
            kept_entities,
            kept_edges,
            {key: self.display_names[key] for key in kept_entities},
        )

    def triplets(self) -> List[Triplet]:
        return [
            Triplet(self.display_name(edge.head), edge.relation, self.display_name(edge.tail))
            for edge in self.edges
        ]

    def stats(self) -> Dict[str, int]:
        isolated = sum(1 for incident in self.adjacency if not incident)
        return {"entities": self.num_entities, "edges": self.num_edges, "isolated": isolated}

    def edge_multiset(self) -> Dict[Tuple[str, str, str], int]:
        counts: Dict[Tuple[str, str, str], int] = {}
        for edge in self.edges:
            key = (self.entities[edge.head], canonical_key(edge.relation), self.entities[edge.tail])
            counts[key] = counts.get(key, 0) + 1
        return counts

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return set(self.entities) == set(other.entities) and self.edge_multiset() == other.edge_multiset()

    def __hash__(self) -> int:  # pragma: no cover - graphs are not used as keys
        return hash((frozenset(self.entities), self.num_edges))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(entities={self.num_entities}, edges={self.num_edges})"


class ClaimGraph(KnowledgeGraph):
    """Claim triplets of one (question, choice) pair, plus extraction warnings."""

    def __init__(
        self,
        entities: Sequence[str] = (),
        edges: Sequence[Edge] = (),
        display_names: Optional[Mapping[str, str]] = None,
        warnings: Iterable[str] = (),
    ) -> None:
        super().__init__(entities, edges, display_names)
        self.warnings: Tuple[str, ...] = tuple(warnings)


def _assemble(triplets: Iterable[Triplet]) -> Tuple[List[str], List[Edge], Dict[str, str]]:
    entities: List[str] = []
    display: Dict[str, str] = {}
    index: Dict[str, int] = {}
    edges: List[Edge] = []
    seen = set()

    def entity_id(name: str) -> int:
        key = canonical_key(name)
        if key not in index:
            index[key] = len(entities)
            entities.append(key)
            display[key] = _display_form(name)
        return index[key]

    for triplet in triplets:
        head = entity_id(triplet.head)
        tail = entity_id(triplet.tail)
        relation = _display_form(triplet.relation)
        key = (head, canonical_key(relation), tail)
        if key in seen:
            continue
        seen.add(key)
        edges.append(Edge(head, relation, tail))
    return entities, edges, display


def build_graph(triplets: Iterable[Triplet]) -> KnowledgeGraph:
    """Canonicalize entities, drop duplicate edges, and build adjacency."""
    entities, edges, display = _assemble(triplets)
    graph = KnowledgeGraph(entities, edges, display)
    logger.debug("Built graph with %d entities and %d edges", graph.num_entities, graph.num_edges)
    return graph


def build_claim_graph(triplets: Iterable[Triplet], warnings: Iterable[str] = ()) -> ClaimGraph:
    entities, edges, display = _assemble(triplets)
    return ClaimGraph(entities, edges, display, warnings)


def merge_graphs(graphs: Iterable[KnowledgeGraph]) -> KnowledgeGraph:
    """Union several graphs; entities and edges are deduplicated as in :func:`build_graph`."""
    return build_graph(triplet for graph in graphs for triplet in graph.triplets())


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def persist_graph(kg: KnowledgeGraph, path: Union[str, Path]) -> None:
    """Write one ``(head;relation;tail)`` line per edge.

    Entities without edges are not representable in this format.
    """
    lines = []
    for edge_id in range(kg.num_edges):
        rendered = kg.render_edge(edge_id)
        if rendered.count(";") != 2:
            raise GraphFormatError(f"{path}: edge {edge_id} contains ';' inside a field: {rendered}")
        lines.append(rendered)
    isolated = kg.stats()["isolated"]
    if isolated:
        logger.warning("%d isolated entit(ies) are not persisted to %s", isolated, path)
    try:
        atomic_write_text(path, "".join(line + "\n" for line in lines))
    except OSError as error:
        raise GraphFormatError(f"{path}: cannot write graph: {error}") from error
    logger.info("Persisted graph (%d entities, %d edges) to %s", kg.num_entities, kg.num_edges, path)


def load_graph(path: Union[str, Path]) -> KnowledgeGraph:
    """Read a graph written by :func:`persist_graph` (every line must parse)."""
    triplets: List[Triplet] = []
    try:
        for number, line in iter_numbered_lines(path):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped == STOP_MARKER:
                break
            triplet = _match_triplet(stripped)
            if triplet is None:
                raise GraphFormatError(f"{path}:{number}: not a (head;relation;tail) line: {stripped[:80]!r}")
            triplets.append(triplet)
    except OSError as error:
        raise GraphFormatError(f"{path}: cannot read graph: {error}") from error
    except UnicodeDecodeError as error:
        raise GraphFormatError(f"{path}: not UTF-8 text: {error}") from error

    graph = build_graph(triplets)
    logger.info("Loaded graph (%d entities, %d edges) from %s", graph.num_entities, graph.num_edges, path)
    return graph


__all__ = [
    "ClaimGraph",
    "Edge",
    "GraphFormatError",
    "KnowledgeGraph",
    "ParseResult",
    "STOP_MARKER",
    "Triplet",
    "build_claim_graph",
    "build_graph",
    "canonical_key",
    "load_graph",
    "merge_graphs",
    "parse_triplet_block",
    "parse_triplet_blocks",
    "persist_graph",
]

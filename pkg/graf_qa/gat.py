"""Relation-aware graph attention over node and edge embeddings, with exact gradients.

Each node attends to its undirected neighbors (node-node attention) and to
its incident edges (node-edge attention). Per head::

    zN = X W_N^T, zE = E W_E^T
    node logits  e(i, j) = LeakyReLU(a_N . [zN_i || zN_j])   j in N(i)
    edge logits  e(i, k) = LeakyReLU(a_E . [zN_i || zE_k])   k incident to i
    h'_i = sum_j softmax_j(e) zN_j + sum_k softmax_k(e) zE_k

Head outputs are averaged. Nodes without neighbors get a zero vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .embedding import Encoder
from .kg_store import KnowledgeGraph

logger = logging.getLogger(__name__)

DEFAULT_HEADS = 6
DEFAULT_LEAKY_SLOPE = 0.2


@dataclass
class GatParams:
    """Per-head projections ``W_N``/``W_E`` (heads x d_out x d_in) and attention vectors (heads x 2*d_out)."""

    W_N: np.ndarray
    W_E: np.ndarray
    a_N: np.ndarray
    a_E: np.ndarray
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self) -> None:
        self.W_N = np.asarray(self.W_N, dtype=np.float64)
        self.W_E = np.asarray(self.W_E, dtype=np.float64)
        self.a_N = np.asarray(self.a_N, dtype=np.float64)
        self.a_E = np.asarray(self.a_E, dtype=np.float64)
        if self.W_N.ndim != 3 or self.W_N.shape[0] < 1:
            raise ValueError(f"W_N must have shape (heads, d_out, d_in) with heads >= 1, got {self.W_N.shape}")
        if self.W_E.shape != self.W_N.shape:
            raise ValueError(f"W_E shape {self.W_E.shape} does not match W_N shape {self.W_N.shape}")
        expected = (self.heads, 2 * self.d_out)
        for name in ("a_N", "a_E"):
            if getattr(self, name).shape != expected:
                raise ValueError(f"{name} must have shape {expected}, got {getattr(self, name).shape}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be within (0, 1), got {self.leaky_slope}")
        if not all(np.all(np.isfinite(array)) for array in self.arrays().values()):
            raise ValueError("GAT parameters must be finite")

    @property
    def heads(self) -> int:
        return self.W_N.shape[0]

    @property
    def d_out(self) -> int:
        return self.W_N.shape[1]

    @property
    def d_in(self) -> int:
        return self.W_N.shape[2]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W_N": self.W_N, "W_E": self.W_E, "a_N": self.a_N, "a_E": self.a_E}

    def copy(self) -> "GatParams":
        return GatParams(self.W_N.copy(), self.W_E.copy(), self.a_N.copy(), self.a_E.copy(), self.leaky_slope)


@dataclass
class GatGradients:
    W_N: np.ndarray
    W_E: np.ndarray
    a_N: np.ndarray
    a_E: np.ndarray
    node_embeddings: np.ndarray
    edge_embeddings: np.ndarray

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W_N": self.W_N, "W_E": self.W_E, "a_N": self.a_N, "a_E": self.a_E}


def init_gat_params(
    dim: int,
    heads: int = DEFAULT_HEADS,
    seed: int = 0,
    leaky_slope: float = DEFAULT_LEAKY_SLOPE,
    *,
    d_out: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    node_gain: float = 0.0,
    edge_gain: float = 0.0,
) -> GatParams:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) initialization.

    ``node_gain`` and ``edge_gain`` add a scaled identity to every head of
    ``W_N`` and ``W_E``, so a node starts out represented by its neighbors'
    embeddings and its incident relation labels.
    """
    if dim < 1 or heads < 1:
        raise ValueError(f"dim and heads must be positive, got dim={dim}, heads={heads}")
    generator = rng if rng is not None else np.random.default_rng(seed)
    d_out = d_out or dim
    scale = 1.0 / np.sqrt(dim)
    return GatParams(
        W_N=generator.uniform(-scale, scale, size=(heads, d_out, dim)) + node_gain * np.eye(d_out, dim),
        W_E=generator.uniform(-scale, scale, size=(heads, d_out, dim)) + edge_gain * np.eye(d_out, dim),
        a_N=generator.uniform(-scale, scale, size=(heads, 2 * d_out)),
        a_E=generator.uniform(-scale, scale, size=(heads, 2 * d_out)),
        leaky_slope=leaky_slope,
    )


# ---------------------------------------------------------------------------
# Encoded graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EncodedGraph:
    """Node/edge embedding matrices plus the attention pair lists of a graph.

    ``node_src[p] -> node_dst[p]`` enumerates (node, distinct neighbor) pairs;
    ``edge_node[p] -> edge_id[p]`` enumerates (node, incident edge) pairs.
    """

    node_embeddings: np.ndarray
    edge_embeddings: np.ndarray
    node_src: np.ndarray
    node_dst: np.ndarray
    edge_node: np.ndarray
    edge_id: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.node_embeddings.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.node_embeddings.shape[1]

    @classmethod
    def build(cls, graph: KnowledgeGraph, node_embeddings: np.ndarray, edge_embeddings: np.ndarray) -> "EncodedGraph":
        X = np.asarray(node_embeddings, dtype=np.float64)
        E = np.asarray(edge_embeddings, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != graph.num_entities:
            raise ValueError(f"expected {graph.num_entities} node embedding rows, got shape {X.shape}")
        if E.ndim != 2 or E.shape[0] != graph.num_edges:
            raise ValueError(f"expected {graph.num_edges} edge embedding rows, got shape {E.shape}")
        if graph.num_edges and E.shape[1] != X.shape[1]:
            raise ValueError(f"node dim {X.shape[1]} does not match edge dim {E.shape[1]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(E))):
            raise ValueError("embeddings must be finite")
        if E.shape[0] == 0:
            E = np.zeros((0, X.shape[1]))

        node_src: List[int] = []
        node_dst: List[int] = []
        edge_node: List[int] = []
        edge_id: List[int] = []
        for entity_id in range(graph.num_entities):
            for neighbor in graph.neighbor_ids(entity_id):
                node_src.append(entity_id)
                node_dst.append(neighbor)
            for incident in graph.adjacency[entity_id]:
                edge_node.append(entity_id)
                edge_id.append(incident)

        def index_array(values: List[int]) -> np.ndarray:
            return np.asarray(values, dtype=np.intp)

        return cls(X, E, index_array(node_src), index_array(node_dst), index_array(edge_node), index_array(edge_id))

    @classmethod
    def from_graph(cls, graph: KnowledgeGraph, encoder: Encoder) -> "EncodedGraph":
        node_texts = [graph.display_name(i) for i in range(graph.num_entities)]
        edge_texts = [edge.relation for edge in graph.edges]
        X = encoder.embed_many(node_texts) if node_texts else np.zeros((0, encoder.dim))
        E = encoder.embed_many(edge_texts) if edge_texts else np.zeros((0, encoder.dim))
        return cls.build(graph, X, E)


def encode_graph(graph: KnowledgeGraph, encoder: Encoder) -> EncodedGraph:
    """Embed display names as node features and relation labels as edge features."""
    return EncodedGraph.from_graph(graph, encoder)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _leaky(u: np.ndarray, slope: float) -> np.ndarray:
    return np.where(u > 0, u, slope * u)


def _segment_softmax(logits: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    if logits.size == 0:
        return np.zeros(0)
    maxima = np.full(num_segments, -np.inf)
    np.maximum.at(maxima, segments, logits)
    shifted = np.exp(logits - maxima[segments])
    totals = np.zeros(num_segments)
    np.add.at(totals, segments, shifted)
    return shifted / totals[segments]


def _segment_sum(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    totals = np.zeros(num_segments)
    np.add.at(totals, segments, values)
    return totals


@dataclass
class HeadCache:
    zn: np.ndarray
    ze: np.ndarray
    node_logits: np.ndarray
    node_alpha: np.ndarray
    edge_logits: np.ndarray
    edge_alpha: np.ndarray


@dataclass
class GatCache:
    heads: List[HeadCache] = field(default_factory=list)


def _forward_head(g: EncodedGraph, p: GatParams, head: int):
    d_out = p.d_out
    zn = g.node_embeddings @ p.W_N[head].T
    ze = g.edge_embeddings @ p.W_E[head].T
    a_n1, a_n2 = p.a_N[head, :d_out], p.a_N[head, d_out:]
    a_e1, a_e2 = p.a_E[head, :d_out], p.a_E[head, d_out:]

    node_logits = zn[g.node_src] @ a_n1 + zn[g.node_dst] @ a_n2
    edge_logits = zn[g.edge_node] @ a_e1 + ze[g.edge_id] @ a_e2
    node_alpha = _segment_softmax(_leaky(node_logits, p.leaky_slope), g.node_src, g.num_nodes)
    edge_alpha = _segment_softmax(_leaky(edge_logits, p.leaky_slope), g.edge_node, g.num_nodes)

    out = np.zeros((g.num_nodes, d_out))
    np.add.at(out, g.node_src, node_alpha[:, None] * zn[g.node_dst])
    np.add.at(out, g.edge_node, edge_alpha[:, None] * ze[g.edge_id])
    return out, HeadCache(zn, ze, node_logits, node_alpha, edge_logits, edge_alpha)


def gat_forward(g: EncodedGraph, p: GatParams, *, return_cache: bool = False):
    """Node representations (n x d_out); with ``return_cache`` also the per-head intermediates."""
    if g.dim != p.d_in:
        raise ValueError(f"embedding dim {g.dim} does not match GAT input dim {p.d_in}")
    out = np.zeros((g.num_nodes, p.d_out))
    cache = GatCache()
    for head in range(p.heads):
        head_out, head_cache = _forward_head(g, p, head)
        out += head_out
        cache.heads.append(head_cache)
    out /= p.heads
    if return_cache:
        return out, cache
    return out


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Per-head attention rows; ``node_weights[h, p]`` belongs to pair ``node_src[p] -> node_dst[p]``."""

    node_src: np.ndarray
    node_dst: np.ndarray
    node_weights: np.ndarray
    edge_node: np.ndarray
    edge_id: np.ndarray
    edge_weights: np.ndarray

    def node_row_sums(self, num_nodes: int) -> np.ndarray:
        return np.stack([_segment_sum(row, self.node_src, num_nodes) for row in self.node_weights])

    def edge_row_sums(self, num_nodes: int) -> np.ndarray:
        return np.stack([_segment_sum(row, self.edge_node, num_nodes) for row in self.edge_weights])


def attention_weights(g: EncodedGraph, p: GatParams) -> AttentionWeights:
    _, cache = gat_forward(g, p, return_cache=True)
    return AttentionWeights(
        node_src=g.node_src,
        node_dst=g.node_dst,
        node_weights=np.stack([head.node_alpha for head in cache.heads]),
        edge_node=g.edge_node,
        edge_id=g.edge_id,
        edge_weights=np.stack([head.edge_alpha for head in cache.heads]),
    )


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _softmax_backward(alpha: np.ndarray, d_alpha: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    weighted = _segment_sum(alpha * d_alpha, segments, num_segments)
    return alpha * (d_alpha - weighted[segments])


def gat_backward(
    g: EncodedGraph,
    p: GatParams,
    upstream: np.ndarray,
    cache: Optional[GatCache] = None,
) -> GatGradients:
    """Reverse-mode gradients of ``sum(upstream * gat_forward(g, p))``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (g.num_nodes, p.d_out):
        raise ValueError(f"upstream gradient must have shape {(g.num_nodes, p.d_out)}, got {upstream.shape}")
    if cache is None:
        _, cache = gat_forward(g, p, return_cache=True)

    d_out = p.d_out
    slope = p.leaky_slope
    grads = GatGradients(
        W_N=np.zeros_like(p.W_N),
        W_E=np.zeros_like(p.W_E),
        a_N=np.zeros_like(p.a_N),
        a_E=np.zeros_like(p.a_E),
        node_embeddings=np.zeros_like(g.node_embeddings),
        edge_embeddings=np.zeros_like(g.edge_embeddings),
    )
    d_head = upstream / p.heads
    src, dst = g.node_src, g.node_dst
    enode, eid = g.edge_node, g.edge_id

    for head, hc in enumerate(cache.heads):
        a_n1, a_n2 = p.a_N[head, :d_out], p.a_N[head, d_out:]
        a_e1, a_e2 = p.a_E[head, :d_out], p.a_E[head, d_out:]
        d_zn = np.zeros_like(hc.zn)
        d_ze = np.zeros_like(hc.ze)

        # node-node attention
        if src.size:
            d_alpha = np.einsum("pd,pd->p", d_head[src], hc.zn[dst])
            np.add.at(d_zn, dst, hc.node_alpha[:, None] * d_head[src])
            d_logits = _softmax_backward(hc.node_alpha, d_alpha, src, g.num_nodes)
            d_u = d_logits * np.where(hc.node_logits > 0, 1.0, slope)
            grads.a_N[head, :d_out] += d_u @ hc.zn[src]
            grads.a_N[head, d_out:] += d_u @ hc.zn[dst]
            np.add.at(d_zn, src, d_u[:, None] * a_n1)
            np.add.at(d_zn, dst, d_u[:, None] * a_n2)

        # node-edge attention
        if enode.size:
            d_beta = np.einsum("pd,pd->p", d_head[enode], hc.ze[eid])
            np.add.at(d_ze, eid, hc.edge_alpha[:, None] * d_head[enode])
            d_logits = _softmax_backward(hc.edge_alpha, d_beta, enode, g.num_nodes)
            d_u = d_logits * np.where(hc.edge_logits > 0, 1.0, slope)
            grads.a_E[head, :d_out] += d_u @ hc.zn[enode]
            grads.a_E[head, d_out:] += d_u @ hc.ze[eid]
            np.add.at(d_zn, enode, d_u[:, None] * a_e1)
            np.add.at(d_ze, eid, d_u[:, None] * a_e2)

        grads.W_N[head] += d_zn.T @ g.node_embeddings
        grads.W_E[head] += d_ze.T @ g.edge_embeddings
        grads.node_embeddings += d_zn @ p.W_N[head]
        grads.edge_embeddings += d_ze @ p.W_E[head]

    return grads


__all__ = [
    "AttentionWeights",
    "DEFAULT_HEADS",
    "DEFAULT_LEAKY_SLOPE",
    "EncodedGraph",
    "GatCache",
    "GatGradients",
    "GatParams",
    "attention_weights",
    "encode_graph",
    "gat_backward",
    "gat_forward",
    "init_gat_params",
]

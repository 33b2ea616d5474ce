"""Choice scoring: claim/KG alignment, self-attention fusion, sigmoid probability, and answer selection."""

from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import MCQAItem, gold_cardinality
from .embedding import Encoder
from .gat import EncodedGraph, GatCache, GatParams, encode_graph, gat_backward, gat_forward
from .kg_store import ClaimGraph, KnowledgeGraph, build_claim_graph
from .retrieval import EntityIndex, SubGraph, build_entity_index, sample_subgraph

logger = logging.getLogger(__name__)

Extractor = Callable[[str, str], ClaimGraph]
Cardinality = Union[int, str]

EMPTY_CLAIMS_WARNING = "empty_claim_graph"
EMPTY_SUBGRAPH_WARNING = "empty_subgraph"
PROBABILITY_FLOOR = 1e-12


@dataclass
class ScorerParams:
    """Self-attention projections (row convention: ``Q = seq @ W_Q``) and the output vector."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    w_final: np.ndarray

    def __post_init__(self) -> None:
        self.W_Q = np.asarray(self.W_Q, dtype=np.float64)
        self.W_K = np.asarray(self.W_K, dtype=np.float64)
        self.W_V = np.asarray(self.W_V, dtype=np.float64)
        self.w_final = np.asarray(self.w_final, dtype=np.float64).reshape(-1)
        d = self.w_final.shape[0]
        for name in ("W_Q", "W_K", "W_V"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must have shape {(d, d)}, got {getattr(self, name).shape}")
        if not all(np.all(np.isfinite(array)) for array in self.arrays().values()):
            raise ValueError("scorer parameters must be finite")

    @property
    def dim(self) -> int:
        return self.w_final.shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "w_final": self.w_final}

    def copy(self) -> "ScorerParams":
        return ScorerParams(self.W_Q.copy(), self.W_K.copy(), self.W_V.copy(), self.w_final.copy())


def init_scorer_params(
    dim: int,
    seed: int = 0,
    *,
    rng: Optional[np.random.Generator] = None,
    attention_gain: float = 0.0,
    value_gain: float = 0.0,
) -> ScorerParams:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) initialization.

    ``attention_gain`` adds a scaled identity to ``W_Q`` and ``W_K``, so the
    choice row starts out attending to aggregated rows that share its tokens.
    ``value_gain`` does the same for ``W_V``.
    """
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    generator = rng if rng is not None else np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(dim)
    identity = np.eye(dim)
    return ScorerParams(
        W_Q=generator.uniform(-scale, scale, size=(dim, dim)) + attention_gain * identity,
        W_K=generator.uniform(-scale, scale, size=(dim, dim)) + attention_gain * identity,
        W_V=generator.uniform(-scale, scale, size=(dim, dim)) + value_gain * identity,
        w_final=generator.uniform(-scale, scale, size=dim),
    )


def parameter_arrays(gat: GatParams, scorer: ScorerParams) -> Dict[str, np.ndarray]:
    """All trainable arrays keyed ``gat.<name>`` / ``scorer.<name>`` (live views, not copies)."""
    arrays = {f"gat.{name}": array for name, array in gat.arrays().items()}
    arrays.update({f"scorer.{name}": array for name, array in scorer.arrays().items()})
    return arrays


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _row_norms(rows: np.ndarray) -> np.ndarray:
    return np.linalg.norm(rows, axis=1) if rows.size else np.zeros(rows.shape[0])


def _unit_rows(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = _row_norms(rows)
    safe = np.where(norms > 0, norms, 1.0)
    return rows / safe[:, None], norms


def relevance_matrix(claim_reps: np.ndarray, kg_reps: np.ndarray) -> np.ndarray:
    """Cosine between every claim row and every KG row (0 where either row is zero)."""
    claim_reps = np.asarray(claim_reps, dtype=np.float64)
    kg_reps = np.asarray(kg_reps, dtype=np.float64)
    if claim_reps.shape[1:] != kg_reps.shape[1:]:
        raise ValueError(f"dimension mismatch: {claim_reps.shape} vs {kg_reps.shape}")
    claim_unit, _ = _unit_rows(claim_reps)
    kg_unit, _ = _unit_rows(kg_reps)
    return np.clip(claim_unit @ kg_unit.T, -1.0, 1.0)


def aggregate_claims(relevance: np.ndarray, kg_reps: np.ndarray) -> np.ndarray:
    return np.asarray(relevance, dtype=np.float64) @ np.asarray(kg_reps, dtype=np.float64)


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


@dataclass
class AttentionCache:
    seq: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    A: np.ndarray


def self_attention(seq: np.ndarray, p: ScorerParams, *, return_cache: bool = False):
    """Single-head scaled dot-product attention; row 0 of the output is the fused choice vector."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != p.dim:
        raise ValueError(f"sequence must have shape (n, {p.dim}), got {seq.shape}")
    Q = seq @ p.W_Q
    K = seq @ p.W_K
    V = seq @ p.W_V
    A = _row_softmax(Q @ K.T / np.sqrt(p.dim))
    out = A @ V
    if return_cache:
        return out, AttentionCache(seq, Q, K, V, A)
    return out


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# Per-choice pipeline
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PreparedChoice:
    """Parameter-independent inputs of one (question, choice) pair."""

    item_id: str
    label: str
    target: bool
    claim_graph: ClaimGraph
    subgraph: SubGraph
    claims: EncodedGraph
    kg: EncodedGraph
    choice_vector: np.ndarray
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ChoiceScore:
    label: str
    probability: float
    subgraph_size: int
    claim_count: int
    warnings: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 < self.probability < 1.0:
            raise ValueError(f"probability must be within (0, 1), got {self.probability}")


@dataclass(eq=False)
class ChoiceForward:
    probability: float
    logit: float
    c_final: np.ndarray
    claim_reps: np.ndarray
    kg_reps: np.ndarray
    relevance: np.ndarray
    claim_cache: GatCache
    kg_cache: GatCache
    attention: AttentionCache


def choice_query(item: MCQAItem, label: str) -> str:
    return f"{item.question} {item.choice(label).text}"


def prepare_choice(
    item: MCQAItem,
    label: str,
    kg: KnowledgeGraph,
    extractor: Extractor,
    encoder: Encoder,
    *,
    index: Optional[EntityIndex] = None,
    top_k: int = 10,
    depth: int = 1,
    max_entities: int = 50,
    use_claims: bool = True,
    use_kg: bool = True,
) -> PreparedChoice:
    """Extract claims, sample the sub-KG, and embed both for one choice."""
    choice = item.choice(label)
    query = choice_query(item, label)

    claim_graph = extractor(item.question, choice.text) if use_claims else build_claim_graph(())
    if use_kg:
        subgraph = sample_subgraph(kg, query, top_k=top_k, depth=depth, max_entities=max_entities, index=index)
    else:
        subgraph = SubGraph.empty()

    warnings = list(getattr(claim_graph, "warnings", ()))
    if claim_graph.is_empty():
        warnings.append(EMPTY_CLAIMS_WARNING)
    if subgraph.is_empty():
        warnings.append(EMPTY_SUBGRAPH_WARNING)

    return PreparedChoice(
        item_id=item.id,
        label=label,
        target=label in item.targets,
        claim_graph=claim_graph,
        subgraph=subgraph,
        claims=encode_graph(claim_graph, encoder),
        kg=encode_graph(subgraph.graph, encoder),
        choice_vector=np.asarray(encoder.embed(query), dtype=np.float64),
        warnings=tuple(dict.fromkeys(warnings)),
    )


def forward_choice(prep: PreparedChoice, gat: GatParams, scorer: ScorerParams) -> ChoiceForward:
    claim_reps, claim_cache = gat_forward(prep.claims, gat, return_cache=True)
    kg_reps, kg_cache = gat_forward(prep.kg, gat, return_cache=True)
    relevance = relevance_matrix(claim_reps, kg_reps)
    aggregated = aggregate_claims(relevance, kg_reps)
    seq = np.vstack([prep.choice_vector[None, :], aggregated])
    fused, attention = self_attention(seq, scorer, return_cache=True)
    c_final = fused[0]
    logit = float(scorer.w_final @ c_final)
    # Clipped for reporting only; losses are computed from the logit.
    probability = float(np.clip(sigmoid(logit), PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR))
    return ChoiceForward(
        probability, logit, c_final, claim_reps, kg_reps, relevance, claim_cache, kg_cache, attention
    )


def _normalize_backward(rows: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    unit, norms = _unit_rows(rows)
    safe = np.where(norms > 0, norms, 1.0)
    projected = d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)
    return np.where((norms > 0)[:, None], projected / safe[:, None], 0.0)


def backward_choice(
    prep: PreparedChoice,
    gat: GatParams,
    scorer: ScorerParams,
    forward: ChoiceForward,
    grad_c_final: np.ndarray,
    grad_w_final: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Gradients of a loss with the given ``dL/dc_final`` and ``dL/dw_final``, keyed as :func:`parameter_arrays`."""
    cache = forward.attention
    d = scorer.dim
    scale = np.sqrt(d)

    d_out = np.zeros_like(cache.seq)
    d_out[0] = grad_c_final
    d_A = d_out @ cache.V.T
    d_V = cache.A.T @ d_out
    d_S = cache.A * (d_A - np.sum(cache.A * d_A, axis=1, keepdims=True))
    d_Q = d_S @ cache.K / scale
    d_K = d_S.T @ cache.Q / scale

    grads: Dict[str, np.ndarray] = {
        "scorer.W_Q": cache.seq.T @ d_Q,
        "scorer.W_K": cache.seq.T @ d_K,
        "scorer.W_V": cache.seq.T @ d_V,
        "scorer.w_final": np.asarray(grad_w_final, dtype=np.float64).copy(),
    }

    # Row 0 is the frozen choice embedding; only the aggregated rows carry gradient on.
    d_seq = d_Q @ scorer.W_Q.T + d_K @ scorer.W_K.T + d_V @ scorer.W_V.T
    d_aggregated = d_seq[1:]
    d_relevance = d_aggregated @ forward.kg_reps.T
    d_kg = forward.relevance.T @ d_aggregated

    claim_unit, _ = _unit_rows(forward.claim_reps)
    kg_unit, _ = _unit_rows(forward.kg_reps)
    d_claim = _normalize_backward(forward.claim_reps, d_relevance @ kg_unit)
    d_kg = d_kg + _normalize_backward(forward.kg_reps, d_relevance.T @ claim_unit)

    claim_grads = gat_backward(prep.claims, gat, d_claim, forward.claim_cache)
    kg_grads = gat_backward(prep.kg, gat, d_kg, forward.kg_cache)
    for name, array in claim_grads.arrays().items():
        grads[f"gat.{name}"] = array + kg_grads.arrays()[name]
    return grads


def score_choice(
    item: MCQAItem,
    label: str,
    kg: KnowledgeGraph,
    extractor: Extractor,
    encoder: Encoder,
    gat_params: GatParams,
    scorer_params: ScorerParams,
    **options,
) -> ChoiceScore:
    """Probability that ``label`` is a correct answer of ``item``."""
    prep = prepare_choice(item, label, kg, extractor, encoder, **options)
    return score_prepared(prep, gat_params, scorer_params)


def score_prepared(prep: PreparedChoice, gat: GatParams, scorer: ScorerParams) -> ChoiceScore:
    forward = forward_choice(prep, gat, scorer)
    return ChoiceScore(
        label=prep.label,
        probability=forward.probability,
        subgraph_size=prep.subgraph.num_entities,
        claim_count=prep.claim_graph.num_edges,
        warnings=prep.warnings,
    )


# ---------------------------------------------------------------------------
# Answer selection
# ---------------------------------------------------------------------------


def select_answers(scores: Mapping[str, float], cardinality: Cardinality) -> FrozenSet[str]:
    """Top-``cardinality`` labels by probability (ties by label), or ``"auto"`` thresholding at 0.5."""
    if not scores:
        raise ValueError("cannot select answers from empty scores")
    ranked = sorted(scores, key=lambda label: (-scores[label], label))
    if cardinality == "auto":
        chosen = [label for label in ranked if scores[label] >= 0.5]
        count = min(max(len(chosen), 1), 2)
        return frozenset(ranked[:count])
    if isinstance(cardinality, bool) or not isinstance(cardinality, (int, np.integer)):
        raise ValueError(f"cardinality must be a positive integer or 'auto', got {cardinality!r}")
    if not 1 <= cardinality <= len(scores):
        raise ValueError(f"cardinality must be between 1 and {len(scores)}, got {cardinality}")
    return frozenset(ranked[:cardinality])


@dataclass(frozen=True)
class Prediction:
    item_id: str
    probabilities: Dict[str, float]
    selected: Tuple[str, ...]
    warnings: Dict[str, Tuple[str, ...]] = field(default_factory=dict)


def predict_prepared(
    item: MCQAItem,
    prepared: Sequence[PreparedChoice],
    gat: GatParams,
    scorer: ScorerParams,
    cardinality: Cardinality = "gold",
) -> Prediction:
    scores = [score_prepared(prep, gat, scorer) for prep in prepared]
    probabilities = {score.label: score.probability for score in scores}
    count = gold_cardinality(item) if cardinality == "gold" else cardinality
    selected = select_answers(probabilities, count)
    warnings = {score.label: score.warnings for score in scores if score.warnings}
    return Prediction(item.id, probabilities, tuple(sorted(selected)), warnings)


def answer_items(
    items: Sequence[MCQAItem],
    kg: KnowledgeGraph,
    extractor: Extractor,
    encoder: Encoder,
    gat: GatParams,
    scorer: ScorerParams,
    *,
    cardinality: Cardinality = "gold",
    jobs: int = 1,
    index: Optional[EntityIndex] = None,
    **options,
) -> List[Prediction]:
    """Predictions for every item, sorted by item id whatever the job count."""
    if jobs < 1:
        raise ValueError(f"jobs must be at least 1, got {jobs}")
    if index is None and not kg.is_empty():
        index = build_entity_index(kg)

    def answer(item: MCQAItem) -> Prediction:
        prepared = [
            prepare_choice(item, label, kg, extractor, encoder, index=index, **options) for label in item.labels
        ]
        return predict_prepared(item, prepared, gat, scorer, cardinality)

    if jobs == 1:
        predictions = [answer(item) for item in items]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            predictions = list(pool.map(answer, items))

    predictions.sort(key=lambda prediction: prediction.item_id)
    logger.info("Answered %d items (cardinality=%s, jobs=%d)", len(predictions), cardinality, jobs)
    return predictions


__all__ = [
    "ChoiceForward",
    "ChoiceScore",
    "Extractor",
    "PreparedChoice",
    "Prediction",
    "ScorerParams",
    "aggregate_claims",
    "answer_items",
    "backward_choice",
    "choice_query",
    "forward_choice",
    "init_scorer_params",
    "parameter_arrays",
    "predict_prepared",
    "prepare_choice",
    "relevance_matrix",
    "score_choice",
    "score_prepared",
    "select_answers",
    "self_attention",
    "sigmoid",
]

"""Losses, AdamW, gradient checking, and the training loop over (question, choice, label) tuples."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from marshmallow import Schema, fields, validate

from .checkpoint import save_checkpoint
from .dataset import MCQAItem
from .embedding import Encoder
from .gat import GatParams, init_gat_params
from .kg_store import KnowledgeGraph
from .retrieval import EntityIndex, build_entity_index
from .scorer import (
    ChoiceForward,
    Extractor,
    PreparedChoice,
    ScorerParams,
    backward_choice,
    forward_choice,
    init_scorer_params,
    parameter_arrays,
    predict_prepared,
    prepare_choice,
    sigmoid,
)
from .settings import ConfigError

logger = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "cosine")
UPDATE_UNITS = ("question", "choice")

Objective = Callable[[], Tuple[float, Mapping[str, np.ndarray]]]
PreparedItem = Tuple[MCQAItem, List[PreparedChoice]]


class TrainingDivergedError(ValueError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, epoch: int, item_id: str, label: str, loss: float) -> None:
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, item {item_id!r}, choice {label}")
        self.epoch = epoch
        self.item_id = item_id
        self.label = label
        self.loss = loss


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class TrainConfigSchema(Schema):
    learning_rate = fields.Float(required=True, validate=validate.Range(min=0, min_inclusive=False))
    epochs = fields.Integer(required=True, validate=validate.Range(min=1))
    beta1 = fields.Float(required=True, validate=validate.Range(min=0, max=1, max_inclusive=False))
    beta2 = fields.Float(required=True, validate=validate.Range(min=0, max=1, max_inclusive=False))
    eps = fields.Float(required=True, validate=validate.Range(min=0, min_inclusive=False))
    weight_decay = fields.Float(required=True, validate=validate.Range(min=0))
    seed = fields.Integer(required=True)
    loss_kind = fields.String(required=True, validate=validate.OneOf(LOSS_KINDS))
    checkpoint_every = fields.Integer(required=True, validate=validate.Range(min=0))
    dim = fields.Integer(required=True, validate=validate.Range(min=1))
    heads = fields.Integer(required=True, validate=validate.Range(min=1))
    leaky_slope = fields.Float(
        required=True, validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False)
    )
    top_k = fields.Integer(required=True, validate=validate.Range(min=1))
    depth = fields.Integer(required=True, validate=validate.Range(min=0))
    max_entities = fields.Integer(required=True, validate=validate.Range(min=1))
    stop_accuracy = fields.Float(allow_none=True, validate=validate.Range(min=0, max=1))
    use_claims = fields.Boolean(required=True)
    use_kg = fields.Boolean(required=True)
    update_every = fields.String(required=True, validate=validate.OneOf(UPDATE_UNITS))
    node_gain = fields.Float(required=True)
    edge_gain = fields.Float(required=True)
    attention_gain = fields.Float(required=True)
    value_gain = fields.Float(required=True)


_config_schema = TrainConfigSchema()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-7
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    loss_kind: str = "bce"
    checkpoint_every: int = 0
    dim: int = 64
    heads: int = 6
    leaky_slope: float = 0.2
    top_k: int = 10
    depth: int = 1
    max_entities: int = 50
    stop_accuracy: Optional[float] = None
    use_claims: bool = True
    use_kg: bool = True
    update_every: str = "question"
    node_gain: float = 2.0
    edge_gain: float = 0.5
    attention_gain: float = 6.0
    value_gain: float = 1.0

    def __post_init__(self) -> None:
        errors = _config_schema.validate(asdict(self))
        if errors:
            field_name = sorted(errors)[0]
            raise ConfigError(f"invalid training config {field_name}: {'; '.join(errors[field_name])}")
        if self.max_entities < self.top_k:
            raise ConfigError(f"invalid training config max_entities: must be at least top_k ({self.top_k})")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any], **overrides: Any) -> "TrainConfig":
        values = {
            "learning_rate": settings["learningRate"],
            "epochs": settings["epochs"],
            "beta1": settings["beta1"],
            "beta2": settings["beta2"],
            "eps": settings["adamEps"],
            "weight_decay": settings["weightDecay"],
            "seed": settings["seed"],
            "loss_kind": settings["lossKind"],
            "checkpoint_every": settings["checkpointEvery"],
            "dim": settings["dim"],
            "heads": settings["heads"],
            "leaky_slope": settings["leakySlope"],
            "top_k": settings["topK"],
            "depth": settings["depth"],
            "max_entities": settings["maxEntities"],
            "update_every": settings["updateEvery"],
            "node_gain": settings["nodeGain"],
            "edge_gain": settings["edgeGain"],
            "attention_gain": settings["attentionGain"],
            "value_gain": settings["valueGain"],
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def sampling_options(self) -> Dict[str, Any]:
        return {
            "top_k": self.top_k,
            "depth": self.depth,
            "max_entities": self.max_entities,
            "use_claims": self.use_claims,
            "use_kg": self.use_kg,
        }


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def bce_loss(o: int, y: float) -> Tuple[float, float]:
    """Binary cross-entropy and its derivative with respect to ``y``."""
    if o not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {o!r}")
    if not 0.0 < y < 1.0:
        raise ValueError(f"probability must be within (0, 1), got {y!r}")
    loss = -(o * math.log(y) + (1 - o) * math.log(1 - y))
    return loss, (y - o) / (y * (1 - y))


def bce_with_logit(o: int, z: float) -> Tuple[float, float]:
    """Binary cross-entropy of ``sigmoid(z)`` and its derivative with respect to ``z``."""
    if o not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {o!r}")
    return float(np.logaddexp(0.0, z) - o * z), float(sigmoid(z) - o)


def cosine_embedding_loss(o: int, y: float) -> Tuple[float, float]:
    """``(1 + o)(1 - y) + (1 - o) y`` for ``o`` in {-1, +1}; negative when o = -1 and y < 0."""
    if o not in (-1, 1):
        raise ValueError(f"label must be -1 or +1, got {o!r}")
    if not -1.0 <= y <= 1.0:
        raise ValueError(f"cosine must be within [-1, 1], got {y!r}")
    return (1 + o) * (1 - y) + (1 - o) * y, float(-(1 + o) + (1 - o))


def _cosine_with_grads(w: np.ndarray, c: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    norm_w = float(np.linalg.norm(w))
    norm_c = float(np.linalg.norm(c))
    if norm_w == 0.0 or norm_c == 0.0:
        return 0.0, np.zeros_like(c), np.zeros_like(w)
    w_unit = w / norm_w
    c_unit = c / norm_c
    y = float(np.clip(w_unit @ c_unit, -1.0, 1.0))
    return y, (w_unit - y * c_unit) / norm_c, (c_unit - y * w_unit) / norm_w


def graf_objective(
    prep: PreparedChoice,
    gat: GatParams,
    scorer: ScorerParams,
    loss_kind: str = "bce",
) -> Tuple[float, Dict[str, np.ndarray], ChoiceForward]:
    """Loss of one (question, choice) tuple and its gradients for every trainable array."""
    forward = forward_choice(prep, gat, scorer)
    if loss_kind == "bce":
        loss, d_logit = bce_with_logit(int(prep.target), forward.logit)
        grad_c = d_logit * scorer.w_final
        grad_w = d_logit * forward.c_final
    elif loss_kind == "cosine":
        y, dy_dc, dy_dw = _cosine_with_grads(scorer.w_final, forward.c_final)
        loss, d_y = cosine_embedding_loss(1 if prep.target else -1, y)
        grad_c = d_y * dy_dc
        grad_w = d_y * dy_dw
    else:
        raise ConfigError(f"unknown loss kind {loss_kind!r}; expected one of {list(LOSS_KINDS)}")
    grads = backward_choice(prep, gat, scorer, forward, grad_c, grad_w)
    return loss, grads, forward


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay, updating the given arrays in place."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ) -> None:
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(array) for name, array in self.params.items()}
        self._v = {name: np.zeros_like(array) for name, array in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param *= 1.0 - self.lr * self.weight_decay
            param -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def grad_check(
    objective: Objective,
    params: Mapping[str, np.ndarray],
    n_coords: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Differences between magnitudes below ``floor`` are scaled by ``floor`` instead.

    ``objective()`` must read the live ``params`` arrays and return
    ``(loss, grads)`` with ``grads`` keyed like ``params``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _, analytic = objective()
    analytic = {name: np.array(grad, dtype=np.float64) for name, grad in analytic.items()}

    coords = [(name, index) for name, array in params.items() for index in range(array.size)]
    if not coords:
        return 0.0
    rng = np.random.default_rng(seed)
    if n_coords < len(coords):
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[int(i)] for i in sorted(picked)]

    worst = 0.0
    for name, index in coords:
        array = params[name]
        position = np.unravel_index(index, array.shape)
        original = float(array[position])
        array[position] = original + eps
        plus, _ = objective()
        array[position] = original - eps
        minus, _ = objective()
        array[position] = original
        numeric = (plus - minus) / (2 * eps)
        expected = float(analytic[name].reshape(-1)[index]) if name in analytic else 0.0
        error = abs(expected - numeric) / max(abs(expected), abs(numeric), floor)
        worst = max(worst, error)
    return worst


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    mean_loss: float
    train_accuracy: float
    validation_accuracy: float
    loss_evaluations: int


@dataclass
class TrainResult:
    gat: GatParams
    scorer: ScorerParams
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = 0.0


def prepare_items(
    items: Sequence[MCQAItem],
    kg: KnowledgeGraph,
    extractor: Extractor,
    encoder: Encoder,
    *,
    index: Optional[EntityIndex] = None,
    **options: Any,
) -> List[PreparedItem]:
    if index is None and not kg.is_empty():
        index = build_entity_index(kg)
    return [
        (item, [prepare_choice(item, label, kg, extractor, encoder, index=index, **options) for label in item.labels])
        for item in items
    ]


def evaluate_accuracy(
    prepared_items: Sequence[PreparedItem],
    gat: GatParams,
    scorer: ScorerParams,
    cardinality: Union[int, str] = "gold",
) -> float:
    """Exact-match accuracy of the current parameters."""
    if not prepared_items:
        return 0.0
    correct = 0
    for item, prepared in prepared_items:
        prediction = predict_prepared(item, prepared, gat, scorer, cardinality)
        correct += int(frozenset(prediction.selected) == item.targets)
    return correct / len(prepared_items)


def train(
    dataset: Sequence[MCQAItem],
    kg: KnowledgeGraph,
    extractor: Extractor,
    encoder: Encoder,
    config: TrainConfig,
    *,
    validation: Sequence[MCQAItem] = (),
    checkpoint_dir: Optional[Union[str, Path]] = None,
    index: Optional[EntityIndex] = None,
) -> TrainResult:
    """Train GAT and scorer parameters; returns the best-validation checkpoint (earliest on ties)."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if encoder.dim != config.dim:
        raise ConfigError(f"encoder dim {encoder.dim} does not match configured dim {config.dim}")

    options = config.sampling_options()
    if index is None and not kg.is_empty():
        index = build_entity_index(kg)
    prepared_train = prepare_items(dataset, kg, extractor, encoder, index=index, **options)
    prepared_validation = prepare_items(validation, kg, extractor, encoder, index=index, **options)
    logger.info(
        "Prepared %d training and %d validation items", len(prepared_train), len(prepared_validation)
    )

    rng = np.random.default_rng(config.seed)
    gat = init_gat_params(
        config.dim,
        config.heads,
        leaky_slope=config.leaky_slope,
        rng=rng,
        node_gain=config.node_gain,
        edge_gain=config.edge_gain,
    )
    scorer = init_scorer_params(
        config.dim, rng=rng, attention_gain=config.attention_gain, value_gain=config.value_gain
    )
    optimizer = AdamW(
        parameter_arrays(gat, scorer),
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )

    result = TrainResult(gat.copy(), scorer.copy(), best_epoch=0, best_accuracy=-1.0)
    for epoch in range(1, config.epochs + 1):
        losses: List[float] = []
        for position in rng.permutation(len(prepared_train)):
            item, prepared = prepared_train[int(position)]
            accumulated: Dict[str, np.ndarray] = {}
            for prep in prepared:
                loss, grads, _ = graf_objective(prep, gat, scorer, config.loss_kind)
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDivergedError(epoch, item.id, prep.label, loss)
                losses.append(loss)
                if config.update_every == "choice":
                    optimizer.step(grads)
                    continue
                for name, grad in grads.items():
                    accumulated[name] = accumulated[name] + grad if name in accumulated else grad
            if accumulated:
                optimizer.step(accumulated)

        train_accuracy = evaluate_accuracy(prepared_train, gat, scorer)
        validation_accuracy = (
            evaluate_accuracy(prepared_validation, gat, scorer) if prepared_validation else train_accuracy
        )
        entry = EpochLog(epoch, float(np.mean(losses)), train_accuracy, validation_accuracy, len(losses))
        result.log.append(entry)
        logger.info(
            "Epoch %d/%d: loss=%.6f train_acc=%.4f val_acc=%.4f",
            epoch,
            config.epochs,
            entry.mean_loss,
            train_accuracy,
            validation_accuracy,
        )

        if validation_accuracy > result.best_accuracy:
            result.gat = gat.copy()
            result.scorer = scorer.copy()
            result.best_epoch = epoch
            result.best_accuracy = validation_accuracy

        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:04d}.npz",
                gat,
                scorer,
                {"epoch": epoch, "mean_loss": entry.mean_loss, "validation_accuracy": validation_accuracy},
            )

        if config.stop_accuracy is not None and validation_accuracy >= config.stop_accuracy:
            logger.info("Reached accuracy %.4f at epoch %d; stopping", validation_accuracy, epoch)
            break

    logger.info("Best epoch %d with accuracy %.4f", result.best_epoch, result.best_accuracy)
    return result


__all__ = [
    "AdamW",
    "EpochLog",
    "LOSS_KINDS",
    "TrainConfig",
    "TrainConfigSchema",
    "TrainResult",
    "TrainingDivergedError",
    "bce_loss",
    "bce_with_logit",
    "cosine_embedding_loss",
    "evaluate_accuracy",
    "graf_objective",
    "grad_check",
    "prepare_items",
    "train",
]

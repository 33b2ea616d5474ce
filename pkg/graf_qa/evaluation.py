"""Exam scoring, inter-model agreement, TF-IDF corpus statistics, and difficulty z-scores."""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import LABELS, MCQAItem
from .scorer import Prediction

logger = logging.getLogger(__name__)

LabelSet = FrozenSet[str]

SINGLE_CATEGORIES: Tuple[str, ...] = LABELS
COMBINED_CATEGORIES: Tuple[str, ...] = LABELS + tuple(
    "".join(pair) for pair in itertools.combinations(LABELS, 2)
)
CATEGORY_SETS: Dict[str, Tuple[str, ...]] = {"single": SINGLE_CATEGORIES, "combined": COMBINED_CATEGORIES}


@dataclass(frozen=True)
class RunResult:
    """One model's selections over a set of items, with gold targets when known."""

    model_id: str
    selected: Mapping[str, LabelSet]
    targets: Mapping[str, LabelSet] = field(default_factory=dict)

    @property
    def item_ids(self) -> List[str]:
        return sorted(self.selected)

    @property
    def correct(self) -> Dict[str, bool]:
        if set(self.targets) != set(self.selected):
            raise ValueError(f"run {self.model_id!r} has no gold targets for every item")
        return {item_id: self.selected[item_id] == self.targets[item_id] for item_id in self.item_ids}

    def accuracy(self) -> float:
        return exam_accuracy(self.selected, self.targets)


def _as_label_sets(mapping: Mapping[str, Iterable[str]]) -> Dict[str, LabelSet]:
    return {item_id: frozenset(labels) for item_id, labels in mapping.items()}


def run_from_predictions(
    model_id: str,
    predictions: Sequence[Prediction],
    gold: Optional[Union[Sequence[MCQAItem], Mapping[str, Iterable[str]]]] = None,
) -> RunResult:
    selected = {prediction.item_id: frozenset(prediction.selected) for prediction in predictions}
    if len(selected) != len(predictions):
        raise ValueError(f"run {model_id!r} has duplicate item ids")
    targets: Dict[str, LabelSet] = {}
    if gold is not None:
        if isinstance(gold, Mapping):
            targets = _as_label_sets(gold)
        else:
            targets = {item.id: item.targets for item in gold}
        _check_same_ids(selected, targets, f"run {model_id!r} vs gold")
    return RunResult(model_id, selected, targets)


def _check_same_ids(left: Mapping[str, object], right: Mapping[str, object], context: str) -> None:
    if set(left) == set(right):
        return
    missing = sorted(set(right) - set(left))[:5]
    extra = sorted(set(left) - set(right))[:5]
    raise ValueError(f"{context}: item ids differ (missing {missing}, unexpected {extra})")


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


def exam_accuracy(predictions: Mapping[str, Iterable[str]], gold: Mapping[str, Iterable[str]]) -> float:
    """Fraction of items whose selected set equals the target set exactly."""
    _check_same_ids(predictions, gold, "predictions vs gold")
    if not gold:
        raise ValueError("cannot score an empty exam")
    matches = sum(frozenset(predictions[item_id]) == frozenset(gold[item_id]) for item_id in gold)
    return matches / len(gold)


def accuracy_by(run: RunResult, items: Sequence[MCQAItem], key: str = "exam_type") -> Dict[str, float]:
    """Accuracy per ``exam_type`` or ``domain_tag`` group."""
    if key not in {"exam_type", "domain_tag"}:
        raise ValueError(f"cannot group by {key!r}; expected exam_type or domain_tag")
    correct = run.correct
    groups: Dict[str, List[bool]] = {}
    for item in items:
        if item.id in correct:
            groups.setdefault(getattr(item, key), []).append(correct[item.id])
    return {group: sum(flags) / len(flags) for group, flags in sorted(groups.items())}


# ---------------------------------------------------------------------------
# Agreement
# ---------------------------------------------------------------------------


def appa(runs: Sequence[RunResult]) -> float:
    """Average pairwise percentage agreement (exact selected-set equality)."""
    if len(runs) < 2:
        raise ValueError(f"agreement needs at least two runs, got {len(runs)}")
    for other in runs[1:]:
        _check_same_ids(other.selected, runs[0].selected, f"run {other.model_id!r} vs {runs[0].model_id!r}")
    item_ids = runs[0].item_ids
    if not item_ids:
        raise ValueError("agreement needs at least one item")

    percentages = []
    for left, right in itertools.combinations(runs, 2):
        same = sum(left.selected[item_id] == right.selected[item_id] for item_id in item_ids)
        percentages.append(100.0 * same / len(item_ids))
    return float(np.mean(percentages))


def category_of(selected: Iterable[str]) -> str:
    return "".join(sorted(selected))


def agreement_ratings(
    runs: Sequence[RunResult],
    categories: Union[str, Sequence[str]] = "combined",
) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Items x categories count matrix for Fleiss' kappa, rows in item-id order."""
    if isinstance(categories, str):
        try:
            category_list = CATEGORY_SETS[categories]
        except KeyError:
            raise ValueError(f"unknown category set {categories!r}; expected one of {sorted(CATEGORY_SETS)}") from None
    else:
        category_list = tuple(categories)
    column = {category: position for position, category in enumerate(category_list)}

    if not runs:
        raise ValueError("no runs to rate")
    for other in runs[1:]:
        _check_same_ids(other.selected, runs[0].selected, f"run {other.model_id!r} vs {runs[0].model_id!r}")

    item_ids = runs[0].item_ids
    ratings = np.zeros((len(item_ids), len(category_list)))
    for row, item_id in enumerate(item_ids):
        for run in runs:
            category = category_of(run.selected[item_id])
            if category not in column:
                raise ValueError(
                    f"run {run.model_id!r} selected {category!r} for item {item_id!r}, "
                    f"outside categories {list(category_list)}"
                )
            ratings[row, column[category]] += 1
    return ratings, category_list


def fleiss_kappa(ratings: Union[np.ndarray, Sequence[Sequence[float]]]) -> float:
    """Fleiss' kappa for an items x categories count matrix with a constant number of raters."""
    counts = np.asarray(ratings, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] == 0 or counts.shape[1] == 0:
        raise ValueError(f"ratings must be a non-empty items x categories matrix, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("ratings must be non-negative counts")
    row_sums = counts.sum(axis=1)
    raters = row_sums[0]
    if not np.all(row_sums == raters):
        raise ValueError(f"every item must have the same number of raters, got row sums {row_sums.tolist()}")
    if raters < 2:
        raise ValueError(f"at least two raters per item are required, got {raters:g}")

    per_item = (np.sum(counts * counts, axis=1) - raters) / (raters * (raters - 1))
    observed = float(per_item.mean())
    proportions = counts.sum(axis=0) / (counts.shape[0] * raters)
    expected = float(np.sum(proportions * proportions))
    if 1.0 - expected == 0.0:
        return 1.0
    return (observed - expected) / (1.0 - expected)


# ---------------------------------------------------------------------------
# Corpus statistics and difficulty
# ---------------------------------------------------------------------------


def tfidf_scores(corpus: Sequence[Sequence[str]]) -> Dict[str, float]:
    """Corpus-level TF-IDF: term share of all tokens times ``ln(|C| / df)``."""
    if not corpus:
        raise ValueError("corpus must contain at least one document")
    counts: Counter = Counter()
    document_frequency: Counter = Counter()
    for document in corpus:
        counts.update(document)
        document_frequency.update(set(document))
    total = sum(counts.values())
    if total == 0:
        return {}
    size = len(corpus)
    return {
        term: (count / total) * math.log(size / document_frequency[term])
        for term, count in sorted(counts.items())
    }


def model_zscores(results: Mapping[str, Mapping[str, float]]) -> Dict[str, Dict[str, float]]:
    """Per-model standardized correctness (population deviation; 0 when a model is constant)."""
    zscores: Dict[str, Dict[str, float]] = {}
    for model_id, per_item in results.items():
        if not per_item:
            raise ValueError(f"model {model_id!r} has no items")
        item_ids = sorted(per_item)
        values = np.array([float(per_item[item_id]) for item_id in item_ids])
        mean = values.mean()
        std = values.std()
        if std == 0.0:
            z = np.zeros_like(values)
        else:
            z = (values - mean) / std
        zscores[model_id] = dict(zip(item_ids, z.tolist()))
    return zscores


def difficulty_zscores(
    results: Mapping[str, Mapping[str, float]],
    topics: Mapping[str, str],
) -> Dict[str, float]:
    """Per-topic mean z-score over its items and all models; higher means easier."""
    if not results:
        raise ValueError("difficulty needs at least one model")
    per_topic: Dict[str, List[float]] = {}
    untagged = set()
    for per_item in model_zscores(results).values():
        for item_id, z in per_item.items():
            topic = topics.get(item_id)
            if topic is None:
                untagged.add(item_id)
                continue
            per_topic.setdefault(topic, []).append(z)
    if untagged:
        logger.warning("%d item(s) have no topic tag and were ignored", len(untagged))
    return {topic: float(np.mean(values)) for topic, values in sorted(per_topic.items())}


def results_from_runs(runs: Sequence[RunResult]) -> Dict[str, Dict[str, float]]:
    """``model_id -> item_id -> 1.0/0.0`` correctness table."""
    return {run.model_id: {item_id: float(flag) for item_id, flag in run.correct.items()} for run in runs}


__all__ = [
    "CATEGORY_SETS",
    "COMBINED_CATEGORIES",
    "RunResult",
    "SINGLE_CATEGORIES",
    "accuracy_by",
    "agreement_ratings",
    "appa",
    "category_of",
    "difficulty_zscores",
    "exam_accuracy",
    "fleiss_kappa",
    "model_zscores",
    "results_from_runs",
    "run_from_predictions",
    "tfidf_scores",
]

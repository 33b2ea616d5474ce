"""Multiple-choice QA items: data model, JSONL loading, and splitting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, validate

from .utils.files import atomic_write_text, iter_numbered_lines

logger = logging.getLogger(__name__)

LABELS: Tuple[str, ...] = ("A", "B", "C")
EXAM_TYPES: Tuple[str, ...] = ("entrance", "bar", "promotion")
CHOICES_PER_ITEM = 3
MAX_TARGETS = 2


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files or items violating their invariants."""


@dataclass(frozen=True)
class Choice:
    label: str
    text: str


@dataclass(frozen=True)
class MCQAItem:
    """One exam question with three labeled choices and one or two targets."""

    id: str
    question: str
    choices: Tuple[Choice, ...]
    targets: FrozenSet[str]
    domain_tag: str = ""
    exam_type: str = "entrance"

    def __post_init__(self) -> None:
        object.__setattr__(self, "choices", tuple(self.choices))
        object.__setattr__(self, "targets", frozenset(self.targets))
        problem = _item_problem(self)
        if problem:
            raise DatasetFormatError(f"item {self.id!r}: {problem}")

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(choice.label for choice in self.choices)

    def choice(self, label: str) -> Choice:
        for candidate in self.choices:
            if candidate.label == label:
                return candidate
        raise KeyError(f"item {self.id!r} has no choice {label!r}")

    def to_record(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "choices": [{"label": c.label, "text": c.text} for c in self.choices],
            "targets": sorted(self.targets),
            "domain_tag": self.domain_tag,
            "exam_type": self.exam_type,
        }


def _item_problem(item: MCQAItem) -> Optional[str]:
    if len(item.choices) != CHOICES_PER_ITEM:
        return f"expected {CHOICES_PER_ITEM} choices, found {len(item.choices)}"
    labels = [choice.label for choice in item.choices]
    if len(set(labels)) != len(labels):
        return f"duplicate choice labels {labels}"
    unknown = [label for label in labels if label not in LABELS]
    if unknown:
        return f"choice labels must be one of {list(LABELS)}, found {unknown}"
    if any(not choice.text.strip() for choice in item.choices):
        return "choice text must be non-empty"
    if not 1 <= len(item.targets) <= MAX_TARGETS:
        return f"expected 1 or 2 targets, found {len(item.targets)}"
    if not item.targets <= set(labels):
        return f"targets {sorted(item.targets)} are not all choice labels"
    if item.exam_type not in EXAM_TYPES:
        return f"exam_type must be one of {list(EXAM_TYPES)}, found {item.exam_type!r}"
    if item.exam_type == "promotion" and len(item.targets) != 1:
        return "promotion items have exactly one target"
    return None


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[MCQAItem, ...] = field(default_factory=tuple)
    test: Tuple[MCQAItem, ...] = field(default_factory=tuple)
    validation: Tuple[MCQAItem, ...] = field(default_factory=tuple)

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.test), len(self.validation)


# ---------------------------------------------------------------------------
# Record schemas
# ---------------------------------------------------------------------------


class ChoiceSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    label = fields.String(required=True, validate=validate.OneOf(LABELS))
    text = fields.String(required=True)


class MCQARecordSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    id = fields.String(required=True, validate=validate.Length(min=1))
    question = fields.String(required=True)
    choices = fields.List(fields.Nested(ChoiceSchema), required=True)
    targets = fields.List(fields.String(), required=True)
    domain_tag = fields.String(load_default="")
    exam_type = fields.String(load_default="entrance")

    @post_load
    def make_item(self, data: Dict[str, Any], **kwargs: Any) -> MCQAItem:
        return MCQAItem(
            id=data["id"],
            question=data["question"],
            choices=tuple(Choice(**choice) for choice in data["choices"]),
            targets=frozenset(data["targets"]),
            domain_tag=data["domain_tag"],
            exam_type=data["exam_type"],
        )


_record_schema = MCQARecordSchema()


# ---------------------------------------------------------------------------
# Loading and dumping
# ---------------------------------------------------------------------------


def parse_record(record: Any) -> MCQAItem:
    """Validate one decoded JSON record and build the item."""
    if isinstance(record, dict) and isinstance(record.get("targets"), list):
        targets = record["targets"]
        if len(targets) != len(set(map(str, targets))):
            raise DatasetFormatError(f"item {record.get('id')!r}: duplicate targets {targets}")
    try:
        return _record_schema.load(record)
    except ValidationError as error:
        raise DatasetFormatError(f"invalid record: {error.messages}") from error


def load_mcqa(path: Union[str, Path]) -> List[MCQAItem]:
    """Load one MCQA item per JSONL line, preserving file order."""
    items: List[MCQAItem] = []
    for number, line in iter_numbered_lines(path):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as error:
            raise DatasetFormatError(f"{path}:{number}: malformed JSON: {error.msg}") from error
        try:
            items.append(parse_record(record))
        except DatasetFormatError as error:
            raise DatasetFormatError(f"{path}:{number}: {error}") from error

    logger.info("Loaded %d MCQA items from %s", len(items), path)
    return items


def dump_mcqa(items: Iterable[MCQAItem], path: Union[str, Path]) -> None:
    """Write items as JSONL, one record per line."""
    lines = [json.dumps(item.to_record(), ensure_ascii=False) for item in items]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# Selection and splitting
# ---------------------------------------------------------------------------


def filter_items(
    items: Iterable[MCQAItem],
    *,
    exam_type: Optional[str] = None,
    domain_tag: Optional[str] = None,
) -> List[MCQAItem]:
    return [
        item
        for item in items
        if (exam_type is None or item.exam_type == exam_type)
        and (domain_tag is None or item.domain_tag == domain_tag)
    ]


def gold_cardinality(item: MCQAItem) -> int:
    return len(item.targets)


def _part_sizes(total: int, ratios: Sequence[float]) -> List[int]:
    sizes = [int(math.floor(ratio * total + 1e-9)) for ratio in ratios]
    remainder = total - sum(sizes)
    # Leftover items go one at a time to parts with a non-zero ratio, in declaration order.
    order = [i for i, ratio in enumerate(ratios) if ratio > 0]
    position = 0
    while remainder > 0 and order:
        sizes[order[position % len(order)]] += 1
        remainder -= 1
        position += 1
    return sizes


def split_dataset(items: Sequence[MCQAItem], ratios: Sequence[float], seed: int) -> DatasetSplit:
    """Shuffle with ``seed`` and cut into (train, test, validation) parts."""
    if len(ratios) != 3:
        raise ValueError(f"expected three ratios (train, test, validation), got {len(ratios)}")
    if any(ratio < 0 for ratio in ratios):
        raise ValueError(f"ratios must be non-negative, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")

    ids = [item.id for item in items]
    if len(set(ids)) != len(ids):
        raise DatasetFormatError("cannot split a dataset with duplicate item ids")

    order = np.random.default_rng(seed).permutation(len(items))
    shuffled = [items[int(index)] for index in order]
    train_size, test_size, _ = _part_sizes(len(items), ratios)

    split = DatasetSplit(
        train=tuple(shuffled[:train_size]),
        test=tuple(shuffled[train_size:train_size + test_size]),
        validation=tuple(shuffled[train_size + test_size:]),
    )
    logger.debug("Split %d items into %s (seed=%d)", len(items), split.sizes(), seed)
    return split


__all__ = [
    "CHOICES_PER_ITEM",
    "Choice",
    "ChoiceSchema",
    "DatasetFormatError",
    "DatasetSplit",
    "EXAM_TYPES",
    "LABELS",
    "MCQAItem",
    "MCQARecordSchema",
    "dump_mcqa",
    "filter_items",
    "gold_cardinality",
    "load_mcqa",
    "parse_record",
    "split_dataset",
]

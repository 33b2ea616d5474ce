"""Synthetic knowledge graph and MCQA items for learnability and ablation runs.

Every KG entity occurs in exactly one triplet. Correct choices quote a KG
triplet verbatim; wrong choices quote triplets over entities absent from the
KG. Entity names are unique pseudo-words so lexical retrieval finds exactly
the quoted entities.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Set, Tuple, Union

import numpy as np

from .dataset import LABELS, Choice, MCQAItem, dump_mcqa
from .kg_store import KnowledgeGraph, Triplet, build_graph, persist_graph

logger = logging.getLogger(__name__)

RELATION_POOL: Tuple[str, ...] = (
    "applies to",
    "requires",
    "is issued by",
    "is appealed before",
    "protects",
    "governs",
    "replaces",
    "is supervised by",
)
DOMAIN_TAGS: Tuple[str, ...] = ("civil", "penal", "work")

_CONSONANTS = "bcdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticFixture:
    items: List[MCQAItem]
    triplets: List[Triplet]
    wrong_triplets: List[Triplet] = field(default_factory=list)

    @property
    def kg(self) -> KnowledgeGraph:
        return build_graph(self.triplets)


class _NameFactory:
    def __init__(self, rng: np.random.Generator) -> None:
        self._rng = rng
        self._used: Set[str] = set()

    def word(self) -> str:
        while True:
            syllables = self._rng.integers(2, 4)
            word = "".join(
                _CONSONANTS[self._rng.integers(len(_CONSONANTS))] + _VOWELS[self._rng.integers(len(_VOWELS))]
                for _ in range(int(syllables))
            )
            if word not in self._used:
                self._used.add(word)
                return word

    def entity(self) -> str:
        return f"{self.word()} {self.word()}"

    def triplet(self, relation: str) -> Triplet:
        return Triplet(self.entity(), relation, self.entity())


def choice_text(triplet: Triplet) -> str:
    return f"It holds that {triplet.render()}."


def make_synthetic_fixture(
    n_questions: int = 30,
    seed: int = 0,
    *,
    extra_triplets: int = 10,
    relations: Sequence[str] = RELATION_POOL,
) -> SyntheticFixture:
    """Promotion-style items (one target each) over a KG of disjoint triplets."""
    if n_questions < 1:
        raise ValueError(f"n_questions must be positive, got {n_questions}")
    if not relations:
        raise ValueError("relation pool must not be empty")

    rng = np.random.default_rng(seed)
    names = _NameFactory(rng)

    def pick_relation() -> str:
        return relations[int(rng.integers(len(relations)))]

    triplets: List[Triplet] = []
    wrong: List[Triplet] = []
    items: List[MCQAItem] = []
    for number in range(n_questions):
        correct = names.triplet(pick_relation())
        distractors = [names.triplet(pick_relation()) for _ in range(len(LABELS) - 1)]
        triplets.append(correct)
        wrong.extend(distractors)

        correct_position = int(rng.integers(len(LABELS)))
        quoted = list(distractors)
        quoted.insert(correct_position, correct)
        items.append(
            MCQAItem(
                id=f"syn-{number:03d}",
                question=f"Question {number + 1}: select the correct statement.",
                choices=tuple(Choice(label, choice_text(triplet)) for label, triplet in zip(LABELS, quoted)),
                targets=frozenset({LABELS[correct_position]}),
                domain_tag=DOMAIN_TAGS[number % len(DOMAIN_TAGS)],
                exam_type="promotion",
            )
        )

    triplets.extend(names.triplet(pick_relation()) for _ in range(extra_triplets))
    logger.debug("Generated %d synthetic items over %d KG triplets", len(items), len(triplets))
    return SyntheticFixture(items, triplets, wrong)


def save_fixture(fixture: SyntheticFixture, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``dataset.jsonl`` and ``kg.txt`` into ``directory``."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    dataset_path = target / "dataset.jsonl"
    kg_path = target / "kg.txt"
    dump_mcqa(fixture.items, dataset_path)
    persist_graph(fixture.kg, kg_path)
    logger.info("Wrote synthetic fixture (%d items) to %s", len(fixture.items), target)
    return dataset_path, kg_path


__all__ = [
    "DOMAIN_TAGS",
    "RELATION_POOL",
    "SyntheticFixture",
    "choice_text",
    "make_synthetic_fixture",
    "save_fixture",
]

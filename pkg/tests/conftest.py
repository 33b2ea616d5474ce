"""Shared fixtures for graf_qa tests."""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import List

import numpy as np
import pytest

# Ensure the project root is importable
PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

# Keep settings and checkpoints of test runs out of the source tree
os.environ.setdefault("GRAF_HOME", str(PROJECT_ROOT / ".pytest-graf-home"))

from graf_qa.claim_extraction import ClientExtractor, StubCompletionClient  # noqa: E402
from graf_qa.dataset import Choice, MCQAItem  # noqa: E402
from graf_qa.embedding import HashEncoder  # noqa: E402
from graf_qa.kg_store import KnowledgeGraph, Triplet, build_graph  # noqa: E402
from graf_qa.synthetic import make_synthetic_fixture  # noqa: E402

EXAMPLE_BLOCK = """\
(court of appeal;shall operated in addition to;assets investigation commission)
(assets investigation commission;referred to as;investigation commission)
(investigation commission;consisting of;2 judges)
(2 judges;designated by;president of the court of appeal)
(investigation commission;consisting of;prosecutor)
(prosecutor;from;prosecutor's office operating under the court of appeal)
(prosecutor;designated by;chief prosecutor)
(president of the investigation commission;designated for a period of;3 years)
(members of the investigation commission;designated for a period of;3 years)
(3 alternates;appointed by;the president of the court of appeal)
(3 alternates;appointed by;the chief prosecutor)
(3 alternates;designated for a period of;3 years)
(3 alternates;will replace the holders if they cannot take part in the work of the investigation commission on;the heads)
(investigation commission;has;a secretary)
(a secretary;appointed by among the clerks of;the president of the court of appeal)
STOP
"""


def make_item(
    item_id: str = "q1",
    question: str = "Which statement is correct?",
    texts=("first", "second", "third"),
    targets=("A",),
    exam_type: str = "entrance",
    domain_tag: str = "civil",
) -> MCQAItem:
    return MCQAItem(
        id=item_id,
        question=question,
        choices=tuple(Choice(label, text) for label, text in zip("ABC", texts)),
        targets=frozenset(targets),
        domain_tag=domain_tag,
        exam_type=exam_type,
    )


@pytest.fixture()
def example_block() -> str:
    return EXAMPLE_BLOCK


@pytest.fixture()
def small_triplets() -> List[Triplet]:
    return [
        Triplet("court of appeal", "supervises", "tribunal"),
        Triplet("tribunal", "judges", "civil claim"),
        Triplet("prosecutor", "works at", "court of appeal"),
        Triplet("contract", "is governed by", "civil code"),
    ]


@pytest.fixture()
def small_kg(small_triplets) -> KnowledgeGraph:
    return build_graph(small_triplets)


@pytest.fixture()
def stub_extractor() -> ClientExtractor:
    return ClientExtractor(StubCompletionClient())


@pytest.fixture()
def hash_encoder() -> HashEncoder:
    return HashEncoder(dim=16, seed=0)


@pytest.fixture()
def sample_items() -> List[MCQAItem]:
    return [
        make_item(
            "q1",
            "Who supervises the tribunal?",
            (
                "It holds that (court of appeal;supervises;tribunal).",
                "It holds that (prosecutor;supervises;tribunal).",
                "It holds that (civil code;supervises;tribunal).",
            ),
            ("A",),
        ),
        make_item(
            "q2",
            "What governs a contract?",
            (
                "It holds that (contract;is governed by;penal code).",
                "It holds that (contract;is governed by;civil code).",
                "Nothing governs it.",
            ),
            ("B",),
            exam_type="bar",
            domain_tag="penal",
        ),
        make_item("q3", "Pick two.", ("one", "two", "three"), ("A", "C"), domain_tag="work"),
    ]


@pytest.fixture()
def synthetic_fixture():
    return make_synthetic_fixture(n_questions=6, seed=3, extra_triplets=4)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def item_factory():
    """``make_item(item_id, question, texts, targets, exam_type, domain_tag)``."""
    return make_item

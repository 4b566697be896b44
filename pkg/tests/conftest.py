from pathlib import Path
from typing import List

import pytest
import torch

from app.models.schemas import ArgumentRecord, PolicyArchitecture, Source
from app.services.policy import PolicyModel, Vocabulary, template_tokens
from app.services.scorers import AppropriatenessModel, NGramLM

FIXTURES = Path(__file__).parent / "fixtures"

BANNED = ["stupid", "idiotic", "garbage"]

TEXTS = [
    "the stupid plan wastes money and the council knows it .",
    "buses run late because the idiotic schedule ignores peak hours .",
    "this garbage proposal helps nobody and costs a fortune .",
    "school uniforms reduce pressure on families with little money .",
    "nuclear energy is reliable but storage remains an open problem .",
    "remote work saves time for many people in large cities .",
]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_record(index: int, text: str, **fields) -> ArgumentRecord:
    return ArgumentRecord(id=f"arg-{index:03d}", text=text, issue="city life", source=Source.DISCUSSION, **fields)


@pytest.fixture
def records() -> List[ArgumentRecord]:
    return [make_record(i, text) for i, text in enumerate(TEXTS)]


@pytest.fixture
def classifier() -> AppropriatenessModel:
    # one banned word in ten tokens is enough to flip the verdict
    return AppropriatenessModel([-60.0, 0.0, 0.0, 0.0], 3.0, BANNED)


@pytest.fixture
def language_model() -> NGramLM:
    return NGramLM.fit([text.split() for text in TEXTS], order=2, delta=0.1)


@pytest.fixture
def vocabulary() -> Vocabulary:
    return Vocabulary.build(TEXTS, always=template_tokens())


@pytest.fixture
def tiny_model(vocabulary) -> PolicyModel:
    torch.manual_seed(0)
    architecture = PolicyArchitecture(vocab_size=len(vocabulary), d_model=8, n_layer=1, n_head=2, context=128)
    return PolicyModel(architecture)

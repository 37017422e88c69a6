"""Shared fixtures and helpers."""

import numpy as np
import pytest

from currseq.corpus import DialoguePair, PairPool, Utterance

_ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def words(n: int, tag: str = "w") -> tuple[str, ...]:
    return tuple(f"{tag}{i}" for i in range(n))


def make_pair(src_len: int, tgt_len: int, tag: str = "w") -> DialoguePair:
    return DialoguePair.from_utterances(
        Utterance(words(src_len, tag)), Utterance(words(tgt_len, tag + "t"))
    )


def make_pool(label: str, lengths: list[tuple[int, int]], tag: str = "p") -> PairPool:
    pairs = [make_pair(s, t, f"{tag}{i}_") for i, (s, t) in enumerate(lengths)]
    return PairPool(label, pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

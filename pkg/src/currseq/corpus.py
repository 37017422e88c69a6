"""Dialogue corpus handling: utterance pairs, length classes, pools, sampling.

The corpus format is one utterance per line, lowercased on read and
tokenized on whitespace; a blank line ends a conversation. Pairs of
adjacent utterances are bucketed by word count into short (1-4),
medium (5-10) and long (11-16) pools when both sides share a class,
into the cross pool whenever both sides are at most 16 words, and are
discarded if either side is longer.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .util import canonical_json, derive_seed, make_rng, write_text_atomic


class InvalidUtterance(ValueError):
    pass


class CorpusDecodeError(ValueError):
    def __init__(self, line_number: int, detail: str = ""):
        self.line_number = line_number
        super().__init__(f"undecodable bytes at line {line_number}{': ' + detail if detail else ''}")


class InsufficientPairs(ValueError):
    def __init__(self, have: int, want: int, label: str = ""):
        self.have = have
        self.want = want
        where = f" in {label} pool" if label else ""
        super().__init__(f"need {want} pairs{where}, only {have} available")


SHORT_MAX = 4
MEDIUM_MAX = 10
LONG_MAX = 16  # also the per-sentence cap for cross pairs

LENGTH_POOL_LABELS = ("short", "medium", "long")
POOL_LABELS = ("short", "medium", "long", "mix", "cross")


class LengthClass(Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"
    OVERLONG = "overlong"

    @property
    def label(self) -> str:
        return self.value


def classify_length(tokens) -> LengthClass:
    """Bucket a tokenized sentence by word count: 1-4 / 5-10 / 11-16 / >16.

    The 10-word boundary goes to medium; 16 is the last long count.
    """
    n = len(tokens)
    if n == 0:
        raise InvalidUtterance("empty utterance cannot be classified")
    if n <= SHORT_MAX:
        return LengthClass.SHORT
    if n <= MEDIUM_MAX:
        return LengthClass.MEDIUM
    if n <= LONG_MAX:
        return LengthClass.LONG
    return LengthClass.OVERLONG


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise InvalidUtterance("utterance must contain at least one token")
        for t in self.tokens:
            if not t or t.split() != [t]:
                raise InvalidUtterance(f"bad token {t!r}")

    @property
    def word_count(self) -> int:
        return len(self.tokens)

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class DialoguePair:
    source: Utterance
    target: Utterance
    source_class: LengthClass
    target_class: LengthClass

    @classmethod
    def from_utterances(cls, source: Utterance, target: Utterance) -> "DialoguePair":
        return cls(source, target, classify_length(source.tokens), classify_length(target.tokens))

    def content_key(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return (self.source.tokens, self.target.tokens)


@dataclass
class PairPool:
    class_label: str
    pairs: list[DialoguePair]
    source_manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def tokenize_line(line: str) -> tuple[str, ...]:
    # sys.intern collapses the heavy token duplication across a corpus
    return tuple(sys.intern(t) for t in line.lower().split())


def parse_conversations(lines: Iterable) -> Iterator[list[Utterance]]:
    """Yield conversations (utterance lists) from an iterable of lines.

    Accepts str or bytes lines; bytes are decoded strictly as UTF-8 and a
    failure raises CorpusDecodeError carrying the 1-based line number.
    Blank (or whitespace-only) lines end a conversation; empty
    conversations are dropped; EOF ends the last conversation.
    """
    conv: list[Utterance] = []
    for lineno, raw in enumerate(lines, start=1):
        if isinstance(raw, (bytes, bytearray)):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorpusDecodeError(lineno, str(e)) from e
        else:
            line = raw
        tokens = tokenize_line(line)
        if not tokens:
            if conv:
                yield conv
                conv = []
            continue
        conv.append(Utterance(tokens))
    if conv:
        yield conv


def read_conversations(path) -> Iterator[list[Utterance]]:
    with open(path, "rb") as f:
        yield from parse_conversations(f)


def extract_pairs(conversation: list[Utterance]) -> list[DialoguePair]:
    """All adjacent pairs within one conversation, in order.

    No speaker filtering; a single-utterance conversation yields nothing.
    """
    return [
        DialoguePair.from_utterances(a, b)
        for a, b in zip(conversation, conversation[1:])
    ]


def iter_corpus_pairs(conversations: Iterable[list[Utterance]]) -> Iterator[DialoguePair]:
    for conv in conversations:
        yield from extract_pairs(conv)


DISPOSITIONS = ("short", "medium", "long", "cross_only", "discarded")


def build_pools(pair_stream: Iterable[DialoguePair]) -> tuple[dict[str, PairPool], dict[str, int]]:
    """Split a pair stream into short/medium/long/cross pools.

    A pair joins a length pool iff both sides share that class; it joins
    the cross pool iff both sides are at most 16 words (so length-pool
    members are also cross members); anything with an overlong side is
    discarded. Returns the pools keyed by label plus disposition counts.
    """
    buckets: dict[str, list[DialoguePair]] = {label: [] for label in ("short", "medium", "long", "cross")}
    counts = dict.fromkeys(DISPOSITIONS, 0)
    for pair in pair_stream:
        if LengthClass.OVERLONG in (pair.source_class, pair.target_class):
            counts["discarded"] += 1
            continue
        buckets["cross"].append(pair)
        if pair.source_class == pair.target_class:
            label = pair.source_class.label
            buckets[label].append(pair)
            counts[label] += 1
        else:
            counts["cross_only"] += 1
    pools = {label: PairPool(label, pairs) for label, pairs in buckets.items()}
    return pools, counts


def _reservoir_indices(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Algorithm R over positions 0..count-1, then shuffled."""
    idx = np.arange(min(n, count), dtype=np.int64)
    for i in range(n, count):
        j = int(rng.integers(0, i + 1))
        if j < n:
            idx[j] = i
    rng.shuffle(idx)
    return idx


def sample_uniform_indices(pool: PairPool, n: int, seed: int) -> np.ndarray:
    """Positions selected by sample_uniform, in its output order."""
    if n > len(pool):
        raise InsufficientPairs(len(pool), n, pool.class_label)
    rng = make_rng("sample_uniform", seed)
    return _reservoir_indices(len(pool), n, rng)


def sample_uniform(pool: PairPool, n: int, seed: int) -> PairPool:
    """Uniform sample of n pairs without replacement, single pass.

    Output order is the shuffled reservoir order; the result is a pure
    function of (pool, n, seed).
    """
    idx = sample_uniform_indices(pool, n, seed)
    manifest = dict(pool.source_manifest)
    manifest.update({"sampled_from": pool.class_label, "n": n, "seed": seed})
    return PairPool(pool.class_label, [pool.pairs[i] for i in idx], manifest)


def mix_class_counts(n: int) -> dict[str, int]:
    """Per-class counts for a mix set: thirds, remainder to short then medium."""
    base, rem = divmod(n, 3)
    counts = {label: base for label in LENGTH_POOL_LABELS}
    for label in LENGTH_POOL_LABELS[:rem]:
        counts[label] += 1
    return counts


def build_mix_set(pools: dict[str, PairPool], n: int, seed: int) -> PairPool:
    """One-third short, medium and long pairs, shuffled together."""
    counts = mix_class_counts(n)
    combined: list[DialoguePair] = []
    for label in LENGTH_POOL_LABELS:
        want = counts[label]
        pool = pools[label]
        if want > len(pool):
            raise InsufficientPairs(len(pool), want, label)
        part = sample_uniform(pool, want, derive_seed("mix_part", seed, label))
        combined.extend(part.pairs)
    rng = make_rng("mix_shuffle", seed)
    order = np.arange(len(combined))
    rng.shuffle(order)
    manifest = {"n": n, "seed": seed, "per_class": counts}
    return PairPool("mix", [combined[i] for i in order], manifest)


def build_cross_set(cross_pool: PairPool, n: int, seed: int) -> PairPool:
    """Uniform sample from the cross pool (both sentences already <= 16 words)."""
    sampled = sample_uniform(cross_pool, n, seed)
    sampled.class_label = "cross"
    return sampled


# ---------------------------------------------------------------------------
# Pool files: one pair per line as source<TAB>target, JSON manifest sidecar.
# ---------------------------------------------------------------------------

def pool_path(directory, label: str) -> Path:
    return Path(directory) / f"{label}.tsv"


def manifest_path(directory, label: str) -> Path:
    return Path(directory) / f"{label}.manifest.json"


def save_pool(pool: PairPool, path) -> None:
    # tmp + rename so an interrupted run never leaves a truncated pool
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for pair in pool.pairs:
            f.write(pair.source.text())
            f.write("\t")
            f.write(pair.target.text())
            f.write("\n")
    tmp.replace(path)
    manifest = dict(pool.source_manifest)
    manifest.update({"class_label": pool.class_label, "n": len(pool.pairs)})
    write_text_atomic(path.with_name(path.stem + ".manifest.json"), canonical_json(manifest) + "\n")


def load_pool(path, class_label: str | None = None, validate: bool = True) -> PairPool:
    """Read a pool file back; optionally re-check the class invariants."""
    path = Path(path)
    if class_label is None:
        class_label = path.stem
    pairs: list[DialoguePair] = []
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorpusDecodeError(lineno, str(e)) from e
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected source<TAB>target")
            pair = DialoguePair.from_utterances(
                Utterance(tokenize_line(parts[0])), Utterance(tokenize_line(parts[1]))
            )
            if validate:
                _check_pool_member(pair, class_label, path, lineno)
            pairs.append(pair)
    manifest = {}
    sidecar = path.with_name(path.stem + ".manifest.json")
    if sidecar.exists():
        import json

        manifest = json.loads(sidecar.read_text(encoding="utf-8"))
    return PairPool(class_label, pairs, manifest)


def _check_pool_member(pair: DialoguePair, label: str, path, lineno: int) -> None:
    if label in LENGTH_POOL_LABELS:
        if pair.source_class.label != label or pair.target_class.label != label:
            raise ValueError(
                f"{path}:{lineno}: pair classes "
                f"({pair.source_class.label},{pair.target_class.label}) do not match pool {label}"
            )
    elif label in ("cross", "mix"):
        if LengthClass.OVERLONG in (pair.source_class, pair.target_class):
            raise ValueError(f"{path}:{lineno}: overlong sentence in {label} pool")

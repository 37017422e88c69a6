"""Seeded synthetic dialogue corpus for desk-scale experiments.

A small probabilistic grammar over fixed word banks. Replies are largely
functions of their prompts (adjectives, places and names are tied to the
drawn nouns), so the conditional structure is learnable, while freely
combined slots keep the long templates combinatorially diverse. Most
conversations stay inside one length class, so adjacent pairs populate
the short/medium/long pools; mixed conversations feed the cross pool and
occasional overlong ramblings exercise the discard path.

Everything is drawn from one Philox stream keyed by the seed, so the
emitted file is byte-identical for identical (conversations, seed).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .util import make_rng

NOUNS = (
    "dog cat bird fish horse rabbit turtle fox wolf bear "
    "garden river boat kite song story game puzzle movie picture "
    "cake bread apple mango salad soup train plane wagon bicycle "
    "drum flute violin piano robot rocket castle bridge tower market"
).split()

ADJS = (
    "happy quiet bright gentle clever funny gloomy shiny tiny huge "
    "warm cold swift slow brave calm fancy plain loud soft"
).split()

PLACES = (
    "park library harbor bakery museum station meadow forest "
    "village square cinema plaza cafe school farm valley"
).split()

NAMES = "alice ben clara david emma felix grace henry iris jack karen leo mia noah".split()


class _Topic:
    """Indices drawn once per exchange; derived slots are deterministic."""

    def __init__(self, rng: np.random.Generator):
        self.i1 = int(rng.integers(0, len(NOUNS)))
        self.i2 = int(rng.integers(0, len(NOUNS)))
        self.ip = int(rng.integers(0, len(PLACES)))

    @property
    def n1(self):
        return NOUNS[self.i1]

    @property
    def n2(self):
        return NOUNS[self.i2]

    @property
    def a1(self):
        return ADJS[self.i1 % len(ADJS)]

    @property
    def a2(self):
        return ADJS[self.i2 % len(ADJS)]

    @property
    def pl(self):
        return PLACES[self.ip]

    @property
    def nm(self):
        return NAMES[self.ip % len(NAMES)]


def _short_exchange(rng, t: _Topic):
    kind = int(rng.integers(0, 8))
    if kind == 0:
        return ["hi"], (["hello"] if rng.integers(0, 2) == 0 else ["hey", "there"])
    if kind == 1:
        return ["how", "are", "you"], (["i", "am", "fine"] if rng.integers(0, 2) == 0 else ["doing", "well"])
    if kind == 2:
        reply = ["yes", "i", "do"] if t.i1 % 2 == 0 else ["not", "really"]
        return ["do", "you", "like", t.n1], reply
    if kind == 3:
        return ["where", "is", t.nm], ["at", "the", t.pl]
    if kind == 4:
        return ["thanks", "a", "lot"], ["you", "are", "welcome"]
    if kind == 5:
        return ["nice", t.n1], ["very", t.a1, "indeed"]
    if kind == 6:
        return ["see", "you", "soon"], ["bye", "for", "now"]
    return ["look", "a", t.n1], ["what", "a", t.a1, t.n1]


def _medium_exchange(rng, t: _Topic):
    kind = int(rng.integers(0, 7))
    if kind == 0:
        return (["what", "do", "you", "think", "about", "the", t.n1],
                ["i", "think", "the", t.n1, "is", "very", t.a1])
    if kind == 1:
        return (["did", "you", "see", "the", t.n1, "at", "the", t.pl],
                ["yes", "i", "saw", "the", t.n1, "there", "today"])
    if kind == 2:
        return (["tell", "me", "more", "about", "the", t.a1, t.n1],
                ["well", "the", t.n1, "is", t.a1, "and", "quite", "popular"])
    if kind == 3:
        return (["can", "we", "go", "to", "the", t.pl, "tomorrow"],
                ["sure", t.nm, "can", "meet", "us", "there"])
    if kind == 4:
        return (["why", "is", "the", t.n1, "so", t.a1],
                ["because", "every", t.n1, "at", "the", t.pl, "is", t.a1])
    if kind == 5:
        return (["i", "heard", t.nm, "went", "to", "the", t.pl],
                ["yes", t.nm, "goes", "there", "every", "single", "day"])
    return (["does", "the", t.n1, "belong", "to", t.nm],
            ["no", "the", t.n1, "belongs", "to", "the", t.pl, "crew"])


def _long_exchange(rng, t: _Topic):
    kind = int(rng.integers(0, 6))
    if kind == 0:
        return (["i", "was", "walking", "near", "the", t.pl, "today", "and", "i", "saw",
                 "a", "really", t.a1, t.n1],
                ["that", "sounds", "nice", "because", "the", t.n1, "near", "the", t.pl,
                 "always", "looks", "so", t.a1])
    if kind == 1:
        return (["do", "you", "remember", "when", "we", "took", "the", t.n1, "and", "the",
                 t.n2, "to", "the", t.pl],
                ["yes", "i", "remember", "because", "the", t.a1, t.n1, "and", "the", t.a2,
                 t.n2, "made", "everyone", "smile"])
    if kind == 2:
        return (["my", "friend", t.nm, "told", "me", "the", t.n1, "at", "the", t.pl,
                 "was", "really", t.a1],
                ["well", t.nm, "is", "right", "because", "that", t.n1, "truly", "is",
                 "the", "most", t.a1, "one"])
    if kind == 3:
        return (["someone", "said", "the", t.pl, "will", "be", "full", "of", t.a1, t.n1,
                 "fans", "this", "weekend"],
                ["then", "we", "should", "ask", t.nm, "to", "save", "us", "a", "spot",
                 "near", "the", t.pl])
    if kind == 4:
        return (["the", t.a1, t.n1, "from", "the", t.pl, "keeps", "coming", "back", "to",
                 "my", "garden", "every", "morning"],
                ["maybe", "the", t.n1, "likes", "your", "garden", "because", "it", "is",
                 "calm", "and", "very", t.a1])
    return (["between", "the", t.n1, "and", "the", t.n2, "which", "one", "should", "we",
             "bring", "to", "the", t.pl],
            ["bring", "the", t.a1, t.n1, "because", "the", t.n2, "gets", "too", t.a2,
             "around", "big", "crowds"])


def _overlong_line(rng, t: _Topic):
    filler = ["and", "then", "the", t.n1, "kept", "going", "around", "the", t.pl,
              "while", t.nm, "watched", "the", t.a1, t.n2, "spin", "in", "circles",
              "for", "hours"]
    n = 17 + int(rng.integers(0, 4))
    return filler[:n]


_EXCHANGES = {"short": _short_exchange, "medium": _medium_exchange, "long": _long_exchange}

# conversation kind weights: mostly single-class chatter, some mixed, a
# little noise with overlong ramblings
_KINDS = ("short", "medium", "long", "mixed", "noisy")
_KIND_P = (0.29, 0.29, 0.29, 0.10, 0.03)


def generate_conversation(rng: np.random.Generator) -> list[list[str]]:
    kind = _KINDS[int(rng.choice(len(_KINDS), p=_KIND_P))]
    utterances: list[list[str]] = []
    n_exchanges = 2 + int(rng.integers(0, 2))
    if kind in _EXCHANGES:
        make = _EXCHANGES[kind]
        for _ in range(n_exchanges):
            prompt, reply = make(rng, _Topic(rng))
            utterances.extend([prompt, reply])
    elif kind == "mixed":
        labels = list(_EXCHANGES)
        for i in range(n_exchanges + 1):
            make = _EXCHANGES[labels[int(rng.integers(0, 3))]]
            prompt, reply = make(rng, _Topic(rng))
            utterances.extend([prompt, reply])
    else:  # noisy: a normal exchange, an overlong rambling, another exchange
        t = _Topic(rng)
        prompt, reply = _medium_exchange(rng, t)
        utterances.extend([prompt, reply])
        utterances.append(_overlong_line(rng, t))
        prompt, reply = _short_exchange(rng, _Topic(rng))
        utterances.extend([prompt, reply])
    return utterances


def generate_corpus(path, conversations: int = 66000, seed: int = 0) -> dict:
    """Write a corpus file; returns conversation/utterance/word counts."""
    rng = make_rng("synthcorpus", seed)
    utterance_count = 0
    word_count = 0
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i in range(conversations):
            if i:
                f.write("\n")
            for utt in generate_conversation(rng):
                f.write(" ".join(utt))
                f.write("\n")
                utterance_count += 1
                word_count += len(utt)
    return {
        "conversations": conversations,
        "utterances": utterance_count,
        "words": word_count,
        "seed": seed,
    }

"""Fixed vocabulary with reserved control ids, plus encode/decode."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import DialoguePair, Utterance
from .util import write_text_atomic

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<sos>", "<eos>", "<unk>")

DEFAULT_MAX_SIZE = 4000


class UnknownId(KeyError):
    def __init__(self, token_id: int, size: int):
        super().__init__(f"token id {token_id} outside vocabulary of size {size}")


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    frequencies: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.id_to_token)


def build_vocab(pairs: Iterable[DialoguePair], max_size: int = DEFAULT_MAX_SIZE, min_freq: int = 1) -> Vocabulary:
    """Most-frequent-first vocabulary, frequency ties broken lexicographically.

    Words colliding with the reserved literals are never assigned ids (they
    encode to UNK), so decode output stays unambiguous.
    """
    if max_size < len(RESERVED_TOKENS):
        raise ValueError(f"max_size must be >= {len(RESERVED_TOKENS)}")
    counter: Counter[str] = Counter()
    for pair in pairs:
        counter.update(pair.source.tokens)
        counter.update(pair.target.tokens)
    for reserved in RESERVED_TOKENS:
        counter.pop(reserved, None)
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = list(RESERVED_TOKENS)
    frequencies = [0] * len(RESERVED_TOKENS)
    for word, freq in ranked:
        if len(id_to_token) >= max_size or freq < min_freq:
            break
        id_to_token.append(word)
        frequencies.append(freq)
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(token_to_id, id_to_token, frequencies)


def _word_id(token: str, v: Vocabulary) -> int:
    # corpus words matching reserved literals map to UNK, never to ids 0-3
    token_id = v.token_to_id.get(token, UNK_ID)
    return token_id if token_id >= len(RESERVED_TOKENS) else UNK_ID


def encode_source(u: Utterance, v: Vocabulary) -> np.ndarray:
    """Plain id lookup, unknowns to UNK; no SOS/EOS on source sequences."""
    return np.fromiter((_word_id(t, v) for t in u.tokens), dtype=np.int32, count=len(u.tokens))


def encode_target(u: Utterance, v: Vocabulary) -> np.ndarray:
    """SOS + ids + EOS; length is word count + 2."""
    ids = [SOS_ID]
    ids.extend(_word_id(t, v) for t in u.tokens)
    ids.append(EOS_ID)
    return np.asarray(ids, dtype=np.int32)


def decode(ids, v: Vocabulary) -> list[str]:
    words = []
    for token_id in ids:
        token_id = int(token_id)
        if token_id < 0 or token_id >= v.size:
            raise UnknownId(token_id, v.size)
        words.append(v.id_to_token[token_id])
    return words


# ---------------------------------------------------------------------------
# Vocabulary file: "# digest: <sha256>" header, then id<TAB>token<TAB>freq.
# ---------------------------------------------------------------------------

def _body_lines(v: Vocabulary) -> list[str]:
    freqs = v.frequencies or [0] * v.size
    return [f"{i}\t{tok}\t{freqs[i]}" for i, tok in enumerate(v.id_to_token)]


def save_vocab(v: Vocabulary, path) -> None:
    body = "\n".join(_body_lines(v)) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    write_text_atomic(path, f"# digest: {digest}\n{body}")


def load_vocab(path) -> Vocabulary:
    text = Path(path).read_text(encoding="utf-8")
    header, _, body = text.partition("\n")
    if not header.startswith("# digest: "):
        raise ValueError(f"{path}: missing digest header")
    expected = header[len("# digest: "):].strip()
    actual = hashlib.sha256(body.encode("utf-8")).hexdigest()
    if actual != expected:
        raise ValueError(f"{path}: vocabulary digest mismatch")
    id_to_token: list[str] = []
    frequencies: list[int] = []
    for line in body.splitlines():
        ident, tok, freq = line.split("\t")
        if int(ident) != len(id_to_token):
            raise ValueError(f"{path}: non-contiguous ids")
        id_to_token.append(tok)
        frequencies.append(int(freq))
    if id_to_token[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
        raise ValueError(f"{path}: reserved tokens corrupted")
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(token_to_id, id_to_token, frequencies)


def vocab_digest(v: Vocabulary) -> str:
    body = "\n".join(_body_lines(v)) + "\n"
    return hashlib.sha256(body.encode("utf-8")).hexdigest()

"""Shared plumbing: keyed RNG streams, canonical JSON, content digests."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 64-bit stream key from heterogeneous parts.

    blake2b over a canonically joined string, so derived streams do not
    depend on Python hash randomization and are identical across runs
    and platforms.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(*parts) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by the derived seed."""
    return np.random.Generator(np.random.Philox(derive_seed(*parts)))


def canonical_json(obj) -> str:
    """Serialization used everywhere a digest or byte-stable file is needed."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def json_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text_atomic(path, text: str) -> None:
    """Write via a temp file + rename so readers never see partial content."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)

"""Training one segment: batching, epochs, validation, checkpoints.

Batches are formed by shuffling the pool deterministically per epoch and
sorting by target length inside fixed-size windows, keeping the global
order random while batches stay length-homogeneous. Validation loss is
the per-token mean over every non-pad target position of the pool,
accumulated in float64 over a canonically sorted pair order so the value
cannot depend on how the pool happened to be stored.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import PairPool
from .seq2seq import (
    Batch,
    ModelConfig,
    PARAM_FIELDS,
    Parameters,
    OptimizerState,
    adam_step,
    backward,
    clip_global_norm,
    forward_loss,
    init_params,
    pad_batch,
)
from .util import canonical_json, json_digest, make_rng
from .vocab import Vocabulary, encode_source, encode_target


class EmptyValidationSet(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epoch_checkpoints: tuple[int, ...] = (2, 4, 6)
    shuffle_seed: int = 0
    early_stop: bool = False
    bucket_window: int = 32          # batches per length-sorted window
    learning_rate: float = 1e-3
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        marks = tuple(self.epoch_checkpoints)
        if list(marks) != sorted(set(marks)) or any(m < 1 for m in marks):
            raise ValueError("epoch_checkpoints must be ascending positive counts")
        object.__setattr__(self, "epoch_checkpoints", marks)

    @property
    def max_epochs(self) -> int:
        return self.epoch_checkpoints[-1] if self.epoch_checkpoints else 0

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epoch_checkpoints": list(self.epoch_checkpoints),
            "shuffle_seed": self.shuffle_seed,
            "early_stop": self.early_stop,
            "bucket_window": self.bucket_window,
            "learning_rate": self.learning_rate,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "epoch_checkpoints" in d:
            d["epoch_checkpoints"] = tuple(d["epoch_checkpoints"])
        return cls(**d)


@dataclass(frozen=True)
class Stage:
    """One step in a parameter set's lineage."""

    segment: str
    size: int
    epochs: int
    seed: int

    def to_dict(self) -> dict:
        return {"segment": self.segment, "size": self.size, "epochs": self.epochs, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Stage":
        return cls(d["segment"], d["size"], d["epochs"], d["seed"])


def lineage_key(lineage) -> str:
    return "__".join(f"{s.segment}-n{s.size}-s{s.seed}-e{s.epochs}" for s in lineage)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_loss: float
    wall_time: float


@dataclass
class Metrics:
    lineage_key: str
    records: list[EpochRecord] = field(default_factory=list)

    def stable_digest(self, up_to_epoch: int | None = None) -> str:
        rows = [
            [r.epoch, repr(r.train_loss), repr(r.val_loss)]
            for r in self.records
            if up_to_epoch is None or r.epoch <= up_to_epoch
        ]
        return json_digest(rows)


@dataclass
class Checkpoint:
    params: Parameters
    config: ModelConfig
    lineage: tuple[Stage, ...]
    val_loss: float
    metrics_digest: str = ""
    config_digest: str = ""

    @property
    def key(self) -> str:
        return lineage_key(self.lineage)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def encode_pairs(pool: PairPool, v: Vocabulary) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(encode_source(p.source, v), encode_target(p.target, v)) for p in pool.pairs]


def batches_from_encoded(encoded, cfg: TrainConfig, epoch: int,
                         reverse_source: bool = False) -> list[Batch]:
    """Deterministic shuffle by (shuffle_seed, epoch), then length-sort
    within windows of bucket_window*batch_size pairs, then cut batches."""
    n = len(encoded)
    if n == 0:
        raise ValueError("cannot batch an empty pool")
    rng = make_rng("epoch_shuffle", cfg.shuffle_seed, epoch)
    order = np.arange(n)
    rng.shuffle(order)
    window = cfg.bucket_window * cfg.batch_size
    batches: list[Batch] = []
    for w0 in range(0, n, window):
        idx = order[w0:w0 + window]
        lengths = np.fromiter((len(encoded[i][1]) for i in idx), dtype=np.int64, count=len(idx))
        idx = idx[np.argsort(lengths, kind="stable")]
        for b0 in range(0, len(idx), cfg.batch_size):
            chunk = idx[b0:b0 + cfg.batch_size]
            srcs = [encoded[i][0] for i in chunk]
            tgts = [encoded[i][1] for i in chunk]
            batches.append(pad_batch(srcs, tgts, reverse_source=reverse_source))
    return batches


def make_batches(pool: PairPool, v: Vocabulary, cfg: TrainConfig, epoch: int,
                 reverse_source: bool = False) -> list[Batch]:
    return batches_from_encoded(encode_pairs(pool, v), cfg, epoch, reverse_source)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

EVAL_BATCH = 256


def evaluate(p: Parameters, val_pool: PairPool, v: Vocabulary,
             reverse_source: bool = False) -> float:
    """Total -ln p(gold) over all non-pad target positions / total positions.

    Pairs are processed in canonical (sorted) order so the result is an
    order-independent pure function of (parameters, pool contents).
    """
    if len(val_pool) == 0:
        raise EmptyValidationSet("validation pool is empty")
    encoded = encode_pairs(val_pool, v)
    encoded.sort(key=lambda st: (st[0].tolist(), st[1].tolist()))
    total = 0.0
    count = 0
    for b0 in range(0, len(encoded), EVAL_BATCH):
        chunk = encoded[b0:b0 + EVAL_BATCH]
        batch = pad_batch([s for s, _ in chunk], [t for _, t in chunk], reverse_source=reverse_source)
        _, cache = forward_loss(p, batch)
        total += cache.masked_nll_sum
        count += cache.n_mask
    return total / count


# ---------------------------------------------------------------------------
# Segment training
# ---------------------------------------------------------------------------

def train_segment(init: Parameters, train_pool: PairPool, val_pool: PairPool,
                  v: Vocabulary, cfg: TrainConfig, model_cfg: ModelConfig,
                  stage_label: str = "segment", stage_seed: int = 0,
                  parent_lineage: tuple[Stage, ...] = ()) -> tuple[list[Checkpoint], Metrics]:
    """Run the epoch schedule, emitting one Checkpoint per epoch mark.

    NumericalError from any step propagates to the caller, which owns
    marking the lineage record as failed.
    """
    if len(train_pool) == 0:
        raise ValueError("training pool is empty")
    reverse = model_cfg.reverse_source
    encoded = encode_pairs(train_pool, v)
    params = init.copy()
    opt = OptimizerState.initialize(params, lr=cfg.learning_rate)
    config_digest = json_digest({"model": model_cfg.to_dict(), "trainer": cfg.to_dict()})

    def stage_for(epochs: int) -> tuple[Stage, ...]:
        return parent_lineage + (Stage(stage_label, len(train_pool), epochs, stage_seed),)

    metrics = Metrics(lineage_key=lineage_key(stage_for(cfg.max_epochs)))
    started = time.perf_counter()
    val = evaluate(params, val_pool, v, reverse)
    metrics.records.append(EpochRecord(0, None, val, time.perf_counter() - started))

    checkpoints: list[Checkpoint] = []
    prev_val = val
    for epoch in range(1, cfg.max_epochs + 1):
        loss_sum = 0.0
        token_count = 0
        for batch in batches_from_encoded(encoded, cfg, epoch, reverse):
            _, cache = forward_loss(params, batch)
            grads = backward(params, cache)
            grads = clip_global_norm(grads, cfg.grad_clip)
            params, opt = adam_step(params, grads, opt)
            loss_sum += cache.masked_nll_sum
            token_count += cache.n_mask
        val = evaluate(params, val_pool, v, reverse)
        metrics.records.append(
            EpochRecord(epoch, loss_sum / token_count, val, time.perf_counter() - started)
        )
        if cfg.early_stop and val > prev_val:
            break
        if epoch in cfg.epoch_checkpoints:
            checkpoints.append(
                Checkpoint(
                    params=params.copy(),
                    config=model_cfg,
                    lineage=stage_for(epoch),
                    val_loss=val,
                    metrics_digest=metrics.stable_digest(up_to_epoch=epoch),
                    config_digest=config_digest,
                )
            )
        prev_val = val
    return checkpoints, metrics


def fresh_parameters(model_cfg: ModelConfig, seed: int) -> Parameters:
    from dataclasses import replace

    return init_params(replace(model_cfg, seed=seed))


# ---------------------------------------------------------------------------
# Checkpoint file: "CLSC", u32 version, u32 header length, canonical-JSON
# header, then each named array as little-endian float32 in declared order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CLSC"
CHECKPOINT_VERSION = 1


def save_checkpoint(ck: Checkpoint, path) -> None:
    header = {
        "config": ck.config.to_dict(),
        "lineage": [s.to_dict() for s in ck.lineage],
        "val_loss": ck.val_loss,
        "metrics_digest": ck.metrics_digest,
        "config_digest": ck.config_digest,
        "arrays": list(PARAM_FIELDS),
        "dtype": "<f4",
    }
    blob = canonical_json(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in ck.params.named():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    import json

    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    version = struct.unpack("<I", data[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    hlen = struct.unpack("<I", data[8:12])[0]
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    offset = 12 + hlen
    arrays = []
    for name, shape in cfg.shapes().items():
        n_bytes = int(np.prod(shape)) * 4
        arr = np.frombuffer(data[offset:offset + n_bytes], dtype="<f4").reshape(shape).copy()
        arrays.append(arr)
        offset += n_bytes
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after arrays")
    return Checkpoint(
        params=Parameters(*arrays),
        config=cfg,
        lineage=tuple(Stage.from_dict(d) for d in header["lineage"]),
        val_loss=header["val_loss"],
        metrics_digest=header["metrics_digest"],
        config_digest=header["config_digest"],
    )

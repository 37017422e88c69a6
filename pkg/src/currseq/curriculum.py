"""Segmented grid-search orchestration with weight inheritance.

Flow: first-segment grid from fresh initializations, winner selection per
(size, epochs) cell, next-segment grid over the winners, a uniform
subsample of the full penultimate checkpoint set before the final
segment, then fresh/mix/cross baselines and table generation.

Every run's randomness is keyed by (master_seed, role, cell coordinates),
so grid cells are pure functions of their inputs and can execute in any
order or degree of parallelism; resuming reuses any cell whose
checkpoints are already in the lineage store.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path

from .corpus import (
    LENGTH_POOL_LABELS,
    PairPool,
    build_cross_set,
    build_mix_set,
    load_pool,
    pool_path,
    sample_uniform,
    sample_uniform_indices,
    save_pool,
    _reservoir_indices,
)
from .seq2seq import ModelConfig, NumericalError, init_params
from .trainer import (
    Stage,
    TrainConfig,
    evaluate,
    lineage_key,
    load_checkpoint,
    save_checkpoint,
    train_segment,
)
from .util import canonical_json, derive_seed, json_digest, make_rng, write_text_atomic
from .vocab import load_vocab

log = logging.getLogger("currseq")

BASELINE_KINDS = ("fresh", "mix", "cross")


class PlanError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"plan key '{key}': {message}")


class EmptyCell(RuntimeError):
    def __init__(self, size: int, epochs: int):
        self.size = size
        self.epochs = epochs
        super().__init__(f"no surviving runs in cell (size={size}, epochs={epochs})")


# ---------------------------------------------------------------------------
# Plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentSpec:
    class_label: str
    set_sizes: tuple[int, ...]
    seeds_per_cell: int
    epoch_checkpoints: tuple[int, ...]
    val_size: int

    def __post_init__(self):
        if list(self.set_sizes) != sorted(set(self.set_sizes)):
            raise PlanError("segments.sizes", "must be ascending and distinct")
        if self.seeds_per_cell < 1:
            raise PlanError("segments.seeds", "must be >= 1")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    sizes: tuple[int, ...]
    replicas: int


@dataclass
class CurriculumPlan:
    segments: tuple[SegmentSpec, ...]
    carry_fraction: float
    master_seed: int
    model: ModelConfig
    trainer: TrainConfig
    baselines: tuple[BaselineSpec, ...] = ()

    def __post_init__(self):
        if not self.segments:
            raise PlanError("segments", "need at least one segment")
        if not (0.0 < self.carry_fraction <= 1.0):
            raise PlanError("carry_fraction", "must be in (0, 1]")

    @property
    def final_segment(self) -> SegmentSpec:
        return self.segments[-1]

    def to_dict(self) -> dict:
        trainer = self.trainer.to_dict()
        # per-job fields; the plan file carries only plan-level trainer keys
        trainer.pop("epoch_checkpoints", None)
        trainer.pop("shuffle_seed", None)
        model = self.model.to_dict()
        model.pop("seed", None)
        return {
            "master_seed": self.master_seed,
            "carry_fraction": self.carry_fraction,
            "model": model,
            "trainer": trainer,
            "segments": [
                {
                    "class": s.class_label,
                    "sizes": list(s.set_sizes),
                    "seeds": s.seeds_per_cell,
                    "checkpoints": list(s.epoch_checkpoints),
                    "val_size": s.val_size,
                }
                for s in self.segments
            ],
            "baselines": [
                {"kind": b.kind, "sizes": list(b.sizes), "replicas": b.replicas}
                for b in self.baselines
            ],
        }

    def digest(self) -> str:
        return json_digest(self.to_dict())


def _need(mapping: dict, key: str, kinds, where: str):
    if key not in mapping:
        raise PlanError(f"{where}{key}", "missing")
    value = mapping[key]
    if kinds is bool:
        if not isinstance(value, bool):
            raise PlanError(f"{where}{key}", "must be a boolean")
    elif kinds is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise PlanError(f"{where}{key}", "must be an integer")
    elif kinds is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise PlanError(f"{where}{key}", "must be a number")
    elif kinds is list:
        if not isinstance(value, list):
            raise PlanError(f"{where}{key}", "must be a list")
    return value


def plan_from_dict(raw: dict) -> CurriculumPlan:
    if not isinstance(raw, dict):
        raise PlanError("<root>", "plan must be a JSON object")
    master_seed = _need(raw, "master_seed", int, "")
    carry = float(_need(raw, "carry_fraction", float, ""))

    model_raw = dict(raw.get("model", {}))
    model_extra = set(model_raw) - {"vocab_size", "embed_dim", "hidden_dim", "init_scale", "seed", "reverse_source"}
    if model_extra:
        raise PlanError(f"model.{sorted(model_extra)[0]}", "unknown key")
    model_raw.pop("seed", None)  # per-run seeds are always derived
    vocab_size = model_raw.pop("vocab_size", None)
    model_needs_vocab = vocab_size is None
    try:
        # a null vocab_size is resolved against the vocabulary file at run
        # time; 4 is a structural placeholder until then
        model = ModelConfig(vocab_size=vocab_size if vocab_size is not None else 4, **model_raw)
    except (TypeError, ValueError) as e:
        raise PlanError("model", str(e)) from e

    trainer_raw = dict(raw.get("trainer", {}))
    trainer_extra = set(trainer_raw) - {
        "batch_size", "learning_rate", "grad_clip", "bucket_window", "early_stop",
    }
    if trainer_extra:
        raise PlanError(f"trainer.{sorted(trainer_extra)[0]}", "unknown key")
    try:
        trainer = TrainConfig(epoch_checkpoints=(1,), **trainer_raw)
    except (TypeError, ValueError) as e:
        raise PlanError("trainer", str(e)) from e

    segments = []
    for i, seg in enumerate(_need(raw, "segments", list, "")):
        where = f"segments[{i}]."
        label = _need(seg, "class", None, where)
        if label not in LENGTH_POOL_LABELS:
            raise PlanError(f"{where}class", f"must be one of {LENGTH_POOL_LABELS}")
        sizes = tuple(_need(seg, "sizes", list, where))
        if list(sizes) != sorted(set(sizes)) or any(s < 1 for s in sizes):
            raise PlanError(f"{where}sizes", "must be ascending distinct positive counts")
        marks = tuple(_need(seg, "checkpoints", list, where))
        if not marks or list(marks) != sorted(set(marks)) or any(m < 1 for m in marks):
            raise PlanError(f"{where}checkpoints", "must be ascending positive counts")
        seeds = _need(seg, "seeds", int, where)
        if seeds < 1:
            raise PlanError(f"{where}seeds", "must be >= 1")
        val_size = _need(seg, "val_size", int, where)
        if val_size < 1:
            raise PlanError(f"{where}val_size", "must be >= 1")
        segments.append(SegmentSpec(label, sizes, seeds, marks, val_size))

    baselines = []
    for i, b in enumerate(raw.get("baselines", [])):
        where = f"baselines[{i}]."
        kind = _need(b, "kind", None, where)
        if kind not in BASELINE_KINDS:
            raise PlanError(f"{where}kind", f"must be one of {BASELINE_KINDS}")
        sizes = tuple(_need(b, "sizes", list, where))
        replicas = _need(b, "replicas", int, where)
        if replicas < 1:
            raise PlanError(f"{where}replicas", "must be >= 1")
        baselines.append(BaselineSpec(kind, sizes, replicas))

    extra = set(raw) - {"master_seed", "carry_fraction", "model", "trainer", "segments", "baselines"}
    if extra:
        raise PlanError(sorted(extra)[0], "unknown key")

    plan = CurriculumPlan(tuple(segments), carry, master_seed, model, trainer, tuple(baselines))
    plan.model_needs_vocab = model_needs_vocab
    return plan


def load_plan(path) -> CurriculumPlan:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise PlanError("<root>", f"not valid JSON: {e}") from e
    return plan_from_dict(raw)


# ---------------------------------------------------------------------------
# Lineage tree store
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    key: str
    lineage: tuple[Stage, ...]
    status: str                  # "ok" | "failed"
    group: str                   # segment{i} | fresh | mix | cross
    val_loss: float | None = None
    path: str | None = None      # checkpoint file, relative to out_dir
    error: str | None = None

    @property
    def stage(self) -> Stage:
        return self.lineage[-1]

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "lineage": [s.to_dict() for s in self.lineage],
            "status": self.status,
            "group": self.group,
            "val_loss": self.val_loss,
            "path": self.path,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        return cls(
            key=d["key"],
            lineage=tuple(Stage.from_dict(s) for s in d["lineage"]),
            status=d["status"],
            group=d["group"],
            val_loss=d["val_loss"],
            path=d["path"],
            error=d.get("error"),
        )


class TreeStore:
    """Append-only lineage tree; single writer, torn trailing lines ignored."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.tree_path = self.out_dir / "tree.jsonl"
        self.lineage_dir = self.out_dir / "lineage"
        self.lineage_dir.mkdir(parents=True, exist_ok=True)

    def load(self) -> dict[str, TreeNode]:
        nodes: dict[str, TreeNode] = {}
        if not self.tree_path.exists():
            return nodes
        with open(self.tree_path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    node = TreeNode.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError):
                    continue  # torn write from an interrupted run
                nodes[node.key] = node
        return nodes

    def append(self, node: TreeNode) -> None:
        with open(self.tree_path, "a", encoding="utf-8") as f:
            f.write(canonical_json(node.to_dict()))
            f.write("\n")

    def checkpoint_path(self, node_key: str) -> Path:
        return self.lineage_dir / f"{node_key}.ckpt"

    def metrics_path(self, job_key: str) -> Path:
        return self.lineage_dir / f"{job_key}.metrics.jsonl"


# ---------------------------------------------------------------------------
# Jobs
# ---------------------------------------------------------------------------

@dataclass
class TrainJob:
    job_key: str
    group: str
    stage_label: str
    size: int
    seed_index: int
    marks: tuple[int, ...]
    parent_key: str | None
    parent_lineage: tuple[Stage, ...]
    parent_ckpt: str | None
    train_path: str
    val_path: str
    vocab_path: str
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    out_dir: str

    def node_keys(self) -> list[str]:
        return [f"{self.job_key}-e{m}" for m in self.marks]

    @property
    def failure_key(self) -> str:
        return f"{self.job_key}-failed"


_POOL_CACHE: dict[str, PairPool] = {}
_VOCAB_CACHE: dict[str, object] = {}


def _cached_pool(path: str) -> PairPool:
    pool = _POOL_CACHE.get(path)
    if pool is None:
        pool = load_pool(path, validate=False)
        if len(_POOL_CACHE) >= 6:
            _POOL_CACHE.pop(next(iter(_POOL_CACHE)))
        _POOL_CACHE[path] = pool
    return pool


def _cached_vocab(path: str):
    v = _VOCAB_CACHE.get(path)
    if v is None:
        v = load_vocab(path)
        _VOCAB_CACHE[path] = v
    return v


def execute_job(job: TrainJob) -> list[dict]:
    """Train one grid cell; returns tree node records. Runs in a worker."""
    v = _cached_vocab(job.vocab_path)
    train_pool = _cached_pool(job.train_path)
    val_pool = _cached_pool(job.val_path)
    store = TreeStore(job.out_dir)
    if job.parent_ckpt is not None:
        parent = load_checkpoint(job.parent_ckpt)
        init = parent.params
    else:
        init = init_params(job.model_cfg)
    try:
        checkpoints, metrics = train_segment(
            init, train_pool, val_pool, v, job.train_cfg, job.model_cfg,
            stage_label=job.stage_label, stage_seed=job.seed_index,
            parent_lineage=job.parent_lineage,
        )
    except NumericalError as e:
        failed = TreeNode(
            key=job.failure_key,
            lineage=job.parent_lineage + (Stage(job.stage_label, job.size, 0, job.seed_index),),
            status="failed",
            group=job.group,
            error=str(e),
        )
        return [failed.to_dict()]
    with open(store.metrics_path(job.job_key), "w", encoding="utf-8") as f:
        for r in metrics.records:
            f.write(canonical_json({
                "lineage_key": metrics.lineage_key,
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "wall_time": round(r.wall_time, 6),
            }))
            f.write("\n")
    nodes = []
    for ck in checkpoints:
        key = ck.key
        save_checkpoint(ck, store.checkpoint_path(key))
        nodes.append(TreeNode(
            key=key,
            lineage=ck.lineage,
            status="ok",
            group=job.group,
            val_loss=ck.val_loss,
            path=str(Path("lineage") / f"{key}.ckpt"),
        ).to_dict())
    return nodes


# ---------------------------------------------------------------------------
# Pure grid helpers (tested against brute force)
# ---------------------------------------------------------------------------

def grid_cells(parent_keys: list[str | None], spec: SegmentSpec) -> list[tuple[str | None, int, int]]:
    """(parent, size, seed_index) coordinates of every run in a segment grid."""
    return [
        (parent, size, seed)
        for parent in parent_keys
        for size in spec.set_sizes
        for seed in range(spec.seeds_per_cell)
    ]


def grid_parameter_sets(n_parents: int, spec: SegmentSpec) -> int:
    return n_parents * len(spec.set_sizes) * spec.seeds_per_cell * len(spec.epoch_checkpoints)


def select_winners(nodes: list[TreeNode], spec: SegmentSpec) -> list[TreeNode]:
    """Per (size, epochs) cell, the surviving node with minimum val_loss;
    ties break to the lowest seed index, then lexicographic key."""
    alive = [n for n in nodes if n.status == "ok"]
    winners = []
    for size in spec.set_sizes:
        for epochs in spec.epoch_checkpoints:
            cell = [n for n in alive if n.stage.size == size and n.stage.epochs == epochs]
            if not cell:
                raise EmptyCell(size, epochs)
            winners.append(min(cell, key=lambda n: (n.val_loss, n.stage.seed, n.key)))
    return winners


def subsample_lineages(items: list, fraction: float, seed: int) -> list:
    """ceil(fraction*n) items chosen uniformly without replacement."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    n = len(items)
    want = math.ceil(fraction * n)
    rng = make_rng("subsample_lineages", seed)
    idx = _reservoir_indices(n, want, rng)
    return [items[i] for i in sorted(idx)]


def best_of_replicas(nodes: list[TreeNode], final_epochs: int) -> TreeNode:
    finals = [n for n in nodes if n.status == "ok" and n.stage.epochs == final_epochs]
    if not finals:
        raise EmptyCell(nodes[0].stage.size if nodes else -1, final_epochs)
    return min(finals, key=lambda n: (n.val_loss, n.stage.seed, n.key))


# ---------------------------------------------------------------------------
# Plan runner
# ---------------------------------------------------------------------------

def _dataset_dir(out_dir) -> Path:
    return Path(out_dir) / "datasets"


def train_set_path(out_dir, label: str, size: int) -> Path:
    return _dataset_dir(out_dir) / f"train-{label}-n{size}.tsv"


def val_set_path(out_dir, label: str, size: int) -> Path:
    return _dataset_dir(out_dir) / f"val-{label}-n{size}.tsv"


class PlanRunner:
    def __init__(self, plan: CurriculumPlan, pools_dir, out_dir, workers: int = 1,
                 progress: bool = True):
        self.plan = plan
        self.pools_dir = Path(pools_dir)
        self.out_dir = Path(out_dir)
        self.workers = max(1, workers)
        self.progress = progress
        self.store = TreeStore(out_dir)
        self.vocab_path = self.pools_dir / "vocab.txt"
        self._jobs_run = 0

    # -- setup ---------------------------------------------------------------

    def prepare(self) -> None:
        if not self.vocab_path.exists():
            raise FileNotFoundError(f"vocabulary file missing: {self.vocab_path}")
        vocab = load_vocab(self.vocab_path)
        model = self.plan.model
        if getattr(self.plan, "model_needs_vocab", False):
            model = replace(model, vocab_size=vocab.size)
        elif model.vocab_size != vocab.size:
            raise PlanError("model.vocab_size",
                            f"plan says {model.vocab_size} but vocabulary has {vocab.size}")
        self.model = model

        plan_path = self.out_dir / "plan.json"
        snapshot_model = model.to_dict()
        snapshot_model.pop("seed", None)
        snapshot = dict(self.plan.to_dict(), model=snapshot_model)
        if plan_path.exists():
            existing = json.loads(plan_path.read_text(encoding="utf-8"))
            if existing != snapshot:
                raise PlanError("<root>", f"out dir {self.out_dir} holds a different plan")
        else:
            write_text_atomic(plan_path, canonical_json(snapshot) + "\n")
        self.plan_digest = json_digest(snapshot)
        self.source = {"pools": str(self.pools_dir)}
        cross_manifest = self.pools_dir / "cross.manifest.json"
        if cross_manifest.exists():
            meta = json.loads(cross_manifest.read_text(encoding="utf-8"))
            self.source["corpus"] = meta.get("corpus")
            self.source["corpus_digest"] = meta.get("corpus_digest")
        source_path = self.out_dir / "source.json"
        if not source_path.exists():
            write_text_atomic(source_path, canonical_json(self.source) + "\n")
        self._materialize_datasets()

    def _load_source_pool(self, label: str) -> PairPool:
        path = pool_path(self.pools_dir, label)
        if not path.exists():
            raise FileNotFoundError(f"pool file missing: {path}")
        return load_pool(path, validate=False)

    def _materialize_datasets(self) -> None:
        """Sample validation and training sets once, to files.

        Validation pools are held out at the instance level: the drawn
        occurrences leave their class pool (and the corresponding cross
        positions) before any training, mix or cross set is sampled. The
        corpus keeps its duplicates (no deduplication), so other
        occurrences of the same sentence pair may legitimately appear in
        training sets; every training type faces the same condition.
        """
        plan = self.plan
        ddir = _dataset_dir(self.out_dir)
        ddir.mkdir(parents=True, exist_ok=True)
        final = plan.final_segment

        val_specs: dict[tuple[str, int], int] = {}
        for seg in plan.segments:
            for size in seg.set_sizes:
                val_specs[(seg.class_label, size)] = seg.val_size
        for b in plan.baselines:
            for size in b.sizes:
                val_specs.setdefault((final.class_label, size), final.val_size)

        train_specs: list[tuple[str, int]] = []
        for seg in plan.segments:
            for size in seg.set_sizes:
                train_specs.append((seg.class_label, size))
        for b in plan.baselines:
            for size in b.sizes:
                if b.kind == "fresh":
                    train_specs.append((final.class_label, size))
                else:
                    train_specs.append((b.kind, size))
        train_specs = sorted(set(train_specs))

        needed_files = [val_set_path(self.out_dir, lbl, size) for (lbl, size) in val_specs]
        needed_files += [train_set_path(self.out_dir, lbl, size) for (lbl, size) in train_specs]
        if all(p.exists() for p in needed_files):
            return

        pools = {label: self._load_source_pool(label) for label in ("short", "medium", "long", "cross")}
        # position of each length-pool entry inside the cross pool (length
        # pools are the both-classes-equal subsequence of the cross stream)
        cross_positions: dict[str, list[int]] = {label: [] for label in LENGTH_POOL_LABELS}
        for pos, pair in enumerate(pools["cross"].pairs):
            if pair.source_class == pair.target_class:
                cross_positions[pair.source_class.label].append(pos)
        for label in LENGTH_POOL_LABELS:
            if len(cross_positions[label]) != len(pools[label]):
                raise ValueError(
                    f"pool files inconsistent: {label}.tsv has {len(pools[label])} pairs "
                    f"but cross.tsv contains {len(cross_positions[label])} {label} pairs"
                )

        held_idx: dict[str, set[int]] = {label: set() for label in LENGTH_POOL_LABELS}
        for (label, size), n_val in sorted(val_specs.items()):
            path = val_set_path(self.out_dir, label, size)
            seed = derive_seed(self.plan.master_seed, "valset", label, size)
            idx = sample_uniform_indices(pools[label], n_val, seed)
            held_idx[label].update(int(i) for i in idx)
            if not path.exists():
                val_pool = PairPool(label, [pools[label].pairs[i] for i in idx],
                                    {"n": n_val, "seed": seed, "held_out": True})
                save_pool(val_pool, path)

        remainders = {
            label: PairPool(label, [p for i, p in enumerate(pools[label].pairs)
                                    if i not in held_idx[label]])
            for label in LENGTH_POOL_LABELS
        }
        held_cross = {
            cross_positions[label][i] for label in LENGTH_POOL_LABELS for i in held_idx[label]
        }
        remainders["cross"] = PairPool(
            "cross",
            [p for i, p in enumerate(pools["cross"].pairs) if i not in held_cross],
        )

        for label, size in train_specs:
            path = train_set_path(self.out_dir, label, size)
            if path.exists():
                continue
            if label == "mix":
                seed = derive_seed(self.plan.master_seed, "mixset", size)
                pool = build_mix_set(remainders, size, seed)
            elif label == "cross":
                seed = derive_seed(self.plan.master_seed, "crossset", size)
                pool = build_cross_set(remainders["cross"], size, seed)
            else:
                seed = derive_seed(self.plan.master_seed, "trainset", label, size)
                pool = sample_uniform(remainders[label], size, seed)
            save_pool(pool, path)

    # -- job construction ----------------------------------------------------

    def _base_train_cfg(self, marks: tuple[int, ...], shuffle_seed: int) -> TrainConfig:
        return replace(self.plan.trainer, epoch_checkpoints=marks, shuffle_seed=shuffle_seed)

    def _segment_jobs(self, index: int, spec: SegmentSpec,
                      parents: list[TreeNode] | None) -> list[TrainJob]:
        master = self.plan.master_seed
        group = f"segment{index}"
        jobs = []
        parent_list: list[TreeNode | None] = list(parents) if parents is not None else [None]
        for parent in parent_list:
            parent_key = parent.key if parent is not None else None
            for size in spec.set_sizes:
                for seed_idx in range(spec.seeds_per_cell):
                    cell = (index, parent_key or "fresh", size, seed_idx)
                    init_seed = derive_seed(master, "cell-init", *cell)
                    shuffle_seed = derive_seed(master, "cell-shuffle", *cell)
                    stage_prefix = f"{parent_key}__" if parent_key else ""
                    job_key = f"{stage_prefix}{spec.class_label}-n{size}-s{seed_idx}"
                    jobs.append(TrainJob(
                        job_key=job_key,
                        group=group,
                        stage_label=spec.class_label,
                        size=size,
                        seed_index=seed_idx,
                        marks=spec.epoch_checkpoints,
                        parent_key=parent_key,
                        parent_lineage=parent.lineage if parent is not None else (),
                        parent_ckpt=str(self.out_dir / parent.path) if parent is not None else None,
                        train_path=str(train_set_path(self.out_dir, spec.class_label, size)),
                        val_path=str(val_set_path(self.out_dir, spec.class_label, size)),
                        vocab_path=str(self.vocab_path),
                        model_cfg=replace(self.model, seed=init_seed),
                        train_cfg=self._base_train_cfg(spec.epoch_checkpoints, shuffle_seed),
                        out_dir=str(self.out_dir),
                    ))
        return jobs

    def _baseline_jobs(self, spec: BaselineSpec) -> list[TrainJob]:
        master = self.plan.master_seed
        final = self.plan.final_segment
        train_label = final.class_label if spec.kind == "fresh" else spec.kind
        jobs = []
        for size in spec.sizes:
            for replica in range(spec.replicas):
                init_seed = derive_seed(master, "baseline-init", spec.kind, size, replica)
                shuffle_seed = derive_seed(master, "baseline-shuffle", spec.kind, size, replica)
                jobs.append(TrainJob(
                    job_key=f"{spec.kind}-n{size}-s{replica}",
                    group=spec.kind,
                    stage_label=spec.kind,
                    size=size,
                    seed_index=replica,
                    marks=final.epoch_checkpoints,
                    parent_key=None,
                    parent_lineage=(),
                    parent_ckpt=None,
                    train_path=str(train_set_path(self.out_dir, train_label, size)),
                    val_path=str(val_set_path(self.out_dir, final.class_label, size)),
                    vocab_path=str(self.vocab_path),
                    model_cfg=replace(self.model, seed=init_seed),
                    train_cfg=self._base_train_cfg(final.epoch_checkpoints, shuffle_seed),
                    out_dir=str(self.out_dir),
                ))
        return jobs

    # -- execution -----------------------------------------------------------

    def _run_jobs(self, jobs: list[TrainJob], tree: dict[str, TreeNode]) -> None:
        pending = []
        for job in jobs:
            keys = job.node_keys()
            if job.failure_key in tree or all(k in tree for k in keys):
                continue
            pending.append(job)
        if not pending:
            return
        total = len(pending)
        done = 0
        started = time.perf_counter()

        def absorb(node_dicts):
            nonlocal done
            for d in node_dicts:
                node = TreeNode.from_dict(d)
                tree[node.key] = node
                self.store.append(node)
            done += 1
            self._jobs_run += 1
            if self.progress:
                log.info("job %d/%d done (%.1fs elapsed)", done, total,
                         time.perf_counter() - started)

        if self.workers <= 1:
            for job in pending:
                absorb(execute_job(job))
            return
        import multiprocessing

        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=self.workers, mp_context=ctx) as pool:
            futures = [pool.submit(execute_job, job) for job in pending]
            for fut in as_completed(futures):
                absorb(fut.result())

    def _segment_nodes(self, tree: dict[str, TreeNode], index: int) -> list[TreeNode]:
        nodes = [n for n in tree.values() if n.group == f"segment{index}"]
        return sorted(nodes, key=lambda n: n.key)

    def _baseline_nodes(self, tree: dict[str, TreeNode], kind: str) -> list[TreeNode]:
        return sorted((n for n in tree.values() if n.group == kind), key=lambda n: n.key)

    def run(self) -> dict:
        started = time.perf_counter()
        self.prepare()
        tree = self.store.load()
        plan = self.plan

        parents: list[TreeNode] | None = None
        for index, spec in enumerate(plan.segments):
            jobs = self._segment_jobs(index, spec, parents)
            self._check_pool_budget(spec)
            log.info("segment %d (%s): %d runs x %d marks", index, spec.class_label,
                     len(jobs), len(spec.epoch_checkpoints))
            self._run_jobs(jobs, tree)
            nodes = self._segment_nodes(tree, index)
            if index + 1 < len(plan.segments):
                if index + 1 == len(plan.segments) - 1:
                    ok_nodes = [n for n in nodes if n.status == "ok"]
                    carry_seed = derive_seed(plan.master_seed, "carry", index)
                    parents = subsample_lineages(ok_nodes, plan.carry_fraction, carry_seed)
                    log.info("carrying %d of %d checkpoints into the final segment",
                             len(parents), len(ok_nodes))
                else:
                    parents = select_winners(nodes, spec)
                    log.info("selected %d winners", len(parents))

        baseline_evals = []
        for spec in plan.baselines:
            jobs = self._baseline_jobs(spec)
            log.info("baseline %s: %d runs", spec.kind, len(jobs))
            self._run_jobs(jobs, tree)
            baseline_evals.extend(self._evaluate_baseline_winners(tree, spec))
        self._write_baseline_evals(baseline_evals)

        report = build_report(
            plan, self.model, tree, baseline_evals,
            plan_digest=self.plan_digest,
            wall_time=time.perf_counter() - started,
            jobs_run=self._jobs_run,
            source=self.source,
        )
        write_report(self.out_dir, report)
        return report

    def _check_pool_budget(self, spec: SegmentSpec) -> None:
        for size in spec.set_sizes:
            path = train_set_path(self.out_dir, spec.class_label, size)
            if not path.exists():
                raise FileNotFoundError(f"pool file missing: {path}")

    def _evaluate_baseline_winners(self, tree, spec: BaselineSpec) -> list[dict]:
        """Winner per (kind, size), re-evaluated on every final-class val size."""
        final = self.plan.final_segment
        final_epochs = final.epoch_checkpoints[-1]
        vocab = _cached_vocab(str(self.vocab_path))
        val_sizes = sorted({s for s in final.set_sizes} | {s for b in self.plan.baselines for s in b.sizes})
        rows = []
        for size in spec.sizes:
            nodes = [n for n in self._baseline_nodes(tree, spec.kind) if n.stage.size == size]
            if not any(n.status == "ok" for n in nodes):
                continue
            winner = best_of_replicas(nodes, final_epochs)
            ck = load_checkpoint(self.out_dir / winner.path)
            for val_size in val_sizes:
                vpath = val_set_path(self.out_dir, final.class_label, val_size)
                val_pool = _cached_pool(str(vpath))
                loss = (winner.val_loss if val_size == size
                        else evaluate(ck.params, val_pool, vocab, ck.config.reverse_source))
                rows.append({
                    "kind": spec.kind,
                    "train_size": size,
                    "val_size": val_size,
                    "val_loss": loss,
                    "key": winner.key,
                })
        return rows

    def _write_baseline_evals(self, rows: list[dict]) -> None:
        path = self.out_dir / "baseline_evals.json"
        write_text_atomic(path, canonical_json(rows) + "\n")


def run_plan(plan: CurriculumPlan, pools_dir, out_dir, workers: int = 1) -> dict:
    return PlanRunner(plan, pools_dir, out_dir, workers=workers).run()


# ---------------------------------------------------------------------------
# Tables and report
# ---------------------------------------------------------------------------

TABLE1_COLUMNS = ("Short TD", "Short Epochs", "Val. Loss")
TABLE2_COLUMNS = ("Type", "Val. Loss", "Long TD", "Med TD", "Med Epochs", "Short TD", "Short Epochs")


def table_short_epoch_analysis(plan: CurriculumPlan, tree: dict[str, TreeNode]) -> list[dict]:
    """Best next-segment run at (largest size, full schedule), grouped by
    first-segment training size: which first-segment epoch count won?"""
    if len(plan.segments) < 2:
        return []
    first, second = plan.segments[0], plan.segments[1]
    target_size = second.set_sizes[-1]
    target_epochs = second.epoch_checkpoints[-1]
    candidates = [
        n for n in tree.values()
        if n.group == "segment1" and n.status == "ok"
        and n.stage.size == target_size and n.stage.epochs == target_epochs
    ]
    rows = []
    for size in first.set_sizes:
        cell = [n for n in candidates if n.lineage[0].size == size]
        if not cell:
            rows.append({"Short TD": size, "Short Epochs": "", "Val. Loss": "", "key": ""})
            continue
        best = min(cell, key=lambda n: (n.val_loss, n.stage.seed, n.key))
        rows.append({
            "Short TD": size,
            "Short Epochs": best.lineage[0].epochs,
            "Val. Loss": best.val_loss,
            "key": best.key,
        })
    return rows


def _lineage_columns(node: TreeNode) -> dict:
    cols = {"Long TD": node.stage.size, "Med TD": "", "Med Epochs": "", "Short TD": "", "Short Epochs": ""}
    if len(node.lineage) >= 2:
        med = node.lineage[-2]
        cols["Med TD"] = med.size
        cols["Med Epochs"] = med.epochs
    if len(node.lineage) >= 3:
        short = node.lineage[0]
        cols["Short TD"] = short.size
        cols["Short Epochs"] = short.epochs
    return cols


def table_type_comparison(plan: CurriculumPlan, tree: dict[str, TreeNode],
                          baseline_evals: list[dict], block: int = 3) -> list[dict]:
    """Worst/best curriculum blocks per final size plus fresh/mix/cross rows."""
    final_index = len(plan.segments) - 1
    final = plan.final_segment
    final_epochs = final.epoch_checkpoints[-1]
    finals = [
        n for n in tree.values()
        if n.group == f"segment{final_index}" and n.status == "ok"
        and n.stage.epochs == final_epochs
    ]
    rows = []
    for kind, reverse in (("curriculum-worst", True), ("curriculum-best", False)):
        for size in final.set_sizes:
            cell = sorted(
                (n for n in finals if n.stage.size == size),
                key=lambda n: (n.val_loss, n.stage.seed, n.key),
                reverse=reverse,
            )
            for n in cell[:block]:
                rows.append({"Type": kind, "Val. Loss": n.val_loss, **_lineage_columns(n), "key": n.key})
    for kind in BASELINE_KINDS:
        for row in sorted((r for r in baseline_evals if r["kind"] == kind),
                          key=lambda r: (r["val_size"], r["train_size"])):
            rows.append({
                "Type": kind,
                "Val. Loss": row["val_loss"],
                "Long TD": row["val_size"],
                "Med TD": "", "Med Epochs": "", "Short TD": "", "Short Epochs": "",
                "key": row["key"],
            })
    return rows


def directional_comparison(plan: CurriculumPlan, tree: dict[str, TreeNode]) -> dict | None:
    """Median curriculum vs median fresh val loss at the matched budget cell."""
    import statistics

    final_index = len(plan.segments) - 1
    final = plan.final_segment
    size = final.set_sizes[-1]
    epochs = final.epoch_checkpoints[-1]
    curriculum = sorted(
        n.val_loss for n in tree.values()
        if n.group == f"segment{final_index}" and n.status == "ok"
        and n.stage.size == size and n.stage.epochs == epochs
    )
    fresh = sorted(
        n.val_loss for n in tree.values()
        if n.group == "fresh" and n.status == "ok"
        and n.stage.size == size and n.stage.epochs == epochs
    )
    if not curriculum or not fresh:
        return None
    cur_med = statistics.median(curriculum)
    fresh_med = statistics.median(fresh)
    return {
        "long_size": size,
        "epochs": epochs,
        "curriculum_runs": len(curriculum),
        "fresh_runs": len(fresh),
        "curriculum_median_val_loss": cur_med,
        "fresh_median_val_loss": fresh_med,
        "worst_curriculum_val_loss": curriculum[-1],
        "best_fresh_val_loss": fresh[0],
        "curriculum_beats_fresh": cur_med < fresh_med,
        "worst_curriculum_beats_best_fresh": curriculum[-1] < fresh[0],
    }


def environment_record() -> dict:
    import platform

    import numpy

    from . import __version__

    return {
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "platform": platform.platform(),
    }


def build_report(plan: CurriculumPlan, model: ModelConfig, tree: dict[str, TreeNode],
                 baseline_evals: list[dict], plan_digest: str, wall_time: float,
                 jobs_run: int, source: dict | None = None) -> dict:
    failed = sorted(n.key for n in tree.values() if n.status == "failed")
    return {
        "plan_digest": plan_digest,
        "source": source or {},
        "environment": environment_record(),
        "model": model.to_dict(),
        "nodes": len(tree),
        "failed_runs": failed,
        "jobs_run": jobs_run,
        "wall_time": round(wall_time, 3),
        "tables": {
            "short_epoch_analysis": table_short_epoch_analysis(plan, tree),
            "type_comparison": table_type_comparison(plan, tree, baseline_evals),
        },
        "directional": directional_comparison(plan, tree),
        "baseline_evals": baseline_evals,
    }


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(rows: list[dict], columns: tuple[str, ...], path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(col, "")) for col in columns])


def write_report(out_dir, report: dict) -> None:
    out_dir = Path(out_dir)
    write_csv(report["tables"]["short_epoch_analysis"], TABLE1_COLUMNS,
              out_dir / "table_short_epochs.csv")
    write_csv(report["tables"]["type_comparison"], TABLE2_COLUMNS,
              out_dir / "table_type_comparison.csv")
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def regenerate_report(out_dir) -> dict:
    """Rebuild tables from the persisted tree without retraining."""
    out_dir = Path(out_dir)
    plan_path = out_dir / "plan.json"
    if not plan_path.exists():
        raise FileNotFoundError(f"no plan snapshot in {out_dir}; run the plan first")
    snapshot = json.loads(plan_path.read_text(encoding="utf-8"))
    plan = plan_from_dict(snapshot)
    model = ModelConfig.from_dict(snapshot["model"])
    store = TreeStore(out_dir)
    tree = store.load()
    evals_path = out_dir / "baseline_evals.json"
    baseline_evals = json.loads(evals_path.read_text(encoding="utf-8")) if evals_path.exists() else []
    source_path = out_dir / "source.json"
    source = json.loads(source_path.read_text(encoding="utf-8")) if source_path.exists() else {}
    report = build_report(plan, model, tree, baseline_evals,
                          plan_digest=json_digest(snapshot), wall_time=0.0, jobs_run=0,
                          source=source)
    write_report(out_dir, report)
    return report

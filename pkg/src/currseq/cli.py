"""Command-line entry points for reproducible corpus prep, runs and reports.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 I/O error. All randomness flows from explicit seeds in the plan and
flags; nothing is ever seeded from the clock.
"""

from __future__ import annotations

import datetime
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .corpus import (
    CorpusDecodeError,
    InsufficientPairs,
    build_pools,
    iter_corpus_pairs,
    pool_path,
    read_conversations,
    save_pool,
)
from .curriculum import PlanError, load_plan, regenerate_report, run_plan
from .seq2seq import ModelConfig, backward, finite_difference_gradients, forward_loss, \
    greedy_decode, init_params, max_relative_error, pad_batch
from .trainer import load_checkpoint
from .util import canonical_json, file_digest, make_rng
from .vocab import build_vocab, decode, encode_source, load_vocab, save_vocab, vocab_digest

log = logging.getLogger("currseq")

EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _setup_logging(verbose: bool = True):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s", "%H:%M:%S"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO if verbose else logging.WARNING)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _manifest_start(out_dir: Path, command: str, extra: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    payload = {
        "command": command,
        "argv": sys.argv[1:],
        "code_version": __version__,
        "started": _now(),
        "status": "running",
        **extra,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _manifest_finish(path: Path, status: str, outputs: dict) -> None:
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload.update({"status": status, "finished": _now(), **outputs})
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@click.group()
@click.version_option(version=__version__)
def main():
    """Sentence-length curriculum training, desk scale."""
    _setup_logging()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@main.command("synth")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="corpus file to write")
@click.option("--conversations", default=66000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_synth(out, conversations, seed):
    """Generate a deterministic synthetic dialogue corpus."""
    from .synthcorpus import generate_corpus

    info = generate_corpus(out, conversations=conversations, seed=seed)
    click.echo(canonical_json(info))


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

@main.command("prepare")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int,
              help="recorded in pool manifests for downstream sampling")
@click.option("--max-vocab", default=4000, show_default=True, type=int)
@click.option("--min-freq", default=1, show_default=True, type=int)
def cmd_prepare(corpus_path, out_dir, seed, max_vocab, min_freq):
    """Extract pairs, build length/cross pools and the vocabulary."""
    corpus_path = Path(corpus_path)
    out_dir = Path(out_dir)
    if not corpus_path.exists():
        _fail_io(f"corpus file not found: {corpus_path}")
    manifest = _manifest_start(out_dir, "prepare", {"corpus": str(corpus_path)})
    try:
        digest = file_digest(corpus_path)
        pools, counts = build_pools(iter_corpus_pairs(read_conversations(corpus_path)))
        base_manifest = {
            "corpus": str(corpus_path),
            "corpus_digest": digest,
            "extraction": {"format": "one utterance per line, blank line ends a conversation"},
            "seed": seed,
            "dispositions": counts,
        }
        for label, pool in pools.items():
            pool.source_manifest = dict(base_manifest)
            save_pool(pool, pool_path(out_dir, label))
        v = build_vocab(pools["cross"].pairs, max_size=max_vocab, min_freq=min_freq)
        save_vocab(v, out_dir / "vocab.txt")
        (out_dir / "counts.json").write_text(canonical_json(counts) + "\n", encoding="utf-8")
        _manifest_finish(manifest, "done", {
            "corpus_digest": digest,
            "vocab_digest": vocab_digest(v),
            "pool_sizes": {label: len(pool) for label, pool in pools.items()},
        })
        click.echo(canonical_json({"pools": {k: len(p) for k, p in pools.items()},
                                   "dispositions": counts, "vocab_size": v.size}))
    except CorpusDecodeError as e:
        _manifest_finish(manifest, "failed", {"error": str(e)})
        _fail_io(str(e))
    except OSError as e:
        _manifest_finish(manifest, "failed", {"error": str(e)})
        _fail_io(str(e))


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@main.command("run")
@click.option("--plan", "plan_path", required=True, type=click.Path(dir_okay=False))
@click.option("--pools", "pools_dir", required=True, type=click.Path(file_okay=False),
              help="directory produced by `currseq prepare`")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--seed", "seed_override", default=None, type=int,
              help="override the plan's master_seed")
@click.option("--resume/--no-resume", default=True, show_default=True,
              help="reuse completed grid cells found in the out dir")
def cmd_run(plan_path, pools_dir, out_dir, workers, seed_override, resume):
    """Execute a curriculum plan end to end (resumable)."""
    out_dir = Path(out_dir)
    try:
        plan = load_plan(plan_path)
    except FileNotFoundError as e:
        _fail_io(str(e))
    except PlanError as e:
        raise click.UsageError(str(e))
    if seed_override is not None:
        plan.master_seed = seed_override
    if not resume and (out_dir / "tree.jsonl").exists():
        raise click.UsageError(
            f"{out_dir} already holds a lineage tree; pass --resume to continue it"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(out_dir / ".lock")
    try:
        lock.acquire(timeout=0.5)
    except Timeout:
        _fail_io(f"out dir {out_dir} is locked by another writer")
    manifest = _manifest_start(out_dir, "run", {"plan": str(plan_path), "pools": str(pools_dir)})
    try:
        report = run_plan(plan, pools_dir, out_dir, workers=workers)
        _manifest_finish(manifest, "done", {
            "plan_digest": report["plan_digest"],
            "outputs": ["report.json", "table_short_epochs.csv", "table_type_comparison.csv"],
            "failed_runs": report["failed_runs"],
        })
        click.echo(canonical_json({
            "nodes": report["nodes"],
            "jobs_run": report["jobs_run"],
            "failed_runs": len(report["failed_runs"]),
            "directional": report["directional"],
        }))
    except PlanError as e:
        _manifest_finish(manifest, "failed", {"error": str(e)})
        raise click.UsageError(str(e))
    except InsufficientPairs as e:
        _manifest_finish(manifest, "failed", {"error": str(e)})
        raise click.UsageError(f"plan demands more data than the pools offer: {e}")
    except FileNotFoundError as e:
        _manifest_finish(manifest, "failed", {"error": str(e)})
        _fail_io(str(e))
    finally:
        lock.release()


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

@main.command("gradcheck")
@click.option("--vocab-size", default=20, show_default=True, type=int)
@click.option("--embed-dim", default=8, show_default=True, type=int)
@click.option("--hidden-dim", default=12, show_default=True, type=int)
@click.option("--seed", default=2024, show_default=True, type=int)
@click.option("--step", default=1e-4, show_default=True, type=float)
@click.option("--tolerance", default=1e-4, show_default=True, type=float)
@click.option("--corrupt", is_flag=True, hidden=True,
              help="fault-injection hook: perturb one analytic gradient entry")
def cmd_gradcheck(vocab_size, embed_dim, hidden_dim, seed, step, tolerance, corrupt):
    """Check analytic gradients against central finite differences."""
    cfg = ModelConfig(vocab_size=vocab_size, embed_dim=embed_dim, hidden_dim=hidden_dim, seed=seed)
    p = init_params(cfg, dtype=np.float64)
    rng = make_rng("gradcheck-batch", seed)
    srcs, tgts = [], []
    for n_src, n_tgt in [(3, 3), (4, 2), (2, 3)]:
        srcs.append(rng.integers(4, vocab_size, size=n_src).astype(np.int32))
        mid = rng.integers(4, vocab_size, size=n_tgt)
        tgts.append(np.concatenate([[1], mid, [2]]).astype(np.int32))
    batch = pad_batch(srcs, tgts)
    _, cache = forward_loss(p, batch)
    analytic = backward(p, cache)
    if corrupt:
        analytic.enc_wx[0, 0] += 1e-2
    numeric = finite_difference_gradients(p, batch, step=step)
    worst, where = max_relative_error(analytic, numeric)
    ok = worst <= tolerance
    click.echo(f"coordinates checked: {p.param_count()}")
    click.echo(f"max relative error: {worst:.3e} at {where}")
    click.echo(f"gradcheck: {'PASS' if ok else 'FAIL'} (tolerance {tolerance:g})")
    if not ok:
        sys.exit(EXIT_VERIFY)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@main.command("report")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_report(out_dir):
    """Regenerate the report CSVs from the persisted lineage tree."""
    try:
        report = regenerate_report(out_dir)
    except FileNotFoundError as e:
        _fail_io(str(e))
    click.echo(canonical_json({
        "nodes": report["nodes"],
        "tables": {k: len(v) for k, v in report["tables"].items()},
    }))


# ---------------------------------------------------------------------------
# decode (debugging)
# ---------------------------------------------------------------------------

@main.command("decode")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(dir_okay=False))
@click.option("--vocab", "vocab_path", required=True, type=click.Path(dir_okay=False))
@click.option("--text", default=None, help="source utterance; stdin lines when omitted")
@click.option("--max-len", default=18, show_default=True, type=int)
def cmd_decode(ckpt_path, vocab_path, text, max_len):
    """Greedy-decode replies for source utterances."""
    from .corpus import Utterance, tokenize_line

    try:
        ck = load_checkpoint(ckpt_path)
        v = load_vocab(vocab_path)
    except FileNotFoundError as e:
        _fail_io(str(e))
    lines = [text] if text is not None else sys.stdin
    for line in lines:
        tokens = tokenize_line(line)
        if not tokens:
            continue
        ids = encode_source(Utterance(tokens), v)
        out_ids = greedy_decode(ck.params, ids, max_len=max_len,
                                reverse_source=ck.config.reverse_source)
        words = [w for w in decode(out_ids, v) if w != "<eos>"]
        click.echo(" ".join(words))


def _fail_io(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_IO)


def entry():
    main(auto_envvar_prefix="CURRSEQ")


if __name__ == "__main__":
    entry()

"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Criteria 1-7 and 9 run in seconds. Criterion 8 is the desk-scale
directional experiment (a full curriculum grid plus baselines on a
synthetic 270K-pair corpus); it is marked `slow` and takes tens of
minutes on two cores. Run `pytest -m "not slow"` to skip it during
development.
"""

import json
import math
import os
import signal
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from currseq import curriculum as cur
from currseq import seq2seq as s2s
from currseq import trainer as tr
from currseq.corpus import DialoguePair, PairPool, Utterance, sample_uniform
from currseq.trainer import Stage
from currseq.util import canonical_json, make_rng
from currseq.vocab import build_vocab, encode_source, encode_target

from conftest import record_acceptance


def accept(number: int, name: str, ok: bool, detail: str = ""):
    line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    record_acceptance(line)
    print(line)
    assert ok, line


def gradcheck_batch(vocab_size: int):
    rng = make_rng("gradcheck-batch", 2024)
    srcs, tgts = [], []
    for n_src, n_tgt in [(3, 3), (4, 2), (2, 3)]:  # encoded target lengths 5, 4, 5
        srcs.append(rng.integers(4, vocab_size, size=n_src).astype(np.int32))
        mid = rng.integers(4, vocab_size, size=n_tgt)
        tgts.append(np.concatenate([[1], mid, [2]]).astype(np.int32))
    return s2s.pad_batch(srcs, tgts)


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_oracle():
    started = time.perf_counter()
    cfg = s2s.ModelConfig(vocab_size=20, embed_dim=8, hidden_dim=12, seed=2024)
    p = s2s.init_params(cfg, dtype=np.float64)
    batch = gradcheck_batch(20)
    assert batch.target.shape[1] <= 5
    _, cache = s2s.forward_loss(p, batch)
    analytic = s2s.backward(p, cache)
    numeric = s2s.finite_difference_gradients(p, batch, step=1e-4)
    worst, where = s2s.max_relative_error(analytic, numeric)
    elapsed = time.perf_counter() - started
    accept(1, "gradient-oracle", worst <= 1e-4 and elapsed < 60,
           f"max rel err {worst:.2e} at {where} over {p.param_count()} coords, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. uniform-loss identity
# ---------------------------------------------------------------------------

def test_criterion_2_uniform_loss_identity():
    worst = 0.0
    for vocab_size in (6, 20, 4000):
        cfg = s2s.ModelConfig(vocab_size=vocab_size, embed_dim=4, hidden_dim=5, seed=3)
        p = s2s.init_params(cfg, dtype=np.float64)
        p.out_w[:] = 0.0
        p.out_b[:] = 0.0
        batch = gradcheck_batch(min(vocab_size, 20))
        loss, _ = s2s.forward_loss(p, batch)
        worst = max(worst, abs(loss - math.log(vocab_size)))
    accept(2, "uniform-loss-identity", worst <= 1e-9,
           f"max |loss - ln V| = {worst:.2e} over V in {{6, 20, 4000}}")


# ---------------------------------------------------------------------------
# 3. memorization sanity
# ---------------------------------------------------------------------------

MEMO_WORDS = [f"word{i:02d}" for i in range(16)]


def memorization_pairs():
    pairs = []
    for i in range(32):
        src = [MEMO_WORDS[i % 16], MEMO_WORDS[(i * 7 + 3) % 16]]
        if i >= 16:
            src.append(MEMO_WORDS[(i * 3 + 5) % 16])
        tgt = tuple(MEMO_WORDS[(i * 5 + j * 3 + 1) % 16] for j in range(1 + i % 3))
        pairs.append(DialoguePair.from_utterances(Utterance(tuple(src)), Utterance(tgt)))
    return pairs


def test_criterion_3_memorization_sanity():
    pairs = memorization_pairs()
    assert len({p.source.tokens for p in pairs}) == 32
    pool = PairPool("cross", pairs)
    v = build_vocab(pairs, max_size=20)
    assert v.size == 20
    model_cfg = s2s.ModelConfig(vocab_size=v.size, embed_dim=8, hidden_dim=12, seed=7)
    train_cfg = tr.TrainConfig(batch_size=8, epoch_checkpoints=(500,), learning_rate=0.01,
                               shuffle_seed=1, bucket_window=4)
    checkpoints, _ = tr.train_segment(s2s.init_params(model_cfg), pool, pool, v,
                                      train_cfg, model_cfg)
    final = checkpoints[0]
    hits = sum(
        s2s.greedy_decode(final.params, encode_source(p.source, v))
        == encode_target(p.target, v)[1:].tolist()
        for p in pairs
    )
    accept(3, "memorization-sanity", final.val_loss < 0.2 and hits >= 30,
           f"per-token loss {final.val_loss:.4f} after 500 epochs, greedy exact {hits}/32")


# ---------------------------------------------------------------------------
# 4. grid cardinality at paper shape
# ---------------------------------------------------------------------------

def test_criterion_4_grid_cardinality_paper_shape():
    sizes = (10_000, 50_000, 200_000, 500_000, 1_000_000, 3_000_000)
    first = cur.SegmentSpec("short", sizes, 10, (2, 4, 6), 1000)
    second = cur.SegmentSpec("medium", sizes, 1, (2, 4, 6), 1000)
    first_models = len(cur.grid_cells([None], first))
    first_sets = cur.grid_parameter_sets(1, first)
    second_models = len(cur.grid_cells([f"w{i}" for i in range(18)], second))
    second_sets = cur.grid_parameter_sets(18, second)
    carried = len(cur.subsample_lineages(list(range(324)), 1 / 6, seed=0))
    ok = (first_models, first_sets, second_models, second_sets, carried) == (60, 180, 108, 324, 54)
    accept(4, "grid-cardinality", ok,
           f"first segment {first_models} models/{first_sets} sets, "
           f"second {second_models} models/{second_sets} sets, carry {carried}")


# ---------------------------------------------------------------------------
# 5. winner selection equals brute force
# ---------------------------------------------------------------------------

def test_criterion_5_winner_selection_brute_force():
    rng = np.random.default_rng(42)
    spec = cur.SegmentSpec("short", (1, 2, 3), 10, (2, 4, 6), 10)
    mismatches = 0
    for _ in range(1000):
        nodes = []
        for size in spec.set_sizes:
            for epochs in spec.epoch_checkpoints:
                for seed in range(spec.seeds_per_cell):
                    lineage = (Stage("short", size, epochs, seed),)
                    nodes.append(cur.TreeNode(tr.lineage_key(lineage), lineage, "ok",
                                              "segment0", val_loss=float(rng.random())))
        winners = cur.select_winners(nodes, spec)
        for w in winners:
            cell_losses = [n.val_loss for n in nodes
                           if n.stage.size == w.stage.size and n.stage.epochs == w.stage.epochs]
            if w.val_loss != min(cell_losses):
                mismatches += 1
        replicas = [cur.TreeNode(f"r{i}", (Stage("fresh", 5, 6, i),), "ok", "fresh",
                                 val_loss=float(rng.random())) for i in range(5)]
        best = cur.best_of_replicas(replicas, final_epochs=6)
        if best.val_loss != min(r.val_loss for r in replicas):
            mismatches += 1
    accept(5, "winner-brute-force", mismatches == 0,
           f"1000 randomized trials, {mismatches} mismatches")


# ---------------------------------------------------------------------------
# 6. determinism: identical reruns, resume after kill
# ---------------------------------------------------------------------------

def cli(*args, **kwargs):
    return subprocess.run([sys.executable, "-m", "currseq.cli", *map(str, args)],
                          capture_output=True, text=True, **kwargs)


@pytest.fixture(scope="module")
def smoke_workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("acc-smoke")
    corpus = tmp / "corpus.txt"
    r = cli("synth", "--out", corpus, "--conversations", 2400, "--seed", 7)
    assert r.returncode == 0, r.stderr
    pools = tmp / "pools"
    r = cli("prepare", "--corpus", corpus, "--out", pools)
    assert r.returncode == 0, r.stderr
    plan = {
        "master_seed": 4242,
        "carry_fraction": 1 / 6,
        "model": {"embed_dim": 24, "hidden_dim": 48},
        "trainer": {"batch_size": 32, "learning_rate": 5e-3},
        "segments": [
            {"class": "short", "sizes": [300, 600], "seeds": 2, "checkpoints": [1, 2], "val_size": 60},
            {"class": "medium", "sizes": [300, 600], "seeds": 1, "checkpoints": [1, 2], "val_size": 60},
            {"class": "long", "sizes": [300, 600], "seeds": 1, "checkpoints": [1, 2], "val_size": 60},
        ],
        "baselines": [
            {"kind": "fresh", "sizes": [600], "replicas": 2},
            {"kind": "mix", "sizes": [600], "replicas": 1},
            {"kind": "cross", "sizes": [600], "replicas": 1},
        ],
    }
    plan_path = tmp / "plan.json"
    plan_path.write_text(canonical_json(plan), encoding="utf-8")
    return tmp, pools, plan_path


def _run_outputs(out: Path) -> tuple[list[str], dict[str, bytes]]:
    names = sorted(p.name for p in (out / "lineage").glob("*.ckpt"))
    blobs = {n: (out / "lineage" / n).read_bytes() for n in names}
    for csv in ("table_short_epochs.csv", "table_type_comparison.csv"):
        blobs[csv] = (out / csv).read_bytes()
    return names, blobs


def test_criterion_6_determinism_and_resume(smoke_workspace):
    tmp, pools, plan_path = smoke_workspace
    out_a, out_b, out_c = tmp / "run-a", tmp / "run-b", tmp / "run-c"

    for out in (out_a, out_b):
        r = cli("run", "--plan", plan_path, "--pools", pools, "--out", out)
        assert r.returncode == 0, r.stderr
    names_a, blobs_a = _run_outputs(out_a)
    names_b, blobs_b = _run_outputs(out_b)
    identical = names_a == names_b and all(blobs_a[k] == blobs_b[k] for k in blobs_a)

    # interrupt a third run with SIGKILL once half the checkpoints exist
    target = len(names_a) // 2
    killed_midway = False
    proc = subprocess.Popen([sys.executable, "-m", "currseq.cli", "run",
                             "--plan", str(plan_path), "--pools", str(pools),
                             "--out", str(out_c)],
                            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        while proc.poll() is None:
            done = len(list((out_c / "lineage").glob("*.ckpt"))) if (out_c / "lineage").exists() else 0
            if done >= target:
                proc.send_signal(signal.SIGKILL)
                proc.wait()
                killed_midway = True
                break
            time.sleep(0.02)
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    partial = len(list((out_c / "lineage").glob("*.ckpt")))
    assert killed_midway and partial < len(names_a), \
        f"kill did not land mid-run (got {partial}/{len(names_a)} checkpoints)"

    r = cli("run", "--plan", plan_path, "--pools", pools, "--out", out_c)
    assert r.returncode == 0, r.stderr
    names_c, blobs_c = _run_outputs(out_c)
    resumed_equal = names_c == names_a and all(blobs_a[k] == blobs_c[k] for k in blobs_a)

    accept(6, "determinism-and-resume", identical and resumed_equal,
           f"{len(names_a)} checkpoint files + 2 CSVs bit-identical across reruns; "
           f"killed at {partial}/{len(names_a)}, resume matched the uninterrupted run")


# ---------------------------------------------------------------------------
# 7. sampler uniformity
# ---------------------------------------------------------------------------

def test_criterion_7_sampler_uniformity():
    from scipy import stats

    # sample_uniform: inclusion frequencies over 2000 seeds
    pool = PairPool("short", [
        DialoguePair.from_utterances(Utterance((f"a{i}",)), Utterance((f"b{i}",)))
        for i in range(100)
    ])
    index_of = {p.content_key(): i for i, p in enumerate(pool.pairs)}
    trials, n = 2000, 10
    counts = np.zeros(100)
    for seed in range(trials):
        for p in sample_uniform(pool, n, seed=seed).pairs:
            counts[index_of[p.content_key()]] += 1
    p_inc = n / 100
    mean = trials * p_inc
    sigma = math.sqrt(trials * p_inc * (1 - p_inc))
    within_5s = bool(np.all(np.abs(counts - mean) <= 5 * sigma))
    chi2_stat = float((((counts - mean) ** 2) / mean).sum())
    chi2_bound = 99 + 5 * math.sqrt(2 * 99)
    sample_ok = within_5s and chi2_stat <= chi2_bound

    # subsample_lineages: inclusion frequencies over 1000 seeds
    items = list(range(24))
    sub_counts = np.zeros(24)
    sub_trials = 1000
    for seed in range(sub_trials):
        for item in cur.subsample_lineages(items, 1 / 3, seed=seed):
            sub_counts[item] += 1
    p_sub = math.ceil(24 / 3) / 24
    mean_sub = sub_trials * p_sub
    sigma_sub = math.sqrt(sub_trials * p_sub * (1 - p_sub))
    sub_ok = bool(np.all(np.abs(sub_counts - mean_sub) <= 5 * sigma_sub))

    # mix composition: per-class counts never differ by more than one
    from currseq.corpus import mix_class_counts

    mix_ok = all(
        max(c.values()) - min(c.values()) <= 1 and sum(c.values()) == n_mix
        for n_mix in range(0, 300)
        for c in [mix_class_counts(n_mix)]
    )
    accept(7, "sampler-uniformity", sample_ok and sub_ok and mix_ok,
           f"sample_uniform chi2 {chi2_stat:.1f} <= {chi2_bound:.1f}, all inclusions within "
           f"5 sigma over 2000+1000 seeds; mix class counts differ <= 1")
    assert stats.chi2.sf(chi2_stat, df=99) > 1e-6  # consistent with uniformity


# ---------------------------------------------------------------------------
# 8. directional curriculum experiment (desk scale)
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_directional_experiment(tmp_path_factory):
    started = time.perf_counter()
    tmp = tmp_path_factory.mktemp("acc-desk")
    corpus = tmp / "corpus.txt"
    r = cli("synth", "--out", corpus, "--conversations", 66000, "--seed", 2026)
    assert r.returncode == 0, r.stderr
    pools = tmp / "pools"
    r = cli("prepare", "--corpus", corpus, "--out", pools)
    assert r.returncode == 0, r.stderr
    counts = json.loads((pools / "counts.json").read_text())
    total_pairs = sum(counts.values())
    assert total_pairs >= 200_000, f"corpus too small: {total_pairs}"

    plan = {
        "master_seed": 20260810,
        "carry_fraction": 1 / 6,
        "model": {"embed_dim": 16, "hidden_dim": 32},
        "trainer": {"batch_size": 128, "learning_rate": 2e-3},
        "segments": [
            {"class": "short", "sizes": [2000, 10000, 50000], "seeds": 3,
             "checkpoints": [2, 4, 6], "val_size": 1500},
            {"class": "medium", "sizes": [2000, 10000, 50000], "seeds": 1,
             "checkpoints": [2, 4, 6], "val_size": 1500},
            {"class": "long", "sizes": [2000, 10000, 50000], "seeds": 1,
             "checkpoints": [2, 4, 6], "val_size": 1500},
        ],
        "baselines": [
            {"kind": "fresh", "sizes": [2000, 10000, 50000], "replicas": 3},
            {"kind": "mix", "sizes": [50000], "replicas": 3},
            {"kind": "cross", "sizes": [50000], "replicas": 3},
        ],
    }
    plan_path = tmp / "plan.json"
    plan_path.write_text(canonical_json(plan), encoding="utf-8")
    out = tmp / "out"
    workers = min(2, os.cpu_count() or 1)
    r = cli("run", "--plan", plan_path, "--pools", pools, "--out", out,
            "--workers", workers)
    assert r.returncode == 0, r.stderr[-2000:]

    report = json.loads((out / "report.json").read_text())
    elapsed = time.perf_counter() - started
    directional = report["directional"]
    table2 = report["tables"]["type_comparison"]
    types_present = {row["Type"] for row in table2}
    produced = (
        directional is not None
        and (out / "table_short_epochs.csv").exists()
        and (out / "table_type_comparison.csv").exists()
        and {"curriculum-worst", "curriculum-best", "fresh", "mix", "cross"} <= types_present
        and directional["fresh_runs"] == 3
        and elapsed < 8 * 3600
    )
    if directional is None:
        detail = "report produced no directional block"
    else:
        hit = directional["curriculum_beats_fresh"]
        detail = (
            f"{total_pairs} corpus pairs, {report['nodes']} parameter sets in {elapsed/60:.0f} min; "
            f"directional {'HIT' if hit else 'MISS (reported, not build-breaking)'}: "
            f"curriculum median {directional['curriculum_median_val_loss']:.4f} vs "
            f"fresh median {directional['fresh_median_val_loss']:.4f}; "
            f"worst-curriculum beats best-fresh: {directional['worst_curriculum_beats_best_fresh']}"
        )
    accept(8, "directional-experiment", produced, detail)


# ---------------------------------------------------------------------------
# 9. checkpoint round trip
# ---------------------------------------------------------------------------

def test_criterion_9_checkpoint_round_trip(tmp_path):
    pairs = memorization_pairs()
    pool = PairPool("cross", pairs)
    v = build_vocab(pairs, max_size=20)
    model_cfg = s2s.ModelConfig(vocab_size=v.size, embed_dim=8, hidden_dim=12, seed=9)
    train_cfg = tr.TrainConfig(batch_size=8, epoch_checkpoints=(2,), learning_rate=0.01,
                               shuffle_seed=2, bucket_window=4)
    checkpoints, _ = tr.train_segment(s2s.init_params(model_cfg), pool, pool, v,
                                      train_cfg, model_cfg, stage_label="short")
    ck = checkpoints[0]
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tr.save_checkpoint(ck, p1)
    loaded = tr.load_checkpoint(p1)
    tr.save_checkpoint(loaded, p2)
    byte_identical = p1.read_bytes() == p2.read_bytes()
    drift = abs(tr.evaluate(loaded.params, pool, v) - loaded.val_loss)
    accept(9, "checkpoint-round-trip", byte_identical and drift <= 1e-9,
           f"save-load-save byte-identical: {byte_identical}; re-evaluation drift {drift:.1e}")

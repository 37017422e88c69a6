import numpy as np
import pytest

from currseq import seq2seq as s2s
from currseq import trainer as tr
from currseq.corpus import DialoguePair, PairPool, Utterance
from currseq.vocab import build_vocab

WORDS = ["red", "blue", "dog", "cat", "ran", "saw", "home", "tree", "big", "small", "sun", "moon"]


def toy_pairs(n, stride=3):
    pairs = []
    for i in range(n):
        ls = 1 + (i % 4)
        lt = 1 + ((i * 7) % 5)
        src = tuple(WORDS[(i + j) % len(WORDS)] for j in range(ls))
        tgt = tuple(WORDS[(i * stride + j) % len(WORDS)] for j in range(lt))
        pairs.append(DialoguePair.from_utterances(Utterance(src), Utterance(tgt)))
    return pairs


@pytest.fixture(scope="module")
def toy_setup():
    train = PairPool("cross", toy_pairs(90))
    val = PairPool("cross", toy_pairs(24, stride=5))
    v = build_vocab(train.pairs + val.pairs, max_size=50)
    model_cfg = s2s.ModelConfig(vocab_size=v.size, embed_dim=4, hidden_dim=6, seed=11)
    return train, val, v, model_cfg


# ---------------------------------------------------------------------------
# make_batches
# ---------------------------------------------------------------------------

def test_batch_counts():
    v = build_vocab(toy_pairs(10), max_size=50)
    cfg = tr.TrainConfig(batch_size=128, epoch_checkpoints=(1,))
    pool = PairPool("cross", toy_pairs(256))
    assert len(tr.make_batches(pool, v, cfg, epoch=1)) == 2
    pool = PairPool("cross", toy_pairs(300))
    batches = tr.make_batches(pool, v, cfg, epoch=1)
    assert len(batches) == 3
    assert batches[-1].source.shape[0] == 44


def test_batches_window_sorted_and_mask_conserved(toy_setup):
    train, _, v, _ = toy_setup
    cfg = tr.TrainConfig(batch_size=8, epoch_checkpoints=(1,), bucket_window=2)
    batches = tr.make_batches(train, v, cfg, epoch=3)
    window = cfg.bucket_window * cfg.batch_size

    # within each window, target lengths appear in sorted order
    flat_lengths = []
    for b in batches:
        flat_lengths.extend(int((row != 0).sum()) for row in b.target)
    for w0 in range(0, len(flat_lengths), window):
        chunk = flat_lengths[w0:w0 + window]
        assert chunk == sorted(chunk)

    total_mask = sum(int(b.mask.sum()) for b in batches)
    expected = sum(p.target.word_count + 1 for p in train.pairs)
    assert total_mask == expected


def test_batches_shuffle_per_epoch_reproducible(toy_setup):
    train, _, v, _ = toy_setup
    cfg = tr.TrainConfig(batch_size=16, epoch_checkpoints=(1,), shuffle_seed=5)
    a = tr.make_batches(train, v, cfg, epoch=1)
    b = tr.make_batches(train, v, cfg, epoch=1)
    assert all(np.array_equal(x.target, y.target) for x, y in zip(a, b))
    c = tr.make_batches(train, v, cfg, epoch=2)
    assert not all(np.array_equal(x.target, y.target) for x, y in zip(a, c))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_uniform_model_is_ln_v(toy_setup):
    _, val, v, model_cfg = toy_setup
    p = s2s.init_params(model_cfg)
    p.out_w[:] = 0.0
    p.out_b[:] = 0.0
    assert tr.evaluate(p, val, v) == pytest.approx(np.log(v.size), abs=1e-6)


def test_evaluate_permutation_invariant(toy_setup):
    _, val, v, model_cfg = toy_setup
    p = s2s.init_params(model_cfg)
    base = tr.evaluate(p, val, v)
    rng = np.random.default_rng(0)
    for _ in range(3):
        shuffled = PairPool(val.class_label, list(val.pairs))
        rng.shuffle(shuffled.pairs)
        assert abs(tr.evaluate(p, shuffled, v) - base) <= 1e-9


def test_evaluate_repeatable_and_empty(toy_setup):
    _, val, v, model_cfg = toy_setup
    p = s2s.init_params(model_cfg)
    assert tr.evaluate(p, val, v) == tr.evaluate(p, val, v)
    with pytest.raises(tr.EmptyValidationSet):
        tr.evaluate(p, PairPool("cross", []), v)


# ---------------------------------------------------------------------------
# train_segment
# ---------------------------------------------------------------------------

def run_segment(toy_setup, cfg=None, **kwargs):
    train, val, v, model_cfg = toy_setup
    cfg = cfg or tr.TrainConfig(batch_size=16, epoch_checkpoints=(2, 4, 6), shuffle_seed=9,
                                learning_rate=5e-3)
    init = s2s.init_params(model_cfg)
    return tr.train_segment(init, train, val, v, cfg, model_cfg,
                            stage_label="short", stage_seed=0, **kwargs), cfg


def test_train_segment_emits_checkpoints(toy_setup):
    (cks, metrics), cfg = run_segment(toy_setup)
    assert [c.lineage[-1].epochs for c in cks] == [2, 4, 6]
    assert len(metrics.records) == 7  # epoch 0 plus 6 epochs
    assert metrics.records[0].epoch == 0 and metrics.records[0].train_loss is None
    for ck in cks:
        assert np.isfinite(ck.val_loss)
        assert ck.lineage[-1].segment == "short"


def test_train_segment_zero_epochs(toy_setup):
    train, val, v, model_cfg = toy_setup
    cfg = tr.TrainConfig(batch_size=16, epoch_checkpoints=())
    cks, metrics = tr.train_segment(s2s.init_params(model_cfg), train, val, v, cfg, model_cfg)
    assert cks == []
    assert [r.epoch for r in metrics.records] == [0]


def test_train_segment_checkpoint_val_loss_matches_evaluate(toy_setup):
    train, val, v, model_cfg = toy_setup
    (cks, _), _ = run_segment(toy_setup)
    for ck in cks:
        assert tr.evaluate(ck.params, val, v) == pytest.approx(ck.val_loss, abs=1e-12)


def test_train_segment_loss_decreases(toy_setup):
    (cks, metrics), _ = run_segment(toy_setup)
    first = metrics.records[0].val_loss
    last = metrics.records[-1].val_loss
    assert last < first


def test_train_segment_rerun_bit_identical(tmp_path, toy_setup):
    (cks_a, _), _ = run_segment(toy_setup)
    (cks_b, _), _ = run_segment(toy_setup)
    for ck_a, ck_b in zip(cks_a, cks_b):
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tr.save_checkpoint(ck_a, pa)
        tr.save_checkpoint(ck_b, pb)
        assert pa.read_bytes() == pb.read_bytes()


def test_train_segment_lineage_extends_parent(toy_setup):
    parent = (tr.Stage("short", 90, 4, 2),)
    (cks, _), _ = run_segment(toy_setup, **{"parent_lineage": parent})
    assert cks[0].lineage[0] == parent[0]
    assert len(cks[0].lineage) == 2
    assert cks[0].key.startswith("short-n90-s2-e4__short-")


def test_train_segment_numerical_error_propagates(toy_setup):
    train, val, v, model_cfg = toy_setup
    cfg = tr.TrainConfig(batch_size=16, epoch_checkpoints=(1,))
    init = s2s.init_params(model_cfg)
    init.enc_wx[:] = np.nan
    with pytest.raises(s2s.NumericalError):
        tr.train_segment(init, train, val, v, cfg, model_cfg)


def test_early_stop_halts_and_drops_rising_mark(toy_setup, monkeypatch):
    train, val, v, model_cfg = toy_setup
    # scripted validation losses: rise at epoch 3
    script = iter([5.0, 4.0, 3.0, 3.5, 2.0, 1.0, 0.5])
    monkeypatch.setattr(tr, "evaluate", lambda *a, **k: next(script))
    cfg = tr.TrainConfig(batch_size=32, epoch_checkpoints=(2, 3, 4), early_stop=True,
                         learning_rate=1e-4)
    cks, metrics = tr.train_segment(s2s.init_params(model_cfg), train, val, v, cfg, model_cfg)
    assert [r.epoch for r in metrics.records] == [0, 1, 2, 3]  # epoch 3 completed, then halt
    assert [c.lineage[-1].epochs for c in cks] == [2]           # rising epoch's mark dropped


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_byte_identical(tmp_path, toy_setup):
    (cks, _), _ = run_segment(toy_setup)
    ck = cks[0]
    p1 = tmp_path / "one.ckpt"
    tr.save_checkpoint(ck, p1)
    loaded = tr.load_checkpoint(p1)
    p2 = tmp_path / "two.ckpt"
    tr.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.val_loss == ck.val_loss
    assert loaded.lineage == ck.lineage
    assert loaded.config == ck.config
    for (_, a), (_, b) in zip(ck.params.named(), loaded.params.named()):
        assert np.array_equal(a, b)


def test_checkpoint_reevaluates_to_recorded_loss(tmp_path, toy_setup):
    train, val, v, model_cfg = toy_setup
    (cks, _), _ = run_segment(toy_setup)
    path = tmp_path / "ck.ckpt"
    tr.save_checkpoint(cks[-1], path)
    loaded = tr.load_checkpoint(path)
    assert abs(tr.evaluate(loaded.params, val, v) - loaded.val_loss) <= 1e-9


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        tr.load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path, toy_setup):
    (cks, _), _ = run_segment(toy_setup)
    path = tmp_path / "ck.ckpt"
    tr.save_checkpoint(cks[0], path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing"):
        tr.load_checkpoint(path)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(epoch_checkpoints=(4, 2))
    cfg = tr.TrainConfig(epoch_checkpoints=(1, 3))
    assert cfg.max_epochs == 3
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_lineage_key_format():
    lineage = (tr.Stage("short", 10000, 6, 3), tr.Stage("medium", 50000, 2, 0))
    assert tr.lineage_key(lineage) == "short-n10000-s3-e6__medium-n50000-s0-e2"

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from currseq.corpus import DialoguePair, Utterance
from currseq.vocab import (
    EOS_ID,
    PAD_ID,
    RESERVED_TOKENS,
    SOS_ID,
    UNK_ID,
    UnknownId,
    build_vocab,
    decode,
    encode_source,
    encode_target,
    load_vocab,
    save_vocab,
)


def pair_of(src: str, tgt: str) -> DialoguePair:
    return DialoguePair.from_utterances(
        Utterance(tuple(src.split())), Utterance(tuple(tgt.split()))
    )


def test_reserved_ids():
    assert (PAD_ID, SOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)


def test_build_vocab_example():
    v = build_vocab([pair_of("a a", "b")], max_size=10, min_freq=1)
    assert v.token_to_id == {"<pad>": 0, "<sos>": 1, "<eos>": 2, "<unk>": 3, "a": 4, "b": 5}


def test_build_vocab_empty_stream():
    v = build_vocab([])
    assert v.size == 4
    assert v.id_to_token == list(RESERVED_TOKENS)


def test_build_vocab_tie_breaks_lexicographic():
    v = build_vocab([pair_of("c b", "b c")], max_size=10)
    assert v.token_to_id["b"] == 4
    assert v.token_to_id["c"] == 5


def test_build_vocab_max_size_and_min_freq():
    pairs = [pair_of("a a a b b", "c")]
    v = build_vocab(pairs, max_size=5)
    assert v.size == 5 and "a" in v.token_to_id and "b" not in v.token_to_id
    v2 = build_vocab(pairs, max_size=10, min_freq=2)
    assert "c" not in v2.token_to_id and "b" in v2.token_to_id


def test_build_vocab_order_independent():
    pairs = [pair_of("x y", "z"), pair_of("y", "x x")]
    a = build_vocab(pairs)
    b = build_vocab(list(reversed(pairs)))
    assert a.id_to_token == b.id_to_token


def test_encode_source():
    v = build_vocab([pair_of("a a", "b")], max_size=10)
    ids = encode_source(Utterance(("a", "zzz")), v)
    assert ids.tolist() == [4, UNK_ID]
    assert encode_source(Utterance(("b", "a")), v).tolist() == [5, 4]


def test_encode_target_markers():
    v = build_vocab([pair_of("a a", "b")], max_size=10)
    assert encode_target(Utterance(("a",)), v).tolist() == [SOS_ID, 4, EOS_ID]
    assert len(encode_target(Utterance(("a", "b", "a", "b")), v)) == 6
    assert encode_target(Utterance(("qq",)), v).tolist() == [SOS_ID, UNK_ID, EOS_ID]


def test_decode_basic():
    v = build_vocab([pair_of("a a", "b")], max_size=10)
    assert decode([1, 4, 2], v) == ["<sos>", "a", "<eos>"]
    assert decode([], v) == []
    with pytest.raises(UnknownId):
        decode([v.size], v)
    with pytest.raises(UnknownId):
        decode([-1], v)


@given(st.lists(st.sampled_from(["red", "dog", "ran", "home", "saw"]), min_size=1, max_size=8))
@settings(max_examples=60, deadline=None)
def test_round_trip_in_vocab_words(tokens):
    corpus_pair = pair_of("red dog ran home saw", "red dog ran home saw")
    v = build_vocab([corpus_pair], max_size=20)
    u = Utterance(tuple(tokens))
    out = decode(encode_target(u, v), v)
    assert out == ["<sos>", *tokens, "<eos>"]


def test_reserved_never_reassigned():
    corpus_pair = pair_of("<pad> <unk> word", "word <sos>")
    v = build_vocab([corpus_pair], max_size=20)
    assert v.token_to_id["word"] == 4
    # literal reserved strings in the corpus encode to UNK
    assert encode_source(Utterance(("<pad>",)), v).tolist() == [UNK_ID]


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab([pair_of("a a b", "c b")], max_size=10)
    path = tmp_path / "vocab.txt"
    save_vocab(v, path)
    again = load_vocab(path)
    assert again.id_to_token == v.id_to_token
    assert again.frequencies == v.frequencies
    save_vocab(again, tmp_path / "vocab2.txt")
    assert (tmp_path / "vocab2.txt").read_bytes() == path.read_bytes()


def test_vocab_file_digest_guard(tmp_path):
    v = build_vocab([pair_of("a", "b")], max_size=10)
    path = tmp_path / "vocab.txt"
    save_vocab(v, path)
    corrupted = path.read_text().replace("\ta\t", "\tz\t")
    path.write_text(corrupted)
    with pytest.raises(ValueError, match="digest mismatch"):
        load_vocab(path)

import pytest
from hypothesis import given, strategies as st

from spatial_distill.tokenizer import BOS, EOS, PAD, SPECIALS, UNK, Vocab, build_vocab, normalize


def test_frequency_order():
    v = build_vocab(["a b", "a"])
    assert v.token_to_id["a"] < v.token_to_id["b"]


def test_empty_string_adds_nothing():
    assert len(build_vocab(["", "x"])) == len(SPECIALS) + 1


def test_fifty_words():
    v = build_vocab([" ".join(f"w{i}" for i in range(50))])
    assert len(v) == 54


def test_specials_fixed():
    v = build_vocab(["hello"])
    assert v.id_to_token[:4] == list(SPECIALS)
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_encode_empty():
    assert build_vocab(["x"]).encode("") == [BOS, EOS]


def test_round_trip():
    v = build_vocab(["the box"])
    assert v.decode(v.encode("the box")) == "the box"


def test_unknown_word():
    assert UNK in build_vocab(["the box"]).encode("the zebra")


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


def test_save_load(tmp_path):
    v = build_vocab(["b a a", "c"])
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == v.id_to_token
    assert Vocab.load(tmp_path / "vocab.txt").token_to_id == v.token_to_id


def test_normalize():
    assert normalize("Is the Box, near?") == ["is", "the", "box", "near"]


words = st.lists(st.sampled_from(["red", "box", "table", "near", "the", "is"]), min_size=0, max_size=10)


@given(words)
def test_round_trip_property(ws):
    v = build_vocab(["red box table near the is"])
    text = " ".join(ws)
    assert v.decode(v.encode(text)) == " ".join(normalize(text))


@given(words, words)
def test_encode_injective(a, b):
    v = build_vocab(["red box table near the is"])
    if a != b:
        assert v.encode(" ".join(a)) != v.encode(" ".join(b))

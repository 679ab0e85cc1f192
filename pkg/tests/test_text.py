import random
import string

import pytest

from personaroute.text import (
    BOS_ID,
    EOS_ID,
    RESERVED,
    SPE_ID,
    UNK_GLYPH,
    UNK_ID,
    Vocab,
    VocabError,
    build_vocab,
    decode,
    encode,
    load_vocab,
    save_vocab,
)


def test_build_vocab_small_corpus():
    v = build_vocab(["aab"], max_size=10)
    assert len(v) == 7
    assert "a" in v.token_to_id and "b" in v.token_to_id


def test_build_vocab_tie_breaks_by_code_point():
    # 'x' and 'y' tie at the cutoff; one slot remains after 'a'.
    v = build_vocab(["aa", "xy"], max_size=7)
    assert len(v) == 7
    assert "x" in v.token_to_id
    assert "y" not in v.token_to_id


def test_build_vocab_accepts_large_max_size():
    v = build_vocab(["abc"], max_size=13084)
    assert len(v) == 8


def test_build_vocab_empty_corpus_errors():
    with pytest.raises(VocabError, match="empty"):
        build_vocab([], max_size=10)


def test_encode_empty_with_flags():
    v = build_vocab(["ab"], max_size=10)
    assert encode(v, "", add_bos_eos=True) == [BOS_ID, EOS_ID]


def test_encode_plain():
    v = build_vocab(["ab"], max_size=10)
    assert encode(v, "ab") == [v.token_to_id["a"], v.token_to_id["b"]]


def test_encode_unknown_maps_to_unk():
    v = build_vocab(["ab"], max_size=10)
    assert encode(v, "az") == [v.token_to_id["a"], UNK_ID]
    assert decode(v, encode(v, "az")) == "a" + UNK_GLYPH


def test_round_trip_over_in_vocab_characters():
    alphabet = string.ascii_lowercase + " .,?!"
    v = build_vocab([alphabet * 3], max_size=64)
    rng = random.Random(0)
    for _ in range(50):
        s = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 40)))
        assert decode(v, encode(v, s)) == s
        assert decode(v, encode(v, s, add_bos_eos=True)) == s
        assert len(encode(v, s)) == len(s)


def test_decode_drops_reserved():
    v = build_vocab(["ab"], max_size=10)
    a, b = v.token_to_id["a"], v.token_to_id["b"]
    assert decode(v, [BOS_ID, a, EOS_ID]) == "a"
    assert decode(v, []) == ""
    assert decode(v, [a, SPE_ID, b]) == "ab"


def test_decode_out_of_range_errors():
    v = build_vocab(["ab"], max_size=10)
    with pytest.raises(VocabError, match="out of range"):
        decode(v, [len(v)])


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["hello world\nsecond\tline\\x"], max_size=64)
    path = tmp_path / "vocab.txt"
    save_vocab(v, path)
    loaded = load_vocab(path)
    assert loaded.id_to_token == v.id_to_token
    lines = path.read_text(encoding="utf-8").splitlines()
    assert tuple(lines[:5]) == RESERVED
    assert "\\n" in lines and "\\t" in lines and "\\\\" in lines


def test_load_vocab_rejects_bad_header(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("a\nb\nc\nd\ne\nf\n", encoding="utf-8")
    with pytest.raises(VocabError, match="header"):
        load_vocab(path)


def test_reserved_ids_are_fixed():
    v = Vocab.from_tokens("abc")
    assert [v.token_to_id[t] for t in RESERVED] == [0, 1, 2, 3, 4]

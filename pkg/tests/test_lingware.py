import math

import numpy as np
import pytest

from vsrlab import lingware
from vsrlab.errors import FormatError, LexiconError, OovError
from vsrlab.lingware import SENTENCE_END, SENTENCE_START


def test_witten_bell_hand_case_repeated_pair():
    # corpus "a b" twice: every seen context has c=2, T=1 -> lambda 2/3;
    # unigram: N=6 events over 3 types -> lambda_u 2/3, p_uni = 1/3 for all;
    # so every seen transition scores 2/3 + (1/3)(1/3) = 7/9
    lm = lingware.fit_bigram([["a", "b"], ["a", "b"]])
    assert abs(lm.prob("a", SENTENCE_START) - 7 / 9) < 1e-12
    assert abs(lm.prob("b", "a") - 7 / 9) < 1e-12
    assert abs(lm.prob(SENTENCE_END, "b") - 7 / 9) < 1e-12
    # unseen transition backs off to the unigram
    assert abs(lm.prob("a", "a") - (1 / 3) * (1 / 3)) < 1e-12
    assert abs(lm.score(["a", "b"]) - 3 * math.log(7 / 9)) < 1e-12


def test_witten_bell_hand_case_single_word():
    # corpus "a": p(a|<s>) = 1/2 * 1 + 1/2 * p_uni(a), p_uni(a) = 1/2
    lm = lingware.fit_bigram([["a"]])
    assert abs(lm.prob("a", SENTENCE_START) - 0.75) < 1e-12


def test_bigram_rows_sum_to_one():
    rng = np.random.default_rng(17)
    vocab = [f"w{i}" for i in range(12)]
    transcripts = [[vocab[int(i)] for i in rng.integers(0, 12, int(rng.integers(1, 7)))]
                   for _ in range(40)]
    lm = lingware.fit_bigram(transcripts)
    alphabet = lm.vocab + [SENTENCE_END]
    for context in [SENTENCE_START] + lm.vocab:
        total = sum(lm.prob(w, context) for w in alphabet)
        assert abs(total - 1.0) < 1e-10, context
    assert all(lm.prob(w, v) > 0.0 for v in [SENTENCE_START] + lm.vocab for w in alphabet)


def test_closed_vocabulary_rejects_strays():
    with pytest.raises(OovError):
        lingware.fit_bigram([["a", "b"]], vocabulary=["a"])
    lm = lingware.fit_bigram([["a", "b"]], vocabulary=["a", "b", "c"])
    assert "c" in lm.vocab
    assert lm.prob("c", "a") > 0.0
    with pytest.raises(OovError):
        lm.score(["a", "zzz"])


def test_arpa_round_trip(tmp_path):
    rng = np.random.default_rng(23)
    vocab = [f"w{i}" for i in range(8)]
    transcripts = [[vocab[int(i)] for i in rng.integers(0, 8, 4)] for _ in range(25)]
    lm = lingware.fit_bigram(transcripts)
    path = tmp_path / "model.arpa"
    lingware.write_arpa(path, lm)
    text = path.read_text()
    assert "\\data\\" in text and "\\1-grams:" in text and "\\2-grams:" in text
    assert f"ngram 2={len(lm.bigram)}" in text
    loaded = lingware.read_arpa(path)
    for sent in transcripts[:10]:
        assert abs(loaded.score(sent) - lm.score(sent)) < 1e-8
    # unseen transitions go through the backoff weight and must match too
    assert abs(loaded.prob("w0", "w1") - lm.prob("w0", "w1")) < 1e-10


def test_binary_lm_round_trip(tmp_path):
    lm = lingware.fit_bigram([["a", "b", "a"], ["b", "b"], ["a"]])
    path = tmp_path / "model.alm"
    lingware.save_lm(path, lm)
    assert path.read_bytes()[:4] == b"ALM1"
    loaded = lingware.load_lm(path)
    assert loaded.vocab == lm.vocab
    for v in [SENTENCE_START, "a", "b"]:
        for w in ["a", "b", SENTENCE_END]:
            assert loaded.prob(w, v) == lm.prob(w, v)
    bad = tmp_path / "bad.alm"
    bad.write_bytes(b"WRNG" + b"\x00" * 16)
    with pytest.raises(FormatError):
        lingware.load_lm(bad)


def test_lexicon_load_and_variants(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("casa k a s a\nperro p e rr o\ncasa k a z a\n")
    lex = lingware.load_lexicon(path, inventory=["k", "a", "s", "z", "p", "e", "rr", "o"])
    assert lex.words == ["casa", "perro"]
    assert lex.pronunciations("casa") == [["k", "a", "s", "a"], ["k", "a", "z", "a"]]
    assert lex.canonical("casa") == ["k", "a", "s", "a"]
    assert lex.phone_set() == {"k", "a", "s", "z", "p", "e", "rr", "o"}
    with pytest.raises(OovError):
        lex.pronunciations("gato")

    out = tmp_path / "copy.txt"
    lingware.save_lexicon(out, lex)
    assert lingware.load_lexicon(out).entries == lex.entries


def test_lexicon_errors(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("casa k q q\n")
    with pytest.raises(LexiconError, match="casa"):
        lingware.load_lexicon(path, inventory=["k", "a"])
    path.write_text("sole\n")
    with pytest.raises(LexiconError):
        lingware.load_lexicon(path)
    path.write_text("")
    with pytest.raises(LexiconError):
        lingware.load_lexicon(path)


def test_g2p_rules():
    cases = {
        "casa": ["k", "a", "s", "a"],
        "cena": ["z", "e", "n", "a"],
        "queso": ["k", "e", "s", "o"],
        "guerra": ["g", "e", "rr", "a"],
        "gente": ["x", "e", "n", "t", "e"],
        "llave": ["y", "a", "b", "e"],
        "hora": ["o", "r", "a"],
        "perro": ["p", "e", "rr", "o"],
        "pero": ["p", "e", "r", "o"],
        "taxi": ["t", "a", "k", "s", "i"],
        "rey": ["rr", "e", "i"],
        "voy": ["b", "o", "i"],
        "enrique": ["e", "n", "rr", "i", "k", "e"],
        "chico": ["ch", "i", "k", "o"],
    }
    for word, phones in cases.items():
        assert lingware.spanish_g2p(word) == phones, word


def test_g2p_accents_and_enye():
    assert lingware.spanish_g2p("jamón") == ["x", "a", "m", "o", "n"]
    assert lingware.spanish_g2p("año") == ["a", "ny", "o"]
    assert lingware.spanish_g2p("píngüino") == ["p", "i", "n", "g", "u", "i", "n", "o"]


def test_g2p_inventory_closed():
    inventory = set("a b ch d e f g i k l m n ny o p r rr s t u x y z".split())
    for word in ("casa", "guerra", "año", "taxi", "chorizo", "llave", "hueso"):
        assert set(lingware.spanish_g2p(word)) <= inventory


def test_g2p_rejects_unknown_letters():
    with pytest.raises(LexiconError):
        lingware.spanish_g2p("h")  # silent h leaves nothing
    with pytest.raises(LexiconError):
        lingware.spanish_g2p("k2o")

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from textcaus.corpus import (
    ClinicalNote,
    DocTermMatrix,
    TokenizeConfig,
    Vocabulary,
    aggregate_patient_docs,
    build_dtm,
    build_vocabulary,
    cosine_distance,
    edge_cosine_distances,
    key_term_covariates,
    read_notes_jsonl,
    tokenize,
    unigrams,
    vectorize,
    write_notes_jsonl,
)

WORDS = ["sinus", "tach", "noted", "bp", "cardiac", "lasix", "edema", "echo", "pt", "stable", "the", "and"]
texts = st.lists(st.sampled_from(WORDS + ["120/80", "O2!", "Sat,"]), max_size=15).map(" ".join)


def test_ngrams_of_short_phrase():
    assert tokenize("Sinus tach noted.") == [
        "sinus", "tach", "noted", "sinus_tach", "tach_noted", "sinus_tach_noted",
    ]


def test_all_stop_words_give_empty_sequence():
    assert tokenize("the and of") == []


def test_punctuation_and_digits():
    assert set(tokenize("BP 120/80!")) == {"bp", "120", "80", "bp_120", "120_80", "bp_120_80"}


def test_custom_orders_and_stem():
    cfg = TokenizeConfig(ngram_orders=(2,), stem=True)
    assert tokenize("patients noted edemas", cfg) == ["patient_not", "not_edema"]


def _note(pid, h, text, cat="nursing"):
    return ClinicalNote(pid, cat, h, text)


def test_aggregate_cutoff_and_order():
    notes = [_note("a", 2, "early"), _note("a", 30, "late")]
    assert aggregate_patient_docs(notes, 24) == {"a": "early"}
    assert aggregate_patient_docs([_note("b", 5, "only one")], 24) == {"b": "only one"}
    notes = [_note("c", 1, "one"), _note("c", 3, "three"), _note("c", 2, "two")]
    assert aggregate_patient_docs(notes, 24)["c"] == "one\ntwo\nthree"


def test_aggregate_missing_patient_is_empty():
    docs = aggregate_patient_docs([_note("a", 1, "x")], 24, ["a", "z"])
    assert list(docs) == ["a", "z"] and docs["z"] == ""


def test_note_validation():
    with pytest.raises(ValueError):
        _note("a", -1, "x")
    with pytest.raises(ValueError):
        _note("a", 1, "x", cat="radiology")


def test_notes_jsonl_roundtrip(tmp_path):
    notes = [_note("a", 1.5, "Sinus tach ü"), _note("b", 0, "x", "physician")]
    write_notes_jsonl(notes, tmp_path / "n.jsonl")
    assert read_notes_jsonl(tmp_path / "n.jsonl") == notes
    (tmp_path / "bad.jsonl").write_text(json.dumps({"patient_id": "a"}) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_notes_jsonl(tmp_path / "bad.jsonl")


def test_vocabulary_thresholds():
    toks = [["a", "b"], ["a", "c"]]
    v = build_vocabulary(toks, min_df=1, max_df_fraction=1.0)
    assert v.tokens == ["a", "b", "c"]
    assert v.document_frequency.tolist() == [2, 1, 1]
    assert build_vocabulary(toks, min_df=2, max_df_fraction=1.0).tokens == ["a"]
    assert build_vocabulary(toks, min_df=1, max_df_fraction=0.9).tokens == ["b", "c"]
    assert len(build_vocabulary([], min_df=1)) == 0


def test_dtm_hand_counts():
    vocab = Vocabulary(["a", "b", "c"], [1, 1, 0])
    dtm = build_dtm([["a", "a", "b", "zzz"], []], vocab)
    assert dtm.counts.toarray().tolist() == [[2, 1, 0], [0, 0, 0]]
    assert dtm.row_totals.tolist() == [3, 0]


def test_dtm_save_load(tmp_path):
    dtm = vectorize(["sinus tach", "tach noted", "sinus sinus"], min_df=1, max_df_fraction=1.0)
    dtm.save(tmp_path / "d.txt")
    back = DocTermMatrix.load(tmp_path / "d.txt")
    assert back.vocab.tokens == dtm.vocab.tokens
    assert (back.counts != dtm.counts).nnz == 0


def test_dtm_load_rejects_bad_header(tmp_path):
    (tmp_path / "d.txt").write_text("2 1\n")
    (tmp_path / "d.vocab").write_text("a\n")
    with pytest.raises(ValueError, match="header"):
        DocTermMatrix.load(tmp_path / "d.txt")


def test_cosine_hand_values():
    assert cosine_distance([1, 2, 0], [1, 2, 0]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 3]) == 1.0
    assert cosine_distance([1, 1, 0], [1, 0, 0]) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
    assert cosine_distance([0, 0], [1, 0]) == 1.0


def test_key_terms():
    dtm = vectorize(["cardiac cardiac noted", "noted"], min_df=1, max_df_fraction=1.0)
    assert key_term_covariates(dtm, ["Cardiac"]).ravel().tolist() == [2, 0]
    assert key_term_covariates(dtm, ["cardiac"], indicator=True).ravel().tolist() == [1, 0]
    with pytest.warns(UserWarning, match="absent"):
        out = key_term_covariates(dtm, ["lasix"])
    assert not out.any()
    with pytest.warns(UserWarning):
        assert key_term_covariates(dtm, [f"term{i}" for i in range(30)]).shape == (2, 30)


# -- properties -------------------------------------------------------------


@given(st.lists(texts, min_size=1, max_size=8))
def test_row_totals_match_entries(docs):
    dtm = vectorize(docs, min_df=1, max_df_fraction=1.0)
    dense = dtm.counts.toarray()
    assert (dtm.row_totals == dense.sum(axis=1)).all()
    assert (dtm.counts.data >= 1).all()


@given(texts)
def test_tokenize_idempotent_on_unigrams(text):
    uni = unigrams(text)
    assert unigrams(" ".join(uni)) == uni
    assert tokenize(" ".join(uni)) == tokenize(text)


vectors = st.lists(st.integers(0, 5), min_size=4, max_size=4)


@given(vectors, vectors, st.floats(0.1, 50), st.floats(0.1, 50))
def test_cosine_symmetry_and_scale(x, y, a, b):
    d = cosine_distance(x, y)
    assert d == pytest.approx(cosine_distance(y, x), abs=1e-12)
    assert d == pytest.approx(cosine_distance(np.multiply(x, a), np.multiply(y, b)), abs=1e-12)
    if any(x):
        assert cosine_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    assert 0.0 <= d <= 1.0


@given(st.lists(texts, min_size=1, max_size=6), st.data())
def test_subvocabulary_equals_column_subset(docs, data):
    toks = [tokenize(t) for t in docs]
    vocab = build_vocabulary(toks, 1, 1.0)
    sub = data.draw(st.lists(st.sampled_from(vocab.tokens), unique=True) if len(vocab) else st.just([]))
    full = build_dtm(toks, vocab)
    direct = build_dtm(toks, vocab.subset(sub))
    sliced = full.select_tokens(sub)
    assert direct.vocab.tokens == sliced.vocab.tokens
    assert (direct.counts != sliced.counts).nnz == 0


@given(st.lists(texts, min_size=2, max_size=6), st.randoms(use_true_random=False))
def test_permuting_docs_permutes_rows(docs, rnd):
    toks = [tokenize(t) for t in docs]
    vocab = build_vocabulary(toks, 1, 1.0)
    perm = list(range(len(docs)))
    rnd.shuffle(perm)
    a = build_dtm(toks, vocab).counts.toarray()
    b = build_dtm([toks[i] for i in perm], vocab).counts.toarray()
    assert (a[perm] == b).all()


@given(st.lists(texts, min_size=2, max_size=6), st.data())
def test_edge_distances_match_pairwise(docs, data):
    dtm = vectorize(docs, min_df=1, max_df_fraction=1.0)
    n = dtm.n_docs
    a = np.array(data.draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=10)))
    b = np.array(data.draw(st.lists(st.integers(0, n - 1), min_size=len(a), max_size=len(a))))
    got = edge_cosine_distances(dtm, a, b)
    dense = dtm.counts.toarray()
    want = [cosine_distance(dense[i], dense[j]) for i, j in zip(a, b)]
    np.testing.assert_allclose(got, want, atol=1e-12)

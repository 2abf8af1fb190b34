import json

import pytest
from hypothesis import given, settings, strategies as st

from maskret.corpus import (CorpusError, Document, Query, RelevancePair, build_vocabulary,
                            detokenize, generate_pseudo_queries, load_corpus, load_pairs,
                            load_queries, split_dataset, split_tokens, tokenize)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_load_corpus_keeps_input_order(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [
        {"id": "a", "title": "Alpha", "body": "first doc"},
        {"id": "b", "title": "Beta", "body": "second doc"},
        {"id": "c", "title": None, "body": "third doc"},
    ])
    docs = load_corpus(path)
    assert [d.doc_id for d in docs] == ["a", "b", "c"]
    assert docs[0].title == ("alpha",)
    assert docs[2].title is None


def test_missing_title_field_is_absent(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [{"id": "x", "body": "some body text"}])
    (doc,) = load_corpus(path)
    assert doc.title is None


def test_duplicate_id_is_named(tmp_path):
    path = write_lines(tmp_path / "c.jsonl", [{"id": "a", "body": "x y"}, {"id": "a", "body": "z"}])
    with pytest.raises(CorpusError, match="'a'"):
        load_corpus(path)


def test_malformed_record_reports_line(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"id": "a", "body": "ok"}\n{"id": "b", "body": \n')
    with pytest.raises(CorpusError, match=":2:"):
        load_corpus(path)
    write_lines(path, [{"id": "a", "body": "ok"}, {"id": "b"}])
    with pytest.raises(CorpusError, match=":2: missing field 'body'"):
        load_corpus(path)


def test_queries_and_pairs_resolve(tmp_path):
    docs = [Document("d1", ("x",))]
    queries = load_queries(write_lines(tmp_path / "q.jsonl", [{"qid": "q1", "text": "What is x?"}]))
    assert queries == [Query("q1", ("what", "is", "x"))]
    pairs = load_pairs(write_lines(tmp_path / "p.jsonl", [{"qid": "q1", "doc_id": "d1"}]), queries, docs)
    assert pairs == [RelevancePair("q1", "d1")]
    bad = write_lines(tmp_path / "bad.jsonl", [{"qid": "q1", "doc_id": "nope"}])
    with pytest.raises(CorpusError, match="unknown document id 'nope'"):
        load_pairs(bad, queries, docs)


def test_vocabulary_counts():
    vocab = build_vocabulary([Document("d", ("dog", "runs"))], codebook_sizes=[2, 2])
    assert len(vocab) == 2 + 4 + 4
    assert vocab.decode_code(vocab.code_id(1, 1)) == (1, 1)
    assert vocab.decode_code(vocab.id_of("dog")) is None
    assert vocab.word_offset == 8


def test_vocabulary_without_codes_and_query_only_tokens():
    vocab = build_vocabulary([Document("d", ("dog",))], [Query("q", ("cat",))], [])
    assert vocab.codebook_sizes == ()
    assert "cat" in vocab
    assert vocab.id_of("cat") != vocab.unk_id


def test_vocabulary_code_ranges_disjoint_from_words():
    vocab = build_vocabulary([Document("d", ("a", "b", "c"))], codebook_sizes=[3, 5])
    code_ids = {vocab.code_id(lv, k) for lv, n in enumerate([3, 5]) for k in range(n)}
    word_ids = {vocab.id_of(w) for w in "abc"}
    assert not code_ids & word_ids
    assert vocab.mask_id not in code_ids | word_ids


def test_vocabulary_requires_docs():
    with pytest.raises(CorpusError):
        build_vocabulary([])


def test_tokenize_examples():
    vocab = build_vocabulary([Document("d", ("dog", "runs"))])
    assert tokenize("Dog runs.", vocab) == [vocab.id_of("dog"), vocab.id_of("runs")]
    assert tokenize("zyzzyva", vocab) == [vocab.unk_id]
    assert tokenize("", vocab) == []


@given(st.text(max_size=60))
def test_tokenize_idempotent_on_detokenized_output(text):
    vocab = build_vocabulary([Document("d", tuple(split_tokens(text)) or ("x",))])
    ids = tokenize(text, vocab)
    again = tokenize(detokenize(ids, vocab), vocab)
    assert [i for i in again if i != vocab.unk_id] == [i for i in ids if i != vocab.unk_id]


def test_pseudo_queries_count_and_determinism():
    doc = Document("d", tuple(f"w{i}" for i in range(40)))
    qs = generate_pseudo_queries(doc, 10, rng_seed=3)
    assert len(qs) == 10
    assert qs == generate_pseudo_queries(doc, 10, rng_seed=3)
    assert qs != generate_pseudo_queries(doc, 10, rng_seed=4)
    assert all(4 <= len(q.text) <= 12 for q in qs)


def test_pseudo_queries_single_span():
    doc = Document("d", ("a", "b", "c", "d"))
    qs = generate_pseudo_queries(doc, 3)
    assert [q.text for q in qs] == [("a", "b", "c", "d")] * 3


def test_pseudo_queries_short_body_returns_whole_body():
    qs = generate_pseudo_queries(Document("d", ("a", "b")), 5)
    assert [q.text for q in qs] == [("a", "b")]


def test_pseudo_queries_favour_early_spans():
    doc = Document("d", tuple(f"w{i}" for i in range(200)))
    starts = [doc.body.index(q.text[0]) for q in generate_pseudo_queries(doc, 400, 0)]
    early = sum(s < 95 for s in starts)
    assert early > len(starts) * 0.6


@settings(max_examples=50)
@given(st.lists(st.sampled_from("abcdefgh"), min_size=4, max_size=40), st.integers(0, 10**6))
def test_pseudo_queries_are_body_substrings(body, seed):
    doc = Document("d", tuple(body))
    for q in generate_pseudo_queries(doc, 5, seed):
        n = len(q.text)
        assert any(doc.body[i:i + n] == q.text for i in range(len(body) - n + 1))


def _pairs(n_docs, per_doc):
    return [RelevancePair(f"q{d}_{j}", f"d{d}") for d in range(n_docs) for j in range(per_doc)]


def test_split_covers_every_doc():
    pairs = _pairs(10, 10)
    train, test = split_dataset(pairs, 0.2, rng_seed=1)
    assert (len(train), len(test)) == (80, 20)
    assert {p.doc_id for p in train} == {f"d{i}" for i in range(10)}


def test_split_impossible_coverage():
    with pytest.raises(CorpusError, match="d0"):
        split_dataset(_pairs(4, 1), 0.5)


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_dataset(_pairs(2, 2), 1.0)


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(2, 6), st.floats(0.05, 0.45), st.integers(0, 1000))
def test_split_partition_and_determinism(n_docs, per_doc, frac, seed):
    pairs = _pairs(n_docs, per_doc)
    train, test = split_dataset(pairs, frac, seed)
    assert sorted(map(str, train + test)) == sorted(map(str, pairs))
    assert not set(train) & set(test)
    assert (train, test) == split_dataset(pairs, frac, seed)
    assert {p.doc_id for p in train} == {p.doc_id for p in pairs}

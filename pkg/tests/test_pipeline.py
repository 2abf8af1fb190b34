import numpy as np
import pytest

from maskret.corpus import MASK
from maskret.denoiser import TrainConfig
from maskret.docid import CollisionError
from maskret.pipeline import (build_docids, eval_queries, load_dataset, prepare_dataset,
                              save_dataset, train_model, training_examples)
from maskret.synthetic import synthetic_corpus


@pytest.fixture(scope="module")
def small():
    return prepare_dataset(synthetic_corpus(n_docs=40, n_topics=5, seed=1), n_pseudo=5, seed=1,
                           codebook_sizes=(8, 8, 8))


def test_synthetic_corpus_shape():
    docs = synthetic_corpus(n_docs=200)
    assert len(docs) == 200 == len({d.doc_id for d in docs})
    untitled = sum(d.title is None for d in docs)
    assert 0 < untitled < 60
    assert synthetic_corpus(n_docs=200) == docs


def test_dataset_summary_and_coverage(small):
    s = small.summary()
    assert s == {"docs": 40, "queries": 200, "train_pairs": 160, "test_queries": 40}
    assert {p.doc_id for p in small.train} == {d.doc_id for d in small.docs}
    assert MASK not in small.vocab.tokens[small.vocab.word_offset:]


def test_bundle_roundtrip(small, tmp_path):
    save_dataset(small, tmp_path / "b", {"config_hash": "abc"})
    back, manifest = load_dataset(tmp_path / "b")
    assert manifest["config_hash"] == "abc"
    assert back.docs == small.docs and back.queries == small.queries
    assert (back.train, back.test) == (small.train, small.test)
    assert back.vocab == small.vocab
    (tmp_path / "b" / "vocab.json").unlink()
    with pytest.raises(FileNotFoundError, match="vocab.json"):
        load_dataset(tmp_path / "b")


@pytest.mark.parametrize("kind", ["linguistic", "learnable"])
def test_registry_targets_roundtrip(small, kind):
    registry = build_docids(small, kind, sizes=(8, 8, 8), dim=8)
    assert len(registry) == len(small.docs)
    for doc in small.docs:
        ids = registry.target_ids(doc.doc_id, small.vocab)
        assert len(ids) == registry.length
        assert registry.lookup_ids(ids, small.vocab) == doc.doc_id


def test_learnable_collisions_retry_then_fail(small):
    reg = build_docids(small, "learnable", sizes=(8, 8, 8), dim=8, seed=3)
    assert int(reg.meta["codebook_seed"]) >= 3
    # 2*2 codes cannot separate 40 documents
    tight = prepare_dataset(small.docs, n_pseudo=2, codebook_sizes=(2, 2))
    with pytest.raises(CollisionError):
        build_docids(tight, "learnable", levels=2, sizes=(2, 2), dim=8, retries=2)
    with pytest.raises(ValueError, match="reserves"):
        build_docids(small, "learnable", sizes=(4, 4, 4))


def test_training_examples_and_eval_queries(small):
    registry = build_docids(small, "linguistic")
    ex = training_examples(small, registry, max_query_len=6)
    assert len(ex) == len(small.train) + len(small.docs)
    assert all(len(q) <= 6 and len(z) == 12 for q, z in ex)
    assert len(training_examples(small, registry, 6, include_documents=False)) == len(small.train)
    qids, tokens, qrels = eval_queries(small, small.test)
    assert set(qids) == set(tokens) == set(qrels)
    assert all(len(rel) == 1 for rel in qrels.values())


def test_toy_loss_trend_is_downward(small):
    registry = build_docids(small, "linguistic")
    trainer = train_model(small, registry, {"layers": 1, "width": 64, "heads": 2},
                          TrainConfig(epochs=15, batch_size=16, seed=0))
    trace = np.array(trainer.loss_trace)
    smoothed = np.convolve(trace, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smoothed) <= 0)
    assert trace[-1] < 0.6 * trace[0]

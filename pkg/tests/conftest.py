import pytest

from maskret.corpus import Document, build_vocabulary
from maskret.denoiser import DenoiserConfig, Trainer, TrainConfig, init_parameters
from maskret.docid import LearnableDocId, build_registry

DOCS = [Document("a", ("apple", "red", "fruit")), Document("b", ("banana", "yellow")),
        Document("c", ("cherry", "small", "red")), Document("d", ("date", "brown", "sweet"))]
CODES = [(0, 1, 2), (1, 1, 0), (2, 3, 1), (3, 0, 3)]


@pytest.fixture(scope="session")
def world():
    vocab = build_vocabulary(DOCS, codebook_sizes=[4, 4, 4])
    registry = build_registry(DOCS, [LearnableDocId(c) for c in CODES])
    examples = [(vocab.encode(d.body), registry.target_ids(d.doc_id, vocab)) for d in DOCS]
    cfg = DenoiserConfig(vocab_size=len(vocab), docid_len=3, max_query_len=6, layers=1,
                         width=32, heads=2)
    trainer = Trainer(init_parameters(cfg, 0), TrainConfig(lr=3e-3, batch_size=4, epochs=300))
    trainer.run(examples)
    return vocab, registry, trainer.model, examples


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])

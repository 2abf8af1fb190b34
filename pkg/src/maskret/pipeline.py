"""End-to-end glue: dataset preparation, DocID construction and training examples."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

from .corpus import (Document, Query, RelevancePair, Vocabulary, build_vocabulary,
                     generate_pseudo_queries, load_corpus, load_pairs, load_queries,
                     split_dataset, write_jsonl)
from .denoiser import DenoiserConfig, Trainer, TrainConfig, init_parameters
from .docid import (CollisionError, DocIdRegistry, MAX_LINGUISTIC_TOKENS,
                    assign_linguistic_docid, build_registry, embed_documents, quantize,
                    train_codebooks)

log = logging.getLogger(__name__)

DocIdKind = Literal["learnable", "linguistic"]


@dataclass
class Dataset:
    docs: list[Document]
    queries: dict[str, Query]
    train: list[RelevancePair]
    test: list[RelevancePair]
    vocab: Vocabulary

    def summary(self) -> dict[str, int]:
        return {"docs": len(self.docs), "queries": len(self.queries),
                "train_pairs": len(self.train), "test_queries": len({p.query_id for p in self.test})}

    def qrels(self, pairs: Sequence[RelevancePair]) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for p in pairs:
            out.setdefault(p.query_id, set()).add(p.doc_id)
        return out


def prepare_dataset(docs: Sequence[Document], queries: Sequence[Query] = (),
                    pairs: Sequence[RelevancePair] = (), n_pseudo: int = 10,
                    holdout_fraction: float = 0.2, seed: int = 0,
                    codebook_sizes: Sequence[int] = (),
                    max_tokens: int = MAX_LINGUISTIC_TOKENS) -> Dataset:
    """Add pseudo-queries to the supplied pairs and split; both sources are mixed uniformly."""
    all_queries = {q.query_id: q for q in queries}
    all_pairs = list(pairs)
    for doc in docs:
        for q in generate_pseudo_queries(doc, n_pseudo, seed):
            all_queries[q.query_id] = q
            all_pairs.append(RelevancePair(q.query_id, doc.doc_id))
    train, test = split_dataset(all_pairs, holdout_fraction, seed)
    # ordinal words appended while disambiguating titles must be in the vocabulary
    ling = build_registry(docs, [assign_linguistic_docid(d, max_tokens) for d in docs], max_tokens)
    extra = {tok for key in ling.entries.values() for tok in key}
    vocab = build_vocabulary(docs, list(all_queries.values()), codebook_sizes, extra)
    return Dataset(list(docs), all_queries, train, test, vocab)


BUNDLE_FILES = ("docs.jsonl", "queries.jsonl", "train.jsonl", "test.jsonl", "vocab.json",
                "manifest.json")


def save_dataset(dataset: Dataset, directory: str | Path, meta: dict | None = None) -> None:
    """Write the bundle; output depends only on the dataset, so reruns are byte-identical."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "docs.jsonl", ({"id": d.doc_id, "body": " ".join(d.body),
                                      "title": None if d.title is None else " ".join(d.title)}
                                     for d in dataset.docs))
    write_jsonl(out / "queries.jsonl", ({"qid": q.query_id, "text": " ".join(q.text)}
                                        for q in dataset.queries.values()))
    for name, pairs in (("train", dataset.train), ("test", dataset.test)):
        write_jsonl(out / f"{name}.jsonl", ({"qid": p.query_id, "doc_id": p.doc_id} for p in pairs))
    (out / "vocab.json").write_text(json.dumps(dataset.vocab.to_json(), ensure_ascii=False) + "\n",
                                    encoding="utf-8")
    manifest = {"summary": dataset.summary(), "vocab_size": len(dataset.vocab), **(meta or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")


def load_dataset(directory: str | Path) -> tuple[Dataset, dict]:
    src = Path(directory)
    missing = [f for f in BUNDLE_FILES if not (src / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{src}: incomplete dataset bundle, missing {', '.join(missing)}")
    docs = load_corpus(src / "docs.jsonl")
    queries = load_queries(src / "queries.jsonl")
    train = load_pairs(src / "train.jsonl", queries, docs)
    test = load_pairs(src / "test.jsonl", queries, docs)
    vocab = Vocabulary.from_json(json.loads((src / "vocab.json").read_text(encoding="utf-8")))
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    return Dataset(docs, {q.query_id: q for q in queries}, train, test, vocab), manifest


def build_docids(dataset: Dataset, kind: DocIdKind, levels: int = 3,
                 sizes: Sequence[int] = (32, 32, 32), dim: int = 16, seed: int = 0,
                 max_tokens: int = MAX_LINGUISTIC_TOKENS, iters: int = 50, tol: float = 1e-6,
                 retries: int = 10) -> DocIdRegistry:
    """Build the registry; learnable codebooks are refit with fresh seeds on collision."""
    docs = dataset.docs
    if kind == "linguistic":
        return build_registry(docs, [assign_linguistic_docid(d, max_tokens) for d in docs],
                              max_tokens)
    if tuple(dataset.vocab.codebook_sizes) != tuple(sizes):
        raise ValueError(f"vocabulary reserves codes {dataset.vocab.codebook_sizes}, "
                         f"registry wants {tuple(sizes)}")
    emb = embed_documents(docs, dataset.vocab, dim, seed)
    error: CollisionError | None = None
    for attempt in range(retries + 1):
        book = train_codebooks(emb, levels, sizes, iters=iters, tol=tol, rng_seed=seed + attempt)
        ids = [quantize(e, book)[0] for e in emb]
        try:
            registry = build_registry(docs, ids, codebook=book)
        except CollisionError as exc:
            log.info("codebook seed %d collided (%d groups), refitting", seed + attempt,
                     len(exc.groups))
            error = exc
            continue
        registry.meta["codebook_seed"] = str(seed + attempt)
        return registry
    raise error


def training_examples(dataset: Dataset, registry: DocIdRegistry, max_query_len: int,
                      include_documents: bool = True) -> list[tuple[list[int], list[int]]]:
    """(query ids, DocID ids) pairs; documents contribute their leading tokens as a query."""
    vocab = dataset.vocab
    out = []
    for pair in dataset.train:
        q = vocab.encode(dataset.queries[pair.query_id].text)[:max_query_len]
        out.append((q, registry.target_ids(pair.doc_id, vocab)))
    if include_documents:
        for doc in dataset.docs:
            out.append((vocab.encode(doc.body[:max_query_len]), registry.target_ids(doc.doc_id, vocab)))
    return out


def eval_queries(dataset: Dataset, pairs: Sequence[RelevancePair]) -> tuple[list[str], dict[str, list[int]], dict[str, set[str]]]:
    qrels = dataset.qrels(pairs)
    qids = list(qrels)
    tokens = {qid: dataset.vocab.encode(dataset.queries[qid].text) for qid in qids}
    return qids, tokens, qrels


def train_model(dataset: Dataset, registry: DocIdRegistry, model_cfg: dict | None = None,
                train_cfg: TrainConfig | None = None, include_documents: bool = True,
                callbacks=()) -> Trainer:
    model_cfg = dict(model_cfg or {})
    cfg = DenoiserConfig(vocab_size=len(dataset.vocab), docid_len=registry.length, **model_cfg)
    train_cfg = train_cfg or TrainConfig()
    examples = training_examples(dataset, registry, cfg.max_query_len, include_documents)
    trainer = Trainer(init_parameters(cfg, train_cfg.seed), train_cfg)
    trainer.run(examples, callbacks=callbacks)
    return trainer


def random_baseline(n_docs: int) -> float:
    return 1.0 / n_docs


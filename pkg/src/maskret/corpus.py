"""Corpus ingestion: documents, queries, relevance pairs and the closed vocabulary."""
from __future__ import annotations

import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, MASK, SEP, UNK = "<pad>", "<mask>", "<sep>", "<unk>"
SPECIAL_TOKENS = (PAD, MASK, SEP, UNK)

_TOKEN_RE = re.compile(r"[^\W_]+")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    body: tuple[str, ...]
    title: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Query:
    query_id: str
    text: tuple[str, ...]


@dataclass(frozen=True)
class RelevancePair:
    query_id: str
    doc_id: str


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def code_token(level: int, code: int) -> str:
    return f"<c{level}:{code}>"


@dataclass(frozen=True)
class Vocabulary:
    """Token <-> id bijection.

    Layout: the four special tokens, then one contiguous block of code tokens per
    codebook level, then word tokens in sorted order.
    """

    tokens: tuple[str, ...]
    codebook_sizes: tuple[int, ...] = ()
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise CorpusError("vocabulary tokens are not unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    # ids of SPECIAL_TOKENS; class attributes, not dataclass fields
    pad_id = 0
    mask_id = 1
    sep_id = 2
    unk_id = 3

    def id_of(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def code_offset(self, level: int) -> int:
        return len(SPECIAL_TOKENS) + sum(self.codebook_sizes[:level])

    def code_id(self, level: int, code: int) -> int:
        if not 0 <= code < self.codebook_sizes[level]:
            raise IndexError(f"code {code} out of range for level {level}")
        return self.code_offset(level) + code

    def decode_code(self, idx: int) -> tuple[int, int] | None:
        """Map a vocabulary id back to (level, code), or None for non-code ids."""
        for level, size in enumerate(self.codebook_sizes):
            offset = self.code_offset(level)
            if offset <= idx < offset + size:
                return level, idx - offset
        return None

    @property
    def word_offset(self) -> int:
        return len(SPECIAL_TOKENS) + sum(self.codebook_sizes)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(tok) for tok in tokens]

    def to_json(self) -> dict:
        return {"codebook_sizes": list(self.codebook_sizes),
                "words": list(self.tokens[self.word_offset:])}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        return _assemble(data["words"], data["codebook_sizes"])


def _assemble(words: Iterable[str], codebook_sizes: Sequence[int]) -> Vocabulary:
    codes = [code_token(level, k) for level, size in enumerate(codebook_sizes) for k in range(size)]
    return Vocabulary(tuple(SPECIAL_TOKENS) + tuple(codes) + tuple(words), tuple(codebook_sizes))


def build_vocabulary(docs: Sequence[Document], queries: Sequence[Query] = (),
                     codebook_sizes: Sequence[int] = (),
                     extra_tokens: Iterable[str] = ()) -> Vocabulary:
    if not docs:
        raise CorpusError("at least one document is required to build a vocabulary")
    words: set[str] = set(extra_tokens)
    for doc in docs:
        words.update(doc.body)
        if doc.title:
            words.update(doc.title)
    for q in queries:
        words.update(q.text)
    words -= set(SPECIAL_TOKENS)
    return _assemble(sorted(words), codebook_sizes)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(split_tokens(text))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in ids)


# -- file loading ----------------------------------------------------------

def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            yield lineno, record


def _field(record: dict, key: str, path, lineno: int, optional: bool = False):
    value = record.get(key)
    if value is None:
        if optional:
            return None
        raise CorpusError(f"{path}:{lineno}: missing field {key!r}")
    if not isinstance(value, str):
        raise CorpusError(f"{path}:{lineno}: field {key!r} must be a string")
    return value


def load_corpus(path: str | Path) -> list[Document]:
    docs: list[Document] = []
    seen: dict[str, int] = {}
    for lineno, rec in _read_jsonl(path):
        doc_id = _field(rec, "id", path, lineno)
        title = _field(rec, "title", path, lineno, optional=True)
        body = split_tokens(_field(rec, "body", path, lineno))
        if not body:
            raise CorpusError(f"{path}:{lineno}: document {doc_id!r} has an empty body")
        if doc_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate document id {doc_id!r} "
                              f"(first seen on line {seen[doc_id]})")
        seen[doc_id] = lineno
        docs.append(Document(doc_id, tuple(body),
                             None if title is None else tuple(split_tokens(title))))
    return docs


def load_queries(path: str | Path) -> list[Query]:
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, rec in _read_jsonl(path):
        qid = _field(rec, "qid", path, lineno)
        text = split_tokens(_field(rec, "text", path, lineno))
        if not text:
            raise CorpusError(f"{path}:{lineno}: query {qid!r} has empty text")
        if qid in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate query id {qid!r}")
        seen.add(qid)
        queries.append(Query(qid, tuple(text)))
    return queries


def load_pairs(path: str | Path, queries: Sequence[Query] | None = None,
               docs: Sequence[Document] | None = None) -> list[RelevancePair]:
    qids = None if queries is None else {q.query_id for q in queries}
    dids = None if docs is None else {d.doc_id for d in docs}
    pairs = []
    for lineno, rec in _read_jsonl(path):
        pair = RelevancePair(_field(rec, "qid", path, lineno), _field(rec, "doc_id", path, lineno))
        if qids is not None and pair.query_id not in qids:
            raise CorpusError(f"{path}:{lineno}: unknown query id {pair.query_id!r}")
        if dids is not None and pair.doc_id not in dids:
            raise CorpusError(f"{path}:{lineno}: unknown document id {pair.doc_id!r}")
        pairs.append(pair)
    return pairs


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# -- synthetic supervision -------------------------------------------------

MIN_SPAN, MAX_SPAN = 4, 12


def generate_pseudo_queries(doc: Document, n: int = 10, rng_seed: int = 0) -> list[Query]:
    """Sample ``n`` contiguous body spans of 4-12 tokens as training queries.

    Span starts are drawn with weight ``1/sqrt(start + 1)`` so that the opening of
    the document is over-represented. Bodies shorter than four tokens yield a
    single query holding the whole body.
    """
    body = doc.body
    if len(body) < MIN_SPAN:
        return [Query(f"{doc.doc_id}::pq0", tuple(body))]
    rng = np.random.default_rng([rng_seed, _stable_hash(doc.doc_id)])
    out = []
    for j in range(n):
        length = int(rng.integers(MIN_SPAN, min(MAX_SPAN, len(body)) + 1))
        starts = np.arange(len(body) - length + 1)
        weights = 1.0 / np.sqrt(starts + 1.0)
        start = int(rng.choice(starts, p=weights / weights.sum()))
        out.append(Query(f"{doc.doc_id}::pq{j}", tuple(body[start:start + length])))
    return out


def _stable_hash(text: str) -> int:
    # python's hash() is salted per process
    h = 2166136261
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def split_dataset(pairs: Sequence[RelevancePair], holdout_fraction: float,
                  rng_seed: int = 0) -> tuple[list[RelevancePair], list[RelevancePair]]:
    """Hold out a fraction of pairs while keeping every document indexed in train."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    by_doc: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        by_doc[p.doc_id].append(i)
    n_test = int(math.floor(holdout_fraction * len(pairs) + 0.5))
    spare = len(pairs) - len(by_doc)
    if n_test > spare:
        single = sorted(d for d, idx in by_doc.items() if len(idx) == 1)
        shown = ", ".join(single[:10]) + (" ..." if len(single) > 10 else "")
        raise CorpusError(f"cannot hold out {n_test} of {len(pairs)} pairs while covering all "
                          f"{len(by_doc)} documents; documents with a single pair: {shown}")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(pairs))
    anchored: set[str] = set()
    candidates = []
    for i in order:
        doc = pairs[i].doc_id
        if doc not in anchored:
            anchored.add(doc)
        else:
            candidates.append(int(i))
    test_idx = set(candidates[:n_test])
    train = [p for i, p in enumerate(pairs) if i not in test_idx]
    test = [p for i, p in enumerate(pairs) if i in test_idx]
    return train, test

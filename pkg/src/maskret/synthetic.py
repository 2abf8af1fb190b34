"""Deterministic toy corpus: topical documents with distinctive names and attributes."""
from __future__ import annotations

import numpy as np

from .corpus import Document

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "kr", "st", "tr", "sh", "ch", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ei"]
_FILLER = ("the of and a in is was for on with as by at from its this which also has are "
           "were an be it that known first new after during between many most other such "
           "into called used part area near where when").split()


def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        sylls = int(rng.integers(2, 4))
        word = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(sylls))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def synthetic_corpus(n_docs: int = 200, n_topics: int = 20, body_sentences: int = 6,
                     untitled_fraction: float = 0.1, shared_title_fraction: float = 0.02,
                     seed: int = 0) -> list[Document]:
    """Generate ``n_docs`` documents.

    Each document belongs to a topic, carries a two-word name and two attribute
    words of its own, and its body mixes those with topic and filler words. A
    fraction of documents has no title, and a few copy another document's title
    so that DocID disambiguation gets exercised.
    """
    rng = np.random.default_rng(seed)
    taken = set(_FILLER)
    topics = [_make_words(rng, 12, taken) for _ in range(n_topics)]
    docs = []
    titles: list[tuple[str, ...]] = []
    for i in range(n_docs):
        topic = topics[i % n_topics]
        name = _make_words(rng, 2, taken)
        attrs = _make_words(rng, 2, taken)
        body: list[str] = []
        for s in range(body_sentences):
            sentence = list(rng.choice(topic, size=int(rng.integers(2, 4)), replace=False))
            sentence += list(rng.choice(_FILLER, size=int(rng.integers(3, 6)), replace=False))
            if s == 0 or rng.random() < 0.6:
                sentence += name
            if rng.random() < 0.7:
                sentence.append(attrs[int(rng.integers(2))])
            rng.shuffle(sentence)
            if s == 0:
                # documents open with their name, as encyclopedic pages do
                sentence = name + [w for w in sentence if w not in name]
            body.extend(sentence)
        title: tuple[str, ...] | None = tuple(name) + (str(rng.choice(topic)),)
        u = rng.random()
        if u < untitled_fraction:
            title = None
        elif u < untitled_fraction + shared_title_fraction and titles:
            title = titles[int(rng.integers(len(titles)))]
        if title is not None:
            titles.append(title)
        docs.append(Document(f"d{i:04d}", tuple(body), title))
    return docs


def to_records(docs: list[Document]) -> list[dict]:
    return [{"id": d.doc_id, "title": None if d.title is None else " ".join(d.title),
             "body": " ".join(d.body)} for d in docs]

"""Document identifiers: residual-quantized codes, title/leading-token ids, and the registry."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np

from .corpus import MASK, PAD, Document, Vocabulary

REGISTRY_MAGIC = "#maskret-registry"
CODEBOOK_MAGIC = "#maskret-codebook"
FORMAT_VERSION = 1
MAX_LINGUISTIC_TOKENS = 12


class DocIdError(ValueError):
    pass


class CollisionError(DocIdError):
    def __init__(self, groups: list[list[str]]):
        self.groups = groups
        shown = "; ".join(",".join(g) for g in groups[:5])
        super().__init__(f"{len(groups)} learnable DocID collision group(s): {shown} "
                         "(retrain codebooks with another seed or add a level)")


class FormatError(DocIdError):
    pass


# -- embeddings ------------------------------------------------------------

def _projection(vocab_size: int, dim: int, rng_seed: int) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    return rng.standard_normal((vocab_size, dim)) / math.sqrt(dim)


def inverse_document_frequency(docs: Sequence[Document], vocab: Vocabulary) -> np.ndarray:
    df = np.zeros(len(vocab))
    for doc in docs:
        df[np.unique(vocab.encode(_doc_tokens(doc)))] += 1
    return np.log((1.0 + len(docs)) / (1.0 + df)) + 1.0


def _doc_tokens(doc: Document) -> tuple[str, ...]:
    return (doc.title or ()) + doc.body


def embed_document(doc: Document, vocab: Vocabulary, dim: int, rng_seed: int = 0,
                   idf: np.ndarray | None = None) -> np.ndarray:
    """TF-IDF over word tokens, randomly projected to ``dim`` and L2-normalised.

    Without ``idf`` every token gets unit inverse frequency.
    """
    ids = np.asarray(vocab.encode(_doc_tokens(doc)))
    ids = ids[ids >= vocab.word_offset]
    tf = np.bincount(ids, minlength=len(vocab)).astype(float) / max(len(ids), 1)
    weights = tf if idf is None else tf * idf
    vec = weights @ _projection(len(vocab), dim, rng_seed)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def embed_documents(docs: Sequence[Document], vocab: Vocabulary, dim: int,
                    rng_seed: int = 0) -> np.ndarray:
    idf = inverse_document_frequency(docs, vocab)
    proj = _projection(len(vocab), dim, rng_seed)
    tf = np.zeros((len(docs), len(vocab)))
    for row, doc in enumerate(docs):
        ids = np.asarray(vocab.encode(_doc_tokens(doc)))
        ids = ids[ids >= vocab.word_offset]
        tf[row] = np.bincount(ids, minlength=len(vocab)) / max(len(ids), 1)
    emb = (tf * idf) @ proj
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.where(norms > 0, norms, 1.0)


# -- residual quantization -------------------------------------------------

@dataclass
class Codebook:
    levels: list[np.ndarray]
    # objective after each Lloyd assignment, one list per level
    trace: list[list[float]] = field(default_factory=list, compare=False, repr=False)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(lv.shape[0] for lv in self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook) or self.sizes != other.sizes:
            return NotImplemented if not isinstance(other, Codebook) else False
        return all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))


@dataclass(frozen=True)
class LearnableDocId:
    codes: tuple[int, ...]

    def key(self) -> tuple[str, ...]:
        return tuple(str(c) for c in self.codes)


@dataclass(frozen=True)
class LinguisticDocId:
    tokens: tuple[str, ...]
    source: Literal["title", "leading", "disambiguated"]

    def key(self) -> tuple[str, ...]:
        return self.tokens


DocId = Union[LearnableDocId, LinguisticDocId]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences keep exact zeros for coincident points
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def lloyd(points: np.ndarray, k: int, iters: int = 50, tol: float = 1e-6,
          rng: np.random.Generator | None = None,
          init: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's k-means with k-means++ seeding; returns (centers, assignment, objective trace)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = _kmeans_pp(points, k, rng) if init is None else np.array(init, dtype=float)
    trace: list[float] = []
    assign = np.zeros(len(points), dtype=int)
    for _ in range(iters):
        dists = _sq_dists(points, centers)
        assign = dists.argmin(axis=1)
        nearest = dists[np.arange(len(points)), assign]
        trace.append(float(nearest.sum()))
        if len(trace) > 1 and trace[-2] - trace[-1] < tol:
            break
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c]:
                centers[c] = points[assign == c].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # reseed on the points worst served by the current centers
            worst = np.argsort(-_sq_dists(points, centers).min(axis=1), kind="stable")
            for c, idx in zip(empty, worst):
                centers[c] = points[idx]
    return centers, assign, trace


def train_codebooks(embeddings: np.ndarray, levels: int, sizes: Sequence[int],
                    iters: int = 50, tol: float = 1e-6, rng_seed: int = 0) -> Codebook:
    """Fit each level with k-means on the residuals left by the previous levels."""
    embeddings = np.asarray(embeddings, dtype=float)
    if levels < 1 or len(sizes) != levels:
        raise DocIdError(f"need one codebook size per level, got {len(sizes)} for l={levels}")
    for k in sizes:
        if k < 2:
            raise DocIdError("every codebook level needs at least 2 codes")
        if k > len(embeddings):
            raise DocIdError(f"codebook of size {k} needs at least {k} embeddings, "
                             f"got {len(embeddings)}")
    if not np.all(np.isfinite(embeddings)):
        raise DocIdError("embeddings contain non-finite values")
    rng = np.random.default_rng(rng_seed)
    residual = embeddings.copy()
    book = Codebook(levels=[])
    for k in sizes:
        centers, _, trace = lloyd(residual, k, iters=iters, tol=tol, rng=rng)
        # re-derive assignment against the final centers so residuals match quantize()
        assign = _sq_dists(residual, centers).argmin(axis=1)
        residual = residual - centers[assign]
        book.levels.append(centers)
        book.trace.append(trace)
    return book


def rq_objective(embeddings: np.ndarray, codebook: Codebook) -> float:
    """Summed squared residual over all levels for greedy quantization."""
    residual = np.asarray(embeddings, dtype=float).copy()
    total = 0.0
    for centers in codebook.levels:
        dists = _sq_dists(residual, centers)
        assign = dists.argmin(axis=1)
        total += float(dists[np.arange(len(residual)), assign].sum())
        residual = residual - centers[assign]
    return total


def quantize(embedding: np.ndarray, codebook: Codebook) -> tuple[LearnableDocId, float]:
    residual = np.asarray(embedding, dtype=float)
    if residual.shape != (codebook.dim,):
        raise DocIdError(f"embedding has shape {residual.shape}, codebook dim is {codebook.dim}")
    codes = []
    for centers in codebook.levels:
        diff = residual[None, :] - centers
        z = int(np.einsum("kd,kd->k", diff, diff).argmin())
        codes.append(z)
        residual = residual - centers[z]
    return LearnableDocId(tuple(codes)), float(np.linalg.norm(residual))


def reconstruct(docid: LearnableDocId, codebook: Codebook) -> np.ndarray:
    if len(docid.codes) != len(codebook.levels):
        raise DocIdError(f"DocID has {len(docid.codes)} codes, codebook has "
                         f"{len(codebook.levels)} levels")
    out = np.zeros(codebook.dim)
    for level, (z, centers) in enumerate(zip(docid.codes, codebook.levels)):
        if not 0 <= z < len(centers):
            raise DocIdError(f"code {z} out of range at level {level}")
        out = out + centers[z]
    return out


# -- linguistic ids ----------------------------------------------------------

def assign_linguistic_docid(doc: Document, max_tokens: int = MAX_LINGUISTIC_TOKENS,
                            n_leading: int = MAX_LINGUISTIC_TOKENS) -> LinguisticDocId:
    if doc.title:
        return LinguisticDocId(tuple(doc.title[:max_tokens]), "title")
    return LinguisticDocId(tuple(doc.body[:min(n_leading, max_tokens)]), "leading")


# -- registry ----------------------------------------------------------------

@dataclass
class DocIdRegistry:
    kind: Literal["learnable", "linguistic"]
    length: int
    entries: dict[str, tuple[str, ...]]
    codebook: Codebook | None = None
    sizes: tuple[int, ...] = ()
    meta: dict[str, str] = field(default_factory=dict)
    _reverse: dict[tuple[str, ...], str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._reverse = {}
        for doc_id, key in self.entries.items():
            if key in self._reverse:
                raise DocIdError(f"DocID {' '.join(key)!r} shared by {self._reverse[key]!r} "
                                 f"and {doc_id!r}")
            self._reverse[key] = doc_id

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return self.codebook.dim if self.codebook is not None else 0

    def lookup(self, key: Sequence[str]) -> str | None:
        return self._reverse.get(tuple(key))

    def target_ids(self, doc_id: str, vocab: Vocabulary) -> list[int]:
        """Vocabulary ids of a document's DocID, padded to the generation length."""
        key = self.entries[doc_id]
        if self.kind == "learnable":
            return [vocab.code_id(level, int(z)) for level, z in enumerate(key)]
        return vocab.encode(key) + [vocab.pad_id] * (self.length - len(key))

    def key_from_ids(self, ids: Sequence[int], vocab: Vocabulary) -> tuple[str, ...] | None:
        """Inverse of :meth:`target_ids`; None for sequences no DocID can encode."""
        ids = [int(i) for i in ids]
        if len(ids) != self.length or vocab.mask_id in ids:
            return None
        if self.kind == "learnable":
            key = []
            for level, idx in enumerate(ids):
                decoded = vocab.decode_code(idx)
                if decoded is None or decoded[0] != level:
                    return None
                key.append(str(decoded[1]))
            return tuple(key)
        while ids and ids[-1] == vocab.pad_id:
            ids.pop()
        if not ids or any(i < vocab.word_offset for i in ids):
            return None
        return tuple(vocab.token_of(i) for i in ids)

    def lookup_ids(self, ids: Sequence[int], vocab: Vocabulary) -> str | None:
        key = self.key_from_ids(ids, vocab)
        return None if key is None else self.lookup(key)


def lookup(registry: DocIdRegistry, sequence: Sequence[str]) -> str | None:
    if MASK in sequence:
        return None
    return registry.lookup(sequence)


def build_registry(docs: Sequence[Document], docids: Sequence[DocId],
                   max_tokens: int = MAX_LINGUISTIC_TOKENS,
                   codebook: Codebook | None = None) -> DocIdRegistry:
    """Enforce a bijection between documents and DocIDs.

    Colliding title/leading ids get an ordinal word appended ("2", "3", ...), after
    truncation to fit ``max_tokens``; colliding learnable ids raise CollisionError.
    """
    if len(docs) != len(docids):
        raise DocIdError(f"{len(docs)} documents but {len(docids)} DocIDs")
    if not docids:
        raise DocIdError("empty registry")
    learnable = isinstance(docids[0], LearnableDocId)
    if any(isinstance(z, LearnableDocId) != learnable for z in docids):
        raise DocIdError("mixed DocID kinds")

    if learnable:
        groups: dict[tuple[str, ...], list[str]] = defaultdict(list)
        for doc, z in zip(docs, docids):
            groups[z.key()].append(doc.doc_id)
        clashes = [ids for ids in groups.values() if len(ids) > 1]
        if clashes:
            raise CollisionError(clashes)
        length = len(docids[0].codes)
        sizes = codebook.sizes if codebook is not None else ()
        return DocIdRegistry("learnable", length,
                             {d.doc_id: z.key() for d, z in zip(docs, docids)},
                             codebook=codebook, sizes=sizes)

    taken: set[tuple[str, ...]] = set()
    entries: dict[str, tuple[str, ...]] = {}
    for doc, z in zip(docs, docids):
        key = tuple(z.tokens[:max_tokens])
        if key in taken:
            if max_tokens < 2:
                raise DocIdError(f"no room to disambiguate DocID of {doc.doc_id!r} "
                                 f"within {max_tokens} token(s)")
            base = key[:max_tokens - 1]
            ordinal = 2
            while base + (str(ordinal),) in taken:
                ordinal += 1
                if ordinal > len(docs) + 1:
                    raise DocIdError(f"disambiguation budget exhausted for {doc.doc_id!r}")
            key = base + (str(ordinal),)
        taken.add(key)
        entries[doc.doc_id] = key
    return DocIdRegistry("linguistic", max_tokens, entries)


def linguistic_docids(registry: DocIdRegistry, docids: Sequence[LinguisticDocId],
                      docs: Sequence[Document]) -> list[LinguisticDocId]:
    """Tag ids that build_registry had to disambiguate."""
    out = []
    for doc, z in zip(docs, docids):
        key = registry.entries[doc.doc_id]
        out.append(z if key == z.tokens else LinguisticDocId(key, "disambiguated"))
    return out


# -- persistence ---------------------------------------------------------------

def _header(magic: str, fields: dict[str, object]) -> str:
    parts = [f"{k}={v}" for k, v in fields.items()]
    if any(any(c.isspace() for c in part) for part in parts):
        raise FormatError(f"header fields may not contain whitespace: {parts}")
    return " ".join([magic, f"v{FORMAT_VERSION}", *parts]) + "\n"


def _parse_header(line: str, magic: str, path) -> dict[str, str]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != magic:
        raise FormatError(f"{path}: not a {magic[1:]} file")
    if parts[1] != f"v{FORMAT_VERSION}":
        raise FormatError(f"{path}: unsupported format version {parts[1]!r}")
    out = {}
    for item in parts[2:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed header field {item!r}")
        out[key] = value
    return out


def _sizes_str(sizes: Sequence[int]) -> str:
    return ",".join(str(k) for k in sizes) or "-"


def _parse_sizes(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(k) for k in text.split(","))


def save_codebook(codebook: Codebook, path: str | Path, meta: dict | None = None) -> None:
    """``meta`` entries become extra ``key=value`` header fields (no spaces allowed)."""
    header = _header(CODEBOOK_MAGIC, {"l": len(codebook.levels), "K": _sizes_str(codebook.sizes),
                                      "d": codebook.dim, **(meta or {})})
    with Path(path).open("wb") as fh:
        fh.write(header.encode("ascii"))
        for centers in codebook.levels:
            fh.write(np.ascontiguousarray(centers, dtype="<f8").tobytes())


def read_header(path: str | Path) -> dict[str, str]:
    """Header fields of a registry or codebook file."""
    with Path(path).open("rb") as fh:
        line = fh.readline().decode("ascii", "replace")
    magic = REGISTRY_MAGIC if line.startswith(REGISTRY_MAGIC) else CODEBOOK_MAGIC
    return _parse_header(line, magic, path)


def load_codebook(path: str | Path, expected_dim: int | None = None) -> Codebook:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: missing header")
    head = _parse_header(raw[:newline].decode("ascii", "replace"), CODEBOOK_MAGIC, path)
    try:
        levels, sizes, dim = int(head["l"]), _parse_sizes(head["K"]), int(head["d"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad codebook header ({exc})") from None
    if len(sizes) != levels:
        raise FormatError(f"{path}: header declares l={levels} but {len(sizes)} sizes")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: dimension mismatch, file has d={dim}, expected {expected_dim}")
    payload = raw[newline + 1:]
    need = 8 * dim * sum(sizes)
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {need}")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    out, start = [], 0
    for k in sizes:
        out.append(flat[start:start + k * dim].reshape(k, dim).copy())
        start += k * dim
    return Codebook(levels=out)


def save_registry(registry: DocIdRegistry, path: str | Path,
                  codebook_path: str | Path | None = None) -> None:
    path = Path(path)
    fields: dict[str, object] = {"kind": registry.kind, "l": registry.length}
    if registry.kind == "learnable":
        fields["K"] = _sizes_str(registry.sizes)
    else:
        fields["max_tokens"] = registry.length
    fields["d"] = registry.dim
    fields["n"] = len(registry)
    fields.update(registry.meta)
    lines = [_header(REGISTRY_MAGIC, fields)]
    for doc_id, key in registry.entries.items():
        if "\t" in doc_id or "\n" in doc_id:
            raise FormatError(f"document id {doc_id!r} contains a tab or newline")
        lines.append(f"{doc_id}\t{' '.join(key)}\n")
    path.write_text("".join(lines), encoding="utf-8")
    if registry.codebook is not None:
        save_codebook(registry.codebook, codebook_path or path.parent / "codebook.bin",
                      registry.meta)


def load_registry(path: str | Path, codebook_path: str | Path | None = None,
                  expected_dim: int | None = None) -> DocIdRegistry:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    head = _parse_header(lines[0], REGISTRY_MAGIC, path)
    try:
        kind, length, dim, count = head.pop("kind"), int(head.pop("l")), int(head.pop("d")), int(head.pop("n"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad registry header ({exc})") from None
    if kind not in ("learnable", "linguistic"):
        raise FormatError(f"{path}: unknown DocID kind {kind!r}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: dimension mismatch, file has d={dim}, expected {expected_dim}")
    sizes = _parse_sizes(head.pop("K", "-"))
    head.pop("max_tokens", None)
    if not lines[-1] == "":
        raise FormatError(f"{path}: truncated (last record has no newline)")
    records = lines[1:-1]
    if len(records) != count:
        raise FormatError(f"{path}: header declares {count} records, found {len(records)}")
    entries = {}
    for lineno, line in enumerate(records, start=2):
        doc_id, sep, toks = line.partition("\t")
        if not sep or not toks:
            raise FormatError(f"{path}:{lineno}: malformed record")
        entries[doc_id] = tuple(toks.split(" "))
    codebook = None
    if kind == "learnable" and dim > 0:
        codebook = load_codebook(codebook_path or path.parent / "codebook.bin", expected_dim=dim)
        if codebook.sizes != sizes:
            raise FormatError(f"{path}: codebook sizes {codebook.sizes} differ from header {sizes}")
    return DocIdRegistry(kind, length, entries, codebook=codebook, sizes=sizes, meta=head)

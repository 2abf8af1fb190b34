"""Parallel DocID decoding by iterative unmasking, pseudo beam search and candidate scoring."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Literal, Sequence

import numpy as np
import torch

from .corpus import Vocabulary
from .denoiser import Denoiser, pad_queries
from .diffusion import MASK_ID, MaskedSequence, remask_schedule
from .docid import DocIdRegistry


class DenoisingStrategy(str, enum.Enum):
    RANDOM = "random"
    MASKGIT_PLUS = "maskgit_plus"
    TOPK_MARGIN = "topk_margin"
    ENTROPY = "entropy"


STRATEGIES = tuple(DenoisingStrategy)

BeamMode = Literal["vanilla", "query_aug", "intermediate", "both"]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    docid_len: int
    strategy: DenoisingStrategy = DenoisingStrategy.MASKGIT_PLUS
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.docid_len < 1:
            raise ValueError("docid_len must be >= 1")
        object.__setattr__(self, "strategy", DenoisingStrategy(self.strategy))


@dataclass
class DecodeTrajectory:
    snapshots: list[MaskedSequence] = field(default_factory=list)
    # per step: every still-masked slot filled with that step's argmax
    filled: list[tuple[int, ...]] = field(default_factory=list)
    filled_scores: list[float] = field(default_factory=list)
    token_logprob: list[float] = field(default_factory=list)
    token_step: list[int] = field(default_factory=list)

    @property
    def final(self) -> tuple[int, ...]:
        return self.snapshots[-1].tokens

    @property
    def score(self) -> float:
        return float(sum(self.token_logprob))


def _scores(probs: np.ndarray, strategy: DenoisingStrategy) -> np.ndarray:
    if strategy is DenoisingStrategy.MASKGIT_PLUS:
        return probs.max(axis=-1)
    if strategy is DenoisingStrategy.TOPK_MARGIN:
        top2 = np.partition(probs, -2, axis=-1)[..., -2:]
        return top2[..., 1] - top2[..., 0]
    if strategy is DenoisingStrategy.ENTROPY:
        safe = np.where(probs > 0, probs, 1.0)
        return (probs * np.log(safe)).sum(axis=-1)  # negative entropy: larger = more certain
    raise ValueError(f"no confidence score for {strategy}")


def select_finalize(distributions: np.ndarray, currently_masked: Sequence[int], n: int,
                    strategy: DenoisingStrategy | str,
                    rng: np.random.Generator | None = None) -> list[int]:
    """Positions to unmask this step; the rest of ``currently_masked`` stays masked.

    Confidence strategies keep the ``n`` most certain positions (top-1 probability,
    top-1 minus top-2 margin, or lowest entropy), ties going to the lower index.
    """
    strategy = DenoisingStrategy(strategy)
    masked = sorted(int(p) for p in currently_masked)
    if n > len(masked):
        raise ValueError(f"cannot finalize {n} of {len(masked)} masked positions")
    if n <= 0:
        return []
    if strategy is DenoisingStrategy.RANDOM:
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return sorted(int(p) for p in rng.choice(masked, size=n, replace=False))
    score = _scores(np.asarray(distributions, dtype=float)[masked], strategy)
    order = sorted(range(len(masked)), key=lambda j: (-score[j], masked[j]))
    return sorted(masked[j] for j in order[:n])


@torch.no_grad()
def _log_probs(model: Denoiser, queries: torch.Tensor, docids: np.ndarray) -> np.ndarray:
    return model(queries, torch.as_tensor(docids, dtype=torch.long)).double().numpy()


def decode_batch(model: Denoiser, queries: Sequence[Sequence[int]], cfg: SamplerConfig,
                 seeds: Sequence[int] | None = None,
                 ) -> list[tuple[tuple[int, ...], DecodeTrajectory]]:
    """Run the reverse process for several queries at once; each row has its own RNG."""
    if cfg.docid_len != model.cfg.docid_len:
        raise ValueError(f"sampler length {cfg.docid_len} != model DocID length "
                         f"{model.cfg.docid_len}")
    b, l = len(queries), cfg.docid_len
    seeds = [cfg.seed] * b if seeds is None else list(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    q = pad_queries(queries, model.cfg.max_query_len, strict=False)
    z = np.full((b, l), MASK_ID, dtype=np.int64)
    trajs = [DecodeTrajectory(token_logprob=[0.0] * l, token_step=[-1] * l) for _ in range(b)]
    for step, (n_final, _) in enumerate(remask_schedule(l, cfg.steps)):
        logp = _log_probs(model, q, z)
        for row in range(b):
            traj = trajs[row]
            masked = np.flatnonzero(z[row] == MASK_ID)
            best = logp[row].argmax(axis=-1)
            fill = z[row].copy()
            fill[masked] = best[masked]
            traj.filled.append(tuple(int(v) for v in fill))
            traj.filled_scores.append(float(
                sum(traj.token_logprob[p] for p in range(l) if p not in masked)
                + logp[row, masked, best[masked]].sum()))
            chosen = select_finalize(np.exp(logp[row]), masked, n_final, cfg.strategy, rngs[row])
            for p in chosen:
                # finalized tokens persist for the rest of the trajectory
                z[row, p] = best[p]
                traj.token_logprob[p] = float(logp[row, p, best[p]])
                traj.token_step[p] = step
            traj.snapshots.append(MaskedSequence(tuple(int(v) for v in z[row])))
    return [(trajs[row].final, trajs[row]) for row in range(b)]


def generate(model: Denoiser, query_tokens: Sequence[int], cfg: SamplerConfig,
             ) -> tuple[tuple[int, ...], DecodeTrajectory]:
    return decode_batch(model, [query_tokens], cfg)[0]


@torch.no_grad()
def pseudo_likelihood(model: Denoiser, query_tokens: Sequence[int],
                      candidates: Sequence[Sequence[int]], chunk: int = 512) -> list[float]:
    """sum_i log p(z_i | query, z with position i masked) for each candidate."""
    if not candidates:
        return []
    l = model.cfg.docid_len
    cand = np.asarray(candidates, dtype=np.int64)
    rows = np.repeat(cand, l, axis=0)
    pos = np.tile(np.arange(l), len(cand))
    target = rows[np.arange(len(rows)), pos].copy()
    rows[np.arange(len(rows)), pos] = MASK_ID
    q = pad_queries([query_tokens], model.cfg.max_query_len, strict=False)
    out = np.empty(len(rows))
    for start in range(0, len(rows), chunk):
        sl = slice(start, start + chunk)
        logp = _log_probs(model, q.expand(len(rows[sl]), -1), rows[sl])
        out[sl] = logp[np.arange(len(logp)), pos[sl], target[sl]]
    return [float(v) for v in out.reshape(len(cand), l).sum(axis=1)]


def score_candidate(model: Denoiser | None, query_tokens: Sequence[int],
                    docid: Sequence[int], trajectory: DecodeTrajectory | None = None) -> float:
    """Trajectory score when a trajectory is given, else the exact pseudo-likelihood."""
    if trajectory is not None:
        docid = tuple(int(v) for v in docid)
        for cand, score in zip(trajectory.filled, trajectory.filled_scores):
            if cand == docid:
                return score
        if docid == trajectory.final:
            return trajectory.score
        raise ValueError("docid does not occur in the trajectory")
    return pseudo_likelihood(model, query_tokens, [docid])[0]


STOPWORDS = frozenset(("the of and a in is was for on with as by at from its this which also has "
                       "are were an be it that to what who how when where does did do").split())


def augment_query(query: Sequence[Hashable], n_variants: int, rng_seed: int = 0,
                  stopwords: frozenset = STOPWORDS, drop_p: float = 0.1,
                  swap_p: float = 0.05) -> list[tuple]:
    """Variant 0 is the query itself; the others drop content words and swap neighbours."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    query = tuple(query)
    rng = np.random.default_rng(rng_seed)
    out = [query]
    for _ in range(n_variants - 1):
        kept = [tok for tok in query if tok in stopwords or rng.random() >= drop_p]
        i = 0
        while i < len(kept) - 1:
            if rng.random() < swap_p:
                kept[i], kept[i + 1] = kept[i + 1], kept[i]
                i += 2
            else:
                i += 1
        out.append(tuple(kept) if kept else query)
    return out


@dataclass
class CandidatePool:
    """Generated DocIDs in generation order, with trajectory scores."""

    sequences: list[tuple[int, ...]] = field(default_factory=list)
    trajectory_scores: list[float] = field(default_factory=list)

    def add(self, seq: Sequence[int], score: float) -> None:
        self.sequences.append(tuple(int(v) for v in seq))
        self.trajectory_scores.append(float(score))


def collect_candidates(model: Denoiser, query_tokens: Sequence[int], cfg: SamplerConfig,
                       mode: BeamMode = "vanilla", n_variants: int = 4,
                       stopword_ids: frozenset = frozenset(), rng_seed: int | None = None,
                       ) -> CandidatePool:
    if mode not in ("vanilla", "query_aug", "intermediate", "both"):
        raise ValueError(f"unknown beam mode {mode!r}")
    seed = cfg.seed if rng_seed is None else rng_seed
    if mode in ("query_aug", "both"):
        variants = augment_query(query_tokens, n_variants, seed, stopwords=stopword_ids)
    else:
        variants = [tuple(query_tokens)]
    decoded = decode_batch(model, variants, cfg, seeds=[seed] * len(variants))
    pool = CandidatePool()
    for final, traj in decoded:
        if mode in ("intermediate", "both"):
            for cand, score in zip(traj.filled, traj.filled_scores):
                pool.add(cand, score)
        else:
            pool.add(final, traj.score)
    return pool


def rank_candidates(model: Denoiser, query_tokens: Sequence[int], pool: CandidatePool,
                    registry: DocIdRegistry, vocab: Vocabulary, k: int = 10,
                    scoring: Literal["pll", "trajectory"] = "pll") -> list[tuple[str, float]]:
    """Drop sequences outside the registry, merge duplicates at their best score, rank."""
    first_seen: dict[str, int] = {}
    best: dict[str, float] = {}
    seqs: dict[str, tuple[int, ...]] = {}
    for order, (seq, tscore) in enumerate(zip(pool.sequences, pool.trajectory_scores)):
        doc = registry.lookup_ids(seq, vocab)
        if doc is None:
            continue
        first_seen.setdefault(doc, order)
        seqs[doc] = seq
        best[doc] = max(best.get(doc, -np.inf), tscore)
    if scoring == "pll":
        docs = list(seqs)
        # every valid sequence of a doc is identical, so one pseudo-likelihood per doc
        for doc, score in zip(docs, pseudo_likelihood(model, query_tokens, [seqs[d] for d in docs])):
            best[doc] = score
    elif scoring != "trajectory":
        raise ValueError(f"unknown scoring {scoring!r}")
    ranked = sorted(best, key=lambda d: (-best[d], first_seen[d]))
    return [(d, best[d]) for d in ranked[:k]]


def pseudo_beam(model: Denoiser, query_tokens: Sequence[int], cfg: SamplerConfig,
                registry: DocIdRegistry, vocab: Vocabulary, mode: BeamMode = "intermediate",
                k: int = 10, n_variants: int = 4, scoring: Literal["pll", "trajectory"] = "pll",
                ) -> list[tuple[str, float]]:
    stop_ids = frozenset(vocab.id_of(w) for w in STOPWORDS if w in vocab)
    pool = collect_candidates(model, query_tokens, cfg, mode, n_variants, stop_ids)
    return rank_candidates(model, query_tokens, pool, registry, vocab, k, scoring)

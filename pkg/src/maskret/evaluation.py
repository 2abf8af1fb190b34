"""Retrieval metrics and experiment drivers (step sweeps, strategy and scale ablations)."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import Vocabulary
from .denoiser import Denoiser
from .docid import DocIdRegistry
from .sampler import (STOPWORDS, STRATEGIES, BeamMode, CandidatePool, SamplerConfig,
                      collect_candidates, rank_candidates)

Ranked = Mapping[str, Sequence[str]]
Qrels = Mapping[str, set[str] | Sequence[str]]


def _first_hit(ranked: Sequence[str], relevant) -> int | None:
    for rank, doc in enumerate(ranked, start=1):
        if doc in relevant:
            return rank
    return None


def _check(results: Ranked, qrels: Qrels) -> None:
    unknown = [q for q in results if q not in qrels]
    if unknown:
        raise KeyError(f"results for unknown query ids: {unknown[:5]}")
    empty = [q for q, rel in qrels.items() if not rel]
    if empty:
        raise ValueError(f"queries without relevant documents: {empty[:5]}")


def _mean(values) -> float:
    # fsum is correctly rounded, so the result does not depend on query order
    return math.fsum(values) / len(values) if values else 0.0


def recall_at_k(results: Ranked, qrels: Qrels, k: int) -> float:
    """Fraction of judged queries with a relevant document in the top k (missing = miss)."""
    _check(results, qrels)
    hits = [_first_hit(list(results.get(q, ()))[:k], rel) is not None for q, rel in qrels.items()]
    return _mean(hits)


def mrr_at_k(results: Ranked, qrels: Qrels, k: int = 10) -> float:
    _check(results, qrels)
    rr = []
    for q, rel in qrels.items():
        rank = _first_hit(list(results.get(q, ()))[:k], rel)
        rr.append(0.0 if rank is None else 1.0 / rank)
    return _mean(rr)


def metric_table(results: Ranked, qrels: Qrels) -> dict[str, float]:
    return {"recall@1": recall_at_k(results, qrels, 1),
            "recall@5": recall_at_k(results, qrels, 5),
            "recall@10": recall_at_k(results, qrels, 10),
            "mrr@10": mrr_at_k(results, qrels, 10)}


@dataclass
class RunResult:
    ranked: dict[str, list[str]]
    latency_s: dict[str, float]
    config: dict
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def mean_latency_ms(self) -> float:
        return 1000.0 * float(np.mean(list(self.latency_s.values()))) if self.latency_s else 0.0

    @property
    def throughput_qps(self) -> float:
        total = sum(self.latency_s.values())
        return len(self.latency_s) / total if total > 0 else float("inf")

    def report(self) -> dict:
        return {"config": self.config, **self.metrics,
                "mean_latency_ms": self.mean_latency_ms, "throughput_qps": self.throughput_qps}


def evaluate(model: Denoiser, registry: DocIdRegistry, vocab: Vocabulary,
             queries: Mapping[str, Sequence[int]], qrels: Qrels, cfg: SamplerConfig,
             mode: BeamMode = "vanilla", k: int = 10, n_variants: int = 4,
             scoring: str = "pll") -> RunResult:
    """Decode every query, rank its candidates and score the run.

    Latency covers candidate generation only; registry lookup and scoring are excluded.
    Each query decodes with its own seed derived from ``cfg.seed`` and its position.
    """
    stop_ids = frozenset(vocab.id_of(w) for w in STOPWORDS if w in vocab)
    ranked: dict[str, list[str]] = {}
    latency: dict[str, float] = {}
    pools: dict[str, CandidatePool] = {}
    for i, qid in enumerate(queries):
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        start = time.perf_counter()
        pools[qid] = collect_candidates(model, queries[qid], cfg, mode, n_variants,
                                        stop_ids, rng_seed=seed)
        latency[qid] = time.perf_counter() - start
    for qid, pool in pools.items():
        hits = rank_candidates(model, queries[qid], pool, registry, vocab, k, scoring)
        ranked[qid] = [doc for doc, _ in hits]
    config = {"steps": cfg.steps, "docid_len": cfg.docid_len, "strategy": cfg.strategy.value,
              "seed": cfg.seed, "mode": mode, "k": k, "scoring": scoring,
              "n_variants": n_variants if mode in ("query_aug", "both") else 1}
    result = RunResult(ranked, latency, config)
    result.metrics = metric_table(ranked, qrels)
    return result


@dataclass
class SweepPoint:
    steps: int
    metrics: dict[str, float]
    throughput_qps: float
    mean_latency_ms: float

    def to_json(self) -> dict:
        return asdict(self)


def tradeoff_sweep(model: Denoiser, registry: DocIdRegistry, vocab: Vocabulary,
                   queries: Mapping[str, Sequence[int]], qrels: Qrels, steps_list: Sequence[int],
                   strategy="maskgit_plus", seed: int = 0, mode: BeamMode = "vanilla",
                   k: int = 10) -> list[SweepPoint]:
    if not steps_list:
        raise ValueError("steps_list is empty")
    points = []
    for steps in steps_list:
        cfg = SamplerConfig(steps, registry.length, strategy, seed)
        run = evaluate(model, registry, vocab, queries, qrels, cfg, mode, k)
        points.append(SweepPoint(steps, run.metrics, run.throughput_qps, run.mean_latency_ms))
    return points


def strategy_ablation(model: Denoiser, registry: DocIdRegistry, vocab: Vocabulary,
                      queries: Mapping[str, Sequence[int]], qrels: Qrels, steps: int,
                      strategies=STRATEGIES, seed: int = 0, mode: BeamMode = "vanilla",
                      k: int = 10) -> list[dict]:
    rows = []
    for strategy in strategies:
        cfg = SamplerConfig(steps, registry.length, strategy, seed)
        run = evaluate(model, registry, vocab, queries, qrels, cfg, mode, k)
        rows.append({"strategy": cfg.strategy.value, **run.metrics,
                     "mean_latency_ms": run.mean_latency_ms, "throughput_qps": run.throughput_qps})
    return rows


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through (xs, ys); returns (intercept, slope, max relative residual)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(xs, ys, 1)
    fitted = intercept + slope * xs
    return float(intercept), float(slope), float(np.max(np.abs(ys - fitted) / fitted))


def scale_sweep(dataset, registry: DocIdRegistry, scales: Sequence[dict], train_cfg,
                queries: Mapping[str, Sequence[int]], qrels: Qrels, steps: int | None = None,
                strategy="maskgit_plus", seed: int = 0) -> list[dict]:
    """Train one denoiser per architecture in ``scales`` and evaluate each the same way.

    Each scale is a dict of denoiser settings (layers, width, heads, ...). Rows report the
    parameter count next to the metrics; the trend is for inspection, not a hard property.
    """
    from .pipeline import train_model

    rows = []
    for scale in scales:
        trainer = train_model(dataset, registry, dict(scale), train_cfg)
        cfg = SamplerConfig(steps or registry.length, registry.length, strategy, seed)
        run = evaluate(trainer.model, registry, dataset.vocab, queries, qrels, cfg)
        n_params = sum(p.numel() for p in trainer.model.parameters())
        rows.append({**dict(scale), "parameters": n_params, **run.metrics,
                     "final_loss": trainer.loss_trace[-1], "mean_latency_ms": run.mean_latency_ms})
    return rows

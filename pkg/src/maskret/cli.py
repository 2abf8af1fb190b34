"""maskret command line: ingest -> build-docids -> train -> eval / sweep.

All artifacts live under the workdir with fixed names (dataset.bundle/, registry.tsv,
codebook.bin, checkpoint.bin, loss_trace.json, reports/*.json) and record the hash of the
config that produced them. A command refuses upstream artifacts whose hash does not match
the current config unless --force is given.

Failures print a single line ``maskret:error:<kind>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, PipelineConfig, check_inputs, load_config
from .corpus import CorpusError, load_corpus, load_pairs, load_queries, write_jsonl
from .denoiser import (CheckpointError, DenoiserConfig, Trainer, TrainingError, init_parameters,
                       load_checkpoint, read_checkpoint_header, save_checkpoint)
from .docid import DocIdError, load_registry, read_header, save_registry
from .evaluation import evaluate, strategy_ablation, tradeoff_sweep
from .pipeline import (build_docids, eval_queries, load_dataset, prepare_dataset, save_dataset,
                       training_examples)
from .sampler import SamplerConfig
from .synthetic import synthetic_corpus, to_records

log = logging.getLogger("maskret")

BUNDLE, REGISTRY, CODEBOOK = "dataset.bundle", "registry.tsv", "codebook.bin"
CHECKPOINT, LOSS_TRACE, REPORTS = "checkpoint.bin", "loss_trace.json", "reports"

EXIT_CODES = {"usage": 2, "config": 2, "data": 3, "artifact": 4, "train": 5, "io": 6}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _expect(artifact: str, found: str | None, cfg: PipelineConfig, stage: str, force: bool) -> None:
    want = cfg.stage_hash(stage)
    if found == want:
        return
    if force:
        log.warning("%s was built from config %s, current is %s; continuing (--force)",
                    artifact, found, want)
        return
    raise CliError("artifact", f"{artifact} config hash {found} does not match current config "
                               f"{want} (rerun the producing command or pass --force)")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CliError("artifact", f"{path} not found (run `maskret {producer}` first)")
    return path


def _load_bundle(cfg: PipelineConfig, force: bool):
    try:
        dataset, manifest = load_dataset(_require(cfg.workdir / BUNDLE, "ingest"))
    except (CorpusError, FileNotFoundError, json.JSONDecodeError) as exc:
        raise CliError("artifact", f"dataset bundle unreadable: {exc}") from None
    _expect(BUNDLE, manifest.get("config_hash"), cfg, "ingest", force)
    return dataset


def _load_registry(cfg: PipelineConfig, force: bool):
    path = _require(cfg.workdir / REGISTRY, "build-docids")
    registry = load_registry(path)
    _expect(REGISTRY, registry.meta.get("config_hash"), cfg, "docids", force)
    if registry.kind == "learnable":
        _expect(CODEBOOK, read_header(cfg.workdir / CODEBOOK).get("config_hash"), cfg, "docids", force)
    return registry


def _load_trainer(cfg: PipelineConfig, force: bool, expected: DenoiserConfig | None = None):
    path = _require(cfg.workdir / CHECKPOINT, "train")
    _expect(CHECKPOINT, read_checkpoint_header(path).get("meta", {}).get("config_hash"),
            cfg, "train", force)
    return load_checkpoint(path, expected_config=expected)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- verbs -----------------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, args) -> dict:
    check_inputs(cfg)
    data = cfg["data"]
    docs = load_corpus(cfg.resolve(data["corpus"]))
    if data["pairs"] and not data["queries"]:
        raise ConfigError("[data] pairs given without queries")
    queries = load_queries(cfg.resolve(data["queries"])) if data["queries"] else []
    pairs = load_pairs(cfg.resolve(data["pairs"]), queries, docs) if data["pairs"] else []
    dataset = prepare_dataset(docs, queries, pairs, n_pseudo=data["pseudo_queries"],
                              holdout_fraction=data["holdout_fraction"], seed=cfg.seed,
                              codebook_sizes=cfg.codebook_sizes,
                              max_tokens=cfg["docid"]["max_tokens"])
    save_dataset(dataset, cfg.workdir / BUNDLE,
                 {"config_hash": cfg.stage_hash("ingest"), "seed": cfg.seed})
    return {"bundle": str(cfg.workdir / BUNDLE), **dataset.summary(), "vocab_size": len(dataset.vocab)}


def cmd_build_docids(cfg: PipelineConfig, args) -> dict:
    dataset = _load_bundle(cfg, args.force)
    d = cfg["docid"]
    registry = build_docids(dataset, d["kind"], levels=d["levels"], sizes=d["sizes"], dim=d["dim"],
                            seed=cfg.seed, max_tokens=d["max_tokens"], iters=d["iters"],
                            tol=float(d["tol"]), retries=d["retries"])
    registry.meta["config_hash"] = cfg.stage_hash("docids")
    codebook = cfg.workdir / CODEBOOK
    if codebook.exists() and registry.kind == "linguistic":
        codebook.unlink()  # a stale codebook would contradict the registry
    save_registry(registry, cfg.workdir / REGISTRY, codebook)
    out = {"registry": str(cfg.workdir / REGISTRY), "kind": registry.kind,
           "length": registry.length, "documents": len(registry)}
    if registry.kind == "learnable":
        out.update(codebook=str(codebook), codebook_seed=registry.meta.get("codebook_seed"))
    return out


def cmd_train(cfg: PipelineConfig, args) -> dict:
    dataset = _load_bundle(cfg, args.force)
    registry = _load_registry(cfg, args.force)
    model_cfg = DenoiserConfig(vocab_size=len(dataset.vocab), docid_len=registry.length,
                               **cfg.model_kwargs())
    train_cfg = cfg.train_config()
    examples = training_examples(dataset, registry, model_cfg.max_query_len,
                                 cfg["train"]["include_documents"])
    ckpt, trace_path = cfg.workdir / CHECKPOINT, cfg.workdir / LOSS_TRACE
    meta = {"config_hash": cfg.stage_hash("train")}
    if args.resume:
        try:
            trainer = _load_trainer(cfg, args.force, expected=model_cfg)
        except CheckpointError as exc:
            raise CliError("artifact", str(exc)) from None
        trainer.train_cfg = train_cfg
        log.info("resuming from epoch %d of %d", trainer.epoch, train_cfg.epochs)
    else:
        trainer = Trainer(init_parameters(model_cfg, train_cfg.seed), train_cfg)
    trainer.meta = meta

    def checkpoint(tr: Trainer, loss: float) -> None:
        log.info("epoch %d/%d loss %.4f", tr.epoch, train_cfg.epochs, loss)
        save_checkpoint(tr, ckpt, meta)
        _write_json(trace_path, {"config_hash": meta["config_hash"], "loss": tr.loss_trace})

    try:
        trainer.run(examples, callbacks=[checkpoint])
    except TrainingError as exc:
        _write_json(trace_path, {"config_hash": meta["config_hash"], "loss": trainer.loss_trace,
                                 "aborted": str(exc)})
        raise
    if trainer.epoch == 0 or not ckpt.exists():
        save_checkpoint(trainer, ckpt, meta)
        _write_json(trace_path, {"config_hash": meta["config_hash"], "loss": trainer.loss_trace})
    return {"checkpoint": str(ckpt), "epochs": trainer.epoch, "examples": len(examples),
            "final_loss": trainer.loss_trace[-1] if trainer.loss_trace else None}


def _eval_inputs(cfg: PipelineConfig, args):
    dataset = _load_bundle(cfg, args.force)
    registry = _load_registry(cfg, args.force)
    try:
        trainer = _load_trainer(cfg, args.force)
    except CheckpointError as exc:
        raise CliError("artifact", str(exc)) from None
    pairs = dataset.test if cfg["eval"]["split"] == "test" else dataset.train
    if not pairs:
        raise CliError("data", f"no {cfg['eval']['split']} pairs to evaluate")
    _, queries, qrels = eval_queries(dataset, pairs)
    return dataset, registry, trainer.model, queries, qrels


def cmd_eval(cfg: PipelineConfig, args) -> dict:
    dataset, registry, model, queries, qrels = _eval_inputs(cfg, args)
    ev = cfg["eval"]
    sampler = SamplerConfig(args.steps or cfg.steps, registry.length,
                            args.strategy or cfg["sampler"]["strategy"], cfg.seed)
    run = evaluate(model, registry, dataset.vocab, queries, qrels, sampler,
                   args.mode or ev["mode"], ev["k"], ev["n_variants"], ev["scoring"])
    report = {**run.report(), "config_hash": cfg.stage_hash("eval"), "split": ev["split"],
              "queries": len(queries)}
    path = cfg.workdir / REPORTS / "eval.json"
    _write_json(path, report)
    if args.rankings:
        _write_json(cfg.workdir / REPORTS / "rankings.json", run.ranked)
    return {"report": str(path), **{k: report[k] for k in
                                    ("recall@1", "recall@5", "recall@10", "mrr@10",
                                     "mean_latency_ms", "throughput_qps")}}


def cmd_sweep(cfg: PipelineConfig, args) -> dict:
    dataset, registry, model, queries, qrels = _eval_inputs(cfg, args)
    ev = cfg["eval"]
    mode = args.mode or ev["mode"]
    stamp = cfg.stage_hash("eval")
    if args.strategy == "all":
        steps = args.steps[0] if args.steps else cfg.steps
        rows = strategy_ablation(model, registry, dataset.vocab, queries, qrels, steps,
                                 seed=cfg.seed, mode=mode, k=ev["k"])
        for row in rows:
            row.update(steps=steps, mode=mode, config_hash=stamp)
        path = cfg.workdir / REPORTS / "ablation.json"
        _write_json(path, rows)
        return {"report": str(path), "rows": len(rows)}
    steps_list = args.steps or cfg.sweep_steps
    bad = [t for t in steps_list if t < 1]
    if bad:
        raise CliError("usage", f"steps must be >= 1, got {bad}")
    strategy = args.strategy or cfg["sampler"]["strategy"]
    points = tradeoff_sweep(model, registry, dataset.vocab, queries, qrels, steps_list,
                            strategy=strategy, seed=cfg.seed, mode=mode, k=ev["k"])
    out = [{**p.to_json(), "strategy": strategy, "mode": mode, "config_hash": stamp}
           for p in points]
    path = cfg.workdir / REPORTS / "sweep.json"
    _write_json(path, out)
    return {"report": str(path), "points": len(out)}


def cmd_synth(args) -> dict:
    """Write a synthetic corpus plus a ready-to-run config next to it."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = synthetic_corpus(n_docs=args.n_docs, seed=args.seed if args.seed is not None else 0)
    write_jsonl(out / "corpus.jsonl", to_records(docs))
    config = out / "config.yaml"
    if not config.exists() or args.force:
        config.write_text(yaml.safe_dump({"data": {"corpus": "corpus.jsonl"},
                                          "docid": {"kind": "linguistic"},
                                          "workdir": "work"}, sort_keys=False))
    return {"corpus": str(out / "corpus.jsonl"), "config": str(config), "documents": len(docs)}


COMMANDS = {"ingest": cmd_ingest, "build-docids": cmd_build_docids, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the verb; the verb's copy must not reset them
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML config", **kw)
    common.add_argument("--seed", type=int, help="override the config seed", **kw)
    common.add_argument("--workdir", help="override the config workdir", **kw)
    common.add_argument("--force", action="store_true",
                        help="accept artifacts built from a different config", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="maskret", parents=[_common(suppress=False)],
                                     description="Generative retrieval with masked diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load corpus, add pseudo-queries, split")
    sub.add_parser("build-docids", parents=[common], help="assign DocIDs and write the registry")
    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint.bin")
    for name in ("eval", "sweep"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--steps", type=int, nargs="+" if name == "sweep" else None,
                       help="denoising steps (sweep: list of T)")
        p.add_argument("--strategy", help="re-masking strategy" + (", or 'all'" if name == "sweep" else ""))
        p.add_argument("--mode", choices=["vanilla", "query_aug", "intermediate", "both"])
        if name == "eval":
            p.add_argument("--rankings", action="store_true", help="also write per-query rankings")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic toy corpus and config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-docs", type=int, default=200)
    return parser


def _run(args) -> dict:
    if args.command == "synth":
        return cmd_synth(args)
    if not args.config:
        raise CliError("usage", f"{args.command} needs --config")
    cfg = load_config(args.config, seed=args.seed, workdir=args.workdir)
    strategy = getattr(args, "strategy", None)
    if strategy is not None and not (strategy == "all" and args.command == "sweep"):
        try:
            SamplerConfig(1, 1, strategy)
        except ValueError:
            raise CliError("usage", f"unknown strategy {strategy!r}") from None
    if getattr(args, "steps", None) is not None and args.command == "eval" and args.steps < 1:
        raise CliError("usage", "steps must be >= 1")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    return COMMANDS[args.command](cfg, args)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = _run(args)
    except CliError as exc:
        kind, message = exc.kind, str(exc)
    except ConfigError as exc:
        kind, message = "config", str(exc)
    except CorpusError as exc:
        kind, message = "data", str(exc)
    except DocIdError as exc:
        kind, message = "artifact" if args.command != "build-docids" else "data", str(exc)
    except TrainingError as exc:
        kind, message = "train", str(exc)
    except CheckpointError as exc:
        kind, message = "artifact", str(exc)
    except OSError as exc:
        kind, message = "io", f"{exc.filename or ''}: {exc.strerror or exc}"
    else:
        print(json.dumps(summary, sort_keys=True))
        return 0
    print(f"maskret:error:{kind}: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())

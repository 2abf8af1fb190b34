"""Pipeline configuration: YAML schema, up-front validation and per-stage config hashes."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .denoiser import DenoiserConfig, TrainConfig
from .sampler import STRATEGIES


class ConfigError(ValueError):
    pass


_REQUIRED = object()

# section -> key -> (accepted types, default)
SCHEMA: dict[str, dict[str, tuple[tuple[type, ...], Any]]] = {
    "data": {
        "corpus": ((str,), _REQUIRED),
        "queries": ((str, type(None)), None),
        "pairs": ((str, type(None)), None),
        "pseudo_queries": ((int,), 10),
        "holdout_fraction": ((float, int), 0.2),
    },
    "docid": {
        "kind": ((str,), "linguistic"),
        "levels": ((int,), 3),
        "sizes": ((list,), [32, 32, 32]),
        "dim": ((int,), 16),
        "max_tokens": ((int,), 12),
        "iters": ((int,), 50),
        "tol": ((float, int), 1e-6),
        "retries": ((int,), 10),
    },
    "model": {
        "layers": ((int,), 2),
        "width": ((int,), 128),
        "heads": ((int,), 4),
        "ffn_mult": ((int,), 4),
        "max_query_len": ((int,), 16),
    },
    "train": {
        "lr": ((float, int), 5e-4),
        "batch_size": ((int,), 32),
        "epochs": ((int,), 30),
        "weight_decay": ((float, int), 0.01),
        "clip_norm": ((float, int), 1.0),
        "include_documents": ((bool,), True),
    },
    "sampler": {
        "steps": ((int, type(None)), None),  # None: one token per step
        "strategy": ((str,), "maskgit_plus"),
    },
    "eval": {
        "split": ((str,), "test"),
        "mode": ((str,), "vanilla"),
        "k": ((int,), 10),
        "n_variants": ((int,), 4),
        "scoring": ((str,), "pll"),
        "sweep_steps": ((list, type(None)), None),
    },
}
TOP_LEVEL = {"seed": ((int,), 0), "workdir": ((str,), "work")}

# which sections each stage's artifacts depend on
STAGES = {
    "ingest": ("data",),
    "docids": ("data", "docid"),
    "train": ("data", "docid", "model", "train"),
    "eval": ("data", "docid", "model", "train", "sampler", "eval"),
}


def _is_type(value, types) -> bool:
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    def __getitem__(self, section: str) -> dict:
        return self.raw[section]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def workdir(self) -> Path:
        return self.resolve(self.raw["workdir"])

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def docid_len(self) -> int:
        d = self.raw["docid"]
        return d["levels"] if d["kind"] == "learnable" else d["max_tokens"]

    @property
    def codebook_sizes(self) -> list[int]:
        d = self.raw["docid"]
        return list(d["sizes"]) if d["kind"] == "learnable" else []

    @property
    def steps(self) -> int:
        return self.raw["sampler"]["steps"] or self.docid_len

    @property
    def sweep_steps(self) -> list[int]:
        given = self.raw["eval"]["sweep_steps"]
        if given:
            return list(given)
        l = self.docid_len
        return sorted({2 ** i for i in range(l.bit_length()) if 2 ** i < l} | {l})

    def model_kwargs(self) -> dict:
        return dict(self.raw["model"])

    def train_config(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(lr=float(t["lr"]), batch_size=t["batch_size"], epochs=t["epochs"],
                           seed=self.seed, weight_decay=float(t["weight_decay"]),
                           clip_norm=float(t["clip_norm"]))

    def stage_hash(self, stage: str) -> str:
        """Hash of everything a stage's artifacts depend on; inputs are hashed by content."""
        payload = {"seed": self.seed}
        for section in STAGES[stage]:
            payload[section] = self.raw[section]
        payload["inputs"] = {key: _file_digest(self.resolve(self.raw["data"][key]))
                             for key in ("corpus", "queries", "pairs")
                             if self.raw["data"][key] is not None}
        if stage == "ingest":
            # the vocabulary reserves codebook tokens, so learnable sizes matter from the start
            payload["codebook_sizes"] = self.codebook_sizes
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _file_digest(path: Path) -> str:
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except OSError:
        return "missing"


def _fill(section: str, given: Any, schema: dict) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"[{section}] must be a mapping")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    out = {}
    for key, (types, default) in schema.items():
        if key not in given:
            if default is _REQUIRED:
                raise ConfigError(f"[{section}] missing required key {key!r}")
            out[key] = copy.deepcopy(default)
            continue
        value = given[key]
        if not _is_type(value, types):
            names = "/".join("null" if t is type(None) else t.__name__ for t in types)
            raise ConfigError(f"[{section}] {key}: expected {names}, got {value!r}")
        out[key] = value
    return out


def _check_ranges(cfg: dict) -> None:
    data, docid, ev, sampler = cfg["data"], cfg["docid"], cfg["eval"], cfg["sampler"]
    if data["pseudo_queries"] < 0:
        raise ConfigError("[data] pseudo_queries must be >= 0")
    if not 0.0 < data["holdout_fraction"] < 1.0:
        raise ConfigError("[data] holdout_fraction must be in (0, 1)")
    if docid["kind"] not in ("learnable", "linguistic"):
        raise ConfigError(f"[docid] kind must be learnable or linguistic, got {docid['kind']!r}")
    if docid["kind"] == "learnable":
        sizes = docid["sizes"]
        if len(sizes) != docid["levels"]:
            raise ConfigError(f"[docid] {len(sizes)} sizes given for {docid['levels']} levels")
        if not all(_is_type(k, (int,)) and k >= 1 for k in sizes):
            raise ConfigError("[docid] sizes must be positive integers")
        if docid["dim"] < 1:
            raise ConfigError("[docid] dim must be >= 1")
    if docid["max_tokens"] < 1 or docid["levels"] < 1:
        raise ConfigError("[docid] max_tokens and levels must be >= 1")
    if sampler["steps"] is not None and sampler["steps"] < 1:
        raise ConfigError("[sampler] steps must be >= 1")
    if sampler["strategy"] not in {s.value for s in STRATEGIES}:
        raise ConfigError(f"[sampler] unknown strategy {sampler['strategy']!r}")
    if ev["split"] not in ("test", "train"):
        raise ConfigError("[eval] split must be test or train")
    if ev["mode"] not in ("vanilla", "query_aug", "intermediate", "both"):
        raise ConfigError(f"[eval] unknown mode {ev['mode']!r}")
    if ev["scoring"] not in ("pll", "trajectory"):
        raise ConfigError(f"[eval] unknown scoring {ev['scoring']!r}")
    if ev["k"] < 1 or ev["n_variants"] < 1:
        raise ConfigError("[eval] k and n_variants must be >= 1")
    if ev["sweep_steps"] is not None and not all(_is_type(t, (int,)) and t >= 1
                                                 for t in ev["sweep_steps"]):
        raise ConfigError("[eval] sweep_steps must be positive integers")
    try:
        length = docid["levels"] if docid["kind"] == "learnable" else docid["max_tokens"]
        DenoiserConfig(vocab_size=8, docid_len=length, **cfg["model"])
        TrainConfig(lr=float(cfg["train"]["lr"]), batch_size=cfg["train"]["batch_size"],
                    epochs=cfg["train"]["epochs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model/train] {exc}") from None


def validate(raw: Any, base_dir: str | Path = ".") -> PipelineConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(SCHEMA) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = {section: _fill(section, raw.get(section), schema) for section, schema in SCHEMA.items()}
    cfg.update(_fill("top-level", {k: raw[k] for k in TOP_LEVEL if k in raw}, TOP_LEVEL))
    _check_ranges(cfg)
    return PipelineConfig(cfg, Path(base_dir))


def load_config(path: str | Path, seed: int | None = None,
                workdir: str | None = None) -> PipelineConfig:
    """Parse and fully validate a YAML config; CLI overrides are applied before checking."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({' '.join(str(exc).split())})") from None
    raw = raw if raw is not None else {}
    if isinstance(raw, dict):
        if seed is not None:
            raw["seed"] = seed
        if workdir is not None:
            raw["workdir"] = str(Path(workdir).resolve())
    return validate(raw, path.parent.resolve())


def check_inputs(cfg: PipelineConfig) -> None:
    for key in ("corpus", "queries", "pairs"):
        p = cfg.resolve(cfg["data"][key])
        if p is not None and not p.is_file():
            raise ConfigError(f"[data] {key}: no such file {p}")

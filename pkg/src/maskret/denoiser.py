"""Bidirectional transformer denoiser p(z_i | query, partially masked DocID).

The model has no time input: predictions depend on the query and the unmasked
DocID tokens only.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Vocabulary
from .diffusion import MaskedSequence, sample_noise

PAD_ID, MASK_ID, SEP_ID = Vocabulary.pad_id, Vocabulary.mask_id, Vocabulary.sep_id

CHECKPOINT_MAGIC = b"MRCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    docid_len: int
    max_query_len: int = 16
    layers: int = 2
    width: int = 128
    heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.docid_len < 1 or self.layers < 1 or self.max_query_len < 1:
            raise ValueError("docid_len, layers and max_query_len must be positive")

    @property
    def seq_len(self) -> int:
        return self.max_query_len + 1 + self.docid_len


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr > 0, batch_size >= 1, epochs >= 0")


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(cfg.width)
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.width)
        self.ln2 = nn.LayerNorm(cfg.width)
        self.ff_in = nn.Linear(cfg.width, cfg.ffn_mult * cfg.width)
        self.ff_out = nn.Linear(cfg.ffn_mult * cfg.width, cfg.width)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(w, dim=-1)
        q, k, v = (t.view(b, n, self.heads, w // self.heads).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-2, -1) / math.sqrt(w // self.heads)
        # full bidirectional attention; only query padding is hidden
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = scores.softmax(dim=-1) @ v
        x = x + self.proj(att.transpose(1, 2).reshape(b, n, w))
        return x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Embedding(cfg.seq_len, cfg.width)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.vocab_size)

    def forward(self, query: torch.Tensor, docid: torch.Tensor) -> torch.Tensor:
        """Log-probabilities of shape (B, l, V) given padded queries (B, Lq) and DocIDs (B, l)."""
        b = query.shape[0]
        sep = torch.full((b, 1), SEP_ID, dtype=torch.long)
        tokens = torch.cat([query, sep, docid], dim=1)
        key_mask = torch.ones_like(tokens, dtype=torch.bool)
        key_mask[:, :query.shape[1]] = query != PAD_ID
        pos = torch.arange(tokens.shape[1])
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x, key_mask)
        logits = self.head(self.ln_f(x[:, -docid.shape[1]:]))
        logits[..., MASK_ID] = float("-inf")
        return logits.log_softmax(dim=-1)


def init_parameters(cfg: DenoiserConfig, rng_seed: int = 0) -> Denoiser:
    """Build a denoiser with N(0, 1/width) weights, zero biases and unit layer norms."""
    gen = torch.Generator().manual_seed(rng_seed)
    model = Denoiser(cfg)
    std = 1.0 / math.sqrt(cfg.width)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln_"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * std)
    return model


def pad_queries(queries: Sequence[Sequence[int]], max_len: int, strict: bool = True) -> torch.Tensor:
    out = torch.full((len(queries), max_len), PAD_ID, dtype=torch.long)
    for row, q in enumerate(queries):
        if len(q) > max_len:
            if strict:
                raise ValueError(f"query of {len(q)} tokens exceeds max_query_len={max_len}")
            q = q[:max_len]
        out[row, :len(q)] = torch.as_tensor(list(q), dtype=torch.long)
    return out


@torch.no_grad()
def predict_logits(model: Denoiser, query_tokens: Sequence[int],
                   masked_docid: MaskedSequence | Sequence[int]) -> np.ndarray:
    """Normalised log-distributions (l, V) at every DocID position."""
    tokens = masked_docid.tokens if isinstance(masked_docid, MaskedSequence) else masked_docid
    if len(tokens) != model.cfg.docid_len:
        raise ValueError(f"DocID has {len(tokens)} slots, model expects {model.cfg.docid_len}")
    q = pad_queries([query_tokens], model.cfg.max_query_len)
    z = torch.as_tensor([list(tokens)], dtype=torch.long)
    return model(q, z)[0].double().numpy()


def predict_proba(model: Denoiser, query_tokens: Sequence[int],
                  masked_docid: MaskedSequence | Sequence[int]) -> np.ndarray:
    return np.exp(predict_logits(model, query_tokens, masked_docid))


# -- objective -----------------------------------------------------------------

def draw_batch_noise(batch: int, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mask = np.zeros((batch, length), dtype=bool)
    weight = np.zeros(batch)
    for row in range(batch):
        draw = sample_noise(length, rng)
        mask[row], weight[row] = draw.mask, draw.weight
    return mask, weight


def batch_loss(model: Denoiser, queries: torch.Tensor, docids: torch.Tensor,
               rng: np.random.Generator | None = None,
               noise: tuple[np.ndarray, np.ndarray] | None = None) -> torch.Tensor:
    """Mean over the batch of the weighted masked cross-entropy; queries are never masked.

    ``noise`` pins the (mask, weight) draw instead of sampling it from ``rng``.
    """
    mask, weight = noise if noise is not None else draw_batch_noise(*docids.shape, rng)
    mask_t = torch.from_numpy(mask)
    noisy = docids.masked_fill(mask_t, MASK_ID)
    logp = model(queries, noisy)
    nll = -logp.gather(-1, docids[..., None])[..., 0]
    w = torch.as_tensor(weight, dtype=logp.dtype)[:, None] * mask_t.to(logp.dtype)
    return (w * nll).sum(dim=1).mean()


def loss_and_gradients(model: Denoiser, batch: Sequence[tuple[Sequence[int], Sequence[int]]],
                       rng: np.random.Generator | None = None,
                       noise: tuple[np.ndarray, np.ndarray] | None = None,
                       ) -> tuple[float, dict[str, torch.Tensor]]:
    if not batch:
        raise ValueError("empty batch")
    queries = pad_queries([q for q, _ in batch], model.cfg.max_query_len, strict=False)
    docids = torch.as_tensor([list(z) for _, z in batch], dtype=torch.long)
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, queries, docids, rng, noise)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return loss.item(), grads


# -- training ------------------------------------------------------------------

@dataclass
class Trainer:
    """Owns everything a resumed run needs: weights, optimizer moments, RNG and epoch."""

    model: Denoiser
    train_cfg: TrainConfig
    rng: np.random.Generator = None
    optimizer: torch.optim.Optimizer = None
    epoch: int = 0
    loss_trace: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.train_cfg.seed)
        if self.optimizer is None:
            self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=self.train_cfg.lr,
                                               betas=tuple(self.train_cfg.betas),
                                               weight_decay=self.train_cfg.weight_decay)

    def run(self, examples: Sequence[tuple[Sequence[int], Sequence[int]]],
            epochs: int | None = None,
            callbacks: Iterable[Callable[["Trainer", float], None]] = ()) -> list[float]:
        """Train up to ``epochs`` total epochs (default: the configured count)."""
        if not examples:
            raise TrainingError("no training examples")
        target = self.train_cfg.epochs if epochs is None else epochs
        cfg = self.model.cfg
        queries = pad_queries([q for q, _ in examples], cfg.max_query_len, strict=False)
        docids = torch.as_tensor([list(z) for _, z in examples], dtype=torch.long)
        bs = self.train_cfg.batch_size
        self.model.train()
        while self.epoch < target:
            order = torch.from_numpy(self.rng.permutation(len(examples)))
            total, count = 0.0, 0
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                loss = batch_loss(self.model, queries[idx], docids[idx], self.rng)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {self.epoch + 1}")
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if self.train_cfg.clip_norm:
                    nn.utils.clip_grad_norm_(self.model.parameters(), self.train_cfg.clip_norm)
                self.optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            epoch_loss = total / count
            self.epoch += 1
            self.loss_trace.append(epoch_loss)
            if epoch_loss > 10.0 * self.loss_trace[0]:
                raise TrainingError(f"diverged: epoch {self.epoch} loss {epoch_loss:.4g} exceeds "
                                    f"10x the first epoch ({self.loss_trace[0]:.4g})")
            for cb in callbacks:
                cb(self, epoch_loss)
        self.model.eval()
        return self.loss_trace


def train(model: Denoiser, examples, train_cfg: TrainConfig,
          callbacks: Iterable[Callable[[Trainer, float], None]] = ()) -> tuple[Denoiser, list[float]]:
    trainer = Trainer(model, train_cfg)
    trace = trainer.run(examples, callbacks=callbacks)
    return trainer.model, trace


# -- checkpoints -----------------------------------------------------------------
# layout: magic, version byte, u32 header length, JSON header, raw little-endian tensors

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _optimizer_tensors(trainer: Trainer) -> tuple[dict[str, torch.Tensor], dict]:
    names = {id(p): n for n, p in trainer.model.named_parameters()}
    tensors, steps = {}, {}
    for p, state in trainer.optimizer.state.items():
        name = names[id(p)]
        for key, value in state.items():
            if key == "step":
                steps[name] = float(value)
            else:
                tensors[f"opt/{name}/{key}"] = value
    group = {k: v for k, v in trainer.optimizer.param_groups[0].items() if k != "params"}
    return tensors, {"steps": steps, "group": group}


def save_checkpoint(trainer: Trainer | Denoiser, path: str | Path,
                    meta: dict | None = None) -> None:
    if isinstance(trainer, Denoiser):
        model, extra = trainer, None
    else:
        model, extra = trainer.model, trainer
    tensors = {f"param/{n}": p.detach() for n, p in model.named_parameters()}
    header: dict = {"config": asdict(model.cfg), "meta": meta or {}}
    if extra is not None:
        opt_tensors, opt_meta = _optimizer_tensors(extra)
        tensors.update(opt_tensors)
        header.update(train_config=asdict(extra.train_cfg), epoch=extra.epoch,
                      loss_trace=extra.loss_trace, rng_state=extra.rng.bit_generator.state,
                      optimizer=opt_meta)
    layout, offset, chunks = [], 0, []
    for name, t in tensors.items():
        raw = t.contiguous().cpu().numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        layout.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                       "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        chunks.append(raw)
    header["tensors"] = layout
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint_header(path: str | Path) -> dict:
    return _read(path)[0]


def _read(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack("<BI", raw[4:9])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[9:9 + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    payload = raw[9 + head_len:]
    tensors = {}
    for item in header["tensors"]:
        end = item["offset"] + item["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(payload[item["offset"]:end], dtype=item["dtype"]).reshape(item["shape"])
        tensors[item["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path: str | Path, expected_config: DenoiserConfig | None = None,
                    ) -> Trainer:
    """Restore a trainer; checkpoints written from a bare model get a fresh optimizer."""
    header, tensors = _read(path)
    cfg = DenoiserConfig(**header["config"])
    if expected_config is not None and cfg != expected_config:
        diff = {k: (v, getattr(expected_config, k)) for k, v in asdict(cfg).items()
                if getattr(expected_config, k) != v}
        raise CheckpointError(f"{path}: config mismatch (file, expected): {diff}")
    model = Denoiser(cfg)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            src = tensors.get(f"param/{name}")
            if src is None or src.shape != p.shape:
                raise CheckpointError(f"{path}: missing or misshapen parameter {name}")
            p.copy_(src)
    model.eval()
    if "train_config" not in header:
        return Trainer(model, TrainConfig(), meta=header.get("meta", {}))
    tc = header["train_config"]
    tc["betas"] = tuple(tc["betas"])
    trainer = Trainer(model, TrainConfig(**tc), epoch=header["epoch"],
                      loss_trace=list(header["loss_trace"]), meta=header.get("meta", {}))
    trainer.rng.bit_generator.state = header["rng_state"]
    opt = header["optimizer"]
    state = {}
    for idx, (name, _) in enumerate(model.named_parameters()):
        if name not in opt["steps"]:
            continue
        entry = {"step": torch.tensor(opt["steps"][name])}
        for key in ("exp_avg", "exp_avg_sq"):
            entry[key] = tensors[f"opt/{name}/{key}"]
        state[idx] = entry
    group = dict(opt["group"])
    group["betas"] = tuple(group["betas"])
    group["params"] = list(range(len(params)))
    trainer.optimizer.load_state_dict({"state": state, "param_groups": [group]})
    return trainer

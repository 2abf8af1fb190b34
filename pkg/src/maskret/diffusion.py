"""Masked diffusion over DocID tokens: forward corruption, reverse-step counts, loss estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import Vocabulary

MASK_ID = Vocabulary.mask_id


@dataclass(frozen=True)
class MaskedSequence:
    tokens: tuple[int, ...]
    mask_id: int = MASK_ID

    @property
    def mask_flags(self) -> tuple[bool, ...]:
        return tuple(tok == self.mask_id for tok in self.tokens)

    @property
    def n_masked(self) -> int:
        return sum(self.mask_flags)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def all_masked(cls, length: int, mask_id: int = MASK_ID) -> "MaskedSequence":
        return cls((mask_id,) * length, mask_id)


def _check_t(t: float, allow_zero: bool = False) -> None:
    lo_ok = t >= 0.0 if allow_zero else t > 0.0
    if not (lo_ok and t <= 1.0):
        raise ValueError(f"noise level must lie in {'[0' if allow_zero else '(0'}, 1], got {t}")


def forward_mask(x0: Sequence[int], t: float, rng: np.random.Generator,
                 mask_id: int = MASK_ID) -> MaskedSequence:
    """Replace each token by MASK independently with probability ``t`` (t=0 is the identity)."""
    _check_t(t, allow_zero=True)
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 == mask_id):
        raise ValueError("clean sequence already contains MASK")
    hit = rng.random(len(x0)) < t
    return MaskedSequence(tuple(int(v) for v in np.where(hit, mask_id, x0)), mask_id)


def _round_half_up(x: float) -> int:
    # absorb float error so that e.g. 12 * (1 - 1/4) lands exactly on 9
    return int(math.floor(x + 0.5 + 1e-9))


def remask_count(length: int, t_from: float, t_to: float) -> tuple[int, int]:
    """(tokens to finalize, tokens left masked) for one reverse step from t_from to t_to.

    The expected fraction s/t of the currently masked tokens stays masked; counts
    are the deterministic rounding of ``length * t``.
    """
    if not 0.0 <= t_to < t_from <= 1.0:
        raise ValueError(f"need 0 <= t_to < t_from <= 1, got {t_from} -> {t_to}")
    remain = _round_half_up(length * t_to)
    finalize = _round_half_up(length * t_from) - remain
    return finalize, remain


def time_grid(steps: int) -> list[float]:
    if steps < 1:
        raise ValueError("need at least one denoising step")
    return [1.0 - k / steps for k in range(steps)] + [0.0]


def remask_schedule(length: int, steps: int) -> list[tuple[int, int]]:
    grid = time_grid(steps)
    return [remask_count(length, grid[k], grid[k + 1]) for k in range(steps)]


# -- training objective -------------------------------------------------------

@dataclass(frozen=True)
class NoiseDraw:
    t: float
    mask: np.ndarray  # bool, per DocID position
    weight: float     # multiplier on each masked position's negative log-likelihood


def sample_noise(length: int, rng: np.random.Generator) -> NoiseDraw:
    """Draw (t, mask pattern) for one training example, conditioned on a non-empty mask.

    Empty patterns are rejected and both t and the mask are redrawn. Since
    P(non-empty) = l / (l + 1) for t ~ U(0, 1], scaling 1/t by that probability keeps
    the estimate unbiased for the integral objective.
    """
    if length < 1:
        raise ValueError("DocID must have at least one position")
    while True:
        t = 1.0 - rng.random()  # (0, 1]
        mask = rng.random(length) < t
        if mask.any():
            return NoiseDraw(t, mask, length / (length + 1) / t)


def loss_estimate(x0_docid: Sequence[int], condition_tokens: Sequence[int],
                  predict_fn: Callable[[Sequence[int], MaskedSequence], np.ndarray],
                  rng: np.random.Generator, mask_id: int = MASK_ID,
                  ) -> tuple[float, np.ndarray]:
    """Single-draw estimate of the weighted masked cross-entropy.

    Only DocID positions are corrupted; ``condition_tokens`` reach ``predict_fn``
    untouched. Returns the loss and its gradient with respect to the per-position
    log-probabilities (shape ``(l, V)``).
    """
    x0 = np.asarray(x0_docid, dtype=np.int64)
    if len(x0) == 0:
        raise ValueError("empty DocID")
    draw = sample_noise(len(x0), rng)
    noisy = MaskedSequence(tuple(int(v) for v in np.where(draw.mask, mask_id, x0)), mask_id)
    probs = np.asarray(predict_fn(tuple(condition_tokens), noisy), dtype=float)
    if probs.ndim != 2 or probs.shape[0] != len(x0):
        raise ValueError(f"predict_fn returned shape {probs.shape}, expected ({len(x0)}, V)")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5, rtol=0.0) or np.any(probs < 0):
        raise ValueError("predict_fn returned non-normalised distributions")
    rows = np.flatnonzero(draw.mask)
    picked = probs[rows, x0[rows]]
    with np.errstate(divide="ignore"):
        nll = -np.log(picked)
    loss = float(draw.weight * nll.sum())
    grad = np.zeros_like(probs)
    grad[rows, x0[rows]] = -draw.weight
    return loss, grad

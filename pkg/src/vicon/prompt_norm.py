"""Per-prompt channel-wise standardisation.

Statistics come from the condition frames only; the same affine map is
applied to conditions, qois and the question so the operator seen by the
model is consistent within a prompt.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .patching import C_UNION, Frame

SIGMA_FLOOR = 1e-4


@dataclass
class PromptStats:
    mu: np.ndarray
    sigma: np.ndarray
    channel_mask: np.ndarray

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "channel_mask": self.channel_mask.tolist()}


def _stack(frames) -> np.ndarray:
    arrs = [f.values if isinstance(f, Frame) else np.asarray(f) for f in frames]
    return np.stack(arrs) if arrs else np.empty((0,))


def compute_stats(conds: Sequence[Frame] | np.ndarray, channel_mask=None,
                  floor: float = SIGMA_FLOOR) -> PromptStats:
    """Population mean/std per channel over every point of every condition."""
    if isinstance(conds, np.ndarray):
        data = conds
    else:
        conds = list(conds)
        if channel_mask is None and conds and isinstance(conds[0], Frame):
            channel_mask = conds[0].channel_mask
        data = _stack(conds)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("compute_stats needs at least one condition frame")
    c = data.shape[-1]
    mask = np.ones(c, bool) if channel_mask is None else np.asarray(channel_mask, bool)
    flat = data.reshape(-1, c).astype(np.float64)
    mu = flat.mean(axis=0)
    sigma = np.maximum(np.sqrt(((flat - mu) ** 2).mean(axis=0)), floor)
    mu = np.where(mask, mu, 0.0)
    sigma = np.where(mask, sigma, 1.0)
    return PromptStats(mu, sigma, mask)


def normalize(x: np.ndarray, stats: PromptStats) -> np.ndarray:
    """``(x - mu) / sigma`` on valid channels; masked channels pass through."""
    x = np.asarray(x)
    out = (x - stats.mu) / stats.sigma
    return np.where(stats.channel_mask, out, x).astype(x.dtype, copy=False)


def denormalize(x: np.ndarray, stats: PromptStats) -> np.ndarray:
    x = np.asarray(x)
    out = x * stats.sigma + stats.mu
    return np.where(stats.channel_mask, out, x).astype(x.dtype, copy=False)


def normalize_prompt(conds: np.ndarray, qois: np.ndarray, question: np.ndarray | None,
                     stats: PromptStats):
    """Apply one set of stats to every frame of a prompt."""
    nq = None if question is None else normalize(question, stats)
    return normalize(conds, stats), normalize(qois, stats), nq


def denormalize_prediction(pred: np.ndarray, stats: PromptStats) -> np.ndarray:
    return denormalize(pred, stats)


def default_mask() -> np.ndarray:
    return np.ones(C_UNION, dtype=bool)

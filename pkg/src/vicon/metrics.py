"""Rollout error metrics: std-scaled and raw L2, turbulence kinetic energy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .patching import U_X, U_Y, loss_channels
from .prompt_norm import SIGMA_FLOOR


def _valid(mask, c: int) -> np.ndarray:
    return loss_channels(np.ones(c, bool) if mask is None else mask)


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def gt_sigma(gt_frames: np.ndarray, floor: float = SIGMA_FLOOR) -> np.ndarray:
    """Per-channel population std over a stack of ground-truth frames, floored."""
    flat = np.asarray(gt_frames, dtype=np.float64).reshape(-1, np.shape(gt_frames)[-1])
    return np.maximum(flat.std(axis=0), floor)


def rel_l2(pred: np.ndarray, gt: np.ndarray, sigma_gt: np.ndarray, mask=None) -> float:
    """RMS over valid channels and space of ``(pred - gt) / sigma_gt``."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _check(pred, gt)
    valid = _valid(mask, gt.shape[-1])
    err = (pred - gt)[..., valid] / np.asarray(sigma_gt, np.float64)[valid]
    return float(np.sqrt(np.mean(err ** 2)))


def abs_l2(pred: np.ndarray, gt: np.ndarray, mask=None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    _check(pred, gt)
    valid = _valid(mask, gt.shape[-1])
    return float(np.sqrt(np.mean((pred - gt)[..., valid] ** 2)))


def tke_field(series: np.ndarray) -> np.ndarray:
    """``0.5 * (mean_t u_x'^2 + mean_t u_y'^2)`` per grid point."""
    u = np.asarray(series, np.float64)[..., [U_X, U_Y]]
    fluct = u - u.mean(axis=0)
    return 0.5 * (fluct ** 2).mean(axis=0).sum(axis=-1)


def tke_mae(pred_series: np.ndarray, gt_series: np.ndarray, mask=None) -> float:
    pred_series, gt_series = np.asarray(pred_series), np.asarray(gt_series)
    _check(pred_series, gt_series)
    if mask is not None and not (mask[U_X] and mask[U_Y]):
        raise ValueError("TKE needs both velocity channels (u_x, u_y) to be valid")
    if gt_series.ndim != 4 or gt_series.shape[0] < 2:
        raise ValueError("TKE needs a series of at least two [Nx, Ny, C] frames")
    return float(np.mean(np.abs(tke_field(pred_series) - tke_field(gt_series))))


@dataclass
class MetricsReport:
    per_step: list[dict]
    aggregates: dict
    tke_mae: float | None = None
    sigma_gt: list[float] | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_step": self.per_step, "aggregates": self.aggregates,
                "tke_mae": self.tke_mae, "sigma_gt": self.sigma_gt, "config": self.config}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        return cls(d["per_step"], d["aggregates"], d.get("tke_mae"), d.get("sigma_gt"),
                   d.get("config", {}))


def aggregate(per_step: Sequence[Mapping], key: str = "rel_l2") -> dict:
    """Step 1/5/10, last step and the unweighted all-step average."""
    vals = [float(s[key]) for s in per_step]
    if not vals:
        return {"step1": None, "step5": None, "step10": None, "last": None, "all_avg": None}

    def at(k):
        return vals[k - 1] if len(vals) >= k else None

    return {"step1": at(1), "step5": at(5), "step10": at(10), "last": vals[-1],
            "all_avg": float(np.mean(vals))}


def evaluate_rollout(predictions: Mapping[int, np.ndarray], ground_truth: np.ndarray,
                     start: int = 10, mask=None, with_tke: bool = False,
                     config: dict | None = None) -> MetricsReport:
    """Score predicted frames ``start, start+1, ...`` against the trajectory.

    ``start`` is the 0-based index of the first frame after the ``I_0``
    given ones.  Indices that were never predicted are skipped.  The
    relative scale is the per-channel std of the ground-truth rollout frames.
    """
    ground_truth = np.asarray(ground_truth)
    idx = [t for t in range(start, ground_truth.shape[0]) if t in predictions]
    gt_window = ground_truth[start:]
    sigma = gt_sigma(gt_window)
    per_step = []
    for t in idx:
        per_step.append({"step": t - start + 1, "frame": t,
                         "abs_l2": abs_l2(predictions[t], ground_truth[t], mask),
                         "rel_l2": rel_l2(predictions[t], ground_truth[t], sigma, mask)})
    aggs = {"rel_l2": aggregate(per_step, "rel_l2"), "abs_l2": aggregate(per_step, "abs_l2")}
    tke = None
    if with_tke and len(idx) >= 2:
        tke = tke_mae(np.stack([predictions[t] for t in idx]), ground_truth[idx], mask)
    return MetricsReport(per_step, aggs, tke, sigma.tolist(), dict(config or {}))

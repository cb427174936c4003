"""Frames, the 7-slot channel union, and patch tokenisation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHANNEL_NAMES = (
    "density", "u_x", "u_y", "pressure", "vorticity", "scalar", "node_type",
)
C_UNION = len(CHANNEL_NAMES)
DENSITY, U_X, U_Y, PRESSURE, VORTICITY, SCALAR, NODE_TYPE = range(C_UNION)


@dataclass
class Frame:
    """One solution snapshot in the union channel layout."""

    values: np.ndarray
    channel_mask: np.ndarray
    time_index: int = 0
    dt_record: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.channel_mask = np.asarray(self.channel_mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[-1] != C_UNION:
            raise ValueError(f"frame values must be [Nx, Ny, {C_UNION}], got {self.values.shape}")
        if self.channel_mask.shape != (C_UNION,):
            raise ValueError(f"channel mask must have {C_UNION} entries")
        if np.any(self.values[..., ~self.channel_mask] != 0):
            raise ValueError("masked-off channels must be identically zero")
        node = self.values[..., NODE_TYPE]
        if np.any((node != 0) & (node != 1)):
            raise ValueError("node-type channel must be 0 or 1")


@dataclass
class PatchGrid:
    patches: np.ndarray  # [Np, Rx*Ry*C]
    layout: tuple[int, int, int, int]  # (patches_x, patches_y, Rx, Ry)
    channels: int = field(default=C_UNION)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def _check_divisible(nx: int, ny: int, rx: int, ry: int) -> None:
    if rx < 1 or ry < 1 or nx % rx:
        raise ValueError(f"patch size Rx={rx} does not divide Nx={nx}")
    if ny % ry:
        raise ValueError(f"patch size Ry={ry} does not divide Ny={ny}")


def patchify_array(values: np.ndarray, rx: int, ry: int) -> np.ndarray:
    """``[..., Nx, Ny, C] -> [..., Np, Rx*Ry*C]`` with row-major patch order."""
    *lead, nx, ny, c = values.shape
    _check_divisible(nx, ny, rx, ry)
    px, py = nx // rx, ny // ry
    v = values.reshape(*lead, px, rx, py, ry, c)
    k = len(lead)
    order = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    return v.transpose(order).reshape(*lead, px * py, rx * ry * c)


def unpatchify_array(patches: np.ndarray, layout: tuple[int, int, int, int], c: int) -> np.ndarray:
    """Inverse of :func:`patchify_array`."""
    px, py, rx, ry = layout
    *lead, n_p, length = patches.shape
    if n_p != px * py or length != rx * ry * c:
        raise ValueError(
            f"patch array {patches.shape[-2:]} inconsistent with layout {layout} and C={c}")
    v = patches.reshape(*lead, px, py, rx, ry, c)
    k = len(lead)
    order = tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4)
    return v.transpose(order).reshape(*lead, px * rx, py * ry, c)


def patchify(frame: Frame | np.ndarray, rx: int, ry: int) -> PatchGrid:
    values = frame.values if isinstance(frame, Frame) else np.asarray(frame)
    nx, ny, c = values.shape
    _check_divisible(nx, ny, rx, ry)
    return PatchGrid(patchify_array(values, rx, ry), (nx // rx, ny // ry, rx, ry), c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return unpatchify_array(grid.patches, grid.layout, grid.channels)


def to_union_channels(raw: np.ndarray, dataset_channel_ids: Sequence[int],
                      time_index: int = 0, dt_record: float = 1.0) -> Frame:
    """Scatter dataset channels ``raw[..., j]`` into union slot ``ids[j]``."""
    raw = np.asarray(raw)
    ids = list(dataset_channel_ids)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate channel ids {ids}")
    if any(not 0 <= i < C_UNION for i in ids):
        raise ValueError(f"channel ids {ids} out of range 0..{C_UNION - 1}")
    if raw.ndim != 3 or raw.shape[-1] != len(ids):
        raise ValueError(f"raw data {raw.shape} does not match {len(ids)} channel ids")
    dtype = raw.dtype if raw.dtype.kind == "f" else np.float64
    values = np.zeros(raw.shape[:2] + (C_UNION,), dtype=dtype)
    mask = np.zeros(C_UNION, dtype=bool)
    for j, slot in enumerate(ids):
        values[..., slot] = raw[..., j]
        mask[slot] = True
    return Frame(values, mask, time_index, dt_record)


def loss_channels(channel_mask: np.ndarray) -> np.ndarray:
    """Valid channels with the node-type slot always dropped."""
    m = np.array(channel_mask, dtype=bool)
    m[..., NODE_TYPE] = False
    return m

"""Analytic trajectory generators, the trajectory container, prompt sampling.

Both generators are exact on the periodic unit square: heat is solved by
damping Fourier modes, advection by shifting (``np.roll`` for whole-cell
shifts, a Fourier phase ramp otherwise).  Fields are band-limited so the
Fourier shift is exact on the grid as well.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patching import C_UNION, CHANNEL_NAMES, SCALAR, U_X, U_Y, Frame

FORMAT_VERSION = 1
I0 = 10


class TrajectoryFormatError(ValueError):
    pass


class FormatVersionError(TrajectoryFormatError):
    pass


class TruncatedPayloadError(TrajectoryFormatError):
    pass


class ShapeMismatchError(TrajectoryFormatError):
    pass


class ChecksumError(TrajectoryFormatError):
    pass


@dataclass
class Trajectory:
    frames: np.ndarray  # [nt, nx, ny, C_union] float32
    channel_mask: np.ndarray
    dt_record: float
    pde_tag: str
    pde_params: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def nt(self) -> int:
        return self.frames.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def frame(self, t: int) -> Frame:
        return Frame(self.frames[t], self.channel_mask, t, self.dt_record)


@dataclass
class PromptSequence:
    conds: np.ndarray  # [I, nx, ny, C]
    qois: np.ndarray
    stride: int
    starts: np.ndarray
    channel_mask: np.ndarray
    stats: object = None  # PromptStats once normalised

    @property
    def n_pairs(self) -> int:
        return self.conds.shape[0]


# ----------------------------------------------------------------- fields

def wavenumbers(nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    kx = 2 * np.pi * np.fft.fftfreq(nx, d=1.0 / nx)
    ky = 2 * np.pi * np.fft.fftfreq(ny, d=1.0 / ny)
    return np.meshgrid(kx, ky, indexing="ij")


def band_limited_field(nx: int, ny: int, rng: np.random.Generator, kmax: int = 3) -> np.ndarray:
    """Random smooth periodic field with modes ``|m| <= kmax``, unit std plus offset."""
    mx = np.fft.fftfreq(nx, d=1.0 / nx)
    my = np.fft.fftfreq(ny, d=1.0 / ny)
    MX, MY = np.meshgrid(mx, my, indexing="ij")
    keep = (np.abs(MX) <= kmax) & (np.abs(MY) <= kmax) & ((MX != 0) | (MY != 0))
    amp = 1.0 / (1.0 + MX ** 2 + MY ** 2)
    coef = (rng.normal(size=(nx, ny)) + 1j * rng.normal(size=(nx, ny))) * amp * keep
    f = np.fft.ifft2(coef).real
    f /= f.std()
    return f + rng.uniform(-1.0, 1.0)


def _scalar_frames(fields: np.ndarray, extra: dict[int, float] | None = None) -> np.ndarray:
    nt, nx, ny = fields.shape
    out = np.zeros((nt, nx, ny, C_UNION), dtype=np.float32)
    out[..., SCALAR] = fields
    for slot, value in (extra or {}).items():
        out[..., slot] = value
    return out


def heat_evolve(f0: np.ndarray, nu: float, t: float) -> np.ndarray:
    """Exact periodic heat flow of ``f0`` for physical time ``t``."""
    KX, KY = wavenumbers(*f0.shape)
    fh = np.fft.fft2(f0) * np.exp(-nu * (KX ** 2 + KY ** 2) * t)
    return np.fft.ifft2(fh).real


def advect(f0: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Translate ``f0`` by ``(sx, sy)`` cells (periodic)."""
    if float(sx).is_integer() and float(sy).is_integer():
        return np.roll(f0, (int(sx), int(sy)), axis=(0, 1))
    nx, ny = f0.shape
    KX, KY = wavenumbers(nx, ny)
    phase = np.exp(-1j * (KX * sx / nx + KY * sy / ny))
    return np.fft.ifft2(np.fft.fft2(f0) * phase).real


def gen_heat(nx: int, ny: int, nu: float, dt: float, nt: int, seed: int,
             kmax: int = 3) -> Trajectory:
    if nu <= 0:
        raise ValueError("nu must be positive")
    f0 = band_limited_field(nx, ny, np.random.default_rng(seed), kmax)
    fields = np.stack([heat_evolve(f0, nu, t * dt) for t in range(nt)])
    mask = np.zeros(C_UNION, bool)
    mask[SCALAR] = True
    return Trajectory(_scalar_frames(fields), mask, dt, "heat", {"nu": float(nu)}, seed)


def gen_advection(nx: int, ny: int, vx: float, vy: float, dt: float, nt: int, seed: int,
                  kmax: int = 3) -> Trajectory:
    """Constant-velocity transport; velocities also fill the u_x/u_y slots."""
    f0 = band_limited_field(nx, ny, np.random.default_rng(seed), kmax)
    sx, sy = vx * dt * nx, vy * dt * ny
    # snap float noise so exact-shift inputs hit the np.roll path
    sx = round(sx) if abs(sx - round(sx)) < 1e-9 else sx
    sy = round(sy) if abs(sy - round(sy)) < 1e-9 else sy
    fields = np.stack([advect(f0, t * sx, t * sy) for t in range(nt)])
    mask = np.zeros(C_UNION, bool)
    mask[[U_X, U_Y, SCALAR]] = True
    frames = _scalar_frames(fields, {U_X: vx, U_Y: vy})
    return Trajectory(frames, mask, dt, "advection",
                      {"vx": float(vx), "vy": float(vy)}, seed)


HEAT_DEFAULTS = {"dt": 0.01, "nu": (0.05, 0.3)}
ADVECTION_DEFAULTS = {"dt": 0.01, "cells_per_step": (-1.0, 1.0)}


def make_family(kind: str, n: int, seed: int, nx: int = 16, ny: int = 16, nt: int = 21,
                **overrides) -> list[Trajectory]:
    """``n`` trajectories with random PDE parameters and initial fields."""
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n):
        traj_seed = int(rng.integers(2 ** 31))
        if kind == "heat":
            dt = overrides.get("dt", HEAT_DEFAULTS["dt"])
            lo, hi = overrides.get("nu", HEAT_DEFAULTS["nu"])
            trajs.append(gen_heat(nx, ny, rng.uniform(lo, hi), dt, nt, traj_seed))
        elif kind == "advection":
            dt = overrides.get("dt", ADVECTION_DEFAULTS["dt"])
            lo, hi = overrides.get("cells_per_step", ADVECTION_DEFAULTS["cells_per_step"])
            cx, cy = rng.uniform(lo, hi, size=2)
            trajs.append(gen_advection(nx, ny, cx / (dt * nx), cy / (dt * ny), dt, nt, traj_seed))
        else:
            raise ValueError(f"unknown PDE family {kind!r}")
    return trajs


# --------------------------------------------------------------- sampling

def feasible_strides(nt: int, I: int, s_max: int) -> list[int]:
    return [s for s in range(1, s_max + 1) if nt - s >= I]


def sample_prompt(traj: Trajectory, I: int, s_max: int, rng: np.random.Generator) -> PromptSequence:
    """Pick ``s ~ U{feasible strides <= s_max}`` and ``I`` distinct pair starts."""
    strides = feasible_strides(traj.nt, I, s_max)
    if not strides:
        raise ValueError(f"trajectory of {traj.nt} frames cannot host {I} pairs "
                         f"at any stride <= {s_max}")
    s = int(strides[rng.integers(len(strides))])
    starts = np.sort(rng.choice(traj.nt - s, size=I, replace=False))
    return PromptSequence(traj.frames[starts], traj.frames[starts + s], s, starts,
                          traj.channel_mask.copy())


# ------------------------------------------------------------ persistence

def _manifest_path(path) -> Path:
    path = Path(path)
    return path / "traj.json" if path.is_dir() or path.suffix != ".json" else path


def save_trajectory(traj: Trajectory, path) -> Path:
    """Write ``<stem>.json`` plus a raw little-endian float32 payload next to it.

    ``path`` is either a manifest filename ending in ``.json`` or a directory
    (then ``traj.json`` / ``traj.bin`` are used).
    """
    path = Path(path)
    if path.suffix != ".json":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "traj.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(traj.frames, dtype="<f4").tobytes()
    payload_file = path.with_suffix(".bin").name
    nt, nx, ny, _ = traj.frames.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "pde_tag": traj.pde_tag,
        "pde_params": traj.pde_params,
        "seed": traj.seed,
        "nx": nx, "ny": ny, "nt": nt,
        "dt_record": traj.dt_record,
        "channel_order": list(CHANNEL_NAMES),
        "channel_mask": [bool(b) for b in traj.channel_mask],
        "payload_file": payload_file,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    (path.parent / payload_file).write_bytes(payload)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path)
    return path


def read_manifest(path) -> dict:
    """Validated manifest only; the payload is not touched."""
    path = _manifest_path(path)
    manifest = json.loads(Path(path).read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    if list(manifest.get("channel_order", [])) != list(CHANNEL_NAMES):
        raise ShapeMismatchError(f"{path}: channel_order {manifest.get('channel_order')} "
                                 f"is not the union order {list(CHANNEL_NAMES)}")
    if len(manifest.get("channel_mask", [])) != C_UNION:
        raise ShapeMismatchError(f"{path}: channel_mask must have {C_UNION} entries")
    for key in ("nx", "ny", "nt"):
        if not isinstance(manifest.get(key), int) or manifest[key] < 1:
            raise ShapeMismatchError(f"{path}: bad {key}={manifest.get(key)!r}")
    return manifest


def load_trajectory(path) -> Trajectory:
    path = _manifest_path(path)
    manifest = read_manifest(path)
    payload = (Path(path).parent / manifest["payload_file"]).read_bytes()
    nt, nx, ny = manifest["nt"], manifest["nx"], manifest["ny"]
    expected = nt * nx * ny * C_UNION * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) != expected:
        raise ShapeMismatchError(f"{path}: payload has {len(payload)} bytes, "
                                 f"manifest shape needs {expected}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    frames = np.frombuffer(payload, dtype="<f4").reshape(nt, nx, ny, C_UNION).astype(np.float32)
    return Trajectory(frames, np.array(manifest["channel_mask"], bool), manifest["dt_record"],
                      manifest["pde_tag"], dict(manifest["pde_params"]), manifest.get("seed"))

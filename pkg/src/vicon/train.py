"""In-context training: masked loss, warmup+cosine schedule, AdamW, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .dataio import Trajectory, sample_prompt
from .model import ModelConfig, forward_patches, init_params
from .patching import C_UNION, loss_channels, patchify_array
from .prompt_norm import compute_stats, normalize


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-4
    final_lr: float = 1e-6
    warmup_steps: int = 500
    total_steps: int = 5000
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 16
    seed: int = 0
    I_min: int = 5
    s_max: int = 5
    prompts_per_traj: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    log_every: int = 50

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if not 0 <= self.warmup_steps < self.total_steps:
            errors.append(f"need 0 <= warmup_steps < total_steps, got "
                          f"{self.warmup_steps} and {self.total_steps}")
        if self.clip_norm <= 0:
            errors.append(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.s_max < 1:
            errors.append(f"s_max must be >= 1, got {self.s_max}")
        if self.prompts_per_traj < 1:
            errors.append(f"prompts_per_traj must be >= 1, got {self.prompts_per_traj}")
        return errors

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# Optimiser settings from the reference run; too long for a laptop.
FULL_SCALE_TRAIN = TrainConfig(peak_lr=1e-4, final_lr=1e-7, warmup_steps=20_000,
                               total_steps=200_000, weight_decay=1e-4, clip_norm=1.0)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then cosine peak -> final at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * frac))


# ------------------------------------------------------------------ loss

def loss_weights(shape: Sequence[int], I_min: int, channel_mask: np.ndarray,
                 C: int = C_UNION) -> np.ndarray:
    """Weights so that ``sum(w * err^2)`` is the batch mean of per-row MSEs.

    ``shape`` is ``[B, J, ..., L]`` where the last axis cycles through the
    ``C`` union channels (true for frames and for flattened patches).
    Pairs ``1..I_min`` and invalid or node-type channels get weight zero.
    """
    B, J, last = shape[0], shape[1], shape[-1]
    if J <= I_min:
        raise ValueError(f"need more than I_min={I_min} pairs for a loss, got {J}")
    mask = loss_channels(np.broadcast_to(channel_mask, (B, C)))
    chan = mask[:, np.arange(last) % C]  # [B, L]
    pair = (np.arange(J) >= I_min).astype(np.float64)
    mid = int(np.prod(shape[2:-1])) if len(shape) > 3 else 1
    w = pair[None, :, None] * chan[:, None, :]  # [B, J, L]
    counts = w.sum(axis=(1, 2)) * mid
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / B
    w = w * scale[:, None, None]
    return w.reshape((B, J) + (1,) * (len(shape) - 3) + (last,))


def masked_icl_loss(pred, target: np.ndarray, I_min: int, channel_mask) -> T.Tensor:
    """MSE over pairs ``i > I_min`` and valid non-node-type channels."""
    pred = pred if isinstance(pred, T.Tensor) else T.Tensor(np.asarray(pred))
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise T.ShapeError(f"masked_icl_loss: pred {pred.shape} vs target {target.shape}")
    w = loss_weights(pred.shape, I_min, np.asarray(channel_mask, bool)).astype(pred.dtype)
    diff = pred - target
    return T.sum(diff * diff * w)


# ------------------------------------------------------------------ data

@dataclass
class TrainBatch:
    """Normalised prompts ``[B, I, nx, ny, C]``; no question frames by design."""
    conds: np.ndarray
    qois: np.ndarray
    channel_mask: np.ndarray  # [B, C]
    strides: np.ndarray
    tags: list[str]


def make_batch(prompts, dtype=np.float32) -> TrainBatch:
    conds, qois, masks, strides, tags = [], [], [], [], []
    for pr, tag in prompts:
        stats = compute_stats(pr.conds, pr.channel_mask)
        pr.stats = stats
        conds.append(normalize(pr.conds, stats))
        qois.append(normalize(pr.qois, stats))
        masks.append(pr.channel_mask)
        strides.append(pr.stride)
        tags.append(tag)
    return TrainBatch(np.stack(conds).astype(dtype), np.stack(qois).astype(dtype),
                      np.stack(masks), np.array(strides), tags)


class PromptSampler:
    """Epochs over ``trajectories x prompts_per_traj`` in shuffled order."""

    def __init__(self, trajectories: Sequence[Trajectory], I: int, s_max: int,
                 batch_size: int, prompts_per_traj: int, rng: np.random.Generator):
        if not trajectories:
            raise ValueError("no training trajectories")
        self.trajs = list(trajectories)
        self.I, self.s_max, self.batch_size = I, s_max, batch_size
        self.per_traj = prompts_per_traj
        self.rng = rng
        self._queue: list[int] = []

    def _next_index(self) -> int:
        if not self._queue:
            order = np.repeat(np.arange(len(self.trajs)), self.per_traj)
            self._queue = self.rng.permutation(order).tolist()
        return self._queue.pop()

    def next_batch(self) -> TrainBatch:
        prompts = []
        for _ in range(self.batch_size):
            traj = self.trajs[self._next_index()]
            prompts.append((sample_prompt(traj, self.I, self.s_max, self.rng), traj.pde_tag))
        return make_batch(prompts)

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "queue": list(self._queue)}

    def restore(self, state: Mapping) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._queue = list(state["queue"])


# -------------------------------------------------------------- optimiser

class AdamW:
    """Adam moments with decoupled weight decay; updates arrays in place."""

    def __init__(self, params: Mapping[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps, self.weight_decay = eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            p *= 1.0 - lr * self.weight_decay
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``<= clip_norm``; returns the raw norm."""
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class TrainingError(RuntimeError):
    pass


def loss_and_grads(params: Mapping[str, np.ndarray], model_cfg: ModelConfig, batch: TrainBatch,
                   I_min: int, rng: np.random.Generator | None = None):
    leaves = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    cp = patchify_array(batch.conds, model_cfg.Rx, model_cfg.Ry)
    qp = patchify_array(batch.qois, model_cfg.Rx, model_cfg.Ry)
    with T.Tape() as tape:
        pred = forward_patches(leaves, model_cfg, cp, qp, rng)
        loss = masked_icl_loss(pred, qp, I_min, batch.channel_mask)
    grads = T.grad(loss, leaves)
    tape.clear()
    return float(loss.data), grads


def train_step(batch: TrainBatch, params: dict[str, np.ndarray], opt: AdamW, step: int,
               cfg: TrainConfig, model_cfg: ModelConfig,
               dropout_rng: np.random.Generator | None = None) -> tuple[float, float]:
    """One AdamW update; returns ``(loss, pre-clip gradient norm)``."""
    if not isinstance(batch, TrainBatch):
        raise TypeError("train_step only accepts TrainBatch prompts")
    try:
        loss, grads = loss_and_grads(params, model_cfg, batch, cfg.I_min, dropout_rng)
    except T.NonFiniteError as exc:
        raise TrainingError(f"non-finite value at step {step} ({exc}); batch tags="
                            f"{batch.tags}, strides={batch.strides.tolist()}") from exc
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}; tags={batch.tags}")
    norm = clip_grads(grads, cfg.clip_norm)
    opt.step(params, grads, lr_at(min(step + 1, cfg.total_steps), cfg))
    return loss, norm


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt: AdamW
    step: int
    sampler_state: dict | None = None


def new_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    params = init_params(model_cfg, rng, np.float32)
    return TrainState(params, AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay), 0)


def train(trajectories: Sequence[Trajectory], model_cfg: ModelConfig, cfg: TrainConfig,
          n_steps: int | None = None, state: TrainState | None = None, log_path=None,
          checkpoint_path=None, verbose: bool = False) -> tuple[TrainState, list[dict]]:
    """Run ``n_steps`` updates (default: up to ``total_steps``) from ``state``."""
    if cfg.I_min != model_cfg.I_min:
        raise ValueError(f"TrainConfig.I_min={cfg.I_min} != ModelConfig.I_min={model_cfg.I_min}")
    state = state or new_state(model_cfg, cfg)
    sampler = PromptSampler(trajectories, model_cfg.I, cfg.s_max, cfg.batch_size,
                            cfg.prompts_per_traj, np.random.default_rng(cfg.seed + 1))
    if state.sampler_state is not None:
        sampler.restore(state.sampler_state)
    dropout_rng = np.random.default_rng(cfg.seed + 2) if model_cfg.dropout > 0 else None
    end = cfg.total_steps if n_steps is None else min(cfg.total_steps, state.step + n_steps)
    log, log_fh = [], open(log_path, "a") if log_path else None
    try:
        while state.step < end:
            t0 = time.perf_counter()
            batch = sampler.next_batch()
            loss, norm = train_step(batch, state.params, state.opt, state.step, cfg, model_cfg,
                                    dropout_rng)
            state.step += 1
            if state.step % cfg.log_every == 0 or state.step == end or state.step == 1:
                rec = {"step": state.step, "lr": lr_at(state.step, cfg), "loss": loss,
                       "grad_norm": norm, "wall_ms": 1e3 * (time.perf_counter() - t0)}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if verbose:
                    print(json.dumps(rec), flush=True)
    finally:
        if log_fh:
            log_fh.close()
    state.sampler_state = sampler.state()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, model_cfg, cfg)
    return state, log


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig) -> None:
    tensors = {"param/" + k: v for k, v in state.params.items()}
    tensors.update({"adam_m/" + k: v for k, v in state.opt.m.items()})
    tensors.update({"adam_v/" + k: v for k, v in state.opt.v.items()})
    meta = {"step": state.step, "adam_t": state.opt.t, "train_config": cfg.to_dict(),
            "sampler_state": state.sampler_state}
    write_checkpoint(path, model_cfg, tensors, meta)


def load_checkpoint(path) -> tuple[TrainState, ModelConfig, TrainConfig]:
    model_cfg, tensors, meta = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig()
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    for k in params:
        if "adam_m/" + k in tensors:
            opt.m[k] = tensors["adam_m/" + k]
            opt.v[k] = tensors["adam_v/" + k]
    opt.t = int(meta.get("adam_t", 0))
    return TrainState(params, opt, int(meta.get("step", 0)), meta.get("sampler_state")), \
        model_cfg, cfg

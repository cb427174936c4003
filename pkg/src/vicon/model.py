"""Patch-tokenised in-context operator transformer.

A prompt of ``J`` (condition, qoi) frame pairs is cut into patches, every
patch is embedded by one shared linear map, patch and function positional
encodings are added, and the token sequence

    c_1^1 .. c_1^Nc, q_1^1 .. q_1^Nq, ..., c_J^1 .. c_J^Nc, q_J^1 .. q_J^Nq

runs through pre-norm transformer blocks under a block-causal mask.  The
prediction for pair ``i`` is decoded from the output tokens sitting at the
condition positions of pair ``i``, so it only sees pairs ``< i`` and ``c_i``.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import tensor as T
from .patching import C_UNION, patchify_array, unpatchify_array
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    I: int = 10
    I_min: int = 5
    nx: int = 16
    ny: int = 16
    Rx: int = 4
    Ry: int = 4
    C_union: int = C_UNION
    dropout: float = 0.0
    activation: str = "gelu"
    layer_norm_eps: float = T.LAYER_NORM_EPS
    pos_init_std: float = 0.02
    final_norm: bool = False  # LayerNorm between the last block and the decoder

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("invalid ModelConfig: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.d % self.n_heads:
            errors.append(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.I_min < self.I:
            errors.append(f"need 0 <= I_min < I, got I_min={self.I_min}, I={self.I}")
        if not 0.0 <= self.dropout < 1.0:
            errors.append(f"dropout {self.dropout} outside [0, 1)")
        if self.nx % self.Rx or self.ny % self.Ry:
            errors.append(f"patch {self.Rx}x{self.Ry} does not tile grid {self.nx}x{self.ny}")
        if self.activation != "gelu":
            errors.append(f"unsupported activation {self.activation!r}")
        return errors

    @property
    def Nc(self) -> int:
        return (self.nx // self.Rx) * (self.ny // self.Ry)

    @property
    def Nq(self) -> int:
        return self.Nc

    @property
    def patch_dim(self) -> int:
        return self.Rx * self.Ry * self.C_union

    @property
    def layout(self) -> tuple[int, int, int, int]:
        return (self.nx // self.Rx, self.ny // self.Ry, self.Rx, self.Ry)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


DESK = ModelConfig()
# Table-1 sized reference; never trained here.
FULL_SCALE = ModelConfig(d=1024, n_layers=10, n_heads=8, d_ffn=2048, I=10, I_min=5,
                         nx=128, ny=128, Rx=16, Ry=16)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, p = cfg.d, cfg.patch_dim
    shapes = {
        "embed.w": (p, d), "embed.b": (d,),
        "pos.patch": (max(cfg.Nc, cfg.Nq), d),
        "pos.cond": (cfg.I, d), "pos.qoi": (cfg.I, d),
    }
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        shapes.update({
            pre + "ln1.w": (d,), pre + "ln1.b": (d,),
            pre + "attn.wq": (d, d), pre + "attn.bq": (d,),
            pre + "attn.wk": (d, d), pre + "attn.bk": (d,),
            pre + "attn.wv": (d, d), pre + "attn.bv": (d,),
            pre + "attn.wo": (d, d), pre + "attn.bo": (d,),
            pre + "ln2.w": (d,), pre + "ln2.b": (d,),
            pre + "ffn.w1": (d, cfg.d_ffn), pre + "ffn.b1": (cfg.d_ffn,),
            pre + "ffn.w2": (cfg.d_ffn, d), pre + "ffn.b2": (d,),
        })
    if cfg.final_norm:
        shapes.update({"final_ln.w": (d,), "final_ln.b": (d,)})
    shapes.update({"decode.w": (d, p), "decode.b": (p,)})
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights, zero biases, N(0, 0.02) positional tables."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("pos."):
            arr = rng.normal(0.0, cfg.pos_init_std, shape)
        elif ".ln" in name or name.startswith("final_ln"):
            arr = np.ones(shape) if leaf == "w" else np.zeros(shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter names differ from config: missing={missing} extra={extra}")
    for name, shape in expected.items():
        got = tuple(np.shape(params[name]))
        if got != shape:
            raise ValueError(f"parameter {name}: shape {got} != expected {shape}")


@lru_cache(maxsize=64)
def _block_causal_mask(I: int, Nc: int, Nq: int) -> np.ndarray:
    blocks = np.tril(np.ones((2 * I, 2 * I), dtype=bool))
    sizes = np.tile([Nc, Nq], I)
    mask = np.repeat(np.repeat(blocks, sizes, axis=0), sizes, axis=1)
    mask.setflags(write=False)
    return mask


def build_block_causal_mask(I: int, Nc: int, Nq: int) -> np.ndarray:
    """Boolean ``[(Nc+Nq)I, (Nc+Nq)I]`` mask, True where attention is allowed.

    Blocks alternate condition (``Nc`` tokens) and qoi (``Nq`` tokens); block
    ``b`` sees every block ``<= b``, which is the lower block-triangular form.
    """
    if I < 1 or Nc < 1 or Nq < 1:
        raise ValueError(f"need I, Nc, Nq >= 1, got {I}, {Nc}, {Nq}")
    return _block_causal_mask(I, Nc, Nq).copy()


@lru_cache(maxsize=64)
def _token_layout(J: int, Nc: int, Nq: int, I: int):
    patch_idx, func_idx, cond_pos = [], [], []
    t = 0
    for i in range(J):
        patch_idx += list(range(Nc))
        func_idx += [i] * Nc
        cond_pos += list(range(t, t + Nc))
        t += Nc
        patch_idx += list(range(Nq))
        func_idx += [I + i] * Nq
        t += Nq
    return np.array(patch_idx), np.array(func_idx), np.array(cond_pos)


def _as_param_tensors(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def embed_prompt(params: Mapping, cfg: ModelConfig, cond_patches, qoi_patches) -> Tensor:
    """Token sequence ``[B, J(Nc+Nq), d]`` from patch arrays ``[B, J, N, P]``."""
    p = _as_param_tensors(params)
    cond_patches, qoi_patches = T._as_tensor(cond_patches), T._as_tensor(qoi_patches)
    if cond_patches.ndim != 4 or qoi_patches.ndim != 4:
        raise T.ShapeError("patch arrays must be [B, J, N, P]")
    B, J, Nc, P = cond_patches.shape
    Nq = qoi_patches.shape[2]
    if J > cfg.I:
        raise ValueError(f"prompt exceeds trained context length: {J} pairs > I={cfg.I}")
    if qoi_patches.shape[:2] != (B, J) or P != cfg.patch_dim:
        raise T.ShapeError(f"cond patches {cond_patches.shape} vs qoi patches {qoi_patches.shape}")
    x = T.concat([cond_patches, qoi_patches], axis=2).reshape(B, J * (Nc + Nq), P)
    h = _linear(x, p["embed.w"], p["embed.b"])
    patch_idx, func_idx, _ = _token_layout(J, Nc, Nq, cfg.I)
    func_table = T.concat([p["pos.cond"], p["pos.qoi"]], axis=0)
    pos = T.take(p["pos.patch"], patch_idx) + T.take(func_table, func_idx)
    return h + pos


def _attention(p, pre, cfg, a_q: Tensor, a_kv: Tensor, mask: np.ndarray) -> Tensor:
    B, Lq, d = a_q.shape
    L = a_kv.shape[1]
    H, dh = cfg.n_heads, cfg.d // cfg.n_heads

    def heads(x, n):
        return x.reshape(B, n, H, dh).transpose(0, 2, 1, 3)

    q = heads(_linear(a_q, p[pre + "attn.wq"], p[pre + "attn.bq"]), Lq)
    k = heads(_linear(a_kv, p[pre + "attn.wk"], p[pre + "attn.bk"]), L)
    v = heads(_linear(a_kv, p[pre + "attn.wv"], p[pre + "attn.bv"]), L)
    o = T.masked_attention(q, k, v, mask).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return _linear(o, p[pre + "attn.wo"], p[pre + "attn.bo"])


def _block(p, i, cfg, h: Tensor, mask, rng, read_out=None) -> Tensor:
    pre = f"layers.{i}."
    eps = cfg.layer_norm_eps
    a = T.layer_norm(h, p[pre + "ln1.w"], p[pre + "ln1.b"], eps)
    if read_out is None:
        a_q, h_q, m = a, h, mask
    else:
        # last layer: only the read-out rows are ever decoded
        a_q, h_q, m = T.take(a, read_out, axis=1), T.take(h, read_out, axis=1), mask[read_out]
    h = h_q + T.dropout(_attention(p, pre, cfg, a_q, a, m), cfg.dropout, rng)
    f = T.layer_norm(h, p[pre + "ln2.w"], p[pre + "ln2.b"], eps)
    f = T.gelu(_linear(f, p[pre + "ffn.w1"], p[pre + "ffn.b1"]))
    f = _linear(f, p[pre + "ffn.w2"], p[pre + "ffn.b2"])
    return h + T.dropout(f, cfg.dropout, rng)


def forward_patches(params: Mapping, cfg: ModelConfig, cond_patches, qoi_patches,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Predicted qoi patches ``[B, J, Nc, P]`` for every pair of the prompt."""
    p = _as_param_tensors(params)
    h = embed_prompt(p, cfg, cond_patches, qoi_patches)
    B, J, Nc, P = T._as_tensor(cond_patches).shape
    Nq = T._as_tensor(qoi_patches).shape[2]
    mask = _block_causal_mask(J, Nc, Nq)
    _, _, cond_pos = _token_layout(J, Nc, Nq, cfg.I)
    for i in range(cfg.n_layers):
        last = i == cfg.n_layers - 1
        h = _block(p, i, cfg, h, mask, rng, cond_pos if last else None)
    if cfg.n_layers == 0:
        h = T.take(h, cond_pos, axis=1)
    if cfg.final_norm:
        h = T.layer_norm(h, p["final_ln.w"], p["final_ln.b"], cfg.layer_norm_eps)
    out = _linear(h, p["decode.w"], p["decode.b"])
    return out.reshape(B, J, Nc, P)


def forward(params: Mapping, cfg: ModelConfig, conds: np.ndarray, qois: np.ndarray,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Predictions ``q~_i`` for all pairs; frames ``[(B,) J, Nx, Ny, C]``."""
    dtype = np.asarray(params["embed.w"].data if isinstance(params["embed.w"], Tensor)
                       else params["embed.w"]).dtype
    conds, qois = np.asarray(conds, dtype=dtype), np.asarray(qois, dtype=dtype)
    single = conds.ndim == 4
    if single:
        conds, qois = conds[None], qois[None]
    if conds.shape != qois.shape:
        raise T.ShapeError(f"conds {conds.shape} vs qois {qois.shape}")
    out = forward_patches(params, cfg, patchify_array(conds, cfg.Rx, cfg.Ry),
                          patchify_array(qois, cfg.Rx, cfg.Ry), rng)
    frames = unpatchify_array(out.data, cfg.layout, cfg.C_union)
    return frames[0] if single else frames


@dataclass
class Prediction:
    values: np.ndarray
    n_context: int
    low_context: bool


def predict_next(params: Mapping, cfg: ModelConfig, context_conds, context_qois,
                 question: np.ndarray, channel_mask: np.ndarray | None = None) -> Prediction:
    """Predict the qoi of ``question`` from ``J`` context pairs (normalised space).

    The question becomes the condition of pair ``J+1`` with a zero qoi
    placeholder, which the mask keeps away from the read-out.
    """
    question = np.asarray(question)
    context_conds = np.asarray(context_conds).reshape((-1,) + question.shape)
    context_qois = np.asarray(context_qois).reshape((-1,) + question.shape)
    J = context_conds.shape[0]
    if J + 1 > cfg.I:
        raise ValueError(f"prompt exceeds trained context length: {J} context pairs "
                         f"+ question > I={cfg.I}")
    low = J < cfg.I_min
    if J == 0:
        warnings.warn("predict_next called without context pairs", RuntimeWarning)
    conds = np.concatenate([context_conds, question[None]], axis=0)
    qois = np.concatenate([context_qois, np.zeros_like(question)[None]], axis=0)
    pred = forward(params, cfg, conds, qois)[-1]
    if channel_mask is not None:
        pred = np.where(np.asarray(channel_mask, bool), pred, 0.0).astype(pred.dtype)
    return Prediction(pred, J, low)


class ViconModel:
    """Config plus parameters; callable as a rollout predictor."""

    def __init__(self, cfg: ModelConfig, params: Mapping[str, np.ndarray]):
        check_params(params, cfg)
        self.cfg = cfg
        self.params = dict(params)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "ViconModel":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), dtype))

    def forward(self, conds, qois):
        return forward(self.params, self.cfg, conds, qois)

    def predict_next(self, context_conds, context_qois, question, channel_mask=None):
        return predict_next(self.params, self.cfg, context_conds, context_qois, question,
                            channel_mask)

    def __call__(self, context_conds, context_qois, question, channel_mask=None):
        return self.predict_next(context_conds, context_qois, question, channel_mask).values

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

"""Shared neural building blocks: transformer encoder stacks, mean pooling,
the warmup/inverse-square-root learning-rate schedule, freeze masks, and
checkpoint selection/averaging.

Stacks use post-layer-norm ordering with residual connections.  Validity
masks are realized as a -inf additive bias on the attention scores, so
masked key positions receive exactly zero attention weight and can never
leak into valid positions or pooled outputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, ModelCheckpoint, ParamSet, Var

LN_EPS = 1e-5


@dataclass(frozen=True)
class StackConfig:
    """Geometry of a self-attention encoder stack."""

    dim: int
    heads: int
    ffn_dim: int
    layers: int

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ContractViolation(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def stack_param_count(cfg: StackConfig) -> int:
    """Closed-form trainable value count of an encoder stack."""
    d, f = cfg.dim, cfg.ffn_dim
    attn = 4 * d * d + 4 * d
    ffn = d * f + f + f * d + d
    norms = 4 * d  # two layer norms, gamma and beta each
    return cfg.layers * (attn + ffn + norms)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_stack_params(cfg: StackConfig, prefix: str, rng: np.random.Generator,
                      dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh stack parameters under ``{prefix}.layer{i}.*`` names."""
    d, f = cfg.dim, cfg.ffn_dim
    out: dict[str, np.ndarray] = {}
    for i in range(cfg.layers):
        base = f"{prefix}.layer{i}"
        for mat in ("wq", "wk", "wv", "wo"):
            out[f"{base}.attn.{mat}"] = glorot_uniform(rng, d, d, (d, d), dtype)
        for vec in ("bq", "bk", "bv", "bo"):
            out[f"{base}.attn.{vec}"] = np.zeros(d, dtype=dtype)
        out[f"{base}.ln1.gamma"] = np.ones(d, dtype=dtype)
        out[f"{base}.ln1.beta"] = np.zeros(d, dtype=dtype)
        out[f"{base}.ffn.w1"] = glorot_uniform(rng, d, f, (d, f), dtype)
        out[f"{base}.ffn.b1"] = np.zeros(f, dtype=dtype)
        out[f"{base}.ffn.w2"] = glorot_uniform(rng, f, d, (f, d), dtype)
        out[f"{base}.ffn.b2"] = np.zeros(d, dtype=dtype)
        out[f"{base}.ln2.gamma"] = np.ones(d, dtype=dtype)
        out[f"{base}.ln2.beta"] = np.zeros(d, dtype=dtype)
    return out


def layer_norm(x: Var, gamma: Var, beta: Var) -> Var:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = ad.power(var + LN_EPS, -0.5)
    return centered * inv * gamma + beta


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position table; works for any sequence length."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def _attention_bias(mask: np.ndarray, dtype) -> np.ndarray:
    bias = np.where(mask, 0.0, -np.inf).astype(dtype)
    return bias[None, :]  # broadcast over query rows


def encode_var(cfg: StackConfig, leaves: Mapping[str, Var], prefix: str, x: Var,
               mask: np.ndarray | None = None,
               extra_bias: np.ndarray | None = None) -> Var:
    """Run the stack on a (T, dim) Var; masked keys are excluded from softmax.

    ``extra_bias`` is an optional (T, T) additive score bias (causal masks).
    """
    T = x.data.shape[0]
    if x.data.shape[1] != cfg.dim:
        raise ContractViolation(f"input width {x.data.shape[1]} != stack dim {cfg.dim}")
    bias = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != T:
            raise ContractViolation("mask length does not match sequence length")
        if not mask.any():
            raise ContractViolation("empty valid region")
        if not mask.all():
            bias = _attention_bias(mask, np.float64 if x.dtype == np.float64 else np.float32)
    if extra_bias is not None:
        bias = extra_bias if bias is None else bias + extra_bias
    dh = cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        base = f"{prefix}.layer{i}"
        q = x @ leaves[f"{base}.attn.wq"] + leaves[f"{base}.attn.bq"]
        k = x @ leaves[f"{base}.attn.wk"] + leaves[f"{base}.attn.bk"]
        v = x @ leaves[f"{base}.attn.wv"] + leaves[f"{base}.attn.bv"]
        heads = []
        for h in range(cfg.heads):
            qh = ad.narrow(q, 1, h * dh, dh)
            kh = ad.narrow(k, 1, h * dh, dh)
            vh = ad.narrow(v, 1, h * dh, dh)
            scores = (qh @ kh.T) * scale
            if bias is not None:
                scores = scores + bias
            heads.append(ad.softmax(scores, axis=-1) @ vh)
        ctx = heads[0] if cfg.heads == 1 else ad.concat(heads, axis=1)
        attn_out = ctx @ leaves[f"{base}.attn.wo"] + leaves[f"{base}.attn.bo"]
        x = layer_norm(x + attn_out, leaves[f"{base}.ln1.gamma"], leaves[f"{base}.ln1.beta"])
        inner = ad.relu(x @ leaves[f"{base}.ffn.w1"] + leaves[f"{base}.ffn.b1"])
        ffn_out = inner @ leaves[f"{base}.ffn.w2"] + leaves[f"{base}.ffn.b2"]
        x = layer_norm(x + ffn_out, leaves[f"{base}.ln2.gamma"], leaves[f"{base}.ln2.beta"])
    return x


def mean_pool_var(x: Var, mask: np.ndarray | None = None) -> Var:
    """Mean over valid positions of a (T, dim) Var."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ContractViolation("mean_pool over an all-masked sequence")
        if not mask.all():
            x = ad.gather_rows(x, np.flatnonzero(mask))
    return x.mean(axis=0)


@dataclass
class EncodedSequence:
    """Per-position encoder outputs with their validity mask."""

    vectors: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.vectors.shape[0] != self.mask.shape[0]:
            raise ContractViolation("mask length does not match sequence length")

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


class TransformerStack:
    """An encoder stack bound to its parameters; immutable during encoding."""

    def __init__(self, config: StackConfig, params: ParamSet, prefix: str):
        self.config = config
        self.params = params
        self.prefix = prefix

    @classmethod
    def create(cls, config: StackConfig, prefix: str = "encoder", seed: int = 0,
               dtype=np.float32) -> "TransformerStack":
        rng = np.random.default_rng(seed)
        params = ParamSet()
        for name, arr in init_stack_params(config, prefix, rng, dtype).items():
            params.add(name, arr)
        return cls(config, params, prefix)

    def encode(self, seq: np.ndarray, mask: np.ndarray | None = None) -> EncodedSequence:
        seq = np.asarray(seq)
        if mask is None:
            mask = np.ones(seq.shape[0], dtype=bool)
        leaves = {name: Var(arr) for name, arr in self.params.items()}
        out = encode_var(self.config, leaves, self.prefix, Var(seq), mask)
        return EncodedSequence(vectors=out.data, mask=mask)


def transformer_encode(stack: TransformerStack, seq: np.ndarray,
                       mask: np.ndarray | None = None) -> EncodedSequence:
    return stack.encode(seq, mask)


def mean_pool(enc: EncodedSequence) -> np.ndarray:
    """Arithmetic mean over valid positions."""
    if not enc.mask.any():
        raise ContractViolation("mean_pool over an all-masked sequence")
    return enc.vectors[enc.mask].mean(axis=0)


@dataclass(frozen=True)
class LrSchedule:
    """Warmup then inverse-square-root decay, scaled by dim and coefficient."""

    warmup_steps: int
    coefficient: float
    model_dim: int

    def __post_init__(self):
        if self.warmup_steps < 1 or self.coefficient <= 0 or self.model_dim < 1:
            raise ContractViolation("invalid learning-rate schedule parameters")


def noam_lr(schedule: LrSchedule, step: int) -> float:
    """Learning rate at ``step`` (1-based); peaks exactly at warmup_steps."""
    if step < 1:
        raise ContractViolation("schedule step must be >= 1")
    w = schedule.warmup_steps
    return (schedule.coefficient * schedule.model_dim ** -0.5
            * min(step ** -0.5, step * w ** -1.5))


@dataclass(frozen=True)
class FreezeMask:
    """Name prefixes to keep trainable; every other parameter is frozen."""

    train_prefixes: tuple[str, ...]

    def apply(self, params: ParamSet) -> None:
        for name in params.names():
            params.set_trainable(name, any(name.startswith(p) for p in self.train_prefixes))

    def partition(self, params: ParamSet) -> tuple[list[str], list[str]]:
        trainable, frozen = [], []
        for name in sorted(params.names()):
            if any(name.startswith(p) for p in self.train_prefixes):
                trainable.append(name)
            else:
                frozen.append(name)
        return trainable, frozen


def select_best(ckpts: list[ModelCheckpoint], n: int) -> list[ModelCheckpoint]:
    """The n lowest-validation-loss checkpoints; ties go to the earlier step."""
    if n > len(ckpts):
        warnings.warn(
            f"requested {n} checkpoints but only {len(ckpts)} available; returning all",
            UserWarning, stacklevel=2)
        n = len(ckpts)
    return sorted(ckpts, key=lambda c: (c.valid_loss, c.step))[:n]


def average_checkpoints(ckpts: list[ModelCheckpoint]) -> ModelCheckpoint:
    """Element-wise mean of parameter tensors.

    Checkpoints are first sorted by (step, valid_loss) and then accumulated
    sequentially in float64, which makes the result exactly invariant to the
    order the list was supplied in.
    """
    if not ckpts:
        raise ContractViolation("cannot average an empty checkpoint list")
    ordered = sorted(ckpts, key=lambda c: (c.step, c.valid_loss))
    names = list(ordered[0].tensors)
    for c in ordered[1:]:
        if list(c.tensors) != names:
            raise ContractViolation("checkpoint tensor names differ")
        for name in names:
            if c.tensors[name].shape != ordered[0].tensors[name].shape:
                raise ContractViolation(f"shape mismatch for tensor {name}")
    averaged = {}
    for name in names:
        acc = ordered[0].tensors[name].astype(np.float64)
        for c in ordered[1:]:
            acc = acc + c.tensors[name].astype(np.float64)
        averaged[name] = (acc / len(ordered)).astype(np.float32)
    return ModelCheckpoint(
        tensors=averaged,
        step=max(c.step for c in ordered),
        valid_loss=float(np.mean([c.valid_loss for c in ordered])),
        n_sources=len(ordered),
    )

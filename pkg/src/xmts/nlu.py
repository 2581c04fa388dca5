"""Miniature text encoder: masked-token pretraining, mean-pooled sentence
embeddings, and sentence-pair fine-tuning (3-way classification and cosine
similarity regression).  After fine-tuning the model acts as the frozen
teacher for cross-modal distillation.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nnet
from .autodiff import (AdamState, ContractViolation, ModelCheckpoint, ParamSet,
                       Var, adam_step, forward_backward)
from .nnet import LrSchedule, StackConfig, noam_lr

log = logging.getLogger("xmts.nlu")


@dataclass(frozen=True)
class NluConfig:
    dim: int = 24
    heads: int = 3
    ffn_dim: int = 48
    layers: int = 4

    @property
    def stack(self) -> StackConfig:
        return StackConfig(self.dim, self.heads, self.ffn_dim, self.layers)


@dataclass
class SentencePair:
    """Two token sequences with exactly one of: a 3-way class label, or a
    similarity target in [-1, 1]."""

    tokens_a: tuple[int, ...]
    tokens_b: tuple[int, ...]
    label: int | None = None
    similarity: float | None = None

    def __post_init__(self):
        self.tokens_a = tuple(int(t) for t in self.tokens_a)
        self.tokens_b = tuple(int(t) for t in self.tokens_b)
        if (self.label is None) == (self.similarity is None):
            raise ContractViolation("pair needs exactly one of label / similarity")
        if self.similarity is not None and not -1.0 <= self.similarity <= 1.0:
            raise ContractViolation("similarity target outside [-1, 1]")


class NluModel:
    """Token embedding table + encoder stack (+ train-time MLM head)."""

    def __init__(self, cfg: NluConfig, vocab_size: int, params: ParamSet):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.params = params

    @classmethod
    def create(cls, cfg: NluConfig, vocab_size: int, seed: int = 0,
               dtype=np.float32) -> "NluModel":
        rng = np.random.default_rng([seed, 0x6E6C75])
        params = ParamSet()
        params.add("nlu.embed.table",
                   nnet.glorot_uniform(rng, vocab_size, cfg.dim,
                                       (vocab_size, cfg.dim), dtype))
        for name, arr in nnet.init_stack_params(cfg.stack, "nlu.encoder", rng, dtype).items():
            params.add(name, arr)
        params.add("nlu.mlm_head.w", np.zeros((cfg.dim, vocab_size), dtype=dtype))
        params.add("nlu.mlm_head.b", np.zeros(vocab_size, dtype=dtype))
        return cls(cfg, vocab_size, params)

    def replace_params(self, params: ParamSet) -> "NluModel":
        return NluModel(self.cfg, self.vocab_size, params)

    def to_checkpoint(self, step: int = 0, valid_loss: float = 0.0) -> ModelCheckpoint:
        return ModelCheckpoint.from_params(self.params, step, valid_loss)

    @classmethod
    def from_checkpoint(cls, cfg: NluConfig, vocab_size: int,
                        ckpt: ModelCheckpoint) -> "NluModel":
        return cls(cfg, vocab_size, ckpt.to_params())

    @property
    def dtype(self):
        return self.params["nlu.embed.table"].dtype


def embed_tokens_var(model: NluModel, leaves, tokens,
                     position_table: np.ndarray | None = None) -> Var:
    """Token embeddings plus positions for one sequence, as a (T, dim) Var."""
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.size == 0:
        raise ContractViolation("cannot embed an empty token sequence")
    if tokens.min() < 0 or tokens.max() >= model.vocab_size:
        raise ContractViolation(f"unknown token id in {tokens.tolist()}")
    x = ad.gather_rows(leaves["nlu.embed.table"], tokens)
    if position_table is None:
        position_table = nnet.sinusoidal_positions(len(tokens), model.cfg.dim,
                                                   dtype=model.dtype)
    return x + Var(np.asarray(position_table[:len(tokens)], dtype=model.dtype))


def sentence_embed_var(model: NluModel, leaves, tokens,
                       position_table: np.ndarray | None = None) -> Var:
    x = embed_tokens_var(model, leaves, tokens, position_table)
    x = nnet.encode_var(model.cfg.stack, leaves, "nlu.encoder", x)
    return nnet.mean_pool_var(x)


def sentence_embed(model: NluModel, tokens,
                   position_table: np.ndarray | None = None) -> np.ndarray:
    """Mean-pooled sentence embedding of the given tokens (used verbatim;
    callers prepend the CLS token when following the teacher convention)."""
    leaves = {name: Var(arr) for name, arr in model.params.items()}
    return sentence_embed_var(model, leaves, tokens, position_table).data


@dataclass(frozen=True)
class MlmConfig:
    mask_prob: float = 0.15
    steps: int = 1500
    batch_size: int = 8
    schedule: LrSchedule = LrSchedule(300, 0.35, 24)
    seed: int = 0


def _mask_batch(texts, vocab, mask_prob, rng):
    """Pick a batch worth of (masked tokens, mask positions); a draw with no
    masked position anywhere is rejected and redrawn."""
    while True:
        batch = []
        masked_total = 0
        for tokens in texts:
            flags = np.array([vocab.is_maskable(t) for t in tokens])
            draw = (rng.random(len(tokens)) < mask_prob) & flags
            corrupted = tuple(vocab.mask_id if d else t for t, d in zip(tokens, draw))
            positions = np.flatnonzero(draw)
            masked_total += positions.size
            batch.append((corrupted, positions, tokens))
        if masked_total > 0:
            return batch


def _mlm_batch_loss(model, leaves, batch):
    nlls = []
    for corrupted, positions, original in batch:
        if positions.size == 0:
            continue
        x = embed_tokens_var(model, leaves, corrupted)
        enc = nnet.encode_var(model.cfg.stack, leaves, "nlu.encoder", x)
        logits = enc @ leaves["nlu.mlm_head.w"] + leaves["nlu.mlm_head.b"]
        lp = ad.log_softmax(logits, axis=-1)
        targets = np.asarray([original[p] for p in positions], dtype=np.intp)
        nlls.append(-ad.select(lp, positions, targets))
    return ad.concat(nlls, axis=0).mean()


def mlm_pretrain(model: NluModel, texts, vocab, cfg: MlmConfig):
    """Masked-token pretraining; returns (new model, per-step metrics)."""
    if cfg.steps == 0:
        return model, []
    rng = np.random.default_rng([cfg.seed, 0x6D6C6D])
    params = model.params.copy(deep=False)
    state = AdamState()
    metrics = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(texts), size=cfg.batch_size)
        batch = _mask_batch([texts[i] for i in idx], vocab, cfg.mask_prob, rng)
        loss, grads = forward_backward(
            lambda leaves: _mlm_batch_loss(model, leaves, batch), params)
        lr = noam_lr(cfg.schedule, step)
        params, state = adam_step(params, grads, state, lr)
        if step % 25 == 0 or step == cfg.steps:
            metrics.append({"step": step, "loss": loss, "lr": lr})
    return model.replace_params(params), metrics


def mlm_masked_accuracy(model: NluModel, texts, vocab, mask_prob: float,
                        seed: int = 0) -> float:
    """Fraction of masked positions recovered by argmax; chance is 1/V."""
    rng = np.random.default_rng([seed, 0x61636375])
    leaves = {name: Var(arr) for name, arr in model.params.items()}
    correct = total = 0
    for tokens in texts:
        batch = _mask_batch([tokens], vocab, mask_prob, rng)
        corrupted, positions, original = batch[0]
        x = embed_tokens_var(model, leaves, corrupted)
        enc = nnet.encode_var(model.cfg.stack, leaves, "nlu.encoder", x)
        logits = enc.data @ model.params["nlu.mlm_head.w"] + model.params["nlu.mlm_head.b"]
        pred = logits.argmax(axis=-1)
        for p in positions:
            total += 1
            correct += int(pred[p] == original[p])
    return correct / max(total, 1)


@dataclass(frozen=True)
class PairTrainConfig:
    steps: int = 600
    batch_size: int = 8
    schedule: LrSchedule = LrSchedule(150, 0.3, 24)
    seed: int = 0


def cosine_similarity_var(u: Var, v: Var) -> Var:
    """cos(u, v) with a 1e-8 norm floor; flags flooring via RuntimeWarning."""
    dot = (u * v).sum()
    sq = (u * u).sum() * (v * v).sum()
    if float(sq.data) < 1e-16:
        warnings.warn("cosine norm floor applied to a near-zero embedding",
                      RuntimeWarning, stacklevel=2)
    return dot * ad.power(ad.floor_at(sq, 1e-16), -0.5)


def finetune_pairs_classify(model: NluModel, pairs, cfg: PairTrainConfig):
    """3-way pair classification on concat(u, v, |u-v|); the classification
    head is dropped afterwards and only the encoder survives."""
    if any(p.label is None for p in pairs):
        raise ContractViolation("classification pairs need class labels")
    if len({p.label for p in pairs}) < 2:
        warnings.warn("single-class pair training set; task is degenerate",
                      UserWarning, stacklevel=2)
    if cfg.steps == 0:
        return model, []
    dtype = model.dtype
    params = model.params.copy(deep=False)
    params.add("pair_head.w", np.zeros((3 * model.cfg.dim, 3), dtype=dtype))
    params.add("pair_head.b", np.zeros(3, dtype=dtype))
    rng = np.random.default_rng([cfg.seed, 0x70636C])
    state = AdamState()
    metrics = []

    def batch_loss(leaves, batch):
        nlls = []
        for pair in batch:
            u = sentence_embed_var(model, leaves, pair.tokens_a)
            v = sentence_embed_var(model, leaves, pair.tokens_b)
            feats = ad.concat([u, v, ad.absolute(u - v)], axis=0)
            logits = feats @ leaves["pair_head.w"] + leaves["pair_head.b"]
            lp = ad.log_softmax(logits, axis=-1)
            nlls.append(-ad.narrow(lp, 0, pair.label, 1))
        return ad.concat(nlls, axis=0).mean()

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        batch = [pairs[i] for i in idx]
        loss, grads = forward_backward(lambda lv: batch_loss(lv, batch), params)
        lr = noam_lr(cfg.schedule, step)
        params, state = adam_step(params, grads, state, lr)
        if step % 25 == 0 or step == cfg.steps:
            metrics.append({"step": step, "loss": loss, "lr": lr, "task": "classify"})
    kept = ParamSet()
    for name, arr in params.items():
        if not name.startswith("pair_head."):
            kept.add(name, arr)
    return model.replace_params(kept), metrics


def finetune_pairs_similarity(model: NluModel, pairs, cfg: PairTrainConfig):
    """Regress cos(u, v) to the pair target with mean-squared error."""
    if any(p.similarity is None for p in pairs):
        raise ContractViolation("similarity pairs need similarity targets")
    if cfg.steps == 0:
        return model, []
    params = model.params.copy(deep=False)
    rng = np.random.default_rng([cfg.seed, 0x73696D])
    state = AdamState()
    metrics = []

    def batch_loss(leaves, batch):
        errs = []
        for pair in batch:
            u = sentence_embed_var(model, leaves, pair.tokens_a)
            v = sentence_embed_var(model, leaves, pair.tokens_b)
            diff = cosine_similarity_var(u, v) - pair.similarity
            errs.append((diff * diff).reshape((1,)))
        return ad.concat(errs, axis=0).mean()

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(pairs), size=cfg.batch_size)
        batch = [pairs[i] for i in idx]
        loss, grads = forward_backward(lambda lv: batch_loss(lv, batch), params)
        lr = noam_lr(cfg.schedule, step)
        params, state = adam_step(params, grads, state, lr)
        if step % 25 == 0 or step == cfg.steps:
            metrics.append({"step": step, "loss": loss, "lr": lr, "task": "similarity"})
    return model.replace_params(params), metrics

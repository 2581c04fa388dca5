"""Miniature joint CTC/attention speech recognizer.

The frontend stacks pairs of consecutive frames and linearly projects them,
twice, so the encoded length is ceil(ceil(T/2)/2).  Training minimizes
ctc_weight * CTC(encoder head) + (1 - ctc_weight) * mean token cross-entropy
of a teacher-forced attention decoder.  The CTC loss runs the forward
algorithm over the blank-interleaved label sequence entirely in log space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import nnet
from .autodiff import (AdamState, ContractViolation, ModelCheckpoint,
                       NumericFault, ParamSet, Var, XmtsError, adam_step,
                       forward_backward)
from .nnet import LrSchedule, StackConfig, noam_lr

log = logging.getLogger("xmts.asr")


class InfeasibleAlignmentError(XmtsError):
    """The CTC target cannot be aligned within the available time steps."""


@dataclass(frozen=True)
class AsrConfig:
    dim: int = 16
    heads: int = 2
    ffn_dim: int = 32
    enc_layers: int = 4
    dec_layers: int = 2

    @property
    def encoder_stack(self) -> StackConfig:
        return StackConfig(self.dim, self.heads, self.ffn_dim, self.enc_layers)


@dataclass(frozen=True)
class JointLossConfig:
    ctc_weight: float = 0.3
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ContractViolation("ctc_weight must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractViolation("label_smoothing must lie in [0, 1)")


@dataclass(frozen=True)
class SpecAugmentPolicy:
    num_time_masks: int = 1
    max_time_width: int = 6
    num_freq_masks: int = 1
    max_freq_width: int = 2
    seed: int = 0


def encoder_length(num_frames: int) -> int:
    return math.ceil(math.ceil(num_frames / 2) / 2)


class Decoded(NamedTuple):
    tokens: tuple[int, ...]
    truncated: bool


class AsrModel:
    """Frontend + encoder + CTC head + attention decoder over one vocab."""

    def __init__(self, cfg: AsrConfig, vocab_size: int, frame_dim: int,
                 params: ParamSet):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.frame_dim = frame_dim
        self.params = params

    @classmethod
    def create(cls, cfg: AsrConfig, vocab_size: int, frame_dim: int,
               seed: int = 0, dtype=np.float32) -> "AsrModel":
        rng = np.random.default_rng([seed, 0x617372])
        d = cfg.dim
        params = ParamSet()
        params.add("asr.frontend.stage0.w",
                   nnet.glorot_uniform(rng, 2 * frame_dim, d, (2 * frame_dim, d), dtype))
        params.add("asr.frontend.stage0.b", np.zeros(d, dtype=dtype))
        params.add("asr.frontend.stage1.w",
                   nnet.glorot_uniform(rng, 2 * d, d, (2 * d, d), dtype))
        params.add("asr.frontend.stage1.b", np.zeros(d, dtype=dtype))
        for name, arr in nnet.init_stack_params(cfg.encoder_stack, "asr.encoder",
                                                rng, dtype).items():
            params.add(name, arr)
        params.add("asr.ctc_head.w", np.zeros((d, vocab_size), dtype=dtype))
        params.add("asr.ctc_head.b", np.zeros(vocab_size, dtype=dtype))
        params.add("asr.decoder.embed",
                   nnet.glorot_uniform(rng, vocab_size, d, (vocab_size, d), dtype))
        for i in range(cfg.dec_layers):
            base = f"asr.decoder.layer{i}"
            for block in ("self", "cross"):
                for mat in ("wq", "wk", "wv", "wo"):
                    params.add(f"{base}.{block}.{mat}",
                               nnet.glorot_uniform(rng, d, d, (d, d), dtype))
                for vec in ("bq", "bk", "bv", "bo"):
                    params.add(f"{base}.{block}.{vec}", np.zeros(d, dtype=dtype))
            for ln in ("ln1", "ln2", "ln3"):
                params.add(f"{base}.{ln}.gamma", np.ones(d, dtype=dtype))
                params.add(f"{base}.{ln}.beta", np.zeros(d, dtype=dtype))
            params.add(f"{base}.ffn.w1",
                       nnet.glorot_uniform(rng, d, cfg.ffn_dim, (d, cfg.ffn_dim), dtype))
            params.add(f"{base}.ffn.b1", np.zeros(cfg.ffn_dim, dtype=dtype))
            params.add(f"{base}.ffn.w2",
                       nnet.glorot_uniform(rng, cfg.ffn_dim, d, (cfg.ffn_dim, d), dtype))
            params.add(f"{base}.ffn.b2", np.zeros(d, dtype=dtype))
        params.add("asr.decoder.out.w", np.zeros((d, vocab_size), dtype=dtype))
        params.add("asr.decoder.out.b", np.zeros(vocab_size, dtype=dtype))
        return cls(cfg, vocab_size, frame_dim, params)

    def replace_params(self, params: ParamSet) -> "AsrModel":
        return AsrModel(self.cfg, self.vocab_size, self.frame_dim, params)

    def to_checkpoint(self, step: int = 0, valid_loss: float = 0.0) -> ModelCheckpoint:
        return ModelCheckpoint.from_params(self.params, step, valid_loss)

    @classmethod
    def from_checkpoint(cls, cfg: AsrConfig, vocab_size: int, frame_dim: int,
                        ckpt: ModelCheckpoint) -> "AsrModel":
        return cls(cfg, vocab_size, frame_dim, ckpt.to_params())

    @property
    def dtype(self):
        return self.params["asr.frontend.stage0.w"].dtype

    def leaves(self) -> dict[str, Var]:
        return {name: Var(arr) for name, arr in self.params.items()}


def _stack_pairs(x: Var) -> Var:
    """(T, d) -> (ceil(T/2), 2d): concatenate consecutive rows, zero-padded."""
    T, d = x.data.shape
    if T % 2 == 1:
        x = ad.concat([x, Var(np.zeros((1, d), dtype=x.data.dtype))], axis=0)
        T += 1
    return x.reshape((T // 2, 2 * d))


def subsample_var(leaves, frames: np.ndarray, dtype) -> Var:
    """Two stack-and-project stages; output length is ceil(ceil(T/2)/2)."""
    x = Var(np.asarray(frames, dtype=dtype))
    x = ad.relu(_stack_pairs(x) @ leaves["asr.frontend.stage0.w"]
                + leaves["asr.frontend.stage0.b"])
    x = ad.relu(_stack_pairs(x) @ leaves["asr.frontend.stage1.w"]
                + leaves["asr.frontend.stage1.b"])
    return x


def encode_frames_var(model: AsrModel, leaves, frames: np.ndarray) -> Var:
    """Frontend, positional encoding, then the encoder stack."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != model.frame_dim:
        raise ContractViolation(
            f"frame width {frames.shape} incompatible with frontend ({model.frame_dim})")
    x = subsample_var(leaves, frames, model.dtype)
    pos = nnet.sinusoidal_positions(x.data.shape[0], model.cfg.dim, dtype=model.dtype)
    # sqrt(dim) keeps the content term from being swamped by the positions
    x = x * math.sqrt(model.cfg.dim) + Var(pos)
    return nnet.encode_var(model.cfg.encoder_stack, leaves, "asr.encoder", x)


def ctc_log_probs_var(model: AsrModel, leaves, frames: np.ndarray) -> Var:
    enc = encode_frames_var(model, leaves, frames)
    return ad.log_softmax(enc @ leaves["asr.ctc_head.w"] + leaves["asr.ctc_head.b"],
                          axis=-1)


def ctc_required_length(target) -> int:
    """Minimum number of frames that admits a valid alignment."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(logprobs: Var | np.ndarray, target, blank: int = 0) -> Var:
    """Negative log-likelihood summed over all valid CTC alignments.

    ``logprobs`` is a (T, V) log-softmax matrix; the forward algorithm runs
    over the blank-interleaved label sequence in log space.
    """
    lp = logprobs if isinstance(logprobs, Var) else Var(np.asarray(logprobs, dtype=np.float64))
    target = tuple(int(t) for t in target)
    if not target:
        raise ContractViolation("CTC target must be non-empty")
    T, V = lp.data.shape
    if max(target) >= V or min(target) < 0 or blank >= V:
        raise ContractViolation("CTC target token outside the vocabulary")
    row_sums = np.exp(lp.data).sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ContractViolation("logprob rows must be normalized log-softmax")
    if T < ctc_required_length(target):
        raise InfeasibleAlignmentError(
            f"target of length {len(target)} (+repeats) does not fit in {T} frames")

    ext = [blank]
    for t in target:
        ext += [t, blank]
    S = len(ext)
    ext_idx = np.asarray(ext, dtype=np.intp)
    dtype = lp.data.dtype
    neg_inf = np.asarray(-np.inf, dtype=dtype)

    # A diagonal skip s-2 -> s is allowed only onto a non-blank label that
    # differs from the label two states back.
    skip_ok = np.full(S, -np.inf, dtype=dtype)
    for s in range(2, S):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            skip_ok[s] = 0.0
    skip_bias = Var(skip_ok)
    pad1 = Var(np.full(1, -np.inf, dtype=dtype))
    pad2 = Var(np.full(2, -np.inf, dtype=dtype))

    em0 = ad.select(lp, np.zeros(2, dtype=np.intp), ext_idx[:2])
    alpha = ad.concat([em0, Var(np.full(S - 2, -np.inf, dtype=dtype))], axis=0) \
        if S > 2 else em0
    for t in range(1, T):
        em = ad.select(lp, np.full(S, t, dtype=np.intp), ext_idx)
        stay = alpha
        step1 = ad.concat([pad1, ad.narrow(alpha, 0, 0, S - 1)], axis=0)
        moved = ad.logaddexp(stay, step1)
        if S > 2:
            step2 = ad.concat([pad2, ad.narrow(alpha, 0, 0, S - 2)], axis=0) + skip_bias
            moved = ad.logaddexp(moved, step2)
        alpha = em + moved
    if S >= 2:
        tail = ad.logaddexp(ad.narrow(alpha, 0, S - 1, 1), ad.narrow(alpha, 0, S - 2, 1))
    else:
        tail = ad.narrow(alpha, 0, S - 1, 1)
    loss = -tail.reshape(())
    if np.isneginf(tail.data).any():
        raise InfeasibleAlignmentError("no valid alignment has nonzero probability")
    return loss


def _causal_bias(length: int, dtype) -> np.ndarray:
    bias = np.zeros((length, length), dtype=dtype)
    bias[np.triu_indices(length, k=1)] = -np.inf
    return bias


def _decoder_var(model: AsrModel, leaves, dec_tokens, enc: Var) -> Var:
    """Teacher-forced decoder states for the given input tokens, (L, dim)."""
    cfg = model.cfg
    d = cfg.dim
    dh = d // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    idx = np.asarray(dec_tokens, dtype=np.intp)
    x = ad.gather_rows(leaves["asr.decoder.embed"], idx) * math.sqrt(d)
    x = x + Var(nnet.sinusoidal_positions(len(dec_tokens), d, dtype=model.dtype))
    causal = _causal_bias(len(dec_tokens), model.dtype)
    for i in range(cfg.dec_layers):
        base = f"asr.decoder.layer{i}"
        q = x @ leaves[f"{base}.self.wq"] + leaves[f"{base}.self.bq"]
        k = x @ leaves[f"{base}.self.wk"] + leaves[f"{base}.self.bk"]
        v = x @ leaves[f"{base}.self.wv"] + leaves[f"{base}.self.bv"]
        heads = []
        for h in range(cfg.heads):
            qh, kh, vh = (ad.narrow(m, 1, h * dh, dh) for m in (q, k, v))
            scores = (qh @ kh.T) * scale + Var(causal)
            heads.append(ad.softmax(scores, axis=-1) @ vh)
        ctx = heads[0] if cfg.heads == 1 else ad.concat(heads, axis=1)
        x = nnet.layer_norm(x + (ctx @ leaves[f"{base}.self.wo"] + leaves[f"{base}.self.bo"]),
                            leaves[f"{base}.ln1.gamma"], leaves[f"{base}.ln1.beta"])
        q = x @ leaves[f"{base}.cross.wq"] + leaves[f"{base}.cross.bq"]
        k = enc @ leaves[f"{base}.cross.wk"] + leaves[f"{base}.cross.bk"]
        v = enc @ leaves[f"{base}.cross.wv"] + leaves[f"{base}.cross.bv"]
        heads = []
        for h in range(cfg.heads):
            qh, kh, vh = (ad.narrow(m, 1, h * dh, dh) for m in (q, k, v))
            scores = (qh @ kh.T) * scale
            heads.append(ad.softmax(scores, axis=-1) @ vh)
        ctx = heads[0] if cfg.heads == 1 else ad.concat(heads, axis=1)
        x = nnet.layer_norm(x + (ctx @ leaves[f"{base}.cross.wo"] + leaves[f"{base}.cross.bo"]),
                            leaves[f"{base}.ln2.gamma"], leaves[f"{base}.ln2.beta"])
        inner = ad.relu(x @ leaves[f"{base}.ffn.w1"] + leaves[f"{base}.ffn.b1"])
        x = nnet.layer_norm(x + (inner @ leaves[f"{base}.ffn.w2"] + leaves[f"{base}.ffn.b2"]),
                            leaves[f"{base}.ln3.gamma"], leaves[f"{base}.ln3.beta"])
    return x


def decoder_ce_var(model: AsrModel, leaves, enc: Var, target, bos: int, eos: int,
                   label_smoothing: float = 0.0) -> Var:
    """Mean per-token cross-entropy with teacher forcing and sentinels."""
    dec_in = (bos,) + tuple(target)
    dec_out = tuple(target) + (eos,)
    states = _decoder_var(model, leaves, dec_in, enc)
    logits = states @ leaves["asr.decoder.out.w"] + leaves["asr.decoder.out.b"]
    lp = ad.log_softmax(logits, axis=-1)
    n = len(dec_out)
    nll = -ad.select(lp, np.arange(n, dtype=np.intp), np.asarray(dec_out, dtype=np.intp)).mean()
    if label_smoothing > 0.0:
        uniform = -lp.mean()
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    return nll


def joint_asr_loss_var(model: AsrModel, leaves, frames, target,
                       cfg: JointLossConfig, blank: int, bos: int, eos: int) -> Var:
    enc = encode_frames_var(model, leaves, frames)
    lam = cfg.ctc_weight
    parts = []
    if lam > 0.0:
        lp = ad.log_softmax(enc @ leaves["asr.ctc_head.w"] + leaves["asr.ctc_head.b"],
                            axis=-1)
        parts.append(lam * ctc_loss(lp, target, blank))
    if lam < 1.0:
        parts.append((1.0 - lam) * decoder_ce_var(model, leaves, enc, target, bos, eos,
                                                  cfg.label_smoothing))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def joint_asr_loss(model: AsrModel, utterance, cfg: JointLossConfig, blank: int,
                   bos: int, eos: int) -> float:
    leaves = model.leaves()
    return float(joint_asr_loss_var(model, leaves, utterance.frames,
                                    utterance.tokens, cfg, blank, bos, eos).data)


def spec_augment(frames: np.ndarray, policy: SpecAugmentPolicy,
                 rng: np.random.Generator) -> np.ndarray:
    """Zero random time and feature bands; the input array is left unchanged."""
    out = np.array(frames, copy=True)
    T, d = out.shape
    for _ in range(policy.num_time_masks):
        w = int(rng.integers(0, min(policy.max_time_width, T) + 1))
        start = int(rng.integers(0, T - w + 1))
        out[start:start + w, :] = 0.0
    for _ in range(policy.num_freq_masks):
        w = int(rng.integers(0, min(policy.max_freq_width, d) + 1))
        start = int(rng.integers(0, d - w + 1))
        out[:, start:start + w] = 0.0
    return out


def greedy_decode(model: AsrModel, frames: np.ndarray, bos: int, eos: int) -> Decoded:
    """Argmax decoding until the end sentinel or 2*encoded_length + 5 tokens."""
    frames = np.asarray(frames)
    if frames.shape[0] == 0:
        raise ContractViolation("cannot decode an empty frame sequence")
    leaves = model.leaves()
    enc = encode_frames_var(model, leaves, frames)
    cap = 2 * encoder_length(frames.shape[0]) + 5
    tokens: list[int] = []
    while len(tokens) < cap:
        states = _decoder_var(model, leaves, (bos, *tokens), enc)
        logits = states.data[-1] @ model.params["asr.decoder.out.w"] \
            + model.params["asr.decoder.out.b"]
        nxt = int(np.argmax(logits))
        if nxt == eos:
            return Decoded(tuple(tokens), False)
        tokens.append(nxt)
    return Decoded(tuple(tokens), True)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * len(hyp)
        for j in range(1, len(hyp) + 1):
            cur[j] = min(prev[j] + 1,
                         cur[j - 1] + 1,
                         prev[j - 1] + (ref[i - 1] != hyp[j - 1]))
        prev = cur
    return prev[len(hyp)]


def word_error_rate(ref, hyp) -> float:
    """Edit distance divided by reference length; may exceed 1."""
    ref = list(ref)
    if not ref:
        raise ContractViolation("WER reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


@dataclass(frozen=True)
class AsrTrainConfig:
    epochs: int = 24
    batch_size: int = 8
    average_best: int = 7
    schedule: LrSchedule = LrSchedule(150, 0.2, 16)
    joint: JointLossConfig = JointLossConfig()
    augment: SpecAugmentPolicy | None = SpecAugmentPolicy()
    seed: int = 0


def _mean_joint_loss(model, leaves, batch, joint_cfg, blank, bos, eos):
    total = None
    for frames, tokens in batch:
        term = joint_asr_loss_var(model, leaves, frames, tokens, joint_cfg,
                                  blank, bos, eos)
        total = term if total is None else total + term
    return total * (1.0 / len(batch))


def validation_loss(model: AsrModel, corpus, joint_cfg: JointLossConfig,
                    blank: int, bos: int, eos: int) -> float:
    leaves = model.leaves()
    losses = [float(joint_asr_loss_var(model, leaves, u.frames, u.tokens,
                                       joint_cfg, blank, bos, eos).data)
              for u in corpus]
    return float(np.mean(losses))


def train_asr(model: AsrModel, train_corpus, valid_corpus, cfg: AsrTrainConfig,
              blank: int, bos: int, eos: int):
    """Epoch training with per-epoch validation checkpoints; the final model
    averages the best-validation checkpoints.  Returns
    (checkpoints, final model, per-epoch metrics)."""
    if cfg.epochs == 0:
        return [], model, []
    if len(train_corpus) == 0 or len(valid_corpus) == 0:
        raise ContractViolation("train and valid corpora must be non-empty")
    rng = np.random.default_rng([cfg.seed, 0x747261])
    params = model.params.copy(deep=False)
    state = AdamState()
    step = 0
    ckpts: list[ModelCheckpoint] = []
    metrics = []
    utts = list(train_corpus)
    aborted = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(utts))
        epoch_losses = []
        lr = noam_lr(cfg.schedule, max(step, 1))
        for lo in range(0, len(order), cfg.batch_size):
            batch = []
            for j in order[lo:lo + cfg.batch_size]:
                u = utts[j]
                frames = u.frames
                if cfg.augment is not None:
                    frames = spec_augment(frames, cfg.augment, rng)
                batch.append((frames, u.tokens))
            step += 1
            lr = noam_lr(cfg.schedule, step)
            try:
                loss, grads = forward_backward(
                    lambda lv: _mean_joint_loss(model, lv, batch, cfg.joint,
                                                blank, bos, eos), params)
            except NumericFault as err:
                log.error("training diverged at step %d: %s", step, err)
                aborted = True
                break
            params, state = adam_step(params, grads, state, lr)
            epoch_losses.append(loss)
        if aborted:
            break
        snapshot = model.replace_params(params)
        vloss = validation_loss(snapshot, valid_corpus, cfg.joint, blank, bos, eos)
        ckpts.append(snapshot.to_checkpoint(step=step, valid_loss=vloss))
        metrics.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                        "valid_loss": vloss, "lr": lr, "step": step})
    if not ckpts:
        raise NumericFault("training diverged before the first checkpoint")
    best = nnet.select_best(ckpts, min(cfg.average_best, len(ckpts)))
    averaged = nnet.average_checkpoints(best)
    final = model.replace_params(averaged.to_params())
    avg_vloss = validation_loss(final, valid_corpus, cfg.joint, blank, bos, eos)
    metrics.append({"epoch": "averaged", "valid_loss": avg_vloss,
                    "selected": sorted(c.step for c in best),
                    "selected_worst_valid_loss": max(c.valid_loss for c in best)})
    return ckpts, final, metrics

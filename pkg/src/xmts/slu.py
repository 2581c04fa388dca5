"""Student assembly and cross-modal teacher-student distillation.

The student splices the trained speech encoder into the text encoder stack
through a learnable linear bridge: frames -> frontend -> speech encoder
layers -> bridge -> positional re-encoding -> former text-encoder layers ->
mean pooling.  Distillation minimizes a distance (cosine, L2, or L1) between
the student's utterance embedding for the audio and the frozen teacher's
sentence embedding for the transcript, updating only the bridge, the top-k
speech encoder layers, and the bottom-m text layers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nnet
from .asr import AsrConfig, AsrModel, subsample_var
from .autodiff import (AdamState, ContractViolation, ModelCheckpoint,
                       NumericFault, ParamSet, Var, XmtsError, adam_step,
                       forward_backward)
from .nlu import NluConfig, NluModel, cosine_similarity_var, sentence_embed
from .nnet import FreezeMask, LrSchedule, noam_lr
from .synthdata import teacher_view

log = logging.getLogger("xmts.slu")

DISTANCE_KINDS = ("cosine", "L2", "L1")


class AssemblyError(XmtsError):
    """A splice-point parameter prefix was missing during student assembly."""


@dataclass(frozen=True)
class DistillConfig:
    objective: str = "L1"
    asr_layers_to_tune: int = 2
    nlu_layers_to_tune: int = 0
    schedule: LrSchedule = LrSchedule(250, 0.5, 24)
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.objective not in DISTANCE_KINDS:
            raise ContractViolation(f"unknown distance objective {self.objective!r}")
        if self.asr_layers_to_tune < 0 or self.nlu_layers_to_tune < 0:
            raise ContractViolation("layer counts must be non-negative")


class StudentModel:
    """Speech-to-embedding model built from trained ASR and NLU parts."""

    def __init__(self, asr_cfg: AsrConfig, nlu_cfg: NluConfig, frame_dim: int,
                 params: ParamSet):
        self.asr_cfg = asr_cfg
        self.nlu_cfg = nlu_cfg
        self.frame_dim = frame_dim
        self.params = params

    def replace_params(self, params: ParamSet) -> "StudentModel":
        return StudentModel(self.asr_cfg, self.nlu_cfg, self.frame_dim, params)

    def to_checkpoint(self, step: int = 0, valid_loss: float = 0.0) -> ModelCheckpoint:
        return ModelCheckpoint.from_params(self.params, step, valid_loss)

    @classmethod
    def from_checkpoint(cls, asr_cfg: AsrConfig, nlu_cfg: NluConfig, frame_dim: int,
                        ckpt: ModelCheckpoint) -> "StudentModel":
        return cls(asr_cfg, nlu_cfg, frame_dim, ckpt.to_params())

    @property
    def dtype(self):
        return self.params["slu.bridge.w"].dtype

    def leaves(self) -> dict[str, Var]:
        return {name: Var(arr) for name, arr in self.params.items()}

    def tuned_prefixes(self, k: int, m: int) -> tuple[str, ...]:
        """Prefixes trained during distillation: bridge, top-k speech layers
        (closest to the bridge), bottom-m text layers."""
        if k > self.asr_cfg.enc_layers or m > self.nlu_cfg.layers:
            raise ContractViolation("layer selection exceeds stack depth")
        prefixes = ["slu.bridge."]
        prefixes += [f"slu.encoder.layer{i}."
                     for i in range(self.asr_cfg.enc_layers - k, self.asr_cfg.enc_layers)]
        prefixes += [f"slu.nlu.layer{i}." for i in range(m)]
        return tuple(prefixes)


def _copy_prefixed(src: ParamSet, dst: ParamSet, src_prefix: str, dst_prefix: str) -> int:
    n = 0
    for name, arr in src.items():
        if name.startswith(src_prefix):
            dst.add(dst_prefix + name[len(src_prefix):], arr.copy())
            n += 1
    return n


def assemble_student(asr_model: AsrModel, nlu_model: NluModel, seed: int = 0) -> StudentModel:
    """Deep-copy the speech frontend/encoder and the text encoder layers and
    join them with a freshly initialized linear bridge.  The CTC head and the
    attention decoder are discarded; the sources share no storage with the
    student."""
    d_asr, d_nlu = asr_model.cfg.dim, nlu_model.cfg.dim
    params = ParamSet()
    if _copy_prefixed(asr_model.params, params, "asr.frontend.", "slu.frontend.") == 0:
        raise AssemblyError("missing parameter prefix 'asr.frontend.'")
    for i in range(asr_model.cfg.enc_layers):
        if _copy_prefixed(asr_model.params, params,
                          f"asr.encoder.layer{i}.", f"slu.encoder.layer{i}.") == 0:
            raise AssemblyError(f"missing parameter prefix 'asr.encoder.layer{i}.'")
    rng = np.random.default_rng([seed, 0x627267])
    bound = math.sqrt(6.0 / (d_asr + d_nlu))
    dtype = asr_model.dtype
    params.add("slu.bridge.w", rng.uniform(-bound, bound, size=(d_asr, d_nlu)).astype(dtype))
    params.add("slu.bridge.b", np.zeros(d_nlu, dtype=dtype))
    for i in range(nlu_model.cfg.layers):
        if _copy_prefixed(nlu_model.params, params,
                          f"nlu.encoder.layer{i}.", f"slu.nlu.layer{i}.") == 0:
            raise AssemblyError(f"missing parameter prefix 'nlu.encoder.layer{i}.'")
    return StudentModel(asr_model.cfg, nlu_model.cfg, asr_model.frame_dim, params)


def student_embed_var(student: StudentModel, leaves, frames: np.ndarray) -> Var:
    """frames -> frontend -> speech layers -> bridge -> positions -> text
    layers -> mean pool; a (dim_nlu,) Var."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != student.frame_dim:
        raise ContractViolation(
            f"frame width {frames.shape} incompatible with frontend ({student.frame_dim})")
    if frames.shape[0] == 0:
        raise ContractViolation("cannot embed an empty frame sequence")
    dtype = student.dtype
    x = subsample_var(_prefixed_view(leaves, "slu.frontend.", "asr.frontend."),
                      frames, dtype)
    x = x + Var(nnet.sinusoidal_positions(x.data.shape[0], student.asr_cfg.dim, dtype))
    x = nnet.encode_var(student.asr_cfg.encoder_stack, leaves, "slu.encoder", x)
    x = x @ leaves["slu.bridge.w"] + leaves["slu.bridge.b"]
    x = x + Var(nnet.sinusoidal_positions(x.data.shape[0], student.nlu_cfg.dim, dtype))
    x = nnet.encode_var(
        nnet.StackConfig(student.nlu_cfg.dim, student.nlu_cfg.heads,
                         student.nlu_cfg.ffn_dim, student.nlu_cfg.layers),
        leaves, "slu.nlu", x)
    return nnet.mean_pool_var(x)


def _prefixed_view(leaves, actual_prefix, expected_prefix):
    """Adapter so frontend code written against one prefix can run on another."""
    return {expected_prefix + name[len(actual_prefix):]: var
            for name, var in leaves.items() if name.startswith(actual_prefix)}


def student_embed(student: StudentModel, frames: np.ndarray) -> np.ndarray:
    return student_embed_var(student, student.leaves(), frames).data


def distance(a, b, kind: str) -> Var:
    """Differentiable embedding distance, symmetric and >= 0.

    cosine: 1 - cos(a, b); L2: mean over dimensions of squared differences;
    L1: mean over dimensions of absolute differences.
    """
    if kind not in DISTANCE_KINDS:
        raise ContractViolation(f"unknown distance kind {kind!r}")
    a = a if isinstance(a, Var) else Var(np.asarray(a, dtype=np.float64))
    b = b if isinstance(b, Var) else Var(np.asarray(b, dtype=np.float64))
    if a.data.shape != b.data.shape:
        raise ContractViolation(
            f"embedding widths differ: {a.data.shape} vs {b.data.shape}")
    if kind == "cosine":
        return 1.0 - cosine_similarity_var(a, b)
    diff = a - b
    if kind == "L2":
        return (diff * diff).mean()
    return ad.absolute(diff).mean()


def teacher_embeddings(teacher: NluModel, corpus, vocab) -> dict[str, np.ndarray]:
    """Precompute frozen-teacher embeddings for every utterance transcript."""
    return {u.id: sentence_embed(teacher, teacher_view(u, vocab)) for u in corpus}


def _corpus_distance(student, leaves, corpus, targets, kind) -> float:
    vals = []
    for u in corpus:
        emb = student_embed_var(student, leaves, u.frames)
        vals.append(float(distance(emb, Var(targets[u.id]), kind).data))
    return float(np.mean(vals))


def distill(student: StudentModel, teacher: NluModel, train_corpus, valid_corpus,
            vocab, cfg: DistillConfig):
    """Teacher-student alignment; returns (new student, per-epoch metrics).

    The teacher is never updated (checksum-verified), and only the selected
    student partition may change (also checksum-verified).  No augmentation
    is applied anywhere in this loop.
    """
    k, m = cfg.asr_layers_to_tune, cfg.nlu_layers_to_tune
    mask = FreezeMask(student.tuned_prefixes(k, m))
    params = student.params.copy(deep=False)
    mask.apply(params)
    _, frozen_names = mask.partition(params)
    teacher_before = teacher.params.checksum()
    frozen_before = params.checksum(frozen_names)

    targets = teacher_embeddings(teacher, train_corpus, vocab)
    targets.update(teacher_embeddings(teacher, valid_corpus, vocab))

    def epoch_row(epoch, train_d, valid_d, lr):
        return {"epoch": epoch, "train_distance": train_d, "valid_distance": valid_d,
                "objective": cfg.objective, "k": k, "m": m, "lr": lr}

    current = student.replace_params(params)
    metrics = [epoch_row(
        0,
        _corpus_distance(current, current.leaves(), train_corpus, targets, cfg.objective),
        _corpus_distance(current, current.leaves(), valid_corpus, targets, cfg.objective),
        0.0)]

    rng = np.random.default_rng([cfg.seed, 0x646973])
    state = AdamState()
    step = 0
    utts = list(train_corpus)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(utts))
        epoch_losses = []
        lr = 0.0
        aborted = False
        for lo in range(0, len(order), cfg.batch_size):
            batch = [utts[j] for j in order[lo:lo + cfg.batch_size]]
            step += 1
            lr = noam_lr(cfg.schedule, step)

            def batch_loss(leaves):
                total = None
                for u in batch:
                    emb = student_embed_var(current, leaves, u.frames)
                    term = distance(emb, Var(targets[u.id]), cfg.objective)
                    total = term if total is None else total + term
                return total * (1.0 / len(batch))

            try:
                loss, grads = forward_backward(batch_loss, params)
            except NumericFault as err:
                log.error("distillation diverged at step %d: %s", step, err)
                aborted = True
                break
            params, state = adam_step(params, grads, state, lr)
            current = student.replace_params(params)
            epoch_losses.append(loss)
        if aborted:
            break
        metrics.append(epoch_row(
            epoch,
            float(np.mean(epoch_losses)),
            _corpus_distance(current, current.leaves(), valid_corpus, targets, cfg.objective),
            lr))

    if teacher.params.checksum() != teacher_before:
        raise NumericFault("teacher parameters changed during distillation")
    if params.checksum(frozen_names) != frozen_before:
        raise NumericFault("frozen student parameters changed during distillation")
    return current, metrics


def layer_ablation(student: StudentModel, teacher: NluModel, train_corpus,
                   valid_corpus, vocab, asr_choices, nlu_choices,
                   base_cfg: DistillConfig):
    """One distillation run per (k, m) combination from the same initial
    student; rows sorted by (k, m)."""
    combos = sorted({(int(k), int(m)) for k in asr_choices for m in nlu_choices})
    rows = []
    for k, m in combos:
        cfg = replace(base_cfg, asr_layers_to_tune=k, nlu_layers_to_tune=m)
        fresh = student.replace_params(student.params.copy(deep=True))
        mask = FreezeMask(fresh.tuned_prefixes(k, m))
        mask.apply(fresh.params)
        trainable_values = sum(fresh.params[n].size
                               for n in fresh.params.trainable_names())
        _, metrics = distill(fresh, teacher, train_corpus, valid_corpus, vocab, cfg)
        rows.append({"asr_layers": k, "nlu_layers": m,
                     "valid_distance": metrics[-1]["valid_distance"],
                     "trainable_values": trainable_values})
    return rows

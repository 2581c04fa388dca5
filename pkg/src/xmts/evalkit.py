"""Downstream evaluation protocol: linear classifier on teacher sentence
embeddings, zero-shot testing on student utterance embeddings, the
ASR-then-NLU pipeline baseline, few-shot supervised fine-tuning, and the
WER-bucketed accuracy report.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnet
from .asr import AsrModel, Decoded, greedy_decode, word_error_rate
from .autodiff import (AdamState, ContractViolation, ParamSet, Var, adam_step,
                       forward_backward)
from .nlu import NluModel, sentence_embed
from .nnet import FreezeMask
from .slu import StudentModel, student_embed, student_embed_var
from .synthdata import Corpus, Vocab, teacher_view

log = logging.getLogger("xmts.evalkit")

FEWSHOT_MODES = ("output_only", "output_plus_encoder_layers")


@dataclass(frozen=True)
class ClassifierConfig:
    steps: int = 2000
    lr: float = 1e-2
    seed: int = 0


class Classifier:
    """A single affine layer with softmax over class logits."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight)
        self.bias = np.asarray(bias)

    @classmethod
    def zeros(cls, dim: int, num_classes: int, dtype=np.float32) -> "Classifier":
        return cls(np.zeros((dim, num_classes), dtype=dtype),
                   np.zeros(num_classes, dtype=dtype))

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def logits(self, emb: np.ndarray) -> np.ndarray:
        return np.asarray(emb) @ self.weight + self.bias

    def predict(self, emb: np.ndarray) -> int:
        # np.argmax resolves ties toward the lowest class id
        return int(np.argmax(self.logits(emb)))

    def copy(self) -> "Classifier":
        return Classifier(self.weight.copy(), self.bias.copy())


def _ce_loss_var(logits: Var, labels: np.ndarray) -> Var:
    lp = ad.log_softmax(logits, axis=-1)
    n = labels.shape[0]
    return -ad.select(lp, np.arange(n, dtype=np.intp),
                      labels.astype(np.intp)).mean()


def train_classifier(embeddings, labels, num_classes: int,
                     cfg: ClassifierConfig) -> Classifier:
    """Full-batch Adam on cross-entropy from a zero initialization."""
    X = np.stack([np.asarray(e) for e in embeddings]).astype(np.float64)
    y = np.asarray(labels, dtype=np.intp)
    if len({int(v) for v in y}) < 2:
        raise ContractViolation("classifier training needs at least 2 labels")
    if X.ndim != 2:
        raise ContractViolation("embeddings must share a single width")
    clf = Classifier.zeros(X.shape[1], num_classes, dtype=np.float64)
    if cfg.steps == 0:
        return clf
    params = ParamSet()
    params.add("clf.w", clf.weight)
    params.add("clf.b", clf.bias)
    state = AdamState()
    for _ in range(cfg.steps):
        _, grads = forward_backward(
            lambda lv: _ce_loss_var(Var(X) @ lv["clf.w"] + lv["clf.b"], y), params)
        params, state = adam_step(params, grads, state, cfg.lr)
    return Classifier(params["clf.w"], params["clf.b"])


def classifier_loss(clf: Classifier, embeddings, labels) -> float:
    X = np.stack([np.asarray(e) for e in embeddings])
    logits = X @ clf.weight + clf.bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    lp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-lp[np.arange(len(labels)), np.asarray(labels)].mean())


@dataclass
class EvalRecord:
    id: str
    true_label: int
    predicted_label: int
    wer_vs_baseline: float | None = None
    flagged: bool = False


@dataclass
class EvalResult:
    records: list[EvalRecord]
    accuracy: float

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({
                    "id": r.id, "true_label": r.true_label,
                    "predicted_label": r.predicted_label,
                    "wer_vs_baseline": r.wer_vs_baseline, "flagged": r.flagged,
                }, sort_keys=True) + "\n")
            fh.write(json.dumps({"accuracy": self.accuracy,
                                 "total": len(self.records)}, sort_keys=True) + "\n")


def evaluate(clf: Classifier, embeddings, labels, ids=None, wers=None) -> EvalResult:
    """Argmax predictions and exact accuracy = correct / total."""
    embeddings = list(embeddings)
    labels = list(labels)
    if not embeddings:
        raise ContractViolation("cannot evaluate an empty set")
    if ids is None:
        ids = [str(i) for i in range(len(embeddings))]
    records = []
    correct = 0
    for i, (emb, label) in enumerate(zip(embeddings, labels)):
        pred = clf.predict(emb)
        correct += int(pred == label)
        records.append(EvalRecord(
            id=ids[i], true_label=int(label), predicted_label=pred,
            wer_vs_baseline=None if wers is None else wers[i]))
    return EvalResult(records=records, accuracy=correct / len(records))


def teacher_corpus_embeddings(teacher: NluModel, corpus: Corpus, vocab: Vocab):
    return [sentence_embed(teacher, teacher_view(u, vocab)) for u in corpus]


def student_corpus_embeddings(student: StudentModel, corpus: Corpus):
    return [student_embed(student, u.frames) for u in corpus]


def classifier_grid_search(train_emb, train_labels, valid_emb, valid_labels,
                           num_classes: int, lrs, steps_list, seed: int = 0):
    """Pick (lr, steps) by validation accuracy; ties favor the grid order."""
    best = None
    for lr in lrs:
        for steps in steps_list:
            cfg = ClassifierConfig(steps=int(steps), lr=float(lr), seed=seed)
            clf = train_classifier(train_emb, train_labels, num_classes, cfg)
            acc = evaluate(clf, valid_emb, valid_labels).accuracy
            if best is None or acc > best[0]:
                best = (acc, clf, cfg)
    return best[1], best[2], best[0]


def decode_corpus(asr_model: AsrModel, corpus: Corpus, vocab: Vocab) -> dict[str, Decoded]:
    return {u.id: greedy_decode(asr_model, u.frames, vocab.bos_id, vocab.eos_id)
            for u in corpus}


def corpus_wer(corpus: Corpus, decodes: dict[str, Decoded]) -> float:
    """Corpus-level WER: total edit distance over total reference length."""
    from .asr import edit_distance
    errors = sum(edit_distance(u.tokens, decodes[u.id].tokens) for u in corpus)
    return errors / sum(len(u.tokens) for u in corpus)


def pipeline_baseline(asr_model: AsrModel, teacher: NluModel, clf: Classifier,
                      corpus: Corpus, vocab: Vocab,
                      decodes: dict[str, Decoded] | None = None) -> EvalResult:
    """Decode, embed the hypothesis with the teacher, classify; per-utterance
    WER against the reference transcript is recorded into the result."""
    if decodes is None:
        decodes = decode_corpus(asr_model, corpus, vocab)
    records = []
    correct = 0
    for u in corpus:
        hyp = decodes[u.id].tokens
        flagged = False
        if len(hyp) == 0:
            flagged = True
            emb_tokens = (vocab.cls_id, vocab.pad_id)
        else:
            emb_tokens = (vocab.cls_id,) + hyp
        emb = sentence_embed(teacher, emb_tokens)
        pred = clf.predict(emb)
        correct += int(pred == u.class_label)
        records.append(EvalRecord(
            id=u.id, true_label=u.class_label, predicted_label=pred,
            wer_vs_baseline=word_error_rate(u.tokens, hyp), flagged=flagged))
    return EvalResult(records=records, accuracy=correct / len(records))


@dataclass(frozen=True)
class FewshotConfig:
    steps: int = 150
    lr: float = 2e-3
    batch_size: int = 20
    encoder_layers: int = 2
    seed: int = 0


def select_fewshot_samples(corpus: Corpus, n: int, seed: int):
    """First n per class of a seed-shuffled split; deterministic."""
    rng = np.random.default_rng([seed, 0x667377])
    order = rng.permutation(len(corpus.utterances))
    picked = {}
    for j in order:
        u = corpus.utterances[int(j)]
        picked.setdefault(u.class_label, [])
        if len(picked[u.class_label]) < n:
            picked[u.class_label].append(u)
    num_classes = max(corpus.labels()) + 1
    for c in range(num_classes):
        if len(picked.get(c, [])) == 0:
            raise ContractViolation(f"class {c} has zero few-shot samples")
    samples = []
    for c in sorted(picked):
        samples.extend(picked[c])
    return samples


def fewshot_finetune(student: StudentModel, clf: Classifier, corpus: Corpus,
                     n: int, mode: str, cfg: FewshotConfig):
    """Supervised fine-tuning on n labeled speech samples per class.

    ``output_only`` trains the classifier on frozen-student embeddings;
    ``output_plus_encoder_layers`` additionally trains the top speech-encoder
    layers end-to-end through the student.  n == 0 is the identity.
    """
    if mode not in FEWSHOT_MODES:
        raise ContractViolation(f"unknown few-shot mode {mode!r}")
    if n == 0:
        return student, clf
    samples = select_fewshot_samples(corpus, n, cfg.seed)
    labels = np.asarray([u.class_label for u in samples], dtype=np.intp)

    if mode == "output_only":
        # Student is frozen, so its embeddings are constants.
        X = np.stack([student_embed(student, u.frames) for u in samples]).astype(np.float64)
        params = ParamSet()
        params.add("clf.w", clf.weight.astype(np.float64))
        params.add("clf.b", clf.bias.astype(np.float64))
        state = AdamState()
        for _ in range(cfg.steps):
            _, grads = forward_backward(
                lambda lv: _ce_loss_var(Var(X) @ lv["clf.w"] + lv["clf.b"], labels),
                params)
            params, state = adam_step(params, grads, state, cfg.lr)
        return student, Classifier(params["clf.w"], params["clf.b"])

    params = student.params.copy(deep=False)
    k = cfg.encoder_layers
    mask = FreezeMask(tuple(
        f"slu.encoder.layer{i}."
        for i in range(student.asr_cfg.enc_layers - k, student.asr_cfg.enc_layers)))
    mask.apply(params)
    params.add("clf.w", clf.weight.astype(np.float64))
    params.add("clf.b", clf.bias.astype(np.float64))
    current = student.replace_params(params)
    rng = np.random.default_rng([cfg.seed, 0x667432])
    state = AdamState()
    for _ in range(cfg.steps):
        idx = rng.permutation(len(samples))[:cfg.batch_size]
        batch = [samples[int(i)] for i in idx]
        batch_labels = np.asarray([u.class_label for u in batch], dtype=np.intp)

        def batch_loss(leaves):
            rows = [student_embed_var(current, leaves, u.frames).reshape((1, -1))
                    for u in batch]
            logits = ad.concat(rows, axis=0) @ leaves["clf.w"] + leaves["clf.b"]
            return _ce_loss_var(logits, batch_labels)

        _, grads = forward_backward(batch_loss, params)
        params, state = adam_step(params, grads, state, cfg.lr)
        current = student.replace_params(params)
    new_clf = Classifier(params["clf.w"], params["clf.b"])
    student_params = ParamSet()
    for name, arr in params.items():
        if not name.startswith("clf."):
            student_params.add(name, arr)
    return student.replace_params(student_params), new_clf


@dataclass
class Bucket:
    lo: float
    hi: float
    count: int = 0
    pipeline_correct: int = 0
    e2e_correct: int = 0

    @property
    def pipeline_accuracy(self) -> float | None:
        return None if self.count == 0 else self.pipeline_correct / self.count

    @property
    def e2e_accuracy(self) -> float | None:
        return None if self.count == 0 else self.e2e_correct / self.count


@dataclass
class BucketReport:
    width: float
    buckets: list[Bucket] = field(default_factory=list)
    excluded_count: int = 0
    total: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bucket_lo", "bucket_hi", "count", "pipeline_acc", "e2e_acc"])
            for b in self.buckets:
                writer.writerow([
                    b.lo, b.hi, b.count,
                    "" if b.pipeline_accuracy is None else f"{b.pipeline_accuracy:.6f}",
                    "" if b.e2e_accuracy is None else f"{b.e2e_accuracy:.6f}",
                ])

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for b in self.buckets:
                fh.write(json.dumps({
                    "bucket_lo": b.lo, "bucket_hi": b.hi, "count": b.count,
                    "pipeline_acc": b.pipeline_accuracy, "e2e_acc": b.e2e_accuracy,
                }, sort_keys=True) + "\n")
            fh.write(json.dumps({"excluded_count": self.excluded_count,
                                 "total": self.total}, sort_keys=True) + "\n")


def wer_bucket_report(pipeline: EvalResult, endtoend: EvalResult,
                      width: float = 10.0) -> BucketReport:
    """Group utterances by baseline-ASR WER into half-open [lo, lo+width)
    percent buckets; WER strictly above 100% is excluded but counted."""
    pipe_by_id = {r.id: r for r in pipeline.records}
    e2e_by_id = {r.id: r for r in endtoend.records}
    if set(pipe_by_id) != set(e2e_by_id):
        raise ContractViolation("pipeline and end-to-end results cover different ids")
    if any(r.wer_vs_baseline is None for r in pipeline.records):
        raise ContractViolation("pipeline result lacks per-utterance WER")
    n_buckets = int(100.0 / width) + 1
    buckets = [Bucket(lo=i * width, hi=(i + 1) * width) for i in range(n_buckets)]
    excluded = 0
    for r in pipeline.records:
        pct = r.wer_vs_baseline * 100.0
        if pct > 100.0:
            excluded += 1
            continue
        b = buckets[min(int(pct // width), n_buckets - 1)]
        b.count += 1
        b.pipeline_correct += int(r.predicted_label == r.true_label)
        e = e2e_by_id[r.id]
        b.e2e_correct += int(e.predicted_label == e.true_label)
    report = BucketReport(width=width, buckets=buckets, excluded_count=excluded,
                          total=len(pipeline.records))
    assert sum(b.count for b in buckets) + excluded == report.total
    return report

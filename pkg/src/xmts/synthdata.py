"""Deterministic synthetic corpus of paired (acoustic frames, token
transcript) utterances for desk-scale experiments.

Each class is defined by a pair of class-specific tokens embedded at random
positions among shared distractor tokens, so the label is always recoverable
from the transcript alone.  Frames are rendered per token as a variable
number of copies of a per-token prototype vector plus Gaussian noise, which
makes the acoustic length differ from the token length and forces genuine
sequence alignment downstream.

Generation is a pure function of (spec, seed): every utterance derives its
own random stream from (seed, split, index), with separate token and frame
streams, so regenerating a split at a different noise level keeps the token
sequences and frame counts identical.
"""

from __future__ import annotations

import hashlib
import string
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import ContractViolation, XmtsError
from .nlu import SentencePair

CORPUS_MAGIC = b"XMCO"


class CorpusFormatError(XmtsError):
    """Corpus file is corrupt, truncated, or has an unsupported version."""


class Vocab:
    """Token inventory: reserved control ids, content tokens, optional markers.

    Reserved ids (blank, pad, mask, cls, bos, eos) occupy 0..5; content
    tokens follow; punctuation-like marker tokens, when enabled, come last.
    """

    RESERVED = ("<blank>", "<pad>", "<mask>", "<cls>", "<s>", "</s>")
    MARKERS = (",", ".")

    def __init__(self, content_size: int = 12, with_markers: bool = False):
        if not 2 <= content_size <= 26:
            raise ContractViolation("content_size must be in [2, 26]")
        self.content_size = content_size
        self.with_markers = with_markers
        self._symbols = list(self.RESERVED)
        self._symbols += list(string.ascii_lowercase[:content_size])
        if with_markers:
            self._symbols += list(self.MARKERS)
        self._ids = {s: i for i, s in enumerate(self._symbols)}

    blank_id = 0
    pad_id = 1
    mask_id = 2
    cls_id = 3
    bos_id = 4
    eos_id = 5
    content_start = len(RESERVED)

    @property
    def size(self) -> int:
        return len(self._symbols)

    @property
    def content_ids(self) -> range:
        return range(self.content_start, self.content_start + self.content_size)

    @property
    def marker_ids(self) -> range:
        lo = self.content_start + self.content_size
        return range(lo, lo + (len(self.MARKERS) if self.with_markers else 0))

    def is_content(self, token: int) -> bool:
        return token in self.content_ids

    def is_maskable(self, token: int) -> bool:
        return token >= self.content_start

    def symbol(self, token: int) -> str:
        return self._symbols[token]

    def id_of(self, symbol: str) -> int:
        return self._ids[symbol]

    def symbols(self, tokens) -> list[str]:
        return [self._symbols[t] for t in tokens]


@dataclass(frozen=True)
class AcousticSpec:
    """How token sequences are rendered into acoustic-like frame matrices."""

    frame_dim: int = 8
    frames_per_token: tuple[int, int] = (4, 8)
    noise_sigma: float = 0.05
    seed: int = 0
    num_prototypes: int = 12

    def prototypes(self) -> np.ndarray:
        """Unit-norm per-token prototype vectors, well separated vs. sigma."""
        floor = max(4.0 * self.noise_sigma, 0.5)
        for attempt in range(16):
            rng = np.random.default_rng([self.seed, 0x70726F74, attempt])
            protos = rng.standard_normal((self.num_prototypes, self.frame_dim))
            protos /= np.linalg.norm(protos, axis=1, keepdims=True)
            dists = np.linalg.norm(protos[:, None, :] - protos[None, :, :], axis=-1)
            np.fill_diagonal(dists, np.inf)
            if dists.min() > floor:
                return protos.astype(np.float32)
        raise ContractViolation(
            "could not draw prototype vectors separated by more than 4*sigma")


@dataclass(eq=False)
class Utterance:
    """One corpus record; ``wer_vs_baseline`` is runtime-only bookkeeping."""

    id: str
    tokens: tuple[int, ...]
    frames: np.ndarray
    class_label: int | None = None
    teacher_tokens: tuple[int, ...] | None = None
    wer_vs_baseline: float | None = None

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.teacher_tokens is not None:
            self.teacher_tokens = tuple(int(t) for t in self.teacher_tokens)

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.id == other.id
                and self.tokens == other.tokens
                and self.class_label == other.class_label
                and self.teacher_tokens == other.teacher_tokens
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes())


@dataclass(eq=False)
class Corpus:
    utterances: list[Utterance]
    split: str = "train"
    fingerprint: str = ""

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate utterance ids in corpus")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def labels(self) -> list[int]:
        return [u.class_label for u in self.utterances]

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.split == other.split
                and self.fingerprint == other.fingerprint
                and self.utterances == other.utterances)


def render_frames(tokens, spec: AcousticSpec, rng: np.random.Generator,
                  vocab: Vocab) -> np.ndarray:
    """Render a token sequence to frames: k~U[lo,hi] noisy prototype copies each.

    Noise is drawn as sigma * standard_normal, so the same rng stream yields
    token-identical corpora across noise levels.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise ContractViolation("cannot render an empty token sequence")
    protos = spec.prototypes()
    lo, hi = spec.frames_per_token
    chunks = []
    for t in tokens:
        if not vocab.is_content(t):
            raise ContractViolation(f"non-content token {t} cannot be rendered")
        k = int(rng.integers(lo, hi + 1))
        noise = spec.noise_sigma * rng.standard_normal((k, spec.frame_dim))
        chunks.append(protos[t - vocab.content_start] + noise)
    return np.concatenate(chunks, axis=0).astype(np.float32)


def class_template(label: int, num_classes: int, vocab: Vocab) -> tuple[int, int]:
    """The two tokens whose joint presence defines a class."""
    if 2 * num_classes + 2 > vocab.content_size:
        raise ContractViolation(
            f"{num_classes} classes exceed the available templates for "
            f"{vocab.content_size} content tokens")
    base = vocab.content_start + 2 * label
    return (base, base + 1)


def distractor_pool(num_classes: int, vocab: Vocab) -> list[int]:
    return list(vocab.content_ids)[2 * num_classes:]


def transcript_class(tokens, num_classes: int, vocab: Vocab) -> int | None:
    """Oracle classifier on the transcript; None if no template matches."""
    present = set(tokens)
    for c in range(num_classes):
        if set(class_template(c, num_classes, vocab)) <= present:
            return c
    return None


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode("utf-8"))


def _draw_distractor(rng, pool, forbidden):
    choices = [t for t in pool if t not in forbidden]
    return int(choices[rng.integers(0, len(choices))])


def _utterance_tokens(label, num_classes, vocab, rng, min_tokens, max_tokens):
    n = int(rng.integers(min_tokens, max_tokens + 1))
    tpl = list(class_template(label, num_classes, vocab))
    if rng.integers(0, 2):
        tpl.reverse()
    pos = sorted(int(p) for p in rng.choice(n, size=2, replace=False))
    seq: list[int | None] = [None] * n
    seq[pos[0]], seq[pos[1]] = tpl[0], tpl[1]
    pool = distractor_pool(num_classes, vocab)
    for i in range(n):
        if seq[i] is None:
            forbidden = {seq[i - 1] if i > 0 else None, seq[i + 1] if i + 1 < n else None}
            seq[i] = _draw_distractor(rng, pool, forbidden)
    return tuple(seq)


def _marker_tokens(tokens, vocab: Vocab, rng) -> tuple[int, ...]:
    comma, period = vocab.id_of(","), vocab.id_of(".")
    cut = int(rng.integers(1, len(tokens)))
    return tuple(tokens[:cut]) + (comma,) + tuple(tokens[cut:]) + (period,)


def _generation_fingerprint(**kw) -> str:
    text = "|".join(f"{k}={kw[k]}" for k in sorted(kw))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def generate_split(num_classes: int, total: int, spec: AcousticSpec, seed: int,
                   vocab: Vocab, split: str = "train", min_tokens: int = 5,
                   max_tokens: int = 9, rich_markers: bool = False) -> Corpus:
    """Generate ``total`` labeled utterances, labels assigned round-robin.

    When ``total`` is a multiple of ``num_classes`` the corpus is exactly
    balanced; otherwise class counts differ by at most one.
    """
    if num_classes < 2:
        raise ContractViolation("need at least 2 classes")
    if rich_markers and not vocab.with_markers:
        raise ContractViolation("rich_markers requires a vocab with markers")
    class_template(num_classes - 1, num_classes, vocab)  # validates capacity
    code = _split_code(split)
    utts = []
    for i in range(total):
        label = i % num_classes
        rng_tok = np.random.default_rng([seed, code, i, 0])
        rng_frames = np.random.default_rng([seed, code, i, 1])
        tokens = _utterance_tokens(label, num_classes, vocab, rng_tok,
                                   min_tokens, max_tokens)
        teacher = _marker_tokens(tokens, vocab, rng_tok) if rich_markers else None
        frames = render_frames(tokens, spec, rng_frames, vocab)
        utts.append(Utterance(
            id=f"{split}-{seed:08x}-{i:05d}",
            tokens=tokens,
            frames=frames,
            class_label=label,
            teacher_tokens=teacher,
        ))
    fp = _generation_fingerprint(
        num_classes=num_classes, total=total, seed=seed, split=split,
        min_tokens=min_tokens, max_tokens=max_tokens, rich_markers=rich_markers,
        frame_dim=spec.frame_dim, frames_per_token=spec.frames_per_token,
        noise_sigma=spec.noise_sigma, spec_seed=spec.seed,
        content_size=vocab.content_size)
    return Corpus(utterances=utts, split=split, fingerprint=fp)


def generate_classification_corpus(num_classes: int, per_class: int,
                                   spec: AcousticSpec, seed: int, vocab: Vocab,
                                   **kwargs) -> Corpus:
    """Exactly balanced corpus with ``per_class`` utterances per label."""
    return generate_split(num_classes, num_classes * per_class, spec, seed,
                          vocab, **kwargs)


def write_corpus(corpus: Corpus, path, vocab: Vocab | None = None) -> None:
    """Binary corpus container plus, when a vocab is given, a text manifest."""
    version = 2 if any(u.teacher_tokens is not None for u in corpus) else 1
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<I", version))
        split = corpus.split.encode("utf-8")
        fp = corpus.fingerprint.encode("utf-8")
        fh.write(struct.pack("<H", len(split)) + split)
        fh.write(struct.pack("<H", len(fp)) + fp)
        fh.write(struct.pack("<I", len(corpus.utterances)))
        for u in corpus.utterances:
            uid = u.id.encode("utf-8")
            fh.write(struct.pack("<H", len(uid)) + uid)
            if u.class_label is None:
                fh.write(struct.pack("<B", 0))
            else:
                fh.write(struct.pack("<BI", 1, u.class_label))
            fh.write(struct.pack("<I", len(u.tokens)))
            fh.write(struct.pack(f"<{len(u.tokens)}I", *u.tokens))
            if version == 2:
                if u.teacher_tokens is None:
                    fh.write(struct.pack("<B", 0))
                else:
                    fh.write(struct.pack("<BI", 1, len(u.teacher_tokens)))
                    fh.write(struct.pack(f"<{len(u.teacher_tokens)}I", *u.teacher_tokens))
            rows, cols = u.frames.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
    if vocab is not None:
        with open(str(path) + ".manifest", "w", encoding="utf-8") as fh:
            for u in corpus.utterances:
                label = "-" if u.class_label is None else str(u.class_label)
                fh.write(f"{u.id} {label} {' '.join(vocab.symbols(u.tokens))}\n")


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CorpusFormatError(f"truncated corpus file: {path}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CORPUS_MAGIC:
        raise CorpusFormatError(f"bad magic bytes in {path}")
    (version,) = struct.unpack("<I", take(4))
    if version not in (1, 2):
        raise CorpusFormatError(f"unsupported corpus version {version}")
    (split_len,) = struct.unpack("<H", take(2))
    split = take(split_len).decode("utf-8")
    (fp_len,) = struct.unpack("<H", take(2))
    fingerprint = take(fp_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    utts = []
    seen = set()
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        uid = take(id_len).decode("utf-8")
        if uid in seen:
            raise CorpusFormatError(f"duplicate utterance id {uid} in {path}")
        seen.add(uid)
        (has_label,) = struct.unpack("<B", take(1))
        label = struct.unpack("<I", take(4))[0] if has_label else None
        (ntok,) = struct.unpack("<I", take(4))
        tokens = struct.unpack(f"<{ntok}I", take(4 * ntok))
        teacher = None
        if version == 2:
            (has_teacher,) = struct.unpack("<B", take(1))
            if has_teacher:
                (ntt,) = struct.unpack("<I", take(4))
                teacher = struct.unpack(f"<{ntt}I", take(4 * ntt))
        rows, cols = struct.unpack("<II", take(8))
        frames = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols).copy()
        utts.append(Utterance(id=uid, tokens=tokens, frames=frames,
                              class_label=label, teacher_tokens=teacher))
    if off != len(blob):
        raise CorpusFormatError(f"trailing bytes in corpus {path}")
    return Corpus(utterances=utts, split=split, fingerprint=fingerprint)


def teacher_view(utt: Utterance, vocab: Vocab) -> tuple[int, ...]:
    """Tokens the teacher reads for this utterance: [cls] + transcript."""
    base = utt.teacher_tokens if utt.teacher_tokens is not None else utt.tokens
    return (vocab.cls_id,) + tuple(base)


def _dice_overlap(a, b) -> float:
    sa, sb = set(a), set(b)
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def make_nli_pairs(corpus: Corpus, vocab: Vocab, count: int, seed: int) -> list[SentencePair]:
    """Synthetic 3-way pairs: 0 = cross-class, 1 = same-class, 2 = one side
    is a class-free distractor sentence."""
    num_classes = max(corpus.labels()) + 1
    by_label = {c: [u for u in corpus if u.class_label == c] for c in range(num_classes)}
    pool = distractor_pool(num_classes, vocab)
    rng = np.random.default_rng([seed, 0x6E6C69])
    pairs = []

    def view(u):
        return teacher_view(u, vocab)

    def pick(label):
        group = by_label[label]
        return group[rng.integers(0, len(group))]

    for i in range(count):
        kind = i % 3
        if kind == 0:
            la, lb = rng.choice(num_classes, size=2, replace=False)
            pairs.append(SentencePair(view(pick(la)), view(pick(lb)), label=0))
        elif kind == 1:
            la = int(rng.integers(0, num_classes))
            pairs.append(SentencePair(view(pick(la)), view(pick(la)), label=1))
        else:
            n = int(rng.integers(4, 8))
            sent = [int(pool[rng.integers(0, len(pool))])]
            while len(sent) < n:
                nxt = _draw_distractor(rng, pool, {sent[-1]})
                sent.append(nxt)
            pairs.append(SentencePair(
                view(pick(int(rng.integers(0, num_classes)))),
                (vocab.cls_id,) + tuple(sent), label=2))
    return pairs


def make_similarity_pairs(corpus: Corpus, vocab: Vocab, count: int, seed: int) -> list[SentencePair]:
    """Pairs with graded targets: token-set Dice overlap mapped into [0, 1]."""
    rng = np.random.default_rng([seed, 0x737473])
    utts = corpus.utterances
    pairs = []
    for _ in range(count):
        a, b = rng.integers(0, len(utts), size=2)
        ua, ub = utts[int(a)], utts[int(b)]
        target = _dice_overlap(ua.tokens, ub.tokens)
        pairs.append(SentencePair(teacher_view(ua, vocab), teacher_view(ub, vocab),
                                  similarity=target))
    return pairs

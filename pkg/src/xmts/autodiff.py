"""Reverse-mode automatic differentiation on dense numpy arrays.

The graph is built dynamically: every operation returns a :class:`Var`
holding the forward value, the parent nodes, and a closure that pushes the
incoming gradient back to those parents.  Gradients are accumulated by
summation while walking the nodes in reverse topological (construction)
order, so repeated runs with identical inputs produce bit-identical
gradients.

Parameters live in a :class:`ParamSet` (name -> array, plus a per-name
trainable flag), which is also the unit the Adam optimizer and the
checkpoint container operate on.  Training code typically runs in float32;
test oracles build float64 graphs, where central finite differences are
trustworthy.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np


class XmtsError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(XmtsError):
    """An operation was invoked outside its documented preconditions."""


class NumericFault(XmtsError):
    """A forward pass produced a non-finite value; names the offending op."""


class InvalidOracleError(XmtsError):
    """finite_difference_check was given a function it cannot verify."""


class CheckpointFormatError(XmtsError):
    """Checkpoint file is corrupt, truncated, or has an unsupported version."""


_NAN_CHECKS = False


class nan_checks:
    """Context manager enabling per-op NaN detection (slow, debug only)."""

    def __enter__(self):
        global _NAN_CHECKS
        self._saved = _NAN_CHECKS
        _NAN_CHECKS = True
        return self

    def __exit__(self, *exc):
        global _NAN_CHECKS
        _NAN_CHECKS = self._saved
        return False


class Var:
    """A node of the computation graph: value, gradient slot, backward hook.

    Leaves wrap parameter or input arrays; interior nodes are created by the
    op functions below.  ``requires_grad`` propagates from parents, and
    subgraphs that cannot influence any trainable leaf are pruned (their
    parent links are dropped), which keeps frozen-model forward passes cheap.
    """

    __slots__ = ("data", "grad", "requires_grad", "nondiff", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None,
                 op="leaf", nondiff=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.nondiff = nondiff
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def backward(self):
        """Backpropagate from this node, accumulating into leaf ``grad``s."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emit = stack.pop()
            if emit:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose2d(self)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_var(x, like=None):
    """Wrap ``x`` as a constant Var unless it already is one."""
    if isinstance(x, Var):
        return x
    dtype = like.data.dtype if isinstance(like, Var) else np.float64
    return Var(np.asarray(x, dtype=dtype), op="const")


def _accum(parent, g):
    if parent.requires_grad:
        if parent.grad is None:
            parent.grad = np.zeros_like(parent.data)
        parent.grad += g


def _make(data, parents, backward, op):
    if _NAN_CHECKS and np.isnan(data).any():
        raise NumericFault(f"NaN produced by op '{op}'")
    rg = False
    nd = False
    for p in parents:
        rg = rg or p.requires_grad
        nd = nd or p.nondiff
    if not rg:
        return Var(data, op=op, nondiff=nd)
    return Var(data, requires_grad=True, parents=parents, backward=backward, op=op, nondiff=nd)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a = as_var(a, b if isinstance(b, Var) else None)
    b = as_var(b, a)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a = as_var(a, b if isinstance(b, Var) else None)
    b = as_var(b, a)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    a = as_var(a, b if isinstance(b, Var) else None)
    b = as_var(b, a)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def matmul(a, b):
    """Matrix product for 1-D/2-D operands (vector operands follow numpy)."""
    a, b = as_var(a), as_var(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ContractViolation("matmul supports 1-D and 2-D operands only")
    data = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:  # dot product
            _accum(a, g * bd)
            _accum(b, g * ad)

    return _make(data, (a, b), backward, "matmul")


def power(a, p):
    """Elementwise a**p for a scalar float exponent."""
    a = as_var(a)
    data = a.data ** p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward, "power")


def exp(a):
    a = as_var(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward, "exp")


def log(a):
    a = as_var(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backward, "log")


def tanh(a):
    a = as_var(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward, "tanh")


def relu(a):
    a = as_var(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), backward, "relu")


def absolute(a):
    a = as_var(a)
    data = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), backward, "abs")


def floor_at(a, lo):
    """max(a, lo) against a scalar floor; gradient is zero where floored."""
    a = as_var(a)
    data = np.maximum(a.data, lo)

    def backward(g):
        _accum(a, g * (a.data > lo))

    return _make(data, (a,), backward, "floor_at")


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward, "sum")


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis=-1):
    """Softmax along ``axis``; -inf entries get exactly zero weight."""
    a = as_var(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, (g - (g * data).sum(axis=axis, keepdims=True)) * data)

    return _make(data, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = as_var(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        _accum(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward, "log_softmax")


def logaddexp(a, b):
    """Elementwise log(exp(a)+exp(b)); safe when both operands are -inf."""
    a, b = as_var(a), as_var(b)
    if a.data.shape != b.data.shape:
        raise ContractViolation("logaddexp requires equal shapes")
    data = np.logaddexp(a.data, b.data)

    def backward(g):
        dead = np.isneginf(data)
        with np.errstate(invalid="ignore"):
            wa = np.where(dead, 0.0, np.exp(a.data - data))
            wb = np.where(dead, 0.0, np.exp(b.data - data))
        _accum(a, g * wa)
        _accum(b, g * wb)

    return _make(data, (a, b), backward, "logaddexp")


def gather_rows(a, idx):
    """Select rows ``a[idx]`` along axis 0 (embedding lookup)."""
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(data, (a,), backward, "gather_rows")


def select(a, rows, cols):
    """Pointwise pick ``a[rows[i], cols[i]]`` from a 2-D array."""
    a = as_var(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, cols), g)
            _accum(a, buf)

    return _make(data, (a,), backward, "select")


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries from ``start`` along ``axis``."""
    a = as_var(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[sl] = g
            _accum(a, buf)

    return _make(data, (a,), backward, "narrow")


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        off = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + size)
            _accum(p, g[tuple(sl)])
            off += size

    return _make(data, tuple(parts), backward, "concat")


def reshape(a, shape):
    a = as_var(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward, "reshape")


def transpose2d(a):
    a = as_var(a)
    if a.data.ndim != 2:
        raise ContractViolation("transpose2d requires a 2-D operand")
    data = a.data.T

    def backward(g):
        _accum(a, g.T)

    return _make(data, (a,), backward, "transpose")


def dropout(a, rate, rng):
    """Inverted dropout driven by an explicit Generator (seed-deterministic)."""
    a = as_var(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = 1.0 / (1.0 - rate)
    data = a.data * keep * scale

    def backward(g):
        _accum(a, g * keep * scale)

    return _make(data, (a,), backward, "dropout")


def argmax(a, axis=None):
    """Hard argmax: constant output, marks the graph as non-differentiable."""
    a = as_var(a)
    return Var(np.asarray(np.argmax(a.data, axis=axis), dtype=np.float64),
               op="argmax", nondiff=True)


class ParamSet:
    """Named parameter tensors plus per-name trainable flags.

    Names are hierarchical dotted paths and must be unique.  Arrays are
    treated as values: update operations return a new ParamSet that shares
    the untouched arrays, and nothing in this module mutates them in place.
    """

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._data:
            raise ContractViolation(f"duplicate parameter name: {name}")
        arr = np.asarray(value)
        if not np.isfinite(arr).all():
            raise ContractViolation(f"non-finite values in parameter {name}")
        self._data[name] = arr
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._trainable:
            raise ContractViolation(f"unknown parameter: {name}")
        self._trainable[name] = bool(flag)

    def trainable_names(self) -> list[str]:
        return [n for n, f in self._trainable.items() if f]

    def num_values(self) -> int:
        return sum(a.size for a in self._data.values())

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with ``updates`` swapped in; other arrays shared."""
        out = ParamSet()
        for name, arr in self._data.items():
            if name in updates:
                new = np.asarray(updates[name])
                if new.shape != arr.shape:
                    raise ContractViolation(f"shape change for {name}")
                arr = new
            out._data[name] = arr
            out._trainable[name] = self._trainable[name]
        return out

    def copy(self, deep: bool = True) -> "ParamSet":
        out = ParamSet()
        for name, arr in self._data.items():
            out._data[name] = arr.copy() if deep else arr
            out._trainable[name] = self._trainable[name]
        return out

    def checksum(self, prefixes: Iterable[str] | None = None) -> str:
        """SHA-256 over (sorted name, shape, raw bytes); bit-exact identity."""
        h = hashlib.sha256()
        for name in sorted(self._data):
            if prefixes is not None and not any(name.startswith(p) for p in prefixes):
                continue
            arr = self._data[name]
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


GraphFn = Callable[[Mapping[str, Var]], Var]


def _bind(params: ParamSet, with_grads: bool) -> dict[str, Var]:
    return {
        name: Var(arr, requires_grad=with_grads and params.is_trainable(name), op="param")
        for name, arr in params.items()
    }


def evaluate(graph: GraphFn, params: ParamSet) -> float:
    """Run the graph without building backward machinery; return the scalar."""
    out = graph(_bind(params, with_grads=False))
    if out.data.size != 1:
        raise ContractViolation("graph must produce a scalar")
    return float(out.data)


def forward_backward(graph: GraphFn, params: ParamSet):
    """Evaluate a scalar graph and return (loss, grads for trainable leaves).

    Frozen or untouched parameters are absent from the gradient map.  A
    non-finite loss triggers a second, instrumented forward pass to name the
    op that produced it.
    """
    leaves = _bind(params, with_grads=True)
    out = graph(leaves)
    if not isinstance(out, Var) or out.data.size != 1:
        raise ContractViolation("graph must produce a scalar loss")
    if not np.isfinite(out.data).all():
        with nan_checks():
            graph(_bind(params, with_grads=False))
        raise NumericFault("non-finite loss")
    out.backward()
    loss = float(out.data)
    grads = {
        name: leaf.grad
        for name, leaf in leaves.items()
        if leaf.requires_grad and leaf.grad is not None
    }
    return loss, grads


def finite_difference_check(graph: GraphFn, params: ParamSet, h: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    Returns max over all trainable scalar entries of
    |analytic - central| / max(1, |analytic|).  Raises InvalidOracleError if
    the graph is non-deterministic or contains a non-differentiable op.
    """
    if h <= 0:
        raise ContractViolation("finite-difference step must be positive")
    leaves = _bind(params, with_grads=True)
    out = graph(leaves)
    if out.data.size != 1:
        raise ContractViolation("graph must produce a scalar")
    if out.nondiff:
        raise InvalidOracleError("graph contains a non-differentiable operation")
    if float(out.data) != evaluate(graph, params):
        raise InvalidOracleError("graph is not deterministic under fixed inputs")
    out.backward()

    worst = 0.0
    for name in params.names():
        if not params.is_trainable(name):
            continue
        leaf = leaves[name]
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(params[name])
        base = params[name]
        flat = base.reshape(-1)
        aflat = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate(graph, params)
            flat[i] = orig - h
            f_minus = evaluate(graph, params)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if rel > worst:
                worst = rel
    return worst


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float):
    """One bias-corrected Adam update; returns (new ParamSet, new AdamState).

    Only trainable parameters present in ``grads`` change; everything else is
    carried over bit-identically.
    """
    if lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_m = dict(state.m)
    new_v = dict(state.v)
    updates = {}
    for name, g in grads.items():
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name}")
        if not params.is_trainable(name):
            continue
        p = params[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = new_m.get(name)
        v = new_v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        updates[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return params.replace(updates), AdamState(new_m, new_v, t, b1, b2, eps)


CHECKPOINT_MAGIC = b"XMTS"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    """Named float32 tensors plus (step, validation loss) metadata.

    ``n_sources`` counts how many checkpoints were averaged into this one;
    it is runtime bookkeeping and is not serialized.
    """

    tensors: dict[str, np.ndarray]
    step: int
    valid_loss: float
    n_sources: int = 1

    @classmethod
    def from_params(cls, params: ParamSet, step: int, valid_loss: float) -> "ModelCheckpoint":
        tensors = {name: np.ascontiguousarray(arr, dtype=np.float32)
                   for name, arr in params.items()}
        return cls(tensors=tensors, step=step, valid_loss=valid_loss)

    def to_params(self) -> ParamSet:
        params = ParamSet()
        for name, arr in self.tensors.items():
            params.add(name, arr.copy())
        return params


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Write the XMTS container: header, tensor records, metadata record."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
        fh.write(struct.pack("<Qd", ckpt.step, float(ckpt.valid_loss)))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(f"truncated checkpoint file: {path}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic bytes in {path}")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * size)
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name} in {path}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    step, valid_loss = struct.unpack("<Qd", take(16))
    if off != len(blob):
        raise CheckpointFormatError(f"trailing bytes in checkpoint {path}")
    return ModelCheckpoint(tensors=tensors, step=int(step), valid_loss=float(valid_loss))

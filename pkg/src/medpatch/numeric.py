"""Dense float64 arithmetic with a small reverse-mode tape.

Every trainable head in the package is expressed as a composition of the
operations below, recorded on a :class:`Tape` and differentiated with
:meth:`Tape.backward`.  Parameters live in a :class:`ParameterStore`, which
also carries the Adam moments and accumulated gradients.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, DataFormatError

BCE_EPS = 1e-7


# ---------------------------------------------------------------------------
# Plain numpy primitives
# ---------------------------------------------------------------------------


def sigmoid(x):
    """Logistic function, stable for large |x| (sign-split evaluation)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ConfigError("softmax over an empty axis: invalid fusion configuration")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_binary(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    return y


def bce_loss(p, y, eps=BCE_EPS):
    """Binary cross-entropy, averaged over every entry when given arrays."""
    y = _check_binary(y)
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(np.mean(loss))


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "value", "parents", "backward_fn", "index", "store", "name")
    __array_priority__ = 100.0

    def __init__(self, tape, value, parents=(), backward_fn=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.store = None
        self.name = None
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        self.tape.backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return vmean(self, axis)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Tape:
    """Ordered record of operations.

    Nodes are appended in evaluation order, so walking the list backwards is a
    valid reverse topological order and visits each node once.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def _record(self, var):
        self.nodes.append(var)
        return len(self.nodes) - 1

    def constant(self, value):
        return Var(self, np.asarray(value, dtype=np.float64))

    def param(self, store: "ParameterStore", name: str):
        v = Var(self, store[name])
        v.store = store
        v.name = name
        return v

    def params(self, store, names=None):
        return {n: self.param(store, n) for n in (names or store.names())}

    def backward(self, loss: Var):
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list = [None] * (loss.index + 1)
        grads[loss.index] = np.ones((), dtype=np.float64)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.store is not None:
                node.store.accumulate(node.name, g)
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                j = parent.index
                grads[j] = pg if grads[j] is None else grads[j] + pg


def _lift(tape, x):
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.value.shape, b.value.shape
    return Var(t, a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.value.shape, b.value.shape
    return Var(t, a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    return Var(t, av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    out = av / bv
    return Var(t, out, (a, b),
               lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return Var(a.tape, -a.value, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product for operands of rank 1 or 2."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports rank <= 2; use einsum for batched products")

    def back(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return ga, gb

    return Var(t, av @ bv, (a, b), back)


def einsum(subscripts: str, *operands):
    """Einstein summation with explicit output, e.g. ``"ncd,pd->ncp"``."""
    t = _tape_of(*operands)
    ops = [_lift(t, o) for o in operands]
    ins, out = subscripts.replace(" ", "").split("->")
    subs = ins.split(",")
    if len(subs) != len(ops):
        raise ValueError("subscript count does not match operand count")
    for k, s in enumerate(subs):
        if len(set(s)) != len(s):
            raise ValueError("repeated index within one operand is not supported")
        others = set(out).union(*(subs[j] for j in range(len(subs)) if j != k))
        if not set(s) <= others:
            raise ValueError(f"index of operand {k} is summed without partner")
    values = [o.value for o in ops]

    def back(g):
        grads = []
        for k, s in enumerate(subs):
            rest = [subs[j] for j in range(len(subs)) if j != k]
            subscripts = ",".join([out] + rest) + "->" + s
            grads.append(np.einsum(subscripts, g, *[values[j] for j in range(len(subs)) if j != k]))
        return tuple(grads)

    return Var(t, np.einsum(subscripts, *values), tuple(ops), back)


def vsigmoid(a):
    s = sigmoid(a.value)
    s = np.asarray(s, dtype=np.float64)
    return Var(a.tape, s, (a,), lambda g: (g * s * (1.0 - s),))


def vtanh(a):
    y = np.tanh(a.value)
    return Var(a.tape, y, (a,), lambda g: (g * (1.0 - y * y),))


def vexp(a):
    y = np.exp(a.value)
    return Var(a.tape, y, (a,), lambda g: (g * y,))


def vlog(a):
    x = a.value
    return Var(a.tape, np.log(x), (a,), lambda g: (g / x,))


def vsum(a, axis=None):
    shape = a.value.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(a.tape, np.asarray(np.sum(a.value, axis=axis)), (a,), back)


def vmean(a, axis=None):
    n = a.value.size if axis is None else np.prod([a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return vsum(a, axis) * (1.0 / n)


def vsoftmax(a, axis=-1):
    y = softmax(a.value, axis=axis)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return Var(a.tape, y, (a,), back)


def concat(xs, axis=-1):
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    values = [x.value for x in xs]
    sizes = [v.shape[axis] for v in values]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Var(t, np.concatenate(values, axis=axis), tuple(xs), back)


def stack(xs, axis=0):
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(xs)))

    return Var(t, np.stack([x.value for x in xs], axis=axis), tuple(xs), back)


def reshape(a, shape):
    old = a.value.shape
    return Var(a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.tape, np.asarray(a.value[idx]), (a,), back)


def bce(p: Var, y, eps=BCE_EPS, weights=None):
    """Mean BCE of a probability Var against constant labels.

    ``weights`` (same shape as ``y``) turns the mean into a weighted mean;
    entries with zero weight drop out of both numerator and denominator.
    """
    y = _check_binary(y)
    pv = p.value
    pc = np.clip(pv, eps, 1.0 - eps)
    inside = (pv >= eps) & (pv <= 1.0 - eps)
    w = np.ones_like(pv) if weights is None else np.broadcast_to(np.asarray(weights, float), pv.shape)
    total = float(np.sum(w))
    if total <= 0:
        raise ValueError("bce weights sum to zero")
    per = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    value = np.asarray(np.sum(w * per) / total)

    def back(g):
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside * w / total
        return (g * dp,)

    return Var(p.tape, value, (p,), back)


# ---------------------------------------------------------------------------
# Parameters, optimizer, gradient check
# ---------------------------------------------------------------------------


@dataclass
class _Entry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParameterStore:
    """Named float64 tensors with gradients and Adam state."""

    _entries: dict = field(default_factory=dict)

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        z = np.zeros_like(value)
        self._entries[name] = _Entry(value, z.copy(), z.copy(), z.copy())
        return value

    def __getitem__(self, name) -> np.ndarray:
        return self._entries[name].value

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def grad(self, name) -> np.ndarray:
        return self._entries[name].grad

    def step_count(self, name) -> int:
        return self._entries[name].step

    def accumulate(self, name, g):
        e = self._entries[name]
        e.grad += np.broadcast_to(g, e.value.shape)

    def zero_grad(self):
        for e in self._entries.values():
            e.grad[...] = 0.0

    def set(self, name, value):
        e = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != e.value.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {e.value.shape}")
        e.value[...] = value

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: e.value for n, e in self._entries.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: e.value.copy() for n, e in self._entries.items()}

    def restore(self, snap: Mapping[str, np.ndarray]):
        for n, v in snap.items():
            self.set(n, v)

    def digest(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self.tensors())).hexdigest()

    def save(self, path):
        save_checkpoint(path, self.tensors())

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray]) -> "ParameterStore":
        store = cls()
        for n, v in tensors.items():
            store.add(n, v)
        return store

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_tensors(load_checkpoint(path))


def adam_step(store: ParameterStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every entry, then clear gradients."""
    if not lr > 0:
        raise ConfigError(f"lr must be positive, got {lr}")
    for e in store._entries.values():
        e.step += 1
        e.m *= beta1
        e.m += (1.0 - beta1) * e.grad
        e.v *= beta2
        e.v += (1.0 - beta2) * e.grad * e.grad
        m_hat = e.m / (1.0 - beta1 ** e.step)
        v_hat = e.v / (1.0 - beta2 ** e.step)
        e.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        e.grad[...] = 0.0


def grad_check(loss_fn: Callable[[Tape], Var], store: ParameterStore, eps=1e-5,
               names: Iterable[str] | None = None) -> float:
    """Max relative gap between tape gradients and central differences.

    ``loss_fn`` builds the scalar loss on the tape it is given, reading
    parameters through ``tape.param(store, name)``.  The relative error of
    one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Existing gradients in ``store`` are preserved.
    """
    names = list(names or store.names())
    saved = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    analytic = {n: store.grad(n).copy() for n in names}

    worst = 0.0
    for n in names:
        value = store[n]
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + eps
            f_plus = float(loss_fn(Tape()).value)
            value[idx] = orig - eps
            f_minus = float(loss_fn(Tape()).value)
            value[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic[n][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)

    for n, g in saved.items():
        store.grad(n)[...] = g
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"MPCK"
FORMAT_VERSION = 1


def checkpoint_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize tensors: header, then name/shape/little-endian f64 per entry."""
    parts = [struct.pack("<4sII", MAGIC, FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        value = np.asarray(value, dtype=np.float64)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value).astype("<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise DataFormatError(f"truncated checkpoint at byte {pos}")
        return struct.unpack_from(fmt, data, pos), pos + size

    (magic, version, count), pos = take("<4sII", 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,), pos = take("<I", pos)
        if pos + n > len(data):
            raise DataFormatError(f"truncated checkpoint at byte {pos}")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,), pos = take("<I", pos)
        shape, pos = take(f"<{rank}I", pos)
        count_values = int(np.prod(shape)) if rank else 1
        if pos + 8 * count_values > len(data):
            raise DataFormatError(f"truncated values for {name!r}")
        values = np.frombuffer(data, dtype="<f8", count=count_values, offset=pos)
        pos += 8 * count_values
        if name in out:
            raise DataFormatError(f"duplicate checkpoint entry {name!r}")
        out[name] = values.astype(np.float64).reshape(shape)
    if pos != len(data):
        raise DataFormatError("trailing bytes after last checkpoint entry")
    return out


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]):
    atomic_write_bytes(path, checkpoint_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())

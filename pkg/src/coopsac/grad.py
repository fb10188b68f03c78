"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every elementary operation in creation order, which
is already a topological order, so the backward pass is a single reversed
sweep. All values are float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np


class NumericFault(FloatingPointError):
    """A non-finite value turned up during differentiation or evaluation."""

    def __init__(self, message: str, node_index: int | None = None):
        super().__init__(message)
        self.node_index = node_index


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One node on a tape: a value plus how to push adjoints to its inputs."""

    __slots__ = ("tape", "value", "inputs", "backward_fn", "index", "requires_grad", "name", "op")
    # make ``ndarray <op> Var`` dispatch to the reflected Var operator
    __array_ufunc__ = None

    def __init__(self, tape, value, inputs=(), backward_fn=None, requires_grad=False,
                 name=None, op="leaf"):
        self.tape = tape
        self.value = value
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, index={self.index})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


class Tape:
    """Ordered record of elementary operations."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.adjoints: list[np.ndarray | None] = []
        self._params: dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a trainable leaf; its adjoint is reported by :func:`backward`."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already on this tape")
        var = Var(self, _as_array(value), requires_grad=True, name=name, op="param")
        self._params[name] = var
        return var

    def const(self, value) -> Var:
        return Var(self, _as_array(value), op="const")

    def params(self, params: "ParameterSet", trainable: bool = True,
               prefix: str = "") -> dict[str, Var]:
        """Put every array of ``params`` on the tape.

        With ``trainable=False`` the arrays enter as constants: gradients still
        flow through them to upstream inputs but no weight adjoint is formed.
        """
        if trainable:
            return {k: self.param(prefix + k, v) for k, v in params.items()}
        return {k: self.const(v) for k, v in params.items()}

    def adjoint(self, var: Var) -> np.ndarray:
        """Adjoint of ``var`` after :func:`backward`; zero for unused nodes."""
        g = self.adjoints[var.index] if var.index < len(self.adjoints) else None
        return np.zeros_like(var.value) if g is None else g


def _node(inputs: tuple[Var, ...], value: np.ndarray, backward_fn, op: str) -> Var:
    tape = inputs[0].tape
    requires = any(v.requires_grad for v in inputs)
    return Var(tape, value, inputs, backward_fn if requires else None, requires, op=op)


# -- elementary operations -------------------------------------------------

def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return _node((a, b), a.value + b.value,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return _node((a, b), a.value - b.value,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return _node((a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 "mul")


def div(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    out = av / bv
    return _node((a, b), out,
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
                 "div")


def neg(a: Var) -> Var:
    return _node((a,), -a.value, lambda g: (-g,), "neg")


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _node((a, b), av @ bv, back, "matmul")


def affine(x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` for a batch ``x`` of shape (batch, in)."""
    xv, wv = x.value, w.value

    def back(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node((x, w, b), xv @ wv + b.value, back, "affine")


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return _node((a,), out, lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)
    return _node((a,), out, lambda g: (g * (out > 0),), "relu")


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _node((a,), out, lambda g: (g * out,), "exp")


def log(a: Var) -> Var:
    av = a.value
    return _node((a,), np.log(av), lambda g: (g / av,), "log")


def softplus(a: Var) -> Var:
    """``log(1 + exp(a))`` evaluated without overflow."""
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _node((a,), out, lambda g: (g * sig,), "softplus")


def square(a: Var) -> Var:
    av = a.value
    return _node((a,), av * av, lambda g: (2.0 * g * av,), "square")


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp values; the gradient is zero where the clamp is active."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _node((a,), np.clip(av, lo, hi), lambda g: (g * inside,), "clip")


def minimum(a: Var, b: Var) -> Var:
    """Elementwise minimum; ties send the gradient to ``a``."""
    pick_a = a.value <= b.value
    return _node((a, b), np.where(pick_a, a.value, b.value),
                 lambda g: (np.where(pick_a, g, 0.0), np.where(pick_a, 0.0, g)), "minimum")


def concat(parts: list[Var], axis: int = -1) -> Var:
    values = [p.value for p in parts]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(tuple(parts), np.concatenate(values, axis=axis), back, "concat")


def reduce_sum(a: Var, axis=None) -> Var:
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node((a,), np.sum(a.value, axis=axis), back, "sum")


def reduce_mean(a: Var, axis=None) -> Var:
    shape = a.shape
    count = a.value.size if axis is None else shape[axis]

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node((a,), np.mean(a.value, axis=axis), back, "mean")


# -- differentiation --------------------------------------------------------

def _first_non_finite(tape: Tape, upto: int) -> Var:
    """Earliest node (in tape order) whose value is not finite."""
    for node in tape.nodes[: upto + 1]:
        if not np.all(np.isfinite(node.value)):
            return node
    return tape.nodes[upto]


def backward(tape: Tape, root: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``root``; returns the adjoint of every parameter."""
    if root.tape is not tape:
        raise ValueError("root does not belong to this tape")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    adj: list[np.ndarray | None] = [None] * len(tape.nodes)
    adj[root.index] = np.ones_like(root.value)
    for node in reversed(tape.nodes[: root.index + 1]):
        g = adj[node.index]
        if g is None or node.backward_fn is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite adjoint at node {node.index} ({node.op})", node.index)
        if not np.all(np.isfinite(node.value)):
            origin = _first_non_finite(tape, node.index)
            raise NumericFault(f"non-finite value at node {origin.index} ({origin.op})",
                               origin.index)
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = adj[inp.index]
            adj[inp.index] = gi if prev is None else prev + gi
    tape.adjoints = adj
    out = {}
    for name, var in tape._params.items():
        g = adj[var.index]
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {name!r}", var.index)
        out[name] = np.zeros_like(var.value) if g is None else g
    return out


class ParameterSet(Mapping[str, np.ndarray]):
    """Named float64 arrays whose shapes are fixed at construction."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            arr = np.array(value, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericFault(f"non-finite initial value for {name!r}")
            self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._arrays.items())
        return f"ParameterSet({shapes})"

    def set(self, name: str, value: np.ndarray) -> None:
        """Overwrite values in place; the shape must not change."""
        arr = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != arr.shape:
            raise ValueError(f"shape of {name!r} is fixed at {arr.shape}, got {value.shape}")
        arr[...] = value

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._arrays.items()})

    def assign(self, other: Mapping[str, np.ndarray]) -> None:
        for name in self._arrays:
            self.set(name, other[name])

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._arrays.values())


def finite_difference_gradient(f: Callable[[ParameterSet], float], params: ParameterSet,
                               eps: float = 1e-5, order: int = 2) -> dict[str, np.ndarray]:
    """Central-difference estimate of ``df/dparams``; ``f`` must be deterministic.

    ``order=2`` is the three-point stencil, ``order=4`` the five-point one,
    whose smaller truncation error allows a larger ``eps`` and therefore
    less rounding noise on tiny gradient entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order == 2:
        stencil = ((1.0, 0.5), (-1.0, -0.5))
    elif order == 4:
        stencil = ((2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0),
                   (-2.0, 1.0 / 12.0))
    else:
        raise ValueError("order must be 2 or 4")
    work = params.copy()
    grads = {}
    for name in work:
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            total = 0.0
            for shift, weight in stencil:
                flat[i] = orig + shift * eps
                val = float(f(work))
                if not np.isfinite(val):
                    flat[i] = orig
                    raise NumericFault(f"non-finite objective while perturbing {name}[{i}]")
                total += weight * val
            flat[i] = orig
            gflat[i] = total / eps
        grads[name] = g
    return grads


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(params: ParameterSet, grads: Mapping[str, np.ndarray],
              state: AdamState) -> ParameterSet:
    """Apply one bias-corrected Adam update in place and return ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name][...] -= lr_t * m / (np.sqrt(v) + state.eps * np.sqrt(1.0 - b2 ** t))
    return params


# -- checkpoint files -------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic     8 bytes  b"CCPCKPT1"
#   count     uint32   number of records
#   record*:
#     name_len uint16, name (utf-8), ndim uint8, dims uint64 * ndim,
#     data float64 little-endian, row-major, prod(dims) values

CHECKPOINT_MAGIC = b"CCPCKPT1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out

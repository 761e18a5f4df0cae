"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` is activated as a context manager.  While it records, every
primitive called with at least one :class:`Var` from that tape appends a node
holding only the operands its vector-Jacobian product reads.  Outside a
recording tape the same primitives return plain arrays, so taped and untaped
evaluation share one code path and produce bit-identical values.

Saved operands are registered with the activation ledger
(:mod:`mocaps.bench.ledger`) and released as soon as backward has consumed
the node, or when the tape is released unused.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mocaps.bench.ledger import current_ledger


class UnsupportedOpError(TypeError):
    """A primitive was recorded that has no registered VJP."""


class TapeError(RuntimeError):
    pass


VJPS: dict[str, Callable] = {}


def defvjp(name: str):
    """Register ``fn(g, saved, attrs) -> tuple`` as the VJP of primitive ``name``.

    The returned tuple holds one gradient per primitive input, ``None`` where
    the input does not need one.
    """
    def register(fn):
        VJPS[name] = fn
        return fn
    return register


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value, tape, index, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, dtype={self.value.dtype})"


def value(x):
    return x.value if isinstance(x, Var) else x


class _Node:
    __slots__ = ("op", "inputs", "saved", "attrs", "out", "out_shape", "vjp")

    def __init__(self, op, inputs, saved, attrs, out, out_shape, vjp=None):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.attrs = attrs
        self.out = out
        self.out_shape = out_shape
        self.vjp = vjp


_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Evaluate without recording, whatever tape is active."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tape:
    def __init__(self, ledger=None, site: str = "tape"):
        self.nodes: list[_Node] = []
        self.mode = "record"
        self.ledger = ledger if ledger is not None else current_ledger()
        self.site = site
        self.warnings: list[str] = []
        self.output = None
        self._count = 0
        self._leaves: list[Var] = []
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    @property
    def recording(self) -> bool:
        return self.mode == "record"

    @contextmanager
    def pause(self):
        previous, self.mode = self.mode, "pause"
        try:
            yield
        finally:
            self.mode = previous

    def leaf(self, array, name: str | None = None) -> Var:
        var = Var(np.asarray(array), self, self._count, name)
        self._count += 1
        self._leaves.append(var)
        return var

    def warn(self, message: str) -> None:
        if message not in self.warnings:
            self.warnings.append(message)

    def _push(self, op, out, inputs, saved, attrs, vjp=None) -> Var:
        saved = tuple(saved)
        for arr in saved:
            if isinstance(arr, np.ndarray):
                self.ledger.acquire(arr, self.site)
        index = self._count
        self._count += 1
        self.nodes.append(_Node(op, inputs, saved, attrs, index, np.shape(out), vjp))
        return Var(out, self, index)

    def _free(self, node) -> None:
        for arr in node.saved:
            if isinstance(arr, np.ndarray):
                self.ledger.release(arr)
        node.saved = ()
        node.vjp = None

    def release(self) -> None:
        """Drop every saved operand without running backward."""
        for node in self.nodes:
            self._free(node)
        self._drop()

    def _drop(self) -> None:
        # leaves and output point back at the tape; clearing them avoids
        # leaving reference cycles for the garbage collector
        self.nodes = []
        self._leaves = []
        self.output = None
        self._consumed = True

    @property
    def saved_bytes(self) -> int:
        seen = {}
        for node in self.nodes:
            for arr in node.saved:
                if isinstance(arr, np.ndarray):
                    seen[id(arr)] = arr.nbytes
        return sum(seen.values())

    def backward(self, output: Var, upstream) -> tuple[list, dict]:
        """Propagate ``upstream`` from ``output`` back to the leaves.

        Returns the gradients of unnamed leaves in creation order and a
        ``{name: gradient}`` map for named leaves.  Saved operands are
        released node by node, so a tape can be walked only once.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        if not isinstance(output, Var) or output.tape is not self:
            raise TapeError("output was not recorded on this tape")
        upstream = np.asarray(upstream, dtype=output.value.dtype)
        if upstream.shape != output.value.shape:
            raise ValueError(
                f"upstream shape {upstream.shape} != recorded output shape {output.value.shape}"
            )
        grads = {output.index: upstream}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                self._free(node)
                continue
            if node.vjp is not None:
                in_grads = node.vjp(g)
            else:
                in_grads = VJPS[node.op](g, node.saved, node.attrs)
            self._free(node)
            for idx, gi in zip(node.inputs, in_grads):
                if idx is None or gi is None:
                    continue
                prev = grads.get(idx)
                grads[idx] = gi if prev is None else prev + gi
        self.nodes = []
        self._consumed = True
        input_grads, grad_map = [], {}
        for leaf in self._leaves:
            g = grads.get(leaf.index)
            if g is None:
                g = np.zeros_like(leaf.value)
            if leaf.name is None:
                input_grads.append(g)
            else:
                grad_map[leaf.name] = g
        self._drop()
        return input_grads, grad_map


def emit(op: str, out, inputs, saved=(), **attrs):
    """Record primitive ``op`` if a recording tape owns one of ``inputs``."""
    tape = active_tape()
    if tape is None or not tape.recording:
        return out
    idx = tuple(x.index if isinstance(x, Var) and x.tape is tape else None for x in inputs)
    if all(i is None for i in idx):
        return out
    if op not in VJPS:
        raise UnsupportedOpError(f"primitive {op!r} has no registered VJP")
    return tape._push(op, out, idx, saved, attrs)


def emit_custom(op: str, out, inputs, vjp: Callable, saved=()):
    """Record a node whose VJP is the closure ``vjp(g) -> tuple``."""
    tape = active_tape()
    if tape is None or not tape.recording:
        return out
    idx = tuple(x.index if isinstance(x, Var) and x.tape is tape else None for x in inputs)
    if all(i is None for i in idx):
        return out
    return tape._push(op, out, idx, saved, {}, vjp=vjp)


def needs_grad(*xs) -> tuple[bool, ...]:
    tape = active_tape()
    if tape is None or not tape.recording:
        return tuple(False for _ in xs)
    return tuple(isinstance(x, Var) and x.tape is tape for x in xs)


def _check_same(a, b, op):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{op}: shapes differ {np.shape(a)} vs {np.shape(b)}")


# -- generic primitives ------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    _check_same(av, bv, "add")
    return emit("add", av + bv, (a, b))


@defvjp("add")
def _add_vjp(g, saved, attrs):
    return g, g


def sub(a, b):
    av, bv = value(a), value(b)
    _check_same(av, bv, "sub")
    return emit("sub", av - bv, (a, b))


@defvjp("sub")
def _sub_vjp(g, saved, attrs):
    return g, -g


def mul(a, b):
    av, bv = value(a), value(b)
    _check_same(av, bv, "mul")
    na, nb = needs_grad(a, b)
    return emit("mul", av * bv, (a, b), saved=(bv if na else None, av if nb else None))


@defvjp("mul")
def _mul_vjp(g, saved, attrs):
    b, a = saved
    return (None if b is None else g * b), (None if a is None else g * a)


def scale(a, factor: float):
    av = value(a)
    factor = av.dtype.type(factor)
    return emit("scale", av * factor, (a,), factor=factor)


@defvjp("scale")
def _scale_vjp(g, saved, attrs):
    return (g * attrs["factor"],)


def add_scalar(a, c: float):
    av = value(a)
    return emit("add_scalar", av + av.dtype.type(c), (a,))


@defvjp("add_scalar")
def _add_scalar_vjp(g, saved, attrs):
    return (g,)


def matmul(a, b):
    """Batched matrix product; leading dimensions must match exactly."""
    from mocaps.tensor import matmul as _mm
    av, bv = value(a), value(b)
    na, nb = needs_grad(a, b)
    out = _mm(av, bv)
    return emit("matmul", out, (a, b), saved=(bv if na else None, av if nb else None))


@defvjp("matmul")
def _matmul_vjp(g, saved, attrs):
    b, a = saved
    ga = None if b is None else np.matmul(g, np.swapaxes(b, -1, -2))
    gb = None if a is None else np.matmul(np.swapaxes(a, -1, -2), g)
    return ga, gb


def add_bias(x, bias):
    """``x + bias`` with ``bias`` broadcast along the last axis."""
    xv, bv = value(x), value(bias)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ValueError(f"bias shape {bv.shape} does not match trailing axis of {xv.shape}")
    return emit("add_bias", xv + bv, (x, bias))


@defvjp("add_bias")
def _add_bias_vjp(g, saved, attrs):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def sum_(x, axis=None):
    xv = value(x)
    return emit("sum", np.asarray(xv.sum(axis=axis)), (x,), shape=xv.shape, axis=axis)


@defvjp("sum")
def _sum_vjp(g, saved, attrs):
    shape, axis = attrs["shape"], attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x, axis=None):
    xv = value(x)
    count = xv.size if axis is None else xv.shape[axis]
    return emit("mean", np.asarray(xv.mean(axis=axis)), (x,), shape=xv.shape, axis=axis, count=count)


@defvjp("mean")
def _mean_vjp(g, saved, attrs):
    shape, axis = attrs["shape"], attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / g.dtype.type(attrs["count"]), shape).copy(),)


def reshape(x, shape):
    xv = value(x)
    return emit("reshape", xv.reshape(shape), (x,), shape=xv.shape)


@defvjp("reshape")
def _reshape_vjp(g, saved, attrs):
    return (g.reshape(attrs["shape"]),)


def transpose(x, axes):
    xv = value(x)
    return emit("transpose", np.ascontiguousarray(xv.transpose(axes)), (x,), axes=tuple(axes))


@defvjp("transpose")
def _transpose_vjp(g, saved, attrs):
    return (np.ascontiguousarray(g.transpose(np.argsort(attrs["axes"]))),)


def relu(x):
    xv = value(x)
    out = np.maximum(xv, 0)
    return emit("relu", out, (x,), saved=(out,))


@defvjp("relu")
def _relu_vjp(g, saved, attrs):
    (out,) = saved
    return (g * (out > 0),)


def sigmoid(x):
    xv = value(x)
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1 / (1 + e), e / (1 + e)).astype(xv.dtype, copy=False)
    return emit("sigmoid", out, (x,), saved=(out,))


@defvjp("sigmoid")
def _sigmoid_vjp(g, saved, attrs):
    (y,) = saved
    return (g * y * (1 - y),)


def square(x):
    xv = value(x)
    return emit("square", xv * xv, (x,), saved=(xv,))


@defvjp("square")
def _square_vjp(g, saved, attrs):
    (x,) = saved
    return (2 * g * x,)


def softmax(x, axis=-1):
    xv = value(x)
    z = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return emit("softmax", out, (x,), saved=(out,), axis=axis)


@defvjp("softmax")
def _softmax_vjp(g, saved, attrs):
    (y,) = saved
    axis = attrs["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def l2norm(x):
    """Euclidean norm over the last axis; gradient at the zero vector is zero."""
    xv = value(x)
    n = np.sqrt((xv * xv).sum(axis=-1))
    return emit("l2norm", n, (x,), saved=(xv, n))


@defvjp("l2norm")
def _l2norm_vjp(g, saved, attrs):
    x, n = saved
    safe = np.where(n > 0, n, 1)
    return ((g / safe * (n > 0))[..., None] * x,)


# -- recording interface -----------------------------------------------------

def record(f: Callable, *inputs, params: dict | None = None, ledger=None):
    """Run ``f(*inputs, **params)`` on a fresh tape.

    Positional inputs become unnamed leaves and ``params`` named leaves.
    Returns ``(output, tape)``; ``tape.output`` is the recorded output.
    """
    tape = Tape(ledger=ledger)
    with tape:
        leaves = [tape.leaf(x) for x in inputs]
        named = {k: tape.leaf(v, name=k) for k, v in (params or {}).items()}
        out = f(*leaves, **named)
    if not isinstance(out, Var):
        # output independent of every leaf
        out = tape.leaf(np.asarray(out), name="__constant_output__")
    tape.output = out
    return out.value, tape


def backward(tape: Tape, upstream) -> tuple[list, dict]:
    if tape.output is None:
        raise TapeError("tape has no recorded output; use Tape.backward(output, upstream)")
    input_grads, grad_map = tape.backward(tape.output, upstream)
    grad_map.pop("__constant_output__", None)
    return input_grads, grad_map


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    warnings: list = field(default_factory=list)
    param_count: int | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    @property
    def failures(self) -> list:
        return [k for k, v in self.max_rel_error.items() if v > self.tolerance]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Largest absolute difference scaled by the larger of the two magnitudes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale_ = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale_)


def finite_difference(f: Callable, arrays: dict, name: str, step: float = 1e-6,
                      indices=None) -> np.ndarray:
    """Central differences of scalar ``f(**arrays)`` w.r.t. ``arrays[name]``.

    Only the flat ``indices`` are perturbed (all when ``None``); the other
    entries of the returned array are NaN.
    """
    base = arrays[name]
    flat_idx = range(base.size) if indices is None else indices
    out = np.full(base.size, np.nan)
    for i in flat_idx:
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += step
        minus[i] -= step
        fp = float(f(**{**arrays, name: plus.reshape(base.shape)}))
        fm = float(f(**{**arrays, name: minus.reshape(base.shape)}))
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(base.shape)


def grad_check(f: Callable, inputs: dict, tolerance: float = 1e-4, step: float = 1e-6,
               max_entries: int | None = None, rng=None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(**inputs)`` with central differences.

    ``max_entries`` caps how many entries per input are perturbed; the
    subset is drawn from ``rng`` (a :class:`mocaps.tensor.RngState`).
    """
    out, tape = record(f, params=inputs)
    if np.ndim(out) != 0:
        tape.release()
        raise ValueError("grad_check needs a scalar-valued function")
    warnings = list(tape.warnings)
    _, grads = backward(tape, np.ones((), dtype=np.asarray(out).dtype))

    def untaped(**kw):
        with no_tape():
            return f(**kw)

    report = GradCheckReport(tolerance=tolerance, warnings=warnings)
    for name, arr in inputs.items():
        indices = None
        if max_entries is not None and arr.size > max_entries:
            indices = rng.permutation(arr.size)[:max_entries] if rng is not None \
                else np.arange(max_entries)
        fd = finite_difference(untaped, inputs, name, step=step, indices=indices)
        mask = ~np.isnan(fd)
        report.max_rel_error[name] = relative_error(grads[name][mask], fd[mask])
    return report

"""Tape-based reverse-mode differentiation over a closed set of primitives.

Values are plain ``numpy`` arrays. When a primitive receives at least one
:class:`Node` that requires a gradient, the application is appended to that
node's :class:`Trace`; otherwise the primitive simply computes its result, so
the same model code serves both inference (arrays in, arrays out) and
training (nodes in, nodes out).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """A primitive was applied to operands violating its shape contract."""


class TraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    # backward(ctx, grad_out, needs) -> one gradient (or None) per input
    backward: Callable[..., Sequence[np.ndarray | None]]


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, backward: Callable):
    """Register ``forward`` under ``name`` together with its backward rule."""

    def deco(forward):
        PRIMITIVES[name] = Primitive(name, forward, backward)
        return forward

    return deco


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any]
    ctx: Any


@dataclass
class Trace:
    """Ordered record of primitive applications.

    ``values[i]`` holds the value of node ``i``. Leaves are either named
    parameters or constants; every record's inputs precede its output.
    """

    values: list[np.ndarray] = field(default_factory=list)
    requires_grad: list[bool] = field(default_factory=list)
    records: list[Record] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)
    output: int | None = None

    def leaf(self, value, name: str | None = None) -> "Node":
        value = np.asarray(value)
        idx = len(self.values)
        self.values.append(value)
        self.requires_grad.append(name is not None)
        if name is not None:
            if name in self.params:
                raise TraceError(f"duplicate parameter name {name!r}")
            self.params[name] = idx
        return Node(self, idx)


class Node:
    """Handle to one value inside a trace."""

    __slots__ = ("trace", "id")

    def __init__(self, trace: Trace, idx: int):
        self.trace = trace
        self.id = idx

    @property
    def value(self) -> np.ndarray:
        return self.trace.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def requires_grad(self) -> bool:
        return self.trace.requires_grad[self.id]

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape})"

    # arithmetic sugar; all of it routes through registered primitives
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scale", self, factor=float(other))
        return apply("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply("scale", self, factor=-1.0)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def apply(op: str, *inputs, **attrs):
    """Apply primitive ``op``; record it when any input requires a gradient."""
    prim = PRIMITIVES[op]
    trace = None
    for x in inputs:
        if isinstance(x, Node):
            if trace is None:
                trace = x.trace
            elif x.trace is not trace:
                raise TraceError(f"{op}: operands belong to different traces")
    arrays = [value_of(x) for x in inputs]
    out, ctx = prim.forward(*arrays, **attrs)
    if trace is None:
        return out
    ids = []
    for x, a in zip(inputs, arrays):
        ids.append(x.id if isinstance(x, Node) else trace.leaf(a).id)
    if not any(trace.requires_grad[i] for i in ids):
        return trace.leaf(out)
    node = trace.leaf(out)
    trace.requires_grad[node.id] = True
    trace.records.append(Record(op, tuple(ids), node.id, dict(attrs), ctx))
    return node


def evaluate(
    fn: Callable[..., Any],
    inputs: Sequence[np.ndarray] = (),
    params: Mapping[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, Trace]:
    """Run ``fn(params, *inputs)`` while recording a trace.

    ``params`` become named differentiable leaves; ``inputs`` are constants.
    """
    trace = Trace()
    pnodes = {k: trace.leaf(v, name=k) for k, v in (params or {}).items()}
    inodes = [trace.leaf(x) for x in inputs]
    out = fn(pnodes, *inodes)
    if not isinstance(out, Node) or out.trace is not trace:
        out = trace.leaf(value_of(out))
    trace.output = out.id
    return out.value, trace


def gradient(trace: Trace, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep over ``trace``; returns d(output)/d(param) for every param."""
    if trace.output is None:
        raise TraceError("trace has no output")
    out = trace.values[trace.output]
    if out.size != 1:
        raise TraceError(f"gradient needs a scalar output, got shape {out.shape}")
    if seed is None:
        seed = np.ones_like(out)
    seed = np.asarray(seed, dtype=out.dtype).reshape(out.shape)
    grads: dict[int, np.ndarray] = {trace.output: seed}
    for rec in reversed(trace.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        needs = tuple(trace.requires_grad[i] for i in rec.inputs)
        in_grads = PRIMITIVES[rec.op].backward(rec.ctx, g, needs, **rec.attrs)
        for i, need, gi in zip(rec.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            if gi.shape != trace.values[i].shape:
                raise TraceError(
                    f"{rec.op}: backward produced {gi.shape} for input of shape "
                    f"{trace.values[i].shape}"
                )
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    result = {}
    for name, idx in trace.params.items():
        g = grads.get(idx)
        result[name] = np.zeros_like(trace.values[idx]) if g is None else g
    return result


def replay(trace: Trace, params: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Re-run the recorded primitives forward, optionally with new param values."""
    env = list(trace.values)
    for name, v in (params or {}).items():
        env[trace.params[name]] = np.asarray(v)
    for rec in trace.records:
        out, _ = PRIMITIVES[rec.op].forward(*(env[i] for i in rec.inputs), **rec.attrs)
        env[rec.output] = out
    return env[trace.output]


def value_and_grad(fn, params, inputs=()):
    value, trace = evaluate(fn, inputs, params)
    return value, gradient(trace)

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum, auto, unique
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy import special


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@unique
class OpKind(StrEnum):
    INPUT = auto()
    CONSTANT = auto()
    ADD = auto()
    SUB = auto()
    MUL = auto()
    DIV = auto()
    NEG = auto()
    SIN = auto()
    COS = auto()
    TANH = auto()
    EXP = auto()
    LOG = auto()
    ABS = auto()
    POWER = auto()
    SOFTPLUS = auto()
    MATMUL = auto()
    CONV1D = auto()
    MAXPOOL = auto()
    SUM = auto()
    MEAN = auto()
    NORM2 = auto()
    CONCAT = auto()
    SLICE = auto()
    RESHAPE = auto()
    RFFT = auto()
    IRFFT = auto()
    SCALE = auto()


@dataclass
class _Node:
    op: OpKind
    parents: tuple[int, ...]
    value: Array
    attrs: Mapping[str, Any]
    saved: tuple[Array, ...] = ()


@dataclass(frozen=True, eq=False)
class DiffValue:
    """Handle to one node of a tape together with its forward value."""

    __array_ufunc__ = None

    tape: Tape = field(repr=False)
    node_id: int
    data: Array

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: Any) -> DiffValue:
        return record(OpKind.ADD, [self, other])

    def __radd__(self, other: Any) -> DiffValue:
        return record(OpKind.ADD, [other, self])

    def __sub__(self, other: Any) -> DiffValue:
        return record(OpKind.SUB, [self, other])

    def __rsub__(self, other: Any) -> DiffValue:
        return record(OpKind.SUB, [other, self])

    def __mul__(self, other: Any) -> DiffValue:
        return record(OpKind.MUL, [self, other])

    def __rmul__(self, other: Any) -> DiffValue:
        return record(OpKind.MUL, [other, self])

    def __truediv__(self, other: Any) -> DiffValue:
        return record(OpKind.DIV, [self, other])

    def __rtruediv__(self, other: Any) -> DiffValue:
        return record(OpKind.DIV, [other, self])

    def __neg__(self) -> DiffValue:
        return record(OpKind.NEG, [self])

    def __pow__(self, exponent: float) -> DiffValue:
        return record(OpKind.POWER, [self], exponent=float(exponent))

    def __matmul__(self, other: Any) -> DiffValue:
        return record(OpKind.MATMUL, [self, other])

    def __getitem__(self, key: Any) -> DiffValue:
        return record(OpKind.SLICE, [self], key=key)


class Tape:
    """Ordered record of operations; parents always precede their children."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._grads: list[Array | None] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, data: npt.ArrayLike) -> DiffValue:
        return self._append(OpKind.INPUT, (), _as_array(data).copy(), {})

    def constant(self, data: npt.ArrayLike) -> DiffValue:
        return self._append(OpKind.CONSTANT, (), _as_array(data), {})

    @property
    def inputs(self) -> list[int]:
        return [i for i, node in enumerate(self._nodes) if node.op == OpKind.INPUT]

    def grad(self, value: DiffValue) -> Array:
        self._check_owner(value)
        grad = self._grads[value.node_id]
        if grad is None:
            return np.zeros_like(value.data)
        return grad

    def _append(
        self,
        op: OpKind,
        parents: tuple[int, ...],
        value: Array,
        attrs: Mapping[str, Any],
        saved: tuple[Array, ...] = (),
    ) -> DiffValue:
        node_id = len(self._nodes)
        self._nodes.append(
            _Node(op=op, parents=parents, value=value, attrs=attrs, saved=saved)
        )
        self._grads.append(None)
        return DiffValue(tape=self, node_id=node_id, data=value)

    def _check_owner(self, value: DiffValue) -> None:
        if value.tape is not self or value.node_id >= len(self._nodes):
            msg = f"Node {value.node_id} does not belong to this tape"
            raise TapeError(msg)


class GradientMap(Mapping[int, Array]):
    def __init__(self, grads: dict[int, Array]) -> None:
        self._grads = grads

    def __getitem__(self, node_id: int) -> Array:
        return self._grads[node_id]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def of(self, value: DiffValue) -> Array:
        return self._grads[value.node_id]


def _as_array(data: Any) -> Array:
    return np.asarray(data, dtype=np.float64)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: OpKind, values: Sequence[Array]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*(v.shape for v in values))
    except ValueError as ex:
        shapes = ", ".join(str(v.shape) for v in values)
        msg = f"{op}: operand shapes {shapes} are not broadcastable"
        raise ShapeError(msg) from ex


Forward = Callable[
    [Sequence[Array], Mapping[str, Any]], tuple[Array, tuple[Array, ...]]
]
Backward = Callable[
    [Array, Sequence[Array], Array, tuple[Array, ...], Mapping[str, Any]],
    Sequence[Array | None],
]


@dataclass(frozen=True)
class _OpRule:
    arity: int
    forward: Forward
    backward: Backward


_RULES: dict[OpKind, _OpRule] = {}


def _rule(op: OpKind, arity: int) -> Callable[[Forward], Forward]:
    def wrap(forward: Forward) -> Forward:
        _RULES[op] = _OpRule(arity=arity, forward=forward, backward=_unset)
        return forward

    return wrap


def _grad_rule(op: OpKind) -> Callable[[Backward], Backward]:
    def wrap(backward: Backward) -> Backward:
        _RULES[op] = _OpRule(
            arity=_RULES[op].arity, forward=_RULES[op].forward, backward=backward
        )
        return backward

    return wrap


def _unset(*args: Any) -> Sequence[Array | None]:
    msg = "Missing backward rule"
    raise TapeError(msg)


# elementwise binary


def _binary(op: OpKind, fn: Callable[[Array, Array], Array]) -> Forward:
    def forward(
        values: Sequence[Array], attrs: Mapping[str, Any]
    ) -> tuple[Array, tuple[Array, ...]]:
        _broadcast_shape(op, values)
        return fn(values[0], values[1]), ()

    return forward


_rule(OpKind.ADD, 2)(_binary(OpKind.ADD, np.add))
_rule(OpKind.SUB, 2)(_binary(OpKind.SUB, np.subtract))
_rule(OpKind.MUL, 2)(_binary(OpKind.MUL, np.multiply))
_rule(OpKind.DIV, 2)(_binary(OpKind.DIV, np.divide))


@_grad_rule(OpKind.ADD)
def _add_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


@_grad_rule(OpKind.SUB)
def _sub_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


@_grad_rule(OpKind.MUL)
def _mul_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return _unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)


@_grad_rule(OpKind.DIV)
def _div_grad(
    g: Array, xs: Sequence[Array], out: Array, *_: Any
) -> Sequence[Array | None]:
    a_grad = g / xs[1]
    return _unbroadcast(a_grad, xs[0].shape), _unbroadcast(-a_grad * out, xs[1].shape)


# elementwise unary


def _unary(fn: Callable[[Array], Array]) -> Forward:
    def forward(
        values: Sequence[Array], attrs: Mapping[str, Any]
    ) -> tuple[Array, tuple[Array, ...]]:
        return fn(values[0]), ()

    return forward


_rule(OpKind.NEG, 1)(_unary(np.negative))
_rule(OpKind.SIN, 1)(_unary(np.sin))
_rule(OpKind.COS, 1)(_unary(np.cos))
_rule(OpKind.TANH, 1)(_unary(np.tanh))
_rule(OpKind.EXP, 1)(_unary(np.exp))
_rule(OpKind.LOG, 1)(_unary(np.log))
_rule(OpKind.ABS, 1)(_unary(np.abs))


@_grad_rule(OpKind.NEG)
def _neg_grad(g: Array, *_: Any) -> Sequence[Array | None]:
    return (-g,)


@_grad_rule(OpKind.SIN)
def _sin_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return (g * np.cos(xs[0]),)


@_grad_rule(OpKind.COS)
def _cos_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return (-g * np.sin(xs[0]),)


@_grad_rule(OpKind.TANH)
def _tanh_grad(
    g: Array, xs: Sequence[Array], out: Array, *_: Any
) -> Sequence[Array | None]:
    return (g * (1.0 - out * out),)


@_grad_rule(OpKind.EXP)
def _exp_grad(
    g: Array, xs: Sequence[Array], out: Array, *_: Any
) -> Sequence[Array | None]:
    return (g * out,)


@_grad_rule(OpKind.LOG)
def _log_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return (g / xs[0],)


@_grad_rule(OpKind.ABS)
def _abs_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return (g * np.sign(xs[0]),)


@_rule(OpKind.POWER, 1)
def _power(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    return np.power(values[0], attrs["exponent"]), ()


@_grad_rule(OpKind.POWER)
def _power_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    p = attrs["exponent"]
    return (g * p * np.power(xs[0], p - 1.0),)


@_rule(OpKind.SOFTPLUS, 1)
def _softplus(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    sharpness = attrs["sharpness"]
    return np.logaddexp(0.0, sharpness * values[0]) / sharpness, ()


@_grad_rule(OpKind.SOFTPLUS)
def _softplus_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    return (g * special.expit(attrs["sharpness"] * xs[0]),)


@_rule(OpKind.SCALE, 1)
def _scale(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    return values[0] * attrs["factor"], ()


@_grad_rule(OpKind.SCALE)
def _scale_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    return (g * attrs["factor"],)


# linear algebra and layers


@_rule(OpKind.MATMUL, 2)
def _matmul(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    a, b = values
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        msg = f"{OpKind.MATMUL}: cannot multiply {a.shape} by {b.shape}"
        raise ShapeError(msg)
    return a @ b, ()


@_grad_rule(OpKind.MATMUL)
def _matmul_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    a, b = xs
    a_flat = a.reshape(-1, a.shape[-1])
    g_flat = g.reshape(-1, b.shape[1])
    return g @ b.T, a_flat.T @ g_flat


def _windows(x: Array) -> Array:
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(1, 1)])
    length = x.shape[-1]
    return np.stack([padded[..., j : j + length] for j in range(3)], axis=-1)


@_rule(OpKind.CONV1D, 2)
def _conv1d(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    x, w = values
    if x.ndim != 3 or w.ndim != 3 or w.shape[2] != 3 or w.shape[1] != x.shape[1]:
        msg = (
            f"{OpKind.CONV1D}: input {x.shape} (batch, channels, length) "
            f"does not fit kernel {w.shape} (out, in, 3)"
        )
        raise ShapeError(msg)
    cols = _windows(x)
    return np.einsum("bclj,ocj->bol", cols, w), (cols,)


@_grad_rule(OpKind.CONV1D)
def _conv1d_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: tuple[Array, ...], *_: Any
) -> Sequence[Array | None]:
    x, w = xs
    (cols,) = saved
    w_grad = np.einsum("bol,bclj->ocj", g, cols)
    cols_grad = np.einsum("bol,ocj->bclj", g, w)
    length = x.shape[-1]
    padded = np.zeros(x.shape[:-1] + (length + 2,))
    for j in range(3):
        padded[..., j : j + length] += cols_grad[..., j]
    return padded[..., 1:-1], w_grad


@_rule(OpKind.MAXPOOL, 1)
def _maxpool(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    (x,) = values
    if x.shape[-1] % 2:
        msg = f"{OpKind.MAXPOOL}: length {x.shape[-1]} of {x.shape} is odd"
        raise ShapeError(msg)
    pairs = x.reshape(x.shape[:-1] + (x.shape[-1] // 2, 2))
    picks = np.argmax(pairs, axis=-1)
    return np.take_along_axis(pairs, picks[..., None], axis=-1)[..., 0], (
        picks.astype(np.float64),
    )


@_grad_rule(OpKind.MAXPOOL)
def _maxpool_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: tuple[Array, ...], *_: Any
) -> Sequence[Array | None]:
    picks = saved[0].astype(np.intp)
    grad = np.zeros(g.shape + (2,))
    np.put_along_axis(grad, picks[..., None], g[..., None], axis=-1)
    return (grad.reshape(xs[0].shape),)


# reductions and structure


def _expand(g: Array, shape: tuple[int, ...], axis: int | None) -> Array:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


@_rule(OpKind.SUM, 1)
def _sum(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    return np.asarray(values[0].sum(axis=attrs["axis"])), ()


@_grad_rule(OpKind.SUM)
def _sum_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    return (_expand(g, xs[0].shape, attrs["axis"]),)


@_rule(OpKind.MEAN, 1)
def _mean(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    return np.asarray(values[0].mean(axis=attrs["axis"])), ()


@_grad_rule(OpKind.MEAN)
def _mean_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    x = xs[0]
    count = x.size if attrs["axis"] is None else x.shape[attrs["axis"]]
    return (_expand(g, x.shape, attrs["axis"]) / count,)


@_rule(OpKind.NORM2, 1)
def _norm2(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    return np.asarray(np.square(values[0]).sum(axis=attrs["axis"])), ()


@_grad_rule(OpKind.NORM2)
def _norm2_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    return (2.0 * xs[0] * _expand(g, xs[0].shape, attrs["axis"]),)


@_rule(OpKind.CONCAT, -1)
def _concat(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    try:
        return np.concatenate(values, axis=attrs["axis"]), ()
    except ValueError as ex:
        shapes = ", ".join(str(v.shape) for v in values)
        msg = f"{OpKind.CONCAT}: cannot join {shapes} along axis {attrs['axis']}"
        raise ShapeError(msg) from ex


@_grad_rule(OpKind.CONCAT)
def _concat_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    axis = attrs["axis"]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return np.split(g, bounds, axis=axis)


@_rule(OpKind.SLICE, 1)
def _slice(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    try:
        return np.array(values[0][attrs["key"]], dtype=np.float64), ()
    except IndexError as ex:
        msg = f"{OpKind.SLICE}: key {attrs['key']!r} out of range for {values[0].shape}"
        raise ShapeError(msg) from ex


@_grad_rule(OpKind.SLICE)
def _slice_grad(
    g: Array, xs: Sequence[Array], out: Array, saved: Any, attrs: Mapping[str, Any]
) -> Sequence[Array | None]:
    grad = np.zeros_like(xs[0])
    np.add.at(grad, attrs["key"], g)
    return (grad,)


@_rule(OpKind.RESHAPE, 1)
def _reshape(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    try:
        return values[0].reshape(attrs["shape"]), ()
    except ValueError as ex:
        msg = f"{OpKind.RESHAPE}: cannot reshape {values[0].shape} to {attrs['shape']}"
        raise ShapeError(msg) from ex


@_grad_rule(OpKind.RESHAPE)
def _reshape_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    return (g.reshape(xs[0].shape),)


# real Fourier transforms; spectra are packed as (..., n // 2 + 1, 2) re/im pairs


@_rule(OpKind.RFFT, 1)
def _rfft(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    (x,) = values
    n = x.shape[-1] if x.ndim else 0
    if not _is_power_of_two(n):
        msg = f"{OpKind.RFFT}: length {n} of {x.shape} is not a power of two"
        raise ShapeError(msg)
    spectrum = np.fft.rfft(x, axis=-1)
    return np.stack([spectrum.real, spectrum.imag], axis=-1), ()


@_grad_rule(OpKind.RFFT)
def _rfft_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    n = xs[0].shape[-1]
    full = np.zeros(g.shape[:-2] + (n,), dtype=np.complex128)
    full[..., : n // 2 + 1] = g[..., 0] + 1j * g[..., 1]
    return (np.fft.ifft(full, axis=-1).real * n,)


@_rule(OpKind.IRFFT, 1)
def _irfft(
    values: Sequence[Array], attrs: Mapping[str, Any]
) -> tuple[Array, tuple[Array, ...]]:
    (x,) = values
    if x.ndim < 2 or x.shape[-1] != 2 or not _is_power_of_two(2 * (x.shape[-2] - 1)):
        msg = f"{OpKind.IRFFT}: packed spectrum {x.shape} has no power-of-two length"
        raise ShapeError(msg)
    n = 2 * (x.shape[-2] - 1)
    return np.fft.irfft(x[..., 0] + 1j * x[..., 1], n=n, axis=-1), ()


@_grad_rule(OpKind.IRFFT)
def _irfft_grad(g: Array, xs: Sequence[Array], *_: Any) -> Sequence[Array | None]:
    n = g.shape[-1]
    spectrum = np.fft.rfft(g, axis=-1)
    weights = np.full(n // 2 + 1, 2.0 / n)
    weights[0] = weights[-1] = 1.0 / n
    grad = np.stack([spectrum.real * weights, spectrum.imag * weights], axis=-1)
    grad[..., 0, 1] = 0.0
    grad[..., -1, 1] = 0.0
    return (grad,)


def _owning_tape(operands: Sequence[Any]) -> Tape:
    tapes = {id(op.tape): op.tape for op in operands if isinstance(op, DiffValue)}
    if len(tapes) != 1:
        msg = f"Operands must live on exactly one tape, found {len(tapes)}"
        raise TapeError(msg)
    return next(iter(tapes.values()))


def record(op: OpKind, operands: Sequence[Any], **attrs: Any) -> DiffValue:
    """Evaluate one operation and append it to the operands' tape."""
    rule = _RULES.get(op)
    if rule is None:
        msg = f"Operation {op} cannot be recorded"
        raise TapeError(msg)
    if rule.arity >= 0 and len(operands) != rule.arity:
        msg = f"{op} takes {rule.arity} operands, got {len(operands)}"
        raise ShapeError(msg)
    tape = _owning_tape(operands)
    lifted = [
        op_ if isinstance(op_, DiffValue) else tape.constant(op_) for op_ in operands
    ]
    for value in lifted:
        tape._check_owner(value)
    out, saved = rule.forward([v.data for v in lifted], attrs)
    return tape._append(
        op,
        tuple(v.node_id for v in lifted),
        np.asarray(out, dtype=np.float64),
        attrs,
        saved,
    )


def backward(tape: Tape, output: DiffValue) -> GradientMap:
    """Reverse sweep from a scalar output; returns gradients for every input."""
    tape._check_owner(output)
    if output.data.size != 1:
        msg = f"backward needs a scalar output, got shape {output.shape}"
        raise ShapeError(msg)
    nodes = tape._nodes
    grads: list[Array | None] = [None] * len(nodes)
    grads[output.node_id] = np.ones_like(output.data)
    for node_id in range(output.node_id, -1, -1):
        g = grads[node_id]
        node = nodes[node_id]
        if g is None or not node.parents:
            continue
        parent_values = [nodes[p].value for p in node.parents]
        parent_grads = _RULES[node.op].backward(
            g, parent_values, node.value, node.saved, node.attrs
        )
        for parent, parent_grad in zip(node.parents, parent_grads, strict=True):
            if parent_grad is None:
                continue
            current = grads[parent]
            grads[parent] = parent_grad if current is None else current + parent_grad
    tape._grads = grads
    return GradientMap(
        {
            i: grads[i] if grads[i] is not None else np.zeros_like(nodes[i].value)
            for i in tape.inputs
        }
    )


def check_gradient(
    fn: Callable[[DiffValue], DiffValue], point: npt.ArrayLike, step: float = 1e-6
) -> float:
    """Largest coordinate-wise relative error between AD and central differences."""
    x0 = _as_array(point)
    tape = Tape()
    x = tape.variable(x0)
    analytic = backward(tape, fn(x)).of(x)

    def evaluate(probe: Array) -> float:
        probe_tape = Tape()
        return fn(probe_tape.variable(probe)).item()

    numeric = np.zeros_like(x0)
    for index in np.ndindex(x0.shape):
        plus = x0.copy()
        minus = x0.copy()
        plus[index] += step
        minus[index] -= step
        numeric[index] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
    errors = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(errors.max()) if errors.size else 0.0


# functional helpers


def sin(x: DiffValue) -> DiffValue:
    return record(OpKind.SIN, [x])


def cos(x: DiffValue) -> DiffValue:
    return record(OpKind.COS, [x])


def tanh(x: DiffValue) -> DiffValue:
    return record(OpKind.TANH, [x])


def exp(x: DiffValue) -> DiffValue:
    return record(OpKind.EXP, [x])


def log(x: DiffValue) -> DiffValue:
    return record(OpKind.LOG, [x])


def absolute(x: DiffValue) -> DiffValue:
    return record(OpKind.ABS, [x])


def sqrt(x: DiffValue) -> DiffValue:
    return record(OpKind.POWER, [x], exponent=0.5)


def softplus(x: DiffValue, sharpness: float = 1.0) -> DiffValue:
    return record(OpKind.SOFTPLUS, [x], sharpness=float(sharpness))


def scale(x: DiffValue, factor: float) -> DiffValue:
    return record(OpKind.SCALE, [x], factor=float(factor))


def maximum(a: DiffValue, b: Any) -> DiffValue:
    return scale(a + b + absolute(a - b), 0.5)


def matmul(a: DiffValue, b: Any) -> DiffValue:
    return record(OpKind.MATMUL, [a, b])


def conv1d(x: Any, kernel: Any) -> DiffValue:
    return record(OpKind.CONV1D, [x, kernel])


def maxpool(x: DiffValue) -> DiffValue:
    return record(OpKind.MAXPOOL, [x])


def reduce_sum(x: DiffValue, axis: int | None = None) -> DiffValue:
    return record(OpKind.SUM, [x], axis=axis)


def mean(x: DiffValue, axis: int | None = None) -> DiffValue:
    return record(OpKind.MEAN, [x], axis=axis)


def norm2(x: DiffValue, axis: int | None = None) -> DiffValue:
    return record(OpKind.NORM2, [x], axis=axis)


def concat(values: Sequence[Any], axis: int = -1) -> DiffValue:
    return record(OpKind.CONCAT, list(values), axis=axis)


def reshape(x: DiffValue, shape: tuple[int, ...]) -> DiffValue:
    return record(OpKind.RESHAPE, [x], shape=tuple(shape))


def rfft(x: DiffValue) -> DiffValue:
    return record(OpKind.RFFT, [x])


def irfft(x: DiffValue) -> DiffValue:
    return record(OpKind.IRFFT, [x])

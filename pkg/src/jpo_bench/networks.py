from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import StrEnum, unique
from typing import Any

import numpy as np
import numpy.typing as npt

from . import autodiff as ad
from .autodiff import DiffValue, ShapeError, Tape


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

NORM_EPSILON = 1e-5


@unique
class NetKind(StrEnum):
    S2S = "s2s"
    G2S = "g2s"


@dataclass(frozen=True)
class NetSpec:
    """Scalars-to-scalars MLP or grid-to-scalars conv net.

    For ``g2s`` the input is ``channels`` grids of ``length`` samples; for
    ``s2s`` it is ``inputs`` raw scalars, optionally positional-encoded with
    ``encoding`` frequencies before the first dense layer.
    """

    kind: NetKind
    outputs: int
    hidden: tuple[int, ...] = ()
    inputs: int = 0
    encoding: int = 0
    channels: int = 0
    length: int = 0
    conv: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        widths = (*self.hidden, *self.conv, self.outputs)
        if any(w < 1 for w in widths):
            msg = f"Layer widths must be positive, got {widths}"
            raise ValueError(msg)
        if self.encoding < 0:
            msg = f"Encoding frequency count must be non-negative, got {self.encoding}"
            raise ValueError(msg)
        if self.kind == NetKind.S2S and self.inputs < 1:
            msg = "s2s networks need at least one input scalar"
            raise ValueError(msg)
        if self.kind == NetKind.G2S:
            if self.channels < 1 or not self.conv:
                msg = "g2s networks need input channels and conv blocks"
                raise ValueError(msg)
            if self.length < 1 or self.length % (2 ** len(self.conv)):
                msg = (
                    f"Grid length {self.length} is not divisible by "
                    f"2^{len(self.conv)}"
                )
                raise ValueError(msg)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.kind == NetKind.G2S:
            return (self.channels, self.length)
        return (self.inputs,)

    @property
    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True, eq=False)
class NetParams:
    spec: NetSpec
    flat: Array
    stats: Mapping[str, Array] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = param_count(self.spec)
        if self.flat.shape != (expected,):
            msg = (
                f"Parameter vector has shape {self.flat.shape}, "
                f"expected ({expected},)"
            )
            raise ValueError(msg)


def mlp(
    inputs: int, hidden: tuple[int, ...], outputs: int, *, encoding: int = 0
) -> NetSpec:
    return NetSpec(
        kind=NetKind.S2S,
        inputs=inputs,
        hidden=hidden,
        outputs=outputs,
        encoding=encoding,
    )


def conv_net(
    channels: int,
    length: int,
    conv: tuple[int, ...],
    hidden: tuple[int, ...],
    outputs: int,
) -> NetSpec:
    return NetSpec(
        kind=NetKind.G2S,
        channels=channels,
        length=length,
        conv=conv,
        hidden=hidden,
        outputs=outputs,
    )


def encoding_frequencies(k: int) -> Array:
    if k < 1:
        msg = f"Encoding needs at least one frequency, got {k}"
        raise ValueError(msg)
    if k == 1:
        return np.array([math.pi])
    return math.pi * np.linspace(1.0, 10.0, k)


def positional_encode(raw: npt.ArrayLike, k: int) -> Array:
    """sin/cos features; all sines come first, then all cosines."""
    values = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    phases = values[..., None] * encoding_frequencies(k)
    flat = phases.reshape(values.shape[0], -1)
    encoded = np.concatenate([np.sin(flat), np.cos(flat)], axis=1)
    return encoded[0] if np.ndim(raw) == 1 else encoded


def _encode(raw: DiffValue, k: int) -> DiffValue:
    rows, dims = raw.shape
    phases = ad.reshape(raw, (rows, dims, 1)) * encoding_frequencies(k)
    flat = ad.reshape(phases, (rows, dims * k))
    return ad.concat([ad.sin(flat), ad.cos(flat)], axis=1)


def param_layout(spec: NetSpec) -> tuple[ParamSlot, ...]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if spec.kind == NetKind.G2S:
        channels = spec.channels
        for i, width in enumerate(spec.conv):
            shapes += [
                (f"conv{i}.weight", (width, channels, 3)),
                (f"conv{i}.bias", (width,)),
                (f"conv{i}.scale", (width,)),
                (f"conv{i}.offset", (width,)),
            ]
            channels = width
        features = channels * (spec.length // 2 ** len(spec.conv))
    else:
        features = spec.inputs * (2 * spec.encoding if spec.encoding else 1)
    for i, width in enumerate(spec.hidden):
        shapes += [
            (f"dense{i}.weight", (features, width)),
            (f"dense{i}.bias", (width,)),
        ]
        if spec.kind == NetKind.G2S:
            shapes += [(f"dense{i}.scale", (width,)), (f"dense{i}.offset", (width,))]
        features = width
    shapes += [
        ("head.weight", (features, spec.outputs)),
        ("head.bias", (spec.outputs,)),
    ]
    slots = []
    offset = 0
    for name, shape in shapes:
        slots.append(ParamSlot(name=name, shape=shape, offset=offset))
        offset += math.prod(shape)
    return tuple(slots)


def param_count(spec: NetSpec) -> int:
    return sum(slot.size for slot in param_layout(spec))


def net_init(spec: NetSpec, rng: np.random.Generator) -> NetParams:
    """Fan-in scaled uniform weights and biases; normalization scale 1, offset 0."""
    flat = np.zeros(param_count(spec))
    fan_in = 1
    for slot in param_layout(spec):
        window = slice(slot.offset, slot.offset + slot.size)
        kind = slot.name.rsplit(".", 1)[1]
        if kind == "weight":
            conv = len(slot.shape) == 3
            fan_in = math.prod(slot.shape[1:]) if conv else slot.shape[0]
        if kind in ("weight", "bias"):
            bound = 1.0 / math.sqrt(fan_in)
            flat[window] = rng.uniform(-bound, bound, size=slot.size)
        elif kind == "scale":
            flat[window] = 1.0
    return NetParams(spec=spec, flat=flat)


class _Reader:
    def __init__(self, spec: NetSpec, theta: DiffValue) -> None:
        self._slots = {slot.name: slot for slot in param_layout(spec)}
        self._theta = theta

    def __call__(self, name: str) -> DiffValue:
        slot = self._slots[name]
        chunk = self._theta[slot.offset : slot.offset + slot.size]
        return ad.reshape(chunk, slot.shape)


def _normalize(
    name: str,
    h: DiffValue,
    axes: tuple[int, ...],
    read: _Reader,
    stats: Mapping[str, Array],
    collected: dict[str, Array],
) -> DiffValue:
    if f"{name}.mean" in stats:
        centre, spread = stats[f"{name}.mean"], stats[f"{name}.std"]
    else:
        centre = h.data.mean(axis=axes, keepdims=True)
        spread = np.sqrt(h.data.var(axis=axes, keepdims=True) + NORM_EPSILON)
        collected[f"{name}.mean"] = centre
        collected[f"{name}.std"] = spread
    shape = (1, -1, 1) if len(axes) == 2 else (1, -1)
    scale = ad.reshape(read(f"{name}.scale"), shape)
    offset = ad.reshape(read(f"{name}.offset"), shape)
    return (h - centre) * (1.0 / spread) * scale + offset


def _forward(
    spec: NetSpec,
    theta: DiffValue,
    inputs: DiffValue,
    stats: Mapping[str, Array],
    collected: dict[str, Array],
) -> DiffValue:
    if inputs.shape[1:] != spec.input_shape or inputs.ndim != len(spec.input_shape) + 1:
        msg = (
            f"input layer expects (N, {', '.join(map(str, spec.input_shape))}), "
            f"got {inputs.shape}"
        )
        raise ShapeError(msg)
    read = _Reader(spec, theta)
    rows = inputs.shape[0]
    h = inputs
    if spec.kind == NetKind.G2S:
        for i in range(len(spec.conv)):
            bias = ad.reshape(read(f"conv{i}.bias"), (1, -1, 1))
            h = ad.conv1d(h, read(f"conv{i}.weight")) + bias
            h = _normalize(f"conv{i}", h, (0, 2), read, stats, collected)
            h = ad.maxpool(ad.tanh(h))
        h = ad.reshape(h, (rows, h.shape[1] * h.shape[2]))
    elif spec.encoding:
        h = _encode(h, spec.encoding)
    for i in range(len(spec.hidden)):
        h = h @ read(f"dense{i}.weight") + read(f"dense{i}.bias")
        if spec.kind == NetKind.G2S:
            h = _normalize(f"dense{i}", h, (0,), read, stats, collected)
        h = ad.tanh(h)
    return h @ read("head.weight") + read("head.bias")


def net_forward(
    params: NetParams | NetSpec,
    theta: DiffValue,
    inputs: Any,
    stats: Mapping[str, Array] | None = None,
) -> DiffValue:
    """Forward pass on ``theta``'s tape; arrays are lifted to tape constants."""
    spec = params.spec if isinstance(params, NetParams) else params
    if stats is None and isinstance(params, NetParams):
        stats = params.stats
    if not isinstance(inputs, DiffValue):
        inputs = theta.tape.constant(inputs)
    return _forward(spec, theta, inputs, stats or {}, {})


def net_calibrate(params: NetParams, inputs: Array) -> NetParams:
    """Freeze normalization statistics from one batch."""
    if params.spec.kind != NetKind.G2S:
        return params
    tape = Tape()
    collected: dict[str, Array] = {}
    _forward(
        params.spec, tape.constant(params.flat), tape.constant(inputs), {}, collected
    )
    LOGGER.debug("Calibrated %d normalization layers", len(collected) // 2)
    return replace(params, stats=collected)


def net_apply(params: NetParams, inputs: Array) -> Array:
    tape = Tape()
    return net_forward(params, tape.constant(params.flat), inputs).data

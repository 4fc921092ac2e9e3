from __future__ import annotations

import logging
import math
from collections.abc import Callable, Generator, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum, unique

import numpy as np
import numpy.typing as npt
import pydantic


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]
Objective = Callable[[Array], tuple[float, Array]]
BatchObjective = Callable[[Array, Array], tuple[Array, Array]]
Steps = Generator[Array, tuple[float, Array], "OptimizeResult"]


@unique
class OptimizerKind(StrEnum):
    BFGS = "bfgs"
    GD = "gd"
    ADAM = "adam"


@unique
class ClipTarget(StrEnum):
    SOLUTION = "solution"
    PARAMETERS = "parameters"


@unique
class TerminationReason(StrEnum):
    CONVERGED = "converged"
    STATIONARY = "stationary"
    LINE_SEARCH_FAILED = "line-search-failed"
    MAX_ITERATIONS = "max-iterations"
    NON_FINITE = "non-finite"
    DIVERGED = "diverged"


class OptimizerConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    kind: OptimizerKind = OptimizerKind.BFGS
    step_size: float = pydantic.Field(default=1e-3, gt=0)
    max_iterations: int = pydantic.Field(default=200, ge=0)
    tolerance: float = pydantic.Field(default=1e-10, gt=0)
    c1: float = pydantic.Field(default=1e-4, gt=0, lt=1)
    c2: float = pydantic.Field(default=0.9, gt=0, lt=1)
    max_bracketing: int = pydantic.Field(default=25, ge=1)
    clip_percentile: float = pydantic.Field(default=90.0, gt=0, le=100)
    clip_target: ClipTarget = ClipTarget.SOLUTION
    beta1: float = pydantic.Field(default=0.9, ge=0, lt=1)
    beta2: float = pydantic.Field(default=0.999, ge=0, lt=1)
    epsilon: float = pydantic.Field(default=1e-8, gt=0)
    divergence_factor: float = pydantic.Field(default=1e6, gt=1)

    @pydantic.model_validator(mode="after")
    def _check_wolfe(self) -> OptimizerConfig:
        if not self.c1 < self.c2:
            msg = f"Wolfe constants need c1 < c2, got c1={self.c1}, c2={self.c2}"
            raise ValueError(msg)
        return self


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    x: Array
    loss: float
    grad: Array
    reason: TerminationReason
    trajectory: list[float] = field(default_factory=list)
    iterates: list[Array] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trajectory) - 1


@dataclass(frozen=True, eq=False)
class AdamState:
    params: Array
    first: Array
    second: Array
    step: int = 0
    skipped: bool = False


def _finite(loss: float, grad: Array) -> bool:
    return math.isfinite(loss) and bool(np.all(np.isfinite(grad)))


def _cubic_min(
    a: float, fa: float, da: float, b: float, fb: float, db: float
) -> float | None:
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    d2_sq = d1 * d1 - da * db
    if d2_sq < 0:
        return None
    d2 = math.copysign(math.sqrt(d2_sq), b - a)
    denominator = db - da + 2.0 * d2
    if denominator == 0:
        return None
    t = b - (b - a) * (db + d2 - d1) / denominator
    return t if math.isfinite(t) else None


@dataclass
class _Probe:
    step: float
    loss: float
    grad: Array
    slope: float


def _line_search(
    x: Array,
    f0: float,
    g0: Array,
    direction: Array,
    config: OptimizerConfig,
    failures: list[float],
) -> Generator[Array, tuple[float, Array], _Probe | None]:
    """Strong-Wolfe search; non-finite trials count as failed decrease."""
    slope0 = float(g0 @ direction)
    start = _Probe(step=0.0, loss=f0, grad=g0, slope=slope0)

    def armijo(probe: _Probe) -> bool:
        if not _finite(probe.loss, probe.grad):
            failures.append(probe.step)
            return False
        return (
            probe.loss <= f0 + config.c1 * probe.step * slope0 and probe.loss < f0
        )

    def curvature(probe: _Probe) -> bool:
        return abs(probe.slope) <= -config.c2 * slope0

    def zoom(
        lo: _Probe, hi: _Probe
    ) -> Generator[Array, tuple[float, Array], _Probe | None]:
        for _ in range(config.max_bracketing):
            width = hi.step - lo.step
            trial = None
            if math.isfinite(hi.loss):
                trial = _cubic_min(
                    lo.step, lo.loss, lo.slope, hi.step, hi.loss, hi.slope
                )
            margin = 0.1 * abs(width)
            low_edge, high_edge = sorted((lo.step, hi.step))
            if trial is None or not low_edge + margin <= trial <= high_edge - margin:
                trial = lo.step + 0.5 * width
            loss, grad = yield x + trial * direction
            slope = float(grad @ direction) if _finite(loss, grad) else math.nan
            probe = _Probe(trial, loss, grad, slope)
            if not armijo(probe) or probe.loss >= lo.loss:
                hi = probe
                continue
            if curvature(probe):
                return probe
            if probe.slope * (hi.step - lo.step) >= 0:
                hi = lo
            lo = probe
        return lo if lo.step > 0 else None

    previous = start
    step = 1.0
    for i in range(config.max_bracketing):
        loss, grad = yield x + step * direction
        slope = float(grad @ direction) if _finite(loss, grad) else math.nan
        probe = _Probe(step, loss, grad, slope)
        if not armijo(probe) or (i > 0 and probe.loss >= previous.loss):
            return (yield from zoom(previous, probe))
        if curvature(probe):
            return probe
        if probe.slope >= 0:
            return (yield from zoom(probe, previous))
        previous = probe
        step *= 2.0
    return previous if previous.step > 0 else None


def _start(x0: Array) -> Generator[Array, tuple[float, Array], tuple[float, Array]]:
    loss, grad = yield x0
    return float(loss), np.asarray(grad, dtype=np.float64)


def bfgs_steps(x0: Array, config: OptimizerConfig) -> Steps:
    """BFGS as a coroutine: yields points, receives (loss, gradient)."""
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = yield from _start(x)
    trajectory, iterates = [f], [x]
    if not _finite(f, g):
        reason = TerminationReason.NON_FINITE
        return OptimizeResult(x, f, g, reason, trajectory, iterates)
    dim = x.size
    inverse_hessian = np.eye(dim)
    reason = TerminationReason.MAX_ITERATIONS
    for iteration in range(config.max_iterations):
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            reason = TerminationReason.STATIONARY
            break
        if norm < config.tolerance:
            reason = TerminationReason.CONVERGED
            break
        direction = -inverse_hessian @ g
        if float(g @ direction) >= 0:
            inverse_hessian = np.eye(dim)
            direction = -g
        failures: list[float] = []
        probe = yield from _line_search(x, f, g, direction, config, failures)
        if probe is None:
            reason = (
                TerminationReason.NON_FINITE
                if failures
                else TerminationReason.LINE_SEARCH_FAILED
            )
            LOGGER.debug(
                "BFGS line search failed at iteration %d: %s", iteration, reason
            )
            break
        s = probe.step * direction
        y = probe.grad - g
        sy = float(s @ y)
        if sy <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            inverse_hessian = np.eye(dim)
        else:
            if iteration == 0:
                inverse_hessian = np.eye(dim) * (sy / float(y @ y))
            rho = 1.0 / sy
            left = np.eye(dim) - rho * np.outer(s, y)
            inverse_hessian = left @ inverse_hessian @ left.T + rho * np.outer(s, s)
        x = x + s
        f, g = probe.loss, probe.grad
        trajectory.append(f)
        iterates.append(x)
    LOGGER.debug("BFGS stopped after %d iterations: %s", len(trajectory) - 1, reason)
    return OptimizeResult(x, f, g, reason, trajectory, iterates)


def gd_steps(x0: Array, config: OptimizerConfig) -> Steps:
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = yield from _start(x)
    trajectory, iterates = [f], [x]
    if not _finite(f, g):
        reason = TerminationReason.NON_FINITE
        return OptimizeResult(x, f, g, reason, trajectory, iterates)
    ceiling = config.divergence_factor * max(abs(f), 1.0)
    reason = TerminationReason.MAX_ITERATIONS
    for _ in range(config.max_iterations):
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            reason = TerminationReason.STATIONARY
            break
        if norm < config.tolerance:
            reason = TerminationReason.CONVERGED
            break
        x = x - config.step_size * g
        f, g = yield from _start(x)
        trajectory.append(f)
        iterates.append(x)
        if not _finite(f, g) or f > ceiling:
            reason = TerminationReason.DIVERGED
            LOGGER.debug("Gradient descent diverged (loss %s)", f)
            break
    return OptimizeResult(x, f, g, reason, trajectory, iterates)


_FAILED = frozenset(
    {
        TerminationReason.LINE_SEARCH_FAILED,
        TerminationReason.NON_FINITE,
        TerminationReason.DIVERGED,
    }
)


def _report_failure(result: OptimizeResult, index: int | None = None) -> None:
    if result.reason not in _FAILED:
        return
    LOGGER.warning(
        "Example %s stopped after %d iterations: %s (loss %.6g)",
        "-" if index is None else index,
        result.iterations,
        result.reason,
        result.loss,
    )


def _drive(steps: Steps, objective: Objective) -> OptimizeResult:
    try:
        point = next(steps)
        while True:
            point = steps.send(objective(point))
    except StopIteration as stop:
        _report_failure(stop.value)
        return stop.value


def _drive_batch(
    runs: Sequence[Steps], objective: BatchObjective
) -> list[OptimizeResult]:
    """Advance every run in lockstep, evaluating all pending points at once."""
    results: dict[int, OptimizeResult] = {}
    pending: dict[int, Array] = {}
    for i, steps in enumerate(runs):
        pending[i] = next(steps)
    while pending:
        indices = np.array(sorted(pending), dtype=np.intp)
        losses, grads = objective(np.stack([pending[i] for i in indices]), indices)
        for row, i in enumerate(indices):
            try:
                pending[int(i)] = runs[i].send((float(losses[row]), grads[row]))
            except StopIteration as stop:
                results[int(i)] = stop.value
                _report_failure(stop.value, int(i))
                del pending[int(i)]
    return [results[i] for i in range(len(runs))]


def _check_start(result: OptimizeResult) -> OptimizeResult:
    if result.reason == TerminationReason.NON_FINITE and result.iterations == 0:
        msg = "Objective is not finite at the starting point"
        raise ValueError(msg)
    return result


def bfgs_minimize(
    objective: Objective, x0: npt.ArrayLike, config: OptimizerConfig
) -> OptimizeResult:
    return _check_start(_drive(bfgs_steps(np.asarray(x0), config), objective))


def gd_minimize(
    objective: Objective, x0: npt.ArrayLike, config: OptimizerConfig
) -> OptimizeResult:
    return _check_start(_drive(gd_steps(np.asarray(x0), config), objective))


def bfgs_minimize_batch(
    objective: BatchObjective, x0: Array, config: OptimizerConfig
) -> list[OptimizeResult]:
    """One BFGS state per row of ``x0``; ``objective(rows, indices)``."""
    return _drive_batch([bfgs_steps(row, config) for row in x0], objective)


def gd_minimize_batch(
    objective: BatchObjective, x0: Array, config: OptimizerConfig
) -> list[OptimizeResult]:
    return _drive_batch([gd_steps(row, config) for row in x0], objective)


def adam_init(params: Array) -> AdamState:
    return AdamState(
        params=params.copy(), first=np.zeros_like(params), second=np.zeros_like(params)
    )


def adam_step(state: AdamState, grad: Array, config: OptimizerConfig) -> AdamState:
    if grad.shape != state.first.shape:
        msg = f"Gradient shape {grad.shape} does not match {state.first.shape}"
        raise ValueError(msg)
    if not np.all(np.isfinite(grad)):
        LOGGER.warning("Skipping Adam step %d with non-finite gradient", state.step)
        return replace(state, skipped=True)
    step = state.step + 1
    first = config.beta1 * state.first + (1.0 - config.beta1) * grad
    second = config.beta2 * state.second + (1.0 - config.beta2) * grad * grad
    first_hat = first / (1.0 - config.beta1**step)
    second_hat = second / (1.0 - config.beta2**step)
    params = state.params - config.step_size * first_hat / (
        np.sqrt(second_hat) + config.epsilon
    )
    return AdamState(params=params, first=first, second=second, step=step)


def clip_percentile(grads: Array, percentile: float) -> Array:
    """Rescale per-example gradients (rows) above the nearest-rank percentile norm."""
    if grads.shape[0] == 0:
        msg = "Cannot clip an empty gradient list"
        raise ValueError(msg)
    if not 0 < percentile <= 100:
        msg = f"Percentile must lie in (0, 100], got {percentile}"
        raise ValueError(msg)
    flat = grads.reshape(grads.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    rank = max(1, math.ceil(percentile / 100.0 * norms.size))
    threshold = np.sort(norms)[rank - 1]
    factors = np.ones_like(norms)
    above = norms > threshold
    factors[above] = threshold / norms[above]
    return (flat * factors[:, None]).reshape(grads.shape)


def majority_vote_reduce(grads: Array) -> Array:
    return np.sign(np.sign(grads).sum(axis=0))

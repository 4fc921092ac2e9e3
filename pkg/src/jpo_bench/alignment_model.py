from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import StrEnum, unique

import numpy as np
import numpy.typing as npt
from scipy import optimize, stats

from . import autodiff as ad
from .autodiff import Tape
from .networks import NetSpec, mlp, net_apply, net_forward, net_init
from .noise_lab import LandscapeSpec, Reducer, landscape_grad, make_landscape
from .rng import keyed_rng


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

PLASTICITY_GRID = np.logspace(-1.0, 2.0, 61)
COMPLEXITY_GRID = np.linspace(0.0, 50.0, 101)


@unique
class Provenance(StrEnum):
    PREDICTED = "predicted"
    MEASURED = "measured"


@unique
class TaskKind(StrEnum):
    LINEAR = "linear"
    SINE = "sine"
    SINE_NOISY = "sine-noisy"


@dataclass(frozen=True)
class AlignmentModelParams:
    plasticity: float
    complexity: float

    def __post_init__(self) -> None:
        if not self.plasticity > 0:
            msg = f"Plasticity must be positive, got {self.plasticity}"
            raise ValueError(msg)
        if self.complexity < 0:
            msg = f"Complexity must be non-negative, got {self.complexity}"
            raise ValueError(msg)


@dataclass(frozen=True, eq=False)
class AlignmentCurve:
    ns: tuple[int, ...]
    rho: Array
    provenance: Provenance

    def __post_init__(self) -> None:
        if len(self.ns) != len(self.rho):
            msg = "Curve needs one rho value per N"
            raise ValueError(msg)
        if np.any(self.rho < 0) or np.any(self.rho > 1):
            msg = "Alignment fractions must lie in [0, 1]"
            raise ValueError(msg)


@dataclass(frozen=True)
class AlignmentFit:
    params: AlignmentModelParams
    residual: float
    flat: bool = False


@dataclass(frozen=True)
class AlignmentTask:
    kind: TaskKind
    gamma: Array
    optimum: Array
    landscapes: tuple[LandscapeSpec, ...] = ()

    @property
    def n(self) -> int:
        return int(self.gamma.size)


@dataclass(frozen=True)
class AlignmentMeasurement:
    n: int
    fraction: float
    aligned: int
    active: int
    excluded: int


@dataclass(frozen=True)
class AlignmentRow:
    n: int
    rho_measured: float
    rho_predicted: float


def _recursion(plasticity: Array, complexity: Array, n_max: int) -> Array:
    """rho_1..rho_n_max for broadcastable parameter arrays, shape (n_max, ...)."""
    shape = np.broadcast_shapes(np.shape(plasticity), np.shape(complexity))
    rho = np.ones(shape)
    values = [rho]
    for n in range(2, n_max + 1):
        correlated = np.clip(complexity / n, 0.0, 1.0)
        retained = np.exp(-(n - 1) / plasticity)
        already = 0.5 * correlated + (1.0 - correlated) * rho
        aligned = (1.0 - retained) * already + retained
        rho = ((n - 1) * rho + aligned) / n
        values.append(rho)
    return np.stack(values)


def rho_predict(params: AlignmentModelParams, n_max: int) -> AlignmentCurve:
    if n_max < 1:
        msg = f"n_max must be at least 1, got {n_max}"
        raise ValueError(msg)
    rho = _recursion(
        np.asarray(params.plasticity), np.asarray(params.complexity), n_max
    )
    return AlignmentCurve(
        ns=tuple(range(1, n_max + 1)), rho=rho, provenance=Provenance.PREDICTED
    )


def rho_fit(measured: AlignmentCurve) -> AlignmentFit:
    """Least-squares (A, C) by grid search, then a Nelder-Mead polish."""
    ns = np.asarray(measured.ns)
    if np.unique(ns).size < 3:
        msg = "Fitting needs at least three distinct N values"
        raise ValueError(msg)
    index = ns - 1
    n_max = int(ns.max())
    if np.ptp(measured.rho) < 1e-12:
        LOGGER.warning("Alignment curve is flat (rho=%s)", measured.rho[0])
        complexity = 0.0 if measured.rho[0] >= 1.0 - 1e-12 else COMPLEXITY_GRID[-1]
        params = AlignmentModelParams(
            plasticity=float(PLASTICITY_GRID[-1]), complexity=float(complexity)
        )
        predicted = rho_predict(params, n_max).rho[index]
        residual = float(np.sqrt(np.mean((predicted - measured.rho) ** 2)))
        return AlignmentFit(params=params, residual=residual, flat=True)

    grid = _recursion(PLASTICITY_GRID[:, None], COMPLEXITY_GRID[None, :], n_max)
    errors = np.mean((grid[index] - measured.rho[:, None, None]) ** 2, axis=0)
    i, j = np.unravel_index(int(np.argmin(errors)), errors.shape)

    def objective(point: Array) -> float:
        plasticity = 10.0 ** point[0]
        predicted = _recursion(np.asarray(plasticity), np.asarray(point[1]), n_max)
        return float(np.mean((predicted[index] - measured.rho) ** 2))

    polished = optimize.minimize(
        objective,
        x0=np.array([math.log10(PLASTICITY_GRID[i]), COMPLEXITY_GRID[j]]),
        method="Nelder-Mead",
        bounds=[(-2.0, 4.0), (0.0, 50.0)],
        options={"xatol": 1e-10, "fatol": 1e-18, "maxiter": 4000},
    )
    best = polished.x if polished.fun <= errors[i, j] else np.array(
        [math.log10(PLASTICITY_GRID[i]), COMPLEXITY_GRID[j]]
    )
    params = AlignmentModelParams(
        plasticity=float(10.0 ** best[0]), complexity=float(max(best[1], 0.0))
    )
    residual = math.sqrt(min(float(polished.fun), float(errors[i, j])))
    LOGGER.info(
        "Fitted plasticity=%.4g complexity=%.4g (rms %.3g)",
        params.plasticity,
        params.complexity,
        residual,
    )
    return AlignmentFit(params=params, residual=residual)


def make_alignment_task(kind: TaskKind, n: int, seed: int) -> AlignmentTask:
    """Per-example problems keyed by (seed, example) so tasks nest across N."""
    if kind == TaskKind.LINEAR:
        gamma = np.array([keyed_rng(seed, i).uniform(-1.0, 1.0) for i in range(n)])
        return AlignmentTask(kind=kind, gamma=gamma, optimum=10.0 * gamma)
    gamma = np.array([keyed_rng(seed, i).uniform(-2.0, 2.0) for i in range(n)])
    optimum = np.sin(2.0 * gamma)
    landscapes: tuple[LandscapeSpec, ...] = ()
    if kind == TaskKind.SINE_NOISY:
        landscapes = tuple(
            make_landscape(
                10,
                stats.uniform(0.0, 0.05),
                stats.uniform(0.0, 40.0),
                1.0,
                keyed_rng(seed, i, 1),
                x_star=float(optimum[i]),
            )
            for i in range(n)
        )
    return AlignmentTask(
        kind=kind, gamma=gamma, optimum=optimum, landscapes=landscapes
    )


def task_gradients(task: AlignmentTask, x: Array) -> Array:
    if task.kind == TaskKind.SINE_NOISY:
        return np.array(
            [
                float(landscape_grad(spec, value))
                for spec, value in zip(task.landscapes, x, strict=True)
            ]
        )
    return 2.0 * (x - task.optimum)


def default_alignment_net() -> NetSpec:
    return mlp(1, (32, 32), 1)


def measure_alignment(
    task: AlignmentTask,
    spec: NetSpec,
    *,
    learning_rate: float,
    seed: int,
    reducer: Reducer = Reducer.SUM,
) -> AlignmentMeasurement:
    """Share of examples whose change after one SGD step opposes their gradient."""
    if spec.outputs != 1:
        msg = "Alignment measurement needs one scalar output per example"
        raise ValueError(msg)
    params = net_init(spec, keyed_rng(seed, task.n, 0))
    inputs = task.gamma[:, None]
    before = net_apply(params, inputs)[:, 0]
    grads = task_gradients(task, before)
    upstream = grads if reducer == Reducer.SUM else np.sign(grads)

    tape = Tape()
    theta = tape.variable(params.flat)
    out = net_forward(params, theta, inputs)
    surrogate = ad.reduce_sum(out[:, 0] * upstream)
    theta_grad = ad.backward(tape, surrogate).of(theta)
    updated = replace(params, flat=params.flat - learning_rate * theta_grad)
    after = net_apply(updated, inputs)[:, 0]

    active = grads != 0
    aligned = int(np.sum(np.sign(after - before)[active] == -np.sign(grads[active])))
    count = int(active.sum())
    return AlignmentMeasurement(
        n=task.n,
        fraction=aligned / count if count else math.nan,
        aligned=aligned,
        active=count,
        excluded=task.n - count,
    )


def measure_curve(
    kind: TaskKind,
    ns: Sequence[int],
    seeds: Sequence[int],
    *,
    spec: NetSpec | None = None,
    learning_rate: float = 1e-4,
    reducer: Reducer = Reducer.SUM,
) -> AlignmentCurve:
    spec = spec or default_alignment_net()
    rho = []
    for n in ns:
        fractions = [
            measure_alignment(
                make_alignment_task(kind, n, seed),
                spec,
                learning_rate=learning_rate,
                seed=seed,
                reducer=reducer,
            ).fraction
            for seed in seeds
        ]
        rho.append(float(np.nanmean(fractions)))
        LOGGER.debug("Measured rho_%d = %.4f over %d seeds", n, rho[-1], len(seeds))
    return AlignmentCurve(
        ns=tuple(ns), rho=np.asarray(rho), provenance=Provenance.MEASURED
    )


def alignment_sweep(
    kind: TaskKind,
    ns: Sequence[int],
    seeds: Sequence[int],
    *,
    learning_rate: float = 1e-4,
    reducer: Reducer = Reducer.SUM,
    params: AlignmentModelParams | None = None,
) -> tuple[list[AlignmentRow], AlignmentFit]:
    """Measured curve plus the recursion evaluated with fitted (or given) params."""
    measured = measure_curve(
        kind, ns, seeds, learning_rate=learning_rate, reducer=reducer
    )
    fit = (
        AlignmentFit(params=params, residual=math.nan)
        if params is not None
        else rho_fit(measured)
    )
    predicted = rho_predict(fit.params, max(ns)).rho
    rows = [
        AlignmentRow(n=n, rho_measured=float(r), rho_predicted=float(predicted[n - 1]))
        for n, r in zip(ns, measured.rho, strict=True)
    ]
    return rows, fit

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum, unique

import numpy as np
import numpy.typing as npt
import pandas as pd
import pydantic

from . import autodiff as ad
from .autodiff import DiffValue, ShapeError, Tape
from .networks import (
    NetParams,
    NetSpec,
    conv_net,
    mlp,
    net_calibrate,
    net_forward,
    net_init,
)
from .noise_lab import Reducer
from .optimizers import (
    ClipTarget,
    OptimizerConfig,
    OptimizerKind,
    OptimizeResult,
    TerminationReason,
    adam_init,
    adam_step,
    bfgs_minimize_batch,
    clip_percentile,
    gd_minimize_batch,
)
from .problems import (
    Evaluation,
    Family,
    ProblemSet,
    Simulator,
    SolutionBatch,
    simulator_for,
)
from .rng import keyed_rng


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

ADJOINT_FAMILIES = frozenset({Family.BILLIARDS, Family.ARM})
SYNTHETIC_CHUNK = 256


def _adam(step_size: float) -> OptimizerConfig:
    return OptimizerConfig(kind=OptimizerKind.ADAM, step_size=step_size)


@unique
class MethodTag(StrEnum):
    JPO = "jpo"
    SUPERVISED = "supervised"
    NEURAL_ADJOINT = "neural-adjoint"
    BFGS = "bfgs"
    GD = "gd"


class JpoConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    iterations: int = pydantic.Field(default=1000, ge=0)
    optimizer: OptimizerConfig = pydantic.Field(default_factory=lambda: _adam(1e-3))
    clip: bool = True
    reducer: Reducer = Reducer.SUM
    stop_on_plateau: bool = False
    plateau_window: int = pydantic.Field(default=100, ge=1)
    plateau_tolerance: float = pydantic.Field(default=1e-3, ge=0)


class SupervisedConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    iterations: int = pydantic.Field(default=1000, ge=0)
    synthetic_size: int = pydantic.Field(default=4096, ge=1)
    batch_size: int = pydantic.Field(default=128, ge=1)
    optimizer: OptimizerConfig = pydantic.Field(default_factory=lambda: _adam(1e-3))
    log_every: int = pydantic.Field(default=10, ge=1)


class AdjointConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    hidden: tuple[int, ...] = (64, 64)
    surrogate_iterations: int = pydantic.Field(default=2000, ge=0)
    synthetic_size: int = pydantic.Field(default=4096, ge=1)
    batch_size: int = pydantic.Field(default=128, ge=1)
    optimizer: OptimizerConfig = pydantic.Field(default_factory=lambda: _adam(1e-3))
    iterations: int = pydantic.Field(default=500, ge=0)
    input_optimizer: OptimizerConfig = pydantic.Field(
        default_factory=lambda: _adam(1e-2)
    )
    sharpness: float = pydantic.Field(default=64.0, gt=0)
    residual_threshold: float = pydantic.Field(default=1e-2, gt=0)
    log_every: int = pydantic.Field(default=10, ge=1)


@dataclass(frozen=True, eq=False)
class Refinement:
    start: Array
    start_losses: Array
    estimates: Array
    losses: Array
    iterations: Array
    reasons: tuple[TerminationReason, ...]


@dataclass(frozen=True, eq=False)
class MethodResult:
    """Logged estimates of one method on one problem set.

    ``history_losses[t, i]`` is the true loss of ``history[t].estimates[i]``;
    NaN marks an example whose simulation diverged at that iteration.
    """

    method: MethodTag
    family: Family
    history: tuple[SolutionBatch, ...]
    history_losses: Array
    best: Array
    best_losses: Array
    warnings: tuple[str, ...] = ()
    refinement: Refinement | None = None
    params: NetParams | None = field(default=None, repr=False)

    @property
    def final(self) -> Array:
        return self.history[-1].estimates

    @property
    def final_losses(self) -> Array:
        return self.history_losses[-1]

    @property
    def initial_losses(self) -> Array:
        return self.history_losses[0]

    @property
    def refined_losses(self) -> Array:
        if self.refinement is None:
            return self.final_losses
        return self.refinement.losses

    @property
    def refined(self) -> Array:
        if self.refinement is None:
            return self.final
        return self.refinement.estimates


def _assemble(
    method: MethodTag,
    family: Family,
    snapshots: Sequence[tuple[int, Array, Array]],
    *,
    warnings: Sequence[str] = (),
    params: NetParams | None = None,
) -> MethodResult:
    history = tuple(
        SolutionBatch(family=family, estimates=x.copy(), iteration=it)
        for it, x, _ in snapshots
    )
    losses = np.stack([loss for _, _, loss in snapshots])
    ranked = np.where(np.isnan(losses), np.inf, losses)
    # ties keep the latest snapshot so an unchanged estimate is the final one
    reverse = ranked[::-1]
    best_index = len(snapshots) - 1 - np.argmin(reverse, axis=0)
    columns = np.arange(losses.shape[1])
    stacked = np.stack([batch.estimates for batch in history])
    return MethodResult(
        method=method,
        family=family,
        history=history,
        history_losses=losses,
        best=stacked[best_index, columns],
        best_losses=losses[best_index, columns],
        warnings=tuple(warnings),
        params=params,
    )


def history_frame(result: MethodResult) -> pd.DataFrame:
    """Long-form digest: one row per (example, logged iteration)."""
    rows = []
    for batch, losses in zip(result.history, result.history_losses, strict=True):
        for i, (estimate, loss) in enumerate(
            zip(batch.estimates, losses, strict=True)
        ):
            rows.append(
                {
                    "example-id": i,
                    "iteration": batch.iteration,
                    "loss": loss,
                    **{f"x{j}": value for j, value in enumerate(estimate)},
                }
            )
    return pd.DataFrame(rows)


def default_net_spec(family: Family | str) -> NetSpec:
    match Family(family):
        case Family.BILLIARDS:
            return mlp(4, (128, 128, 128), 2, encoding=4)
        case Family.WAVEPACKET:
            return conv_net(1, 256, (16,) * 5, (64, 32), 1)
        case Family.KS:
            return conv_net(2, 128, (32, 32, 64, 64), (64, 64), 2)
        case Family.ARM:
            return mlp(2, (64, 64), 4)


def _check_outputs(spec: NetSpec, problems: ProblemSet) -> None:
    if spec.outputs != problems.solution_dim:
        msg = (
            f"Network emits {spec.outputs} values but {problems.family} "
            f"solutions have {problems.solution_dim}"
        )
        raise ShapeError(msg)


def _estimates(sim: Simulator, params: NetParams, inputs: Array) -> Array:
    tape = Tape()
    raw = net_forward(params, tape.constant(params.flat), inputs)
    return sim.solution_head(raw).data


# joint parameterized optimization


def jpo_gradient(
    sim: Simulator,
    params: NetParams,
    inputs: Array,
    problems: ProblemSet,
    config: JpoConfig,
    theta: Array | None = None,
) -> tuple[Array, Evaluation, Array]:
    """Estimates, their per-example evaluation and the network parameter gradient.

    Per-example solution gradients are reduced (sum or sign vote), masked where
    the simulation diverged and optionally clipped before being pulled back
    through the network.
    """
    tape = Tape()
    variable = tape.variable(params.flat if theta is None else theta)
    x = sim.solution_head(net_forward(params, variable, inputs))
    evaluation = sim.evaluate(x.data, problems)
    upstream = np.where(evaluation.diverged[:, None], 0.0, evaluation.grads)
    if config.reducer == Reducer.VOTE:
        upstream = np.sign(upstream)
    clip = config.clip and evaluation.diverged.sum() < problems.n
    active = np.flatnonzero(~evaluation.diverged)
    if clip and config.optimizer.clip_target == ClipTarget.SOLUTION:
        upstream[active] = clip_percentile(
            upstream[active], config.optimizer.clip_percentile
        )
    if clip and config.optimizer.clip_target == ClipTarget.PARAMETERS:
        per_example = np.stack(
            [
                ad.backward(tape, ad.reduce_sum(x[i] * upstream[i])).of(variable)
                for i in active
            ]
        )
        clipped = clip_percentile(per_example, config.optimizer.clip_percentile)
        return x.data, evaluation, clipped.sum(axis=0)
    surrogate = ad.reduce_sum(x * upstream)
    return x.data, evaluation, ad.backward(tape, surrogate).of(variable)


def _plateaued(totals: Sequence[float], window: int, tolerance: float) -> bool:
    if len(totals) < 2 * window:
        return False
    previous = float(np.mean(totals[-2 * window : -window]))
    current = float(np.mean(totals[-window:]))
    return previous - current < tolerance * abs(previous)


def jpo_train(
    problems: ProblemSet,
    spec: NetSpec,
    config: JpoConfig,
    *,
    seed: int,
) -> MethodResult:
    """Train one network end-to-end through the simulator on all problems."""
    _check_outputs(spec, problems)
    sim = simulator_for(problems.family)
    inputs = sim.network_inputs(problems.conditioning, problems.targets)
    params = net_calibrate(net_init(spec, keyed_rng(seed, 3)), inputs)
    state = adam_init(params.flat)
    snapshots: list[tuple[int, Array, Array]] = []
    totals: list[float] = []
    masked = 0
    for iteration in range(config.iterations + 1):
        estimates, evaluation, theta_grad = jpo_gradient(
            sim, params, inputs, problems, config, state.params
        )
        snapshots.append((iteration, estimates, evaluation.losses))
        totals.append(evaluation.total)
        LOGGER.debug("JPO iteration %d: total loss %.6g", iteration, totals[-1])
        if evaluation.diverged.any():
            masked += int(evaluation.diverged.sum())
            LOGGER.warning(
                "Masked %d diverged examples at JPO iteration %d",
                int(evaluation.diverged.sum()),
                iteration,
            )
        if iteration == config.iterations:
            break
        if config.stop_on_plateau and _plateaued(
            totals, config.plateau_window, config.plateau_tolerance
        ):
            LOGGER.info("JPO loss plateaued after %d iterations", iteration)
            break
        state = adam_step(state, theta_grad, config.optimizer)
    warnings = [f"{masked} diverged example evaluations masked"] if masked else []
    LOGGER.info(
        "JPO on %d %s problems: total loss %.6g -> %.6g",
        problems.n,
        problems.family,
        totals[0],
        totals[-1],
    )
    return _assemble(
        MethodTag.JPO,
        problems.family,
        snapshots,
        warnings=warnings,
        params=NetParams(spec=spec, flat=state.params, stats=params.stats),
    )


def select_learning_rate(
    trial: Callable[[float], MethodResult],
    *,
    start: float = 1e-2,
    reductions: int = 4,
) -> float:
    """Largest rate (start / 10^k) whose short trial run lowers the total loss."""
    rate = start
    for _ in range(reductions):
        result = trial(rate)
        if np.nansum(result.final_losses) < np.nansum(result.initial_losses):
            return rate
        LOGGER.info("Learning rate %g did not reduce the loss", rate)
        rate /= 10.0
    return rate


def jpo_trial(
    problems: ProblemSet, spec: NetSpec, config: JpoConfig, *, seed: int
) -> Callable[[float], MethodResult]:
    """Short JPO run used for learning-rate selection."""

    def trial(rate: float) -> MethodResult:
        short = config.model_copy(
            update={
                "iterations": min(config.iterations, 50),
                "stop_on_plateau": False,
                "optimizer": config.optimizer.model_copy(update={"step_size": rate}),
            }
        )
        return jpo_train(problems, spec, short, seed=seed)

    return trial


# training on synthetic data


def _fit(
    params: NetParams,
    head: Callable[[DiffValue], DiffValue],
    inputs: Array,
    outputs: Array,
    *,
    iterations: int,
    batch_size: int,
    optimizer: OptimizerConfig,
    rng: np.random.Generator,
    on_iteration: Callable[[int, NetParams], None] | None = None,
) -> tuple[NetParams, float]:
    """Minibatch Adam on the mean squared error; returns params and final MSE."""
    state = adam_init(params.flat)
    size = min(batch_size, inputs.shape[0])
    for iteration in range(iterations):
        if on_iteration is not None:
            current = NetParams(params.spec, state.params, params.stats)
            on_iteration(iteration, current)
        rows = rng.choice(inputs.shape[0], size=size, replace=False)
        tape = Tape()
        theta = tape.variable(state.params)
        residual = head(net_forward(params, theta, inputs[rows])) - outputs[rows]
        loss = ad.scale(ad.norm2(residual), 1.0 / size)
        state = adam_step(state, ad.backward(tape, loss).of(theta), optimizer)
    fitted = NetParams(spec=params.spec, flat=state.params, stats=params.stats)
    tape = Tape()
    prediction = head(net_forward(fitted, tape.constant(fitted.flat), inputs)).data
    mse = float(np.mean(np.sum((prediction - outputs) ** 2, axis=1)))
    return fitted, mse


def _synthetic(
    sim: Simulator, size: int, seed: int, *, box: bool
) -> tuple[Array, dict[str, Array], Array]:
    rng = keyed_rng(seed, 4)
    if box:
        shape = (size, sim.solution_dim)
        solutions = rng.uniform(sim.prior_lower, sim.prior_upper, size=shape)
    else:
        solutions = sim.sample_prior(size, rng)
    conditioning = sim.sample_conditioning(size, keyed_rng(seed, 5))
    rng = keyed_rng(seed, 6)
    outputs = np.concatenate(
        [
            sim.simulate(
                solutions[start : start + SYNTHETIC_CHUNK],
                {
                    k: v[start : start + SYNTHETIC_CHUNK]
                    for k, v in conditioning.items()
                },
                rng,
            )
            for start in range(0, size, SYNTHETIC_CHUNK)
        ]
    )
    return solutions, conditioning, outputs


def supervised_train(
    problems: ProblemSet,
    spec: NetSpec,
    config: SupervisedConfig,
    *,
    seed: int,
) -> MethodResult:
    """Fit the network to synthetic (output, solution) pairs, then infer.

    Target-problem gradients of the simulator are never used; target losses
    are only evaluated for logging.
    """
    _check_outputs(spec, problems)
    sim = simulator_for(problems.family)
    solutions, conditioning, outputs = _synthetic(
        sim, config.synthetic_size, seed, box=False
    )
    train_inputs = sim.network_inputs(conditioning, outputs)
    params = net_calibrate(
        net_init(spec, keyed_rng(seed, 3)), train_inputs[: config.batch_size * 4]
    )
    target_inputs = sim.network_inputs(problems.conditioning, problems.targets)
    snapshots: list[tuple[int, Array, Array]] = []

    def log(iteration: int, current: NetParams) -> None:
        if iteration % config.log_every == 0:
            estimates = _estimates(sim, current, target_inputs)
            losses = sim.loss_values(estimates, problems)
            snapshots.append((iteration, estimates, losses))

    fitted, mse = _fit(
        params,
        sim.solution_head,
        train_inputs,
        solutions,
        iterations=config.iterations,
        batch_size=config.batch_size,
        optimizer=config.optimizer,
        rng=keyed_rng(seed, 7),
        on_iteration=log,
    )
    estimates = _estimates(sim, fitted, target_inputs)
    snapshots.append(
        (config.iterations, estimates, sim.loss_values(estimates, problems))
    )
    LOGGER.info("Supervised fit on %d samples: mse %.6g", config.synthetic_size, mse)
    return _assemble(MethodTag.SUPERVISED, problems.family, snapshots, params=fitted)


# neural adjoint


def boundary_loss(
    xi: DiffValue, lower: Array, upper: Array, sharpness: float
) -> DiffValue:
    """Per-row soft penalty for leaving the box, shape (N,)."""
    width = upper - lower
    excess = ad.maximum(xi - upper, lower - xi) * (1.0 / width)
    return ad.reduce_sum(ad.softplus(excess, sharpness), axis=1)


def _surrogate_inputs(xi: DiffValue, conditioning: Array) -> DiffValue:
    if conditioning.shape[1] == 0:
        return xi
    return ad.concat([xi, conditioning], axis=1)


def neural_adjoint_solve(
    problems: ProblemSet,
    config: AdjointConfig,
    *,
    seed: int,
) -> MethodResult:
    """Fit a surrogate of the simulator, then optimize its inputs per problem."""
    if problems.family not in ADJOINT_FAMILIES:
        msg = f"Neural adjoint needs a scalar solution space, not {problems.family}"
        raise ValueError(msg)
    sim = simulator_for(problems.family)
    solutions, conditioning, outputs = _synthetic(
        sim, config.synthetic_size, seed, box=True
    )
    extra = sim.adjoint_conditioning(conditioning, config.synthetic_size)
    spec = mlp(
        sim.solution_dim + extra.shape[1], config.hidden, problems.targets.shape[1]
    )
    surrogate, residual = _fit(
        net_init(spec, keyed_rng(seed, 3)),
        lambda raw: raw,
        np.concatenate([solutions, extra], axis=1),
        outputs,
        iterations=config.surrogate_iterations,
        batch_size=config.batch_size,
        optimizer=config.optimizer,
        rng=keyed_rng(seed, 7),
    )
    LOGGER.info("Neural adjoint surrogate fitted: mse %.6g", residual)
    warnings = []
    if residual > config.residual_threshold:
        warning = (
            f"surrogate residual {residual:.3g} above {config.residual_threshold}"
        )
        LOGGER.warning("Neural adjoint %s", warning)
        warnings.append(warning)

    lower = np.asarray(sim.prior_lower)
    upper = np.asarray(sim.prior_upper)
    fixed = sim.adjoint_conditioning(problems.conditioning, problems.n)
    state = adam_init(sim.default_start(problems))
    snapshots: list[tuple[int, Array, Array]] = []
    for iteration in range(config.iterations + 1):
        if iteration % config.log_every == 0 or iteration == config.iterations:
            snapshots.append(
                (iteration, state.params, sim.loss_values(state.params, problems))
            )
        if iteration == config.iterations:
            break
        tape = Tape()
        xi = tape.variable(state.params)
        predicted = net_forward(
            surrogate, tape.constant(surrogate.flat), _surrogate_inputs(xi, fixed)
        )
        per_row = ad.norm2(predicted - problems.targets, axis=1) + boundary_loss(
            xi, lower, upper, config.sharpness
        )
        grad = ad.backward(tape, ad.reduce_sum(per_row)).of(xi)
        state = adam_step(state, grad, config.input_optimizer)
    LOGGER.info(
        "Neural adjoint optimized %d inputs for %d iterations",
        problems.n,
        config.iterations,
    )
    return _assemble(
        MethodTag.NEURAL_ADJOINT,
        problems.family,
        snapshots,
        warnings=warnings,
        params=surrogate,
    )


# classical per-example optimization


def _batch_objective(
    sim: Simulator, problems: ProblemSet
) -> Callable[[Array, Array], tuple[Array, Array]]:
    def objective(rows: Array, indices: Array) -> tuple[Array, Array]:
        evaluation = sim.evaluate(rows, problems.subset(indices))
        return evaluation.losses, evaluation.grads

    return objective


def _padded_snapshots(
    runs: Sequence[OptimizeResult],
) -> list[tuple[int, Array, Array]]:
    length = max(len(run.iterates) for run in runs)
    snapshots = []
    for t in range(length):
        estimates = np.stack(
            [run.iterates[min(t, len(run.iterates) - 1)] for run in runs]
        )
        losses = np.array(
            [run.trajectory[min(t, len(run.trajectory) - 1)] for run in runs]
        )
        snapshots.append((t, estimates, losses))
    return snapshots


def _classical(
    method: MethodTag,
    minimize: Callable[..., list[OptimizeResult]],
    problems: ProblemSet,
    config: OptimizerConfig,
) -> MethodResult:
    sim = simulator_for(problems.family)
    start = sim.default_start(problems)
    runs = minimize(_batch_objective(sim, problems), start, config)
    reasons = {reason: 0 for reason in TerminationReason}
    for run in runs:
        reasons[run.reason] += 1
    LOGGER.info(
        "%s on %d %s problems: %s",
        method,
        problems.n,
        problems.family,
        {str(k): v for k, v in reasons.items() if v},
    )
    return _assemble(method, problems.family, _padded_snapshots(runs))


def bfgs_solve(problems: ProblemSet, config: OptimizerConfig) -> MethodResult:
    return _classical(MethodTag.BFGS, bfgs_minimize_batch, problems, config)


def gd_solve(problems: ProblemSet, config: OptimizerConfig) -> MethodResult:
    return _classical(MethodTag.GD, gd_minimize_batch, problems, config)


def refine(
    result: MethodResult, problems: ProblemSet, config: OptimizerConfig
) -> MethodResult:
    """Per-example BFGS on the true objective from the network's estimate."""
    if result.method == MethodTag.SUPERVISED:
        start, start_losses = result.final, result.final_losses
    else:
        start, start_losses = result.best, result.best_losses
    sim = simulator_for(problems.family)
    runs = bfgs_minimize_batch(_batch_objective(sim, problems), start, config)
    estimates = np.stack([run.x for run in runs])
    losses = np.array([run.loss for run in runs])
    # runs that could not evaluate their start keep the unrefined estimate
    losses = np.where(np.isnan(losses), start_losses, losses)
    refinement = Refinement(
        start=start,
        start_losses=start_losses,
        estimates=estimates,
        losses=losses,
        iterations=np.array([run.iterations for run in runs]),
        reasons=tuple(run.reason for run in runs),
    )
    LOGGER.info(
        "Refined %s estimates: total loss %.6g -> %.6g",
        result.method,
        float(np.nansum(start_losses)),
        float(np.nansum(losses)),
    )
    return MethodResult(
        method=result.method,
        family=result.family,
        history=result.history,
        history_losses=result.history_losses,
        best=result.best,
        best_losses=result.best_losses,
        warnings=result.warnings,
        refinement=refinement,
        params=result.params,
    )


def solve(
    method: MethodTag | str,
    problems: ProblemSet,
    *,
    seed: int,
    jpo: JpoConfig | None = None,
    supervised: SupervisedConfig | None = None,
    adjoint: AdjointConfig | None = None,
    bfgs: OptimizerConfig | None = None,
    gd: OptimizerConfig | None = None,
    refinement: OptimizerConfig | None = None,
    spec: NetSpec | None = None,
) -> MethodResult:
    """Run one method with defaults for anything not configured."""
    method = MethodTag(method)
    spec = spec or default_net_spec(problems.family)
    match method:
        case MethodTag.JPO:
            result = jpo_train(problems, spec, jpo or JpoConfig(), seed=seed)
        case MethodTag.SUPERVISED:
            result = supervised_train(
                problems, spec, supervised or SupervisedConfig(), seed=seed
            )
        case MethodTag.NEURAL_ADJOINT:
            result = neural_adjoint_solve(
                problems, adjoint or AdjointConfig(), seed=seed
            )
        case MethodTag.BFGS:
            return bfgs_solve(problems, bfgs or OptimizerConfig())
        case MethodTag.GD:
            return gd_solve(
                problems, gd or OptimizerConfig(kind=OptimizerKind.GD, step_size=1e-2)
            )
    if refinement is None:
        return result
    return refine(result, problems, refinement)


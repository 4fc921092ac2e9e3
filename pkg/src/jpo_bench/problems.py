from __future__ import annotations

import abc
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum, unique
from types import MappingProxyType
from typing import ClassVar

import numpy as np
import numpy.typing as npt

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .rng import keyed_rng


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]


class HiddenTruthError(LookupError):
    pass


class SimulationDivergedError(ArithmeticError):
    def __init__(self, step: int, rows: Sequence[int] = ()) -> None:
        self.step = step
        self.rows = tuple(rows)
        super().__init__(f"Simulation diverged at step {step} (rows {self.rows})")


@unique
class Family(StrEnum):
    WAVEPACKET = "wavepacket"
    BILLIARDS = "billiards"
    KS = "ks"
    ARM = "arm"


SOLUTION_DIM: Mapping[Family, int] = MappingProxyType(
    {Family.WAVEPACKET: 1, Family.BILLIARDS: 2, Family.KS: 2, Family.ARM: 4}
)


@dataclass(frozen=True, eq=False)
class ProblemSet:
    """A batch of inverse problems.

    ``hidden_truth`` is evaluation-only; optimizer-facing code never reads it.
    """

    family: Family
    seed: int
    conditioning: Mapping[str, Array]
    targets: Array
    hidden_truth: Array | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = self.targets.shape[0]
        for name, values in self.conditioning.items():
            if values.shape[0] != n:
                msg = f"Conditioning {name!r} has {values.shape[0]} rows, expected {n}"
                raise ValueError(msg)
        if self.hidden_truth is not None and self.hidden_truth.shape != (
            n,
            SOLUTION_DIM[self.family],
        ):
            msg = f"Ground truth shape {self.hidden_truth.shape} does not fit N={n}"
            raise ValueError(msg)

    @property
    def n(self) -> int:
        return int(self.targets.shape[0])

    @property
    def solution_dim(self) -> int:
        return SOLUTION_DIM[self.family]

    @property
    def ground_truth(self) -> Array:
        if self.hidden_truth is None:
            msg = f"Ground truth of this {self.family} problem set is not available"
            raise HiddenTruthError(msg)
        return self.hidden_truth

    def without_ground_truth(self) -> ProblemSet:
        return ProblemSet(
            family=self.family,
            seed=self.seed,
            conditioning=self.conditioning,
            targets=self.targets,
        )

    def subset(self, indices: Sequence[int]) -> ProblemSet:
        rows = np.asarray(indices, dtype=np.intp)
        return ProblemSet(
            family=self.family,
            seed=self.seed,
            conditioning={k: v[rows] for k, v in self.conditioning.items()},
            targets=self.targets[rows],
            hidden_truth=None if self.hidden_truth is None else self.hidden_truth[rows],
        )


@dataclass(frozen=True, eq=False)
class SolutionBatch:
    family: Family
    estimates: Array
    iteration: int = 0

    def __post_init__(self) -> None:
        dim = SOLUTION_DIM[self.family]
        if self.estimates.ndim != 2 or self.estimates.shape[1] != dim:
            msg = (
                f"{self.family} solutions need shape (N, {dim}), "
                f"got {self.estimates.shape}"
            )
            raise ValueError(msg)


@dataclass(frozen=True)
class Evaluation:
    losses: Array
    grads: Array
    diverged: Array

    @property
    def total(self) -> float:
        return float(np.sum(self.losses[~self.diverged]))


def soft_clamp(value: DiffValue, lower: float, upper: float) -> DiffValue:
    centre = 0.5 * (upper + lower)
    half = 0.5 * (upper - lower)
    return ad.tanh((value - centre) / half) * half + centre


class Simulator(abc.ABC):
    family: ClassVar[Family]
    default_guess: ClassVar[tuple[float, ...]]
    prior_lower: ClassVar[tuple[float, ...]]
    prior_upper: ClassVar[tuple[float, ...]]

    @property
    def solution_dim(self) -> int:
        return SOLUTION_DIM[self.family]

    def generate(self, n: int, seed: int) -> ProblemSet:
        if n < 1:
            msg = f"Problem count must be at least 1, got {n}"
            raise ValueError(msg)
        truth = np.stack(
            [self.sample_prior(1, keyed_rng(seed, i))[0] for i in range(n)]
        )
        parts = [self.sample_conditioning(1, keyed_rng(seed, i, 1)) for i in range(n)]
        conditioning = {
            name: np.concatenate([p[name] for p in parts]) for name in parts[0]
        }
        targets = np.concatenate(
            [
                self.observe(
                    truth[i : i + 1],
                    {k: v[i : i + 1] for k, v in conditioning.items()},
                    keyed_rng(seed, i, 2),
                )
                for i in range(n)
            ]
        )
        LOGGER.debug("Generated %d %s problems with seed %d", n, self.family, seed)
        return ProblemSet(
            family=self.family,
            seed=seed,
            conditioning=conditioning,
            targets=targets,
            hidden_truth=self.solution_for_truth(truth, conditioning),
        )

    def solution_for_truth(
        self, truth: Array, conditioning: Mapping[str, Array]
    ) -> Array:
        return truth

    @abc.abstractmethod
    def sample_prior(self, n: int, rng: np.random.Generator) -> Array:
        pass

    def sample_conditioning(
        self, n: int, rng: np.random.Generator
    ) -> dict[str, Array]:
        return {}

    @abc.abstractmethod
    def observe(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        pass

    def simulate(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        """Forward outputs for synthetic training pairs."""
        return self.observe(solutions, conditioning, rng)

    @abc.abstractmethod
    def losses(self, x: DiffValue, problems: ProblemSet) -> DiffValue:
        """Per-example losses of shape (N,) for candidate solutions (N, dim)."""

    @abc.abstractmethod
    def network_inputs(
        self, conditioning: Mapping[str, Array], targets: Array
    ) -> Array:
        pass

    def adjoint_conditioning(
        self, conditioning: Mapping[str, Array], n: int
    ) -> Array:
        """Scalar conditioning appended to surrogate inputs, shape (n, k)."""
        msg = f"{self.family} has no scalar surrogate inputs"
        raise NotImplementedError(msg)

    def solution_head(self, raw: DiffValue) -> DiffValue:
        return raw

    def default_start(self, problems: ProblemSet) -> Array:
        return np.tile(np.asarray(self.default_guess), (problems.n, 1))

    def evaluate(self, x: Array, problems: ProblemSet) -> Evaluation:
        try:
            return self._evaluate(x, problems)
        except SimulationDivergedError as ex:
            LOGGER.warning(
                "%s batch diverged (%s), evaluating per example", self.family, ex
            )
        losses = np.full(problems.n, np.nan)
        grads = np.zeros_like(x)
        diverged = np.zeros(problems.n, dtype=bool)
        for i in range(problems.n):
            try:
                single = self._evaluate(x[i : i + 1], problems.subset([i]))
            except SimulationDivergedError:
                diverged[i] = True
                continue
            losses[i] = single.losses[0]
            grads[i] = single.grads[0]
        return Evaluation(losses=losses, grads=grads, diverged=diverged)

    def _evaluate(self, x: Array, problems: ProblemSet) -> Evaluation:
        tape = Tape()
        candidate = tape.variable(x)
        losses = self.losses(candidate, problems)
        grads = ad.backward(tape, ad.reduce_sum(losses)).of(candidate)
        finite = np.isfinite(losses.data) & np.all(np.isfinite(grads), axis=1)
        return Evaluation(losses=losses.data.copy(), grads=grads, diverged=~finite)

    def loss_values(self, x: Array, problems: ProblemSet) -> Array:
        return self.evaluate(x, problems).losses


# wave packet

WAVE_TIMES = np.arange(1.0, 257.0)
WAVE_ENVELOPE = 10.0
WAVE_CARRIER = 1.0
WAVE_NOISE = 0.1


def wavepacket_signal(t0: Array) -> Array:
    centres = np.asarray(t0, dtype=np.float64).reshape(-1, 1)
    return wavepacket_forward(Tape().constant(centres)).data


def wavepacket_forward(t0: DiffValue) -> DiffValue:
    """Signal on t = 1..256 for candidate centres of shape (N, 1)."""
    offset = WAVE_TIMES - t0
    envelope = ad.exp(ad.scale(offset * offset, -0.5 / WAVE_ENVELOPE**2))
    return envelope * ad.sin(ad.scale(offset, WAVE_CARRIER))


class WavePacketSimulator(Simulator):
    family = Family.WAVEPACKET
    default_guess = (128.0,)
    prior_lower = (26.0,)
    prior_upper = (230.0,)

    def __init__(self, noise: float = WAVE_NOISE) -> None:
        self.noise = noise

    def sample_prior(self, n: int, rng: np.random.Generator) -> Array:
        return rng.uniform(self.prior_lower[0], self.prior_upper[0], size=(n, 1))

    def observe(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        signal = wavepacket_signal(solutions[:, 0])
        return signal + self.noise * rng.standard_normal(signal.shape)

    def losses(self, x: DiffValue, problems: ProblemSet) -> DiffValue:
        residual = wavepacket_forward(x) - problems.targets
        return ad.mean(residual * residual, axis=1)

    def network_inputs(
        self, conditioning: Mapping[str, Array], targets: Array
    ) -> Array:
        return targets[:, None, :]

    def solution_head(self, raw: DiffValue) -> DiffValue:
        return soft_clamp(raw, float(WAVE_TIMES[0]), float(WAVE_TIMES[-1]))


# billiards

BALL_RADIUS = 0.2
ELASTICITY = 0.8
FRICTION = 0.5
CUE_START = np.array([0.0, 0.5])
BILLIARDS_TARGET = np.array([2.0, 0.5])


def _first_contact(v0: Array, ball: Array) -> float | None:
    """Travel parameter s at first contact, or None when the cue misses."""
    rel = CUE_START - ball
    a = float(v0 @ v0)
    if a == 0.0:
        return None
    b = 2.0 * float(rel @ v0)
    c = float(rel @ rel) - (2.0 * BALL_RADIUS) ** 2
    disc = b * b - 4.0 * a * c
    if disc <= 0.0:
        return None
    s = (-b - math.sqrt(disc)) / (2.0 * a)
    if s <= 0.0 or s >= 1.0 / FRICTION:
        return None
    return s


def billiards_forward(v0: DiffValue, ball: Array) -> tuple[DiffValue, DiffValue]:
    """Resting positions of (cue, ball 2) for one cue velocity of shape (2,).

    Speeds decay as exp(-FRICTION t), so a ball launched at v stops after
    travelling v / FRICTION. Position along a path is parameterised by that
    travel distance per unit of initial speed.
    """
    tape = v0.tape
    if _first_contact(v0.data, ball) is None:
        return v0 * (1.0 / FRICTION) + CUE_START, tape.constant(ball)
    rel = CUE_START - ball
    a = ad.norm2(v0)
    b = ad.scale(ad.reduce_sum(v0 * rel), 2.0)
    c = float(rel @ rel) - (2.0 * BALL_RADIUS) ** 2
    disc = b * b - a * (4.0 * c)
    s = (-b - ad.sqrt(disc)) / ad.scale(a, 2.0)
    contact = v0 * s + CUE_START
    normal = ad.scale(ball - contact, 1.0 / (2.0 * BALL_RADIUS))
    v_contact = v0 * (1.0 - s * FRICTION)
    closing = ad.reduce_sum(v_contact * normal)
    v_ball = normal * ad.scale(closing, 0.5 * (1.0 + ELASTICITY))
    cue_final = contact + ad.scale(v_contact - v_ball, 1.0 / FRICTION)
    ball_final = ad.scale(v_ball, 1.0 / FRICTION) + ball
    return cue_final, ball_final


def billiards_solution(ball: Array, target: Array = BILLIARDS_TARGET) -> Array:
    """Cue velocity that brings ball 2 to rest exactly on the target."""
    path = target - ball
    normal = path / np.linalg.norm(path)
    closing = 2.0 * FRICTION * np.linalg.norm(path) / (1.0 + ELASTICITY)
    contact = ball - 2.0 * BALL_RADIUS * normal
    approach = contact - CUE_START
    distance = float(np.linalg.norm(approach))
    heading = approach / distance
    speed = FRICTION * distance + closing / float(heading @ normal)
    return speed * heading


class BilliardsSimulator(Simulator):
    family = Family.BILLIARDS
    default_guess = (1.0, 0.0)
    prior_lower = (0.5, -1.0)
    prior_upper = (2.5, 1.0)

    def sample_prior(self, n: int, rng: np.random.Generator) -> Array:
        return rng.uniform(self.prior_lower, self.prior_upper, size=(n, 2))

    def sample_conditioning(
        self, n: int, rng: np.random.Generator
    ) -> dict[str, Array]:
        heights = rng.uniform(0.0, 1.0, size=n)
        return {"ball": np.stack([np.ones(n), heights], axis=1)}

    def solution_for_truth(
        self, truth: Array, conditioning: Mapping[str, Array]
    ) -> Array:
        return np.stack([billiards_solution(ball) for ball in conditioning["ball"]])

    def observe(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        # generated problems always aim ball 2 at the fixed target
        return np.tile(BILLIARDS_TARGET, (solutions.shape[0], 1))

    def simulate(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        tape = Tape()
        balls = conditioning["ball"]
        return np.stack(
            [
                billiards_forward(tape.constant(v0), ball)[1].data
                for v0, ball in zip(solutions, balls, strict=True)
            ]
        )

    def losses(self, x: DiffValue, problems: ProblemSet) -> DiffValue:
        balls = problems.conditioning["ball"]
        parts = []
        for i in range(x.shape[0]):
            _, ball_final = billiards_forward(x[i], balls[i])
            parts.append(
                ad.reshape(ad.norm2(ball_final - problems.targets[i]), (1,))
            )
        return ad.concat(parts, axis=0)

    def network_inputs(
        self, conditioning: Mapping[str, Array], targets: Array
    ) -> Array:
        ball = conditioning["ball"]
        return np.concatenate([ball, targets - ball], axis=1)

    def adjoint_conditioning(
        self, conditioning: Mapping[str, Array], n: int
    ) -> Array:
        return conditioning["ball"]


# Kuramoto-Sivashinsky

KS_POINTS = 128
KS_LENGTH = 32.0 * math.pi
KS_DT = 0.25
KS_STEPS = 100
KS_GUARD = 1e6
KS_SMOOTHING = 0.5

KS_GRID = np.arange(KS_POINTS) * (KS_LENGTH / KS_POINTS)
KS_WAVENUMBERS = np.arange(KS_POINTS // 2 + 1) * (2.0 * math.pi / KS_LENGTH)
KS_FORCING = 0.1 * np.cos(KS_GRID) - 0.01 * np.cos(KS_GRID / 16.0) * (
    1.0 - 2.0 * np.sin(KS_GRID / 16.0)
)


def _packed(spectrum: npt.NDArray[np.complex128]) -> Array:
    return np.stack([spectrum.real, spectrum.imag], axis=-1)


_KS_DECAY = np.exp((KS_WAVENUMBERS**2 - KS_WAVENUMBERS**4) * KS_DT)[:, None]
_KS_FORCING_HAT = _packed(np.fft.rfft(KS_FORCING))
_KS_K = KS_WAVENUMBERS[:, None]


def _ks_derivative(spectrum: DiffValue) -> DiffValue:
    return ad.concat([spectrum[..., 1:2] * (-_KS_K), spectrum[..., 0:1] * _KS_K])


def _ks_nonlinear(
    spectrum: DiffValue, alpha: DiffValue, beta: DiffValue, step: int
) -> DiffValue:
    u = ad.irfft(spectrum)
    magnitude = np.abs(u.data)
    bad = ~np.isfinite(magnitude) | (magnitude > KS_GUARD)
    if bad.any():
        raise SimulationDivergedError(step, np.flatnonzero(bad.any(axis=-1)).tolist())
    advection = _ks_derivative(ad.rfft(u * u)) * ad.scale(beta, -0.5)
    return advection + alpha * _KS_FORCING_HAT


def ks_forward(
    alpha: DiffValue, beta: DiffValue, u0: Array, steps: int = KS_STEPS
) -> DiffValue:
    """Final states (N, 128) of the forced KS equation for per-row (alpha, beta).

    Linear terms use the exact per-mode integrating factor; the advection and
    forcing terms are advanced with a two-stage Runge-Kutta scheme.
    """
    if u0.shape[-1] != KS_POINTS:
        msg = f"KS states need {KS_POINTS} points, got {u0.shape}"
        raise ValueError(msg)
    rows = u0.shape[0]
    alpha = ad.reshape(alpha, (rows, 1, 1))
    beta = ad.reshape(beta, (rows, 1, 1))
    spectrum: DiffValue = alpha.tape.constant(_packed(np.fft.rfft(u0, axis=-1)))
    for step in range(steps):
        drift = _ks_nonlinear(spectrum, alpha, beta, step)
        predictor = (spectrum + ad.scale(drift, KS_DT)) * _KS_DECAY
        corrector = _ks_nonlinear(predictor, alpha, beta, step)
        spectrum = spectrum * _KS_DECAY + ad.scale(
            drift * _KS_DECAY + corrector, 0.5 * KS_DT
        )
    final = ad.irfft(spectrum)
    magnitude = np.abs(final.data)
    if not np.all(np.isfinite(magnitude)) or magnitude.max() > KS_GUARD:
        raise SimulationDivergedError(steps)
    return final


def ks_initial_state(rng: np.random.Generator) -> Array:
    modes = rng.standard_normal(KS_WAVENUMBERS.size) + 1j * rng.standard_normal(
        KS_WAVENUMBERS.size
    )
    modes *= np.exp(-(KS_WAVENUMBERS**2) / (2.0 * KS_SMOOTHING**2))
    modes[0] = 0.0
    state = np.fft.irfft(modes, n=KS_POINTS)
    return state / np.sqrt(np.mean(state**2))


class KSSimulator(Simulator):
    family = Family.KS
    default_guess = (1.0, 1.0)
    prior_lower = (0.5, 0.5)
    prior_upper = (1.5, 1.5)

    def __init__(self, steps: int = KS_STEPS) -> None:
        self.steps = steps

    def sample_prior(self, n: int, rng: np.random.Generator) -> Array:
        return rng.uniform(self.prior_lower, self.prior_upper, size=(n, 2))

    def sample_conditioning(
        self, n: int, rng: np.random.Generator
    ) -> dict[str, Array]:
        return {"u0": np.stack([ks_initial_state(rng) for _ in range(n)])}

    def observe(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        tape = Tape()
        return ks_forward(
            tape.constant(solutions[:, 0]),
            tape.constant(solutions[:, 1]),
            conditioning["u0"],
            self.steps,
        ).data

    def losses(self, x: DiffValue, problems: ProblemSet) -> DiffValue:
        final = ks_forward(x[:, 0], x[:, 1], problems.conditioning["u0"], self.steps)
        residual = final - problems.targets
        return ad.mean(residual * residual, axis=1)

    def network_inputs(
        self, conditioning: Mapping[str, Array], targets: Array
    ) -> Array:
        return np.stack([conditioning["u0"], targets], axis=1)


# robotic arm

ARM_SEGMENTS = (0.5, 0.5, 1.0)


def arm_positions(x: Array) -> Array:
    return arm_forward(Tape().constant(x)).data


def arm_forward(x: DiffValue) -> DiffValue:
    """End-effector positions (N, 2) for configurations (x1, t1, t2, t3)."""
    angle = x[:, 1:2]
    reach_x = ad.scale(ad.cos(angle), ARM_SEGMENTS[0])
    reach_y = x[:, 0:1] + ad.scale(ad.sin(angle), ARM_SEGMENTS[0])
    for joint, length in enumerate(ARM_SEGMENTS[1:], start=2):
        angle = angle + x[:, joint : joint + 1]
        reach_x = reach_x + ad.scale(ad.cos(angle), length)
        reach_y = reach_y + ad.scale(ad.sin(angle), length)
    return ad.concat([reach_x, reach_y], axis=1)


class ArmSimulator(Simulator):
    family = Family.ARM
    default_guess = (0.0, 0.0, 0.0, 0.0)
    prior_lower = (-1.0, -1.5, -1.5, -1.5)
    prior_upper = (1.0, 1.5, 1.5, 1.5)
    prior_scale = (0.5, math.sqrt(0.5), math.sqrt(0.5), math.sqrt(0.5))

    def sample_prior(self, n: int, rng: np.random.Generator) -> Array:
        return rng.standard_normal((n, 4)) * np.asarray(self.prior_scale)

    def observe(
        self,
        solutions: Array,
        conditioning: Mapping[str, Array],
        rng: np.random.Generator,
    ) -> Array:
        return arm_positions(solutions)

    def losses(self, x: DiffValue, problems: ProblemSet) -> DiffValue:
        return ad.norm2(arm_forward(x) - problems.targets, axis=1)

    def network_inputs(
        self, conditioning: Mapping[str, Array], targets: Array
    ) -> Array:
        return targets

    def adjoint_conditioning(
        self, conditioning: Mapping[str, Array], n: int
    ) -> Array:
        return np.zeros((n, 0))


_SIMULATORS: dict[Family, type[Simulator]] = {
    Family.WAVEPACKET: WavePacketSimulator,
    Family.BILLIARDS: BilliardsSimulator,
    Family.KS: KSSimulator,
    Family.ARM: ArmSimulator,
}


def simulator_for(family: Family | str) -> Simulator:
    return _SIMULATORS[Family(family)]()


def wavepacket_generate(n: int, seed: int, *, noise: float = WAVE_NOISE) -> ProblemSet:
    return WavePacketSimulator(noise).generate(n, seed)


def billiards_generate(n: int, seed: int) -> ProblemSet:
    return BilliardsSimulator().generate(n, seed)


def ks_generate(n: int, seed: int) -> ProblemSet:
    return KSSimulator().generate(n, seed)


def arm_generate(n: int, seed: int) -> ProblemSet:
    return ArmSimulator().generate(n, seed)


def generate(family: Family | str, n: int, seed: int) -> ProblemSet:
    return simulator_for(family).generate(n, seed)

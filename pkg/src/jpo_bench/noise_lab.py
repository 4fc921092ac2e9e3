from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum, unique
from typing import Any, Protocol

import numpy as np
import numpy.typing as npt
from scipy import special, stats

from .rng import keyed_rng


LOGGER = logging.getLogger(__name__)

Array = npt.NDArray[np.float64]

TWO_PI = 2.0 * math.pi
_CHUNK_ELEMENTS = 1 << 20


class Law(Protocol):
    def rvs(self, size: int, random_state: np.random.Generator) -> Any: ...


@unique
class Reducer(StrEnum):
    SUM = "sum"
    VOTE = "vote"


@dataclass(frozen=True)
class LandscapeSpec:
    """Signal slope toward ``x_star`` plus a Fourier series of noise."""

    slope: float
    x_star: float
    amplitudes: Array
    frequencies: Array
    phases: Array

    def __post_init__(self) -> None:
        if self.slope < 0:
            msg = f"Signal slope must be non-negative, got {self.slope}"
            raise ValueError(msg)
        if not (
            self.amplitudes.shape == self.frequencies.shape == self.phases.shape
        ):
            msg = "Amplitudes, frequencies and phases must have equal shapes"
            raise ValueError(msg)
        if np.any(self.amplitudes < 0) or np.any(self.frequencies < 0):
            msg = "Amplitudes and frequencies must be non-negative"
            raise ValueError(msg)
        if np.any(self.phases < 0) or np.any(self.phases >= TWO_PI):
            msg = "Phases must lie in [0, 2*pi)"
            raise ValueError(msg)

    @property
    def components(self) -> list[tuple[float, float, float]]:
        return [
            (float(a), float(w), float(p))
            for a, w, p in zip(
                self.amplitudes, self.frequencies, self.phases, strict=True
            )
        ]

    @property
    def aw_norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes * self.frequencies))

    @property
    def snr(self) -> float:
        norm = self.aw_norm
        return math.inf if norm == 0 else self.slope / norm


@dataclass(frozen=True)
class LandscapeBatch:
    specs: tuple[LandscapeSpec, ...]
    shared_optimum: bool = True

    def __post_init__(self) -> None:
        if not self.specs:
            msg = "A landscape batch needs at least one spec"
            raise ValueError(msg)
        if self.shared_optimum and len({s.x_star for s in self.specs}) > 1:
            msg = "Shared-optimum batch has differing x_star values"
            raise ValueError(msg)

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def slopes(self) -> Array:
        return np.array([s.slope for s in self.specs])

    @property
    def aw_norms(self) -> Array:
        return np.array([s.aw_norm for s in self.specs])

    @property
    def aw_norm_total(self) -> float:
        return float(np.sqrt(np.sum(self.aw_norms**2)))


@dataclass(frozen=True)
class AlignmentEstimate:
    probability: float
    stderr: float
    samples: int
    per_example: Array


@dataclass(frozen=True)
class TheoryRow:
    n: int
    reducer: Reducer
    p_measured: float
    p_closed_form: float
    stderr: float


def make_landscape(
    m: int,
    amplitude_law: Law,
    frequency_law: Law,
    slope: float,
    rng: np.random.Generator,
    *,
    x_star: float = 0.0,
) -> LandscapeSpec:
    if m < 1:
        msg = f"Component count must be at least 1, got {m}"
        raise ValueError(msg)
    amplitudes = np.abs(np.asarray(amplitude_law.rvs(size=m, random_state=rng)))
    frequencies = np.abs(np.asarray(frequency_law.rvs(size=m, random_state=rng)))
    phases = rng.uniform(0.0, TWO_PI, size=m)
    return LandscapeSpec(
        slope=float(slope),
        x_star=float(x_star),
        amplitudes=amplitudes.astype(np.float64),
        frequencies=frequencies.astype(np.float64),
        phases=np.mod(phases, TWO_PI),
    )


def make_landscape_batch(
    n: int,
    m: int,
    *,
    snr: float,
    seed: int,
    amplitude_law: Law | None = None,
    frequency_law: Law | None = None,
    noise_norm: float | None = 1.0,
    x_star: float = 0.0,
    shared_optimum: bool = True,
    equal_snr: bool = True,
) -> LandscapeBatch:
    """Batch of ``n`` landscapes built from streams keyed by (seed, example).

    ``noise_norm`` rescales every |A w| to a common value; ``None`` keeps the
    raw amplitudes. With ``equal_snr`` each slope is ``snr * |A_i w_i|``,
    otherwise all examples share the slope ``snr * rms(|A w|)``. Without a
    shared optimum each x_star is drawn from U[x_star - 1, x_star + 1].
    """
    if n < 1:
        msg = f"Batch size must be at least 1, got {n}"
        raise ValueError(msg)
    amplitude_law = amplitude_law or stats.uniform(0.0, 1.0)
    frequency_law = frequency_law or stats.uniform(0.0, 20.0)
    raws = []
    for index in range(n):
        rng = keyed_rng(seed, 0, index)
        raw = make_landscape(m, amplitude_law, frequency_law, 0.0, rng)
        amplitudes = raw.amplitudes
        if noise_norm is not None and raw.aw_norm > 0:
            amplitudes = amplitudes * (noise_norm / raw.aw_norm)
        optimum = x_star
        if not shared_optimum:
            optimum = x_star + float(rng.uniform(-1.0, 1.0))
        raws.append((amplitudes, raw.frequencies, raw.phases, optimum))
    norms = np.array([np.linalg.norm(a * w) for a, w, _, _ in raws])
    common_slope = snr * float(np.sqrt(np.mean(norms**2)))
    specs = tuple(
        LandscapeSpec(
            slope=snr * float(norm) if equal_snr else common_slope,
            x_star=optimum,
            amplitudes=amplitudes,
            frequencies=frequencies,
            phases=phases,
        )
        for norm, (amplitudes, frequencies, phases, optimum) in zip(
            norms, raws, strict=True
        )
    )
    return LandscapeBatch(specs=specs, shared_optimum=shared_optimum)


def landscape_loss(spec: LandscapeSpec, x: npt.ArrayLike) -> Any:
    x = np.asarray(x, dtype=np.float64)
    waves = np.cos(np.multiply.outer(x, spec.frequencies) + spec.phases)
    return spec.slope * np.abs(x - spec.x_star) - waves @ spec.amplitudes


def landscape_grad(spec: LandscapeSpec, x: npt.ArrayLike) -> Any:
    """Gradient of ``landscape_loss``; the signal term is 0 exactly at x_star."""
    x = np.asarray(x, dtype=np.float64)
    waves = np.sin(np.multiply.outer(x, spec.frequencies) + spec.phases)
    return spec.slope * np.sign(x - spec.x_star) + waves @ (
        spec.amplitudes * spec.frequencies
    )


def prob_aligned_single(slope: float, aw_norm: float) -> float:
    if slope < 0:
        msg = f"Signal slope must be non-negative, got {slope}"
        raise ValueError(msg)
    if aw_norm < 0:
        msg = f"Noise norm must be non-negative, got {aw_norm}"
        raise ValueError(msg)
    if aw_norm == 0:
        return 1.0 if slope > 0 else 0.5
    return float(0.5 + 0.5 * special.erf(slope / aw_norm))


def prob_aligned_sum(slopes: Sequence[float], aw_norm_total: float) -> float:
    if len(slopes) == 0:
        msg = "At least one slope is required"
        raise ValueError(msg)
    if any(slope < 0 for slope in slopes):
        msg = "Signal slopes must be non-negative"
        raise ValueError(msg)
    return prob_aligned_single(float(np.sum(slopes)), aw_norm_total)


def single_sine_alignment(slope: float, amplitude: float, frequency: float) -> float:
    aw = amplitude * frequency
    if aw <= slope:
        return 1.0 if slope > 0 else 0.5
    return 0.5 + math.asin(slope / aw) / math.pi


def _check_vote_args(n: int, epsilon: float) -> None:
    if n < 1:
        msg = f"Vote count must be at least 1, got {n}"
        raise ValueError(msg)
    if not 0.0 <= epsilon < 0.5:
        msg = f"Vote bias must lie in [0, 0.5), got {epsilon}"
        raise ValueError(msg)


def prob_majority_exact(n: int, epsilon: float) -> float:
    """Bernoulli-sum probability that most of ``n`` votes are correct.

    Ties (even ``n``) are credited one half.
    """
    _check_vote_args(n, epsilon)
    k = np.arange(n + 1)
    pmf = stats.binom.pmf(k, n, 0.5 + epsilon)
    return float(pmf[2 * k > n].sum() + 0.5 * pmf[2 * k == n].sum())


def prob_majority_poisson_binomial(probabilities: Sequence[float]) -> float:
    """Majority probability for independent votes with unequal accuracies."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        msg = "At least one vote probability is required"
        raise ValueError(msg)
    if np.any(p < 0.0) or np.any(p > 1.0):
        msg = "Vote probabilities must lie in [0, 1]"
        raise ValueError(msg)
    pmf = np.ones(1)
    for q in p:
        pmf = np.convolve(pmf, [1.0 - q, q])
    k = np.arange(p.size + 1)
    return float(pmf[2 * k > p.size].sum() + 0.5 * pmf[2 * k == p.size].sum())


def prob_majority_normal(n: int, epsilon: float) -> float:
    _check_vote_args(n, epsilon)
    spread = math.sqrt(2.0 * (0.25 - epsilon * epsilon))
    return float(0.5 + 0.5 * special.erf(math.sqrt(n) * epsilon / spread))


def gradient_noise_ks_test(
    amplitude: float, frequency: float, samples: int, rng: np.random.Generator
) -> float:
    """Two-sample KS p-value of one sine's gradient against the arcsine law."""
    aw = amplitude * frequency
    x = rng.uniform(0.0, TWO_PI / frequency, size=samples)
    phase = rng.uniform(0.0, TWO_PI)
    gradients = aw * np.sin(frequency * x + phase)
    reference = stats.arcsine(loc=-aw, scale=2.0 * aw).rvs(
        size=samples, random_state=rng
    )
    return float(stats.ks_2samp(gradients, reference).pvalue)


def _padded_components(batch: LandscapeBatch) -> tuple[Array, Array, Array]:
    width = max(len(s.amplitudes) for s in batch.specs)
    shape = (len(batch), width)
    aw, freq, phase = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for i, spec in enumerate(batch.specs):
        count = len(spec.amplitudes)
        aw[i, :count] = spec.amplitudes * spec.frequencies
        freq[i, :count] = spec.frequencies
        phase[i, :count] = spec.phases
    return aw, freq, phase


def sampling_half_width(batch: LandscapeBatch) -> float:
    frequencies = np.concatenate([s.frequencies for s in batch.specs])
    active = frequencies[frequencies > 0]
    if active.size == 0:
        return 1.0
    return 3.0 * TWO_PI / float(active.min())


def mc_alignment(
    batch: LandscapeBatch,
    reducer: Reducer,
    samples: int,
    seed: int,
    *,
    half_width: float | None = None,
    random_phases: bool = True,
) -> AlignmentEstimate:
    """Fraction of uniformly drawn x where the reduced update points at x_star.

    With ``random_phases`` every sample also shifts each component by an
    independent uniform phase, so the noise of different examples and samples
    is independent. Otherwise the fixed landscape realization is sampled.
    """
    if not batch.shared_optimum:
        msg = "Monte Carlo alignment needs a shared-optimum batch"
        raise ValueError(msg)
    if samples < 1:
        msg = f"Sample count must be at least 1, got {samples}"
        raise ValueError(msg)
    x_star = batch.specs[0].x_star
    width = half_width if half_width is not None else sampling_half_width(batch)
    aw, freq, phase = _padded_components(batch)
    slopes = batch.slopes
    chunk = max(1, _CHUNK_ELEMENTS // aw.size)
    score = 0.0
    singles = np.zeros(len(batch))
    for chunk_index, start in enumerate(range(0, samples, chunk)):
        size = min(chunk, samples - start)
        rng = keyed_rng(seed, 1, chunk_index)
        offsets = rng.uniform(-width, width, size=size)
        side = np.sign(offsets)
        angles = (x_star + offsets)[:, None, None] * freq + phase
        if random_phases:
            angles = angles + rng.uniform(0.0, TWO_PI, size=angles.shape)
        noise = np.einsum("sij,ij->si", np.sin(angles), aw)
        grads = side[:, None] * slopes + noise
        votes = np.sign(grads) * side[:, None]
        singles += np.sum(votes > 0, axis=0) + 0.5 * np.sum(votes == 0, axis=0)
        if reducer == Reducer.SUM:
            direction = np.sign(grads.sum(axis=1))
        else:
            direction = np.sign(np.sign(grads).sum(axis=1))
        agreement = direction * side
        score += float(np.sum(agreement > 0) + 0.5 * np.sum(agreement == 0))
    p = score / samples
    LOGGER.debug("Monte Carlo alignment N=%d %s: %.5f", len(batch), reducer, p)
    return AlignmentEstimate(
        probability=p,
        stderr=math.sqrt(p * (1.0 - p) / samples),
        samples=samples,
        per_example=singles / samples,
    )


def closed_form_alignment(
    batch: LandscapeBatch,
    reducer: Reducer,
    *,
    measured: Sequence[float] | None = None,
) -> float:
    """Predicted alignment of the reduced update.

    The vote prediction uses ``measured`` single-example alignment fractions
    when given and the erf law of each example otherwise.
    """
    if reducer == Reducer.SUM:
        return prob_aligned_sum(list(batch.slopes), batch.aw_norm_total)
    if measured is not None:
        if len(measured) != len(batch):
            msg = f"Expected {len(batch)} measured fractions, got {len(measured)}"
            raise ValueError(msg)
        return prob_majority_poisson_binomial(measured)
    singles = [prob_aligned_single(s.slope, s.aw_norm) for s in batch.specs]
    if np.ptp(singles) == 0:
        epsilon = min(singles[0] - 0.5, 0.5 - 1e-12)
        return prob_majority_exact(len(batch), epsilon)
    return prob_majority_poisson_binomial(singles)


def theory_sweep(
    reducer: Reducer,
    ns: Sequence[int],
    *,
    components: int,
    snr: float,
    samples: int,
    seed: int,
) -> list[TheoryRow]:
    rows = []
    for n in ns:
        batch = make_landscape_batch(n, components, snr=snr, seed=seed)
        estimate = mc_alignment(batch, reducer, samples, seed)
        rows.append(
            TheoryRow(
                n=n,
                reducer=reducer,
                p_measured=estimate.probability,
                p_closed_form=closed_form_alignment(
                    batch, reducer, measured=list(estimate.per_example)
                ),
                stderr=estimate.stderr,
            )
        )
        LOGGER.info(
            "theory N=%d measured=%.4f closed=%.4f",
            n,
            rows[-1].p_measured,
            rows[-1].p_closed_form,
        )
    return rows

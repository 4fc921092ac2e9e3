from __future__ import annotations

import math
from collections.abc import Callable
from itertools import pairwise

import numpy as np
import pydantic
import pytest

from jpo_bench.optimizers import (
    OptimizerConfig,
    OptimizerKind,
    TerminationReason,
    adam_init,
    adam_step,
    bfgs_minimize,
    bfgs_minimize_batch,
    clip_percentile,
    gd_minimize,
    gd_minimize_batch,
    majority_vote_reduce,
)
from jpo_bench.problems import BilliardsSimulator, Family, ProblemSet


def _quadratic(centre: np.ndarray) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        delta = x - centre
        return float(delta @ delta), 2.0 * delta

    return objective


def _rosenbrock(x: np.ndarray) -> tuple[float, np.ndarray]:
    a, b = x
    loss = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    grad = np.array(
        [-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]
    )
    return float(loss), grad


class TestConfig:
    def test_defaults(self) -> None:
        config = OptimizerConfig()

        assert config.kind == OptimizerKind.BFGS
        assert (config.c1, config.c2) == (1e-4, 0.9)
        assert config.max_bracketing == 25
        assert config.clip_percentile == 90.0

    def test_rejects_unordered_wolfe_constants(self) -> None:
        with pytest.raises(pydantic.ValidationError, match="c1 < c2"):
            OptimizerConfig(c1=0.5, c2=0.4)

    def test_rejects_non_positive_step(self) -> None:
        with pytest.raises(pydantic.ValidationError):
            OptimizerConfig(step_size=0.0)


class TestBfgs:
    def test_quadratic(self) -> None:
        centre = np.array([1.0, -2.0, 3.0])

        result = bfgs_minimize(_quadratic(centre), np.zeros(3), OptimizerConfig())

        assert result.loss < 1e-16
        assert result.iterations <= 5
        np.testing.assert_allclose(result.x, centre, atol=1e-8)

    def test_rosenbrock(self) -> None:
        result = bfgs_minimize(
            _rosenbrock, [-1.2, 1.0], OptimizerConfig(max_iterations=500)
        )

        np.testing.assert_allclose(result.x, [1.0, 1.0], atol=1e-8)

    def test_trajectory_strictly_decreases(self) -> None:
        result = bfgs_minimize(_rosenbrock, [-1.2, 1.0], OptimizerConfig())

        assert len(result.trajectory) == len(result.iterates)
        assert all(
            later < earlier
            for earlier, later in pairwise(result.trajectory)
        )

    def test_flat_start_is_stationary(self) -> None:
        sim = BilliardsSimulator()
        problems = ProblemSet(
            family=Family.BILLIARDS,
            seed=0,
            conditioning={"ball": np.array([[1.0, 0.5]])},
            targets=np.array([[2.0, 0.5]]),
        )

        def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
            evaluation = sim.evaluate(x[None, :], problems)
            return float(evaluation.losses[0]), evaluation.grads[0]

        result = bfgs_minimize(objective, [-1.0, 0.0], OptimizerConfig())

        assert result.reason == TerminationReason.STATIONARY
        assert result.iterations == 0

    def test_rejects_non_finite_start(self) -> None:
        def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
            return math.nan, np.zeros_like(x)

        with pytest.raises(ValueError, match="starting point"):
            bfgs_minimize(objective, [0.0], OptimizerConfig())

    def test_deterministic(self) -> None:
        first = bfgs_minimize(_rosenbrock, [-1.2, 1.0], OptimizerConfig())
        second = bfgs_minimize(_rosenbrock, [-1.2, 1.0], OptimizerConfig())

        assert first.trajectory == second.trajectory

    def test_max_iterations(self) -> None:
        result = bfgs_minimize(
            _rosenbrock, [-1.2, 1.0], OptimizerConfig(max_iterations=3)
        )

        assert result.reason == TerminationReason.MAX_ITERATIONS
        assert result.iterations == 3

    def test_batch_isolates_non_finite_rows(
        self, caplog: pytest.LogCaptureFixture
    ) -> None:
        centre = np.array([0.5, 0.5])

        def objective(
            rows: np.ndarray, indices: np.ndarray
        ) -> tuple[np.ndarray, np.ndarray]:
            delta = rows - centre
            losses = np.sum(delta * delta, axis=1)
            grads = 2.0 * delta
            for row, index in enumerate(indices):
                if index == 1 and rows[row, 0] != 3.0:
                    losses[row] = math.nan
            return losses, grads

        x0 = np.array([[2.0, 2.0], [3.0, 3.0], [-1.0, 0.0]])
        results = bfgs_minimize_batch(objective, x0, OptimizerConfig())

        assert [r.reason for r in results][1] == TerminationReason.NON_FINITE
        for index in (0, 2):
            np.testing.assert_allclose(results[index].x, centre, atol=1e-8)
        warnings = [r.getMessage() for r in caplog.records if r.levelname == "WARNING"]
        assert len(warnings) == 1
        assert warnings[0].startswith("Example 1 stopped after 0 iterations")
        assert "non-finite" in warnings[0]

    def test_batch_matches_single_runs(self) -> None:
        centres = np.array([[1.0, 2.0], [-3.0, 0.5]])

        def objective(
            rows: np.ndarray, indices: np.ndarray
        ) -> tuple[np.ndarray, np.ndarray]:
            delta = rows - centres[indices]
            return np.sum(delta * delta, axis=1), 2.0 * delta

        batch = bfgs_minimize_batch(objective, np.zeros((2, 2)), OptimizerConfig())
        single = bfgs_minimize(_quadratic(centres[1]), np.zeros(2), OptimizerConfig())

        assert batch[1].trajectory == single.trajectory

    def test_example_trajectory_independent_of_batch(self) -> None:
        offsets = np.array([[0.0, 0.0], [0.3, -0.2], [-0.5, 0.4], [1.0, 1.0]])

        def objective(
            rows: np.ndarray, indices: np.ndarray
        ) -> tuple[np.ndarray, np.ndarray]:
            evaluated = [
                _rosenbrock(row - offsets[i])
                for row, i in zip(rows, indices, strict=True)
            ]
            return (
                np.array([loss for loss, _ in evaluated]),
                np.stack([grad for _, grad in evaluated]),
            )

        x0 = np.tile([-1.2, 1.0], (4, 1))
        config = OptimizerConfig(max_iterations=200)
        large = bfgs_minimize_batch(objective, x0, config)
        small = bfgs_minimize_batch(
            lambda rows, indices: objective(rows, indices + 2), x0[:2], config
        )

        assert small[0].trajectory == large[2].trajectory
        assert small[1].trajectory == large[3].trajectory
        np.testing.assert_array_equal(small[0].x, large[2].x)


class TestGradientDescent:
    def test_stable_step_decreases(self) -> None:
        result = gd_minimize(
            _quadratic(np.array([0.0])),
            [3.0],
            OptimizerConfig(kind=OptimizerKind.GD, step_size=0.1, max_iterations=50),
        )

        assert all(
            later < earlier
            for earlier, later in pairwise(result.trajectory)
        )

    def test_unstable_step_diverges(self) -> None:
        result = gd_minimize(
            _quadratic(np.array([0.0])),
            [1.0],
            OptimizerConfig(kind=OptimizerKind.GD, step_size=1.5, max_iterations=100),
        )

        assert result.reason == TerminationReason.DIVERGED

    def test_batch_finds_nearest_minimum(self) -> None:
        config = OptimizerConfig(
            kind=OptimizerKind.GD, step_size=0.5, max_iterations=500, tolerance=1e-9
        )

        def objective(
            rows: np.ndarray, indices: np.ndarray
        ) -> tuple[np.ndarray, np.ndarray]:
            return 1.0 - np.cos(rows[:, 0]), np.sin(rows)

        near, far = gd_minimize_batch(
            objective, np.array([[1.0], [2.0 * math.pi + 1.0]]), config
        )

        assert near.reason == TerminationReason.CONVERGED
        assert near.x[0] == pytest.approx(0.0, abs=1e-8)
        assert far.x[0] == pytest.approx(2.0 * math.pi, abs=1e-8)


class TestAdam:
    def test_zero_gradient_keeps_params(self) -> None:
        state = adam_init(np.array([1.0, -2.0]))

        stepped = adam_step(state, np.zeros(2), OptimizerConfig())

        np.testing.assert_array_equal(stepped.params, state.params)
        assert stepped.step == 1

    def test_moments_decay(self) -> None:
        config = OptimizerConfig()
        state = adam_step(adam_init(np.zeros(1)), np.ones(1), config)

        decayed = adam_step(state, np.zeros(1), config)

        assert decayed.first[0] == pytest.approx(0.9 * state.first[0])
        assert decayed.second[0] == pytest.approx(0.999 * state.second[0])

    def test_first_step(self) -> None:
        state = adam_step(adam_init(np.zeros(1)), np.ones(1), OptimizerConfig())

        assert state.params[0] == pytest.approx(-0.001, rel=1e-6)

    def test_constant_gradient_step_tends_to_rate(self) -> None:
        config = OptimizerConfig(step_size=0.01)
        state = adam_init(np.zeros(2))
        for _ in range(5000):
            previous = state.params
            state = adam_step(state, np.array([3.0, -0.2]), config)

        np.testing.assert_allclose(
            np.abs(state.params - previous), 0.01, rtol=1e-3
        )

    def test_non_finite_gradient_skipped(self) -> None:
        state = adam_init(np.ones(2))

        stepped = adam_step(state, np.array([1.0, math.nan]), OptimizerConfig())

        assert stepped.skipped
        assert stepped.step == 0
        np.testing.assert_array_equal(stepped.params, state.params)

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ValueError, match="does not match"):
            adam_step(adam_init(np.ones(2)), np.ones(3), OptimizerConfig())


class TestReductions:
    def test_equal_norms_unchanged(self) -> None:
        grads = np.array([[3.0, 4.0], [0.0, 5.0], [-5.0, 0.0]])

        np.testing.assert_array_equal(clip_percentile(grads, 90.0), grads)

    def test_nearest_rank(self) -> None:
        grads = np.arange(1.0, 11.0)[:, None]

        clipped = clip_percentile(grads, 90.0)

        np.testing.assert_allclose(clipped[:, 0], [*range(1, 10), 9])

    def test_small_percentile_equalizes(self) -> None:
        grads = np.array([[1.0, 0.0], [0.0, -4.0], [6.0, 8.0]])

        clipped = clip_percentile(grads, 1e-9)

        np.testing.assert_allclose(np.linalg.norm(clipped, axis=1), 1.0)

    def test_never_grows_and_keeps_direction(self) -> None:
        grads = np.random.default_rng(0).standard_normal((50, 3))

        clipped = clip_percentile(grads, 60.0)

        before = np.linalg.norm(grads, axis=1)
        after = np.linalg.norm(clipped, axis=1)
        assert np.all(after <= before + 1e-15)
        np.testing.assert_allclose(
            clipped / after[:, None], grads / before[:, None], atol=1e-12
        )

    @pytest.mark.parametrize("percentile", [0.0, 101.0])
    def test_rejects_bad_percentile(self, percentile: float) -> None:
        with pytest.raises(ValueError, match="Percentile"):
            clip_percentile(np.ones((2, 1)), percentile)

    def test_vote_single(self) -> None:
        np.testing.assert_array_equal(
            majority_vote_reduce(np.array([[-0.3, 2.0]])), [-1.0, 1.0]
        )

    def test_vote_ignores_magnitude(self) -> None:
        assert majority_vote_reduce(np.array([[1.0], [1.0], [-5.0]]))[0] == 1.0

    def test_vote_tie_is_zero(self) -> None:
        assert majority_vote_reduce(np.array([[2.0], [-1.0]]))[0] == 0.0

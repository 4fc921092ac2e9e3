from __future__ import annotations

import math

import numpy as np
import pytest

from jpo_bench.alignment_model import (
    AlignmentCurve,
    AlignmentModelParams,
    AlignmentTask,
    Provenance,
    TaskKind,
    alignment_sweep,
    default_alignment_net,
    make_alignment_task,
    measure_alignment,
    measure_curve,
    rho_fit,
    rho_predict,
    task_gradients,
)
from jpo_bench.networks import mlp, net_apply, net_init
from jpo_bench.noise_lab import Reducer
from jpo_bench.rng import keyed_rng


def _measured(rho: np.ndarray) -> AlignmentCurve:
    return AlignmentCurve(
        ns=tuple(range(1, len(rho) + 1)), rho=rho, provenance=Provenance.MEASURED
    )


class TestRhoPredict:
    @pytest.mark.parametrize(("plasticity", "complexity"), [(0.5, 0.0), (12.9, 6.4)])
    def test_starts_at_one(self, plasticity: float, complexity: float) -> None:
        curve = rho_predict(AlignmentModelParams(plasticity, complexity), 10)

        assert curve.rho[0] == 1.0
        assert curve.ns == tuple(range(1, 11))
        assert curve.provenance == Provenance.PREDICTED

    def test_second_value(self) -> None:
        curve = rho_predict(AlignmentModelParams(1.0, 1.0), 2)

        assert curve.rho[1] == pytest.approx(0.9210, abs=1e-4)

    def test_zero_complexity_stays_aligned(self) -> None:
        curve = rho_predict(AlignmentModelParams(1e-3, 0.0), 64)

        np.testing.assert_allclose(curve.rho, 1.0)

    def test_high_plasticity_stays_aligned(self) -> None:
        curve = rho_predict(AlignmentModelParams(1e9, 30.0), 64)

        np.testing.assert_allclose(curve.rho, 1.0, atol=1e-6)

    def test_converges_to_limit(self) -> None:
        rho = rho_predict(AlignmentModelParams(12.9, 6.4), 4000).rho

        assert abs(rho[-1] - rho[-2]) < 1e-6
        assert 0.5 <= rho[-1] <= 1.0

    def test_rejects_empty_range(self) -> None:
        with pytest.raises(ValueError, match="n_max"):
            rho_predict(AlignmentModelParams(1.0, 1.0), 0)

    @pytest.mark.parametrize(("plasticity", "complexity"), [(0.0, 1.0), (1.0, -1.0)])
    def test_rejects_bad_params(self, plasticity: float, complexity: float) -> None:
        with pytest.raises(ValueError, match="must be"):
            AlignmentModelParams(plasticity, complexity)

    def test_curve_bounds(self) -> None:
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            _measured(np.array([1.0, 1.2]))


class TestRhoFit:
    def test_recovers_generating_params(self) -> None:
        truth = AlignmentModelParams(12.9, 6.4)
        curve = _measured(rho_predict(truth, 64).rho)

        fit = rho_fit(curve)

        assert fit.params.plasticity == pytest.approx(12.9, rel=0.05)
        assert fit.params.complexity == pytest.approx(6.4, rel=0.05)
        assert fit.residual < 1e-3
        assert not fit.flat

    def test_noisy_curve_residual_below_noise(self) -> None:
        clean = rho_predict(AlignmentModelParams(1.0, 1.0), 64).rho
        noise = keyed_rng(0).normal(0.0, 0.01, size=clean.size)
        noise[0] = 0.0
        noisy = np.clip(clean + noise, 0.0, 1.0)
        floor = math.sqrt(float(np.mean((noisy - clean) ** 2)))

        fit = rho_fit(_measured(noisy))

        assert fit.residual <= floor * 1.05

    def test_flat_curve(self) -> None:
        fit = rho_fit(_measured(np.ones(8)))

        assert fit.flat
        assert fit.params.complexity == 0.0
        assert fit.residual == pytest.approx(0.0, abs=1e-9)

    def test_needs_three_points(self) -> None:
        curve = AlignmentCurve(
            ns=(1, 2, 2),
            rho=np.array([1.0, 0.9, 0.9]),
            provenance=Provenance.MEASURED,
        )

        with pytest.raises(ValueError, match="three distinct"):
            rho_fit(curve)


class TestTasks:
    def test_linear_optimum(self) -> None:
        task = make_alignment_task(TaskKind.LINEAR, 5, 0)

        np.testing.assert_allclose(task.optimum, 10.0 * task.gamma)
        assert np.all(np.abs(task.gamma) <= 1.0)

    def test_tasks_nest_across_n(self) -> None:
        small = make_alignment_task(TaskKind.SINE, 3, 4)
        large = make_alignment_task(TaskKind.SINE, 6, 4)

        np.testing.assert_array_equal(small.gamma, large.gamma[:3])

    def test_noisy_landscapes_share_optimum(self) -> None:
        task = make_alignment_task(TaskKind.SINE_NOISY, 4, 1)

        assert len(task.landscapes) == 4
        assert [s.x_star for s in task.landscapes] == pytest.approx(
            list(task.optimum)
        )

    def test_quadratic_gradients(self) -> None:
        task = make_alignment_task(TaskKind.LINEAR, 2, 0)

        grads = task_gradients(task, np.zeros(2))

        np.testing.assert_allclose(grads, -2.0 * task.optimum)


class TestMeasureAlignment:
    def test_single_example_is_aligned(self) -> None:
        for seed in range(4):
            task = make_alignment_task(TaskKind.LINEAR, 1, seed)

            result = measure_alignment(
                task, default_alignment_net(), learning_rate=1e-4, seed=seed
            )

            assert result.fraction == 1.0
            assert result.excluded == 0

    def test_reproducible(self) -> None:
        task = make_alignment_task(TaskKind.SINE_NOISY, 16, 2)
        spec = default_alignment_net()

        first = measure_alignment(task, spec, learning_rate=1e-4, seed=2)
        second = measure_alignment(task, spec, learning_rate=1e-4, seed=2)

        assert first == second

    def test_zero_gradient_excluded(self) -> None:
        spec = default_alignment_net()
        gamma = np.array([0.3, -0.4])
        params = net_init(spec, keyed_rng(5, 2, 0))
        outputs = net_apply(params, gamma[:, None])[:, 0]
        task = AlignmentTask(
            kind=TaskKind.LINEAR,
            gamma=gamma,
            optimum=np.array([outputs[0], outputs[1] + 1.0]),
        )

        result = measure_alignment(task, spec, learning_rate=1e-4, seed=5)

        assert result.excluded == 1
        assert result.active == 1
        assert result.fraction == 1.0

    def test_vote_reducer(self) -> None:
        task = make_alignment_task(TaskKind.LINEAR, 8, 0)

        result = measure_alignment(
            task,
            default_alignment_net(),
            learning_rate=1e-4,
            seed=0,
            reducer=Reducer.VOTE,
        )

        assert 0.0 <= result.fraction <= 1.0
        assert result.active == 8

    def test_rejects_vector_output(self) -> None:
        task = make_alignment_task(TaskKind.LINEAR, 2, 0)
        wide = mlp(1, (32, 32), 2)

        with pytest.raises(ValueError, match="one scalar output"):
            measure_alignment(task, wide, learning_rate=1e-4, seed=0)

    def test_curve(self) -> None:
        curve = measure_curve(TaskKind.SINE, (1, 2, 4), (0, 1))

        assert curve.provenance == Provenance.MEASURED
        assert curve.rho[0] == 1.0
        assert np.all((curve.rho >= 0.0) & (curve.rho <= 1.0))

    @pytest.mark.slow
    def test_sweep(self) -> None:
        rows, fit = alignment_sweep(TaskKind.LINEAR, range(1, 17), (0, 1, 2, 3))

        assert [row.n for row in rows] == list(range(1, 17))
        assert rows[0].rho_measured == 1.0
        assert rows[0].rho_predicted == 1.0
        assert fit.params.plasticity > 0

    @pytest.mark.slow
    def test_fitted_recursion_tracks_linear_task(self) -> None:
        rows, fit = alignment_sweep(TaskKind.LINEAR, range(1, 65), range(8))

        deviation = max(abs(row.rho_measured - row.rho_predicted) for row in rows)

        assert deviation < 0.1, fit

    def test_sweep_with_given_params(self) -> None:
        params = AlignmentModelParams(12.9, 6.4)

        rows, fit = alignment_sweep(TaskKind.LINEAR, (1, 2, 3), (0,), params=params)

        assert fit.params == params
        assert math.isnan(fit.residual)
        assert rows[1].rho_predicted == pytest.approx(
            rho_predict(params, 3).rho[1]
        )

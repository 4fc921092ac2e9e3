from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from jpo_bench import autodiff as ad
from jpo_bench.autodiff import ShapeError, Tape
from jpo_bench.config import load_config
from jpo_bench.methods import (
    AdjointConfig,
    JpoConfig,
    MethodResult,
    MethodTag,
    SupervisedConfig,
    bfgs_solve,
    boundary_loss,
    default_net_spec,
    history_frame,
    jpo_gradient,
    jpo_train,
    neural_adjoint_solve,
    refine,
    select_learning_rate,
    solve,
    supervised_train,
)
from jpo_bench.networks import mlp, net_forward, net_init
from jpo_bench.optimizers import ClipTarget, OptimizerConfig, OptimizerKind
from jpo_bench.problems import ArmSimulator, Family, ProblemSet
from jpo_bench.rng import keyed_rng


ARM_CONFIG = Path(__file__).parents[2] / "configs" / "arm.conf"


def _jpo(iterations: int = 20, **kwargs: object) -> JpoConfig:
    return JpoConfig(
        iterations=iterations,
        optimizer=OptimizerConfig(kind=OptimizerKind.ADAM, step_size=1e-2),
        **kwargs,
    )


@pytest.fixture(scope="module")
def jpo_result(arm_problems: ProblemSet) -> MethodResult:
    return jpo_train(arm_problems, default_net_spec(Family.ARM), _jpo(), seed=0)


class TestBoundaryLoss:
    def test_centre_is_free(self) -> None:
        tape = Tape()
        xi = tape.variable([[0.5, 0.0]])

        loss = boundary_loss(xi, np.array([0.0, -1.0]), np.array([1.0, 1.0]), 64.0)

        assert loss.data[0] == pytest.approx(0.0, abs=1e-12)

    def test_face(self) -> None:
        tape = Tape()
        xi = tape.variable([[1.0, 0.0]])

        loss = boundary_loss(xi, np.array([0.0, -1.0]), np.array([1.0, 1.0]), 64.0)

        assert loss.data[0] == pytest.approx(math.log(2.0) / 64.0, rel=1e-9)

    def test_pushes_back_inside(self) -> None:
        tape = Tape()
        xi = tape.variable([[1.5, -1.5]])

        loss = boundary_loss(xi, np.array([0.0, -1.0]), np.array([1.0, 1.0]), 64.0)
        grad = ad.backward(tape, ad.reduce_sum(loss)).of(xi)

        assert grad[0, 0] > 0
        assert grad[0, 1] < 0


class TestNetSpecs:
    @pytest.mark.parametrize(
        ("family", "outputs"),
        [
            (Family.WAVEPACKET, 1),
            (Family.BILLIARDS, 2),
            (Family.KS, 2),
            (Family.ARM, 4),
        ],
    )
    def test_outputs_match_solution(self, family: Family, outputs: int) -> None:
        assert default_net_spec(family).outputs == outputs

    def test_rejects_mismatched_network(self, arm_problems: ProblemSet) -> None:
        with pytest.raises(ShapeError, match="have 4"):
            jpo_train(arm_problems, mlp(2, (4,), 3), _jpo(1), seed=0)


class TestJpoGradient:
    @pytest.mark.parametrize(
        "target", [ClipTarget.SOLUTION, ClipTarget.PARAMETERS]
    )
    def test_single_example_matches_composed_loss(
        self, arm_problems: ProblemSet, target: ClipTarget
    ) -> None:
        problems = arm_problems.subset([0])
        sim = ArmSimulator()
        params = net_init(default_net_spec(Family.ARM), keyed_rng(0))
        inputs = sim.network_inputs(problems.conditioning, problems.targets)
        config = JpoConfig(optimizer=OptimizerConfig(clip_target=target))

        _, _, grad = jpo_gradient(sim, params, inputs, problems, config)

        tape = Tape()
        theta = tape.variable(params.flat)
        x = sim.solution_head(net_forward(params, theta, inputs))
        loss = ad.reduce_sum(sim.losses(x, problems))
        expected = ad.backward(tape, loss).of(theta)
        np.testing.assert_allclose(grad, expected, rtol=1e-9, atol=1e-14)

    def test_estimates_and_losses(self, arm_problems: ProblemSet) -> None:
        sim = ArmSimulator()
        params = net_init(default_net_spec(Family.ARM), keyed_rng(1))
        inputs = sim.network_inputs(arm_problems.conditioning, arm_problems.targets)

        estimates, evaluation, grad = jpo_gradient(
            sim, params, inputs, arm_problems, JpoConfig()
        )

        assert estimates.shape == (4, 4)
        np.testing.assert_allclose(
            evaluation.losses, sim.loss_values(estimates, arm_problems)
        )
        assert grad.shape == params.flat.shape


class TestJpoTrain:
    def test_history(self, jpo_result: MethodResult) -> None:
        assert jpo_result.method == MethodTag.JPO
        assert [b.iteration for b in jpo_result.history] == list(range(21))
        assert jpo_result.history_losses.shape == (21, 4)
        assert jpo_result.params is not None

    def test_best_not_worse_than_final(self, jpo_result: MethodResult) -> None:
        assert np.all(jpo_result.best_losses <= jpo_result.final_losses)
        assert np.all(
            jpo_result.best_losses == np.min(jpo_result.history_losses, axis=0)
        )

    def test_reproducible(
        self, arm_problems: ProblemSet, jpo_result: MethodResult
    ) -> None:
        again = jpo_train(arm_problems, default_net_spec(Family.ARM), _jpo(), seed=0)

        np.testing.assert_array_equal(again.history_losses, jpo_result.history_losses)

    def test_hidden_truth_not_needed(self, arm_problems: ProblemSet) -> None:
        hidden = arm_problems.without_ground_truth()

        result = jpo_train(hidden, default_net_spec(Family.ARM), _jpo(2), seed=0)

        assert len(result.history) == 3

    def test_plateau_stop(self, arm_problems: ProblemSet) -> None:
        config = _jpo(
            100, stop_on_plateau=True, plateau_window=1, plateau_tolerance=1e9
        )

        result = jpo_train(arm_problems, default_net_spec(Family.ARM), config, seed=0)

        assert len(result.history) == 2

    def test_frame(self, jpo_result: MethodResult) -> None:
        frame = history_frame(jpo_result)

        assert list(frame.columns) == [
            "example-id",
            "iteration",
            "loss",
            "x0",
            "x1",
            "x2",
            "x3",
        ]
        assert len(frame) == 21 * 4


class TestSelectLearningRate:
    @staticmethod
    def _result(before: float, after: float) -> MethodResult:
        losses = np.array([[before], [after]])
        return MethodResult(
            method=MethodTag.JPO,
            family=Family.ARM,
            history=(),
            history_losses=losses,
            best=np.zeros((1, 4)),
            best_losses=losses.min(axis=0),
        )

    def test_first_improving_rate(self) -> None:
        tried: list[float] = []

        def trial(rate: float) -> MethodResult:
            tried.append(rate)
            return self._result(1.0, 0.5 if rate < 5e-3 else 2.0)

        assert select_learning_rate(trial) == pytest.approx(1e-3)
        assert tried == pytest.approx([1e-2, 1e-3])

    def test_falls_back_to_smallest(self) -> None:
        rate = select_learning_rate(lambda _: self._result(1.0, 1.0), reductions=2)

        assert rate == pytest.approx(1e-4)


class TestSupervised:
    def test_logged_iterations(self, arm_problems: ProblemSet) -> None:
        config = SupervisedConfig(
            iterations=5, synthetic_size=64, batch_size=16, log_every=2
        )

        result = supervised_train(
            arm_problems, default_net_spec(Family.ARM), config, seed=0
        )

        assert result.method == MethodTag.SUPERVISED
        assert [b.iteration for b in result.history] == [0, 2, 4, 5]
        assert np.all(np.isfinite(result.final_losses))

    def test_refine_starts_from_final(self, arm_problems: ProblemSet) -> None:
        config = SupervisedConfig(iterations=2, synthetic_size=32, batch_size=8)
        result = supervised_train(
            arm_problems, default_net_spec(Family.ARM), config, seed=1
        )

        refined = refine(result, arm_problems, OptimizerConfig(max_iterations=10))

        assert refined.refinement is not None
        np.testing.assert_array_equal(refined.refinement.start, result.final)


class TestNeuralAdjoint:
    def test_rejects_field_families(self, wavepacket_problems: ProblemSet) -> None:
        with pytest.raises(ValueError, match="scalar solution space"):
            neural_adjoint_solve(wavepacket_problems, AdjointConfig(), seed=0)

    def test_arm(self, arm_problems: ProblemSet) -> None:
        config = AdjointConfig(
            hidden=(8,),
            surrogate_iterations=5,
            synthetic_size=64,
            batch_size=16,
            iterations=6,
            log_every=3,
            residual_threshold=1e-6,
        )

        result = neural_adjoint_solve(arm_problems, config, seed=0)

        assert result.method == MethodTag.NEURAL_ADJOINT
        assert [b.iteration for b in result.history] == [0, 3, 6]
        np.testing.assert_array_equal(result.history[0].estimates, 0.0)
        assert any("surrogate residual" in w for w in result.warnings)


class TestClassical:
    def test_bfgs_never_worsens(self, arm_problems: ProblemSet) -> None:
        result = bfgs_solve(arm_problems, OptimizerConfig(max_iterations=30))

        assert result.method == MethodTag.BFGS
        assert np.all(np.diff(result.history_losses, axis=0) <= 0)
        np.testing.assert_array_equal(result.best, result.final)

    def test_refine_never_worsens(
        self, arm_problems: ProblemSet, jpo_result: MethodResult
    ) -> None:
        refined = refine(jpo_result, arm_problems, OptimizerConfig(max_iterations=20))

        assert refined.refinement is not None
        np.testing.assert_array_equal(refined.refinement.start, jpo_result.best)
        assert np.all(refined.refined_losses <= refined.refinement.start_losses)
        np.testing.assert_array_equal(refined.final, jpo_result.final)

    def test_solve_dispatch(self, arm_problems: ProblemSet) -> None:
        gd = OptimizerConfig(kind=OptimizerKind.GD, step_size=1e-2, max_iterations=5)

        result = solve("gd", arm_problems, seed=0, gd=gd)

        assert result.method == MethodTag.GD
        assert result.refinement is None
        assert len(result.history) <= 6

    @pytest.mark.parametrize("method", ["bfgs", "gd", "jpo"])
    def test_arm_reaches_exact_fit(self, arm_problems: ProblemSet, method: str) -> None:
        config = load_config(ARM_CONFIG)

        result = solve(
            method,
            arm_problems.without_ground_truth(),
            seed=0,
            jpo=_jpo(),
            bfgs=config.bfgs,
            gd=config.gd,
            refinement=config.refinement if method == "jpo" else None,
        )

        assert np.all(result.refined_losses < 1e-10)

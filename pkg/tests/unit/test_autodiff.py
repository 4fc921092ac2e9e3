from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from jpo_bench import autodiff as ad
from jpo_bench.autodiff import (
    DiffValue,
    ShapeError,
    Tape,
    TapeError,
    backward,
    check_gradient,
)


class TestBackward:
    def test_square(self) -> None:
        tape = Tape()
        x = tape.variable(3.0)

        grads = backward(tape, x * x)

        assert grads.of(x) == pytest.approx(6.0)

    def test_sin_at_zero(self) -> None:
        tape = Tape()
        x = tape.variable(0.0)

        grads = backward(tape, ad.sin(x))

        assert grads.of(x) == pytest.approx(1.0)

    def test_shared_subexpression_accumulates(self) -> None:
        tape = Tape()
        x = tape.variable(2.0)
        y = x * x

        grads = backward(tape, y + y * 3.0)

        assert grads.of(x) == pytest.approx(16.0)

    def test_unreachable_input_gets_zero(self) -> None:
        tape = Tape()
        x = tape.variable([1.0, 2.0])
        unused = tape.variable([[5.0, 6.0]])

        grads = backward(tape, ad.reduce_sum(x))

        np.testing.assert_array_equal(grads.of(unused), np.zeros((1, 2)))
        np.testing.assert_array_equal(grads.of(x), [1.0, 1.0])

    def test_non_scalar_output_rejected(self) -> None:
        tape = Tape()
        x = tape.variable([1.0, 2.0])

        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, x * 2.0)

    def test_broadcast_gradient_sums(self) -> None:
        tape = Tape()
        x = tape.variable(np.ones((3, 2)))
        bias = tape.variable([1.0, -1.0])

        grads = backward(tape, ad.reduce_sum(x * bias))

        np.testing.assert_allclose(grads.of(bias), [3.0, 3.0])
        np.testing.assert_allclose(grads.of(x), [[1.0, -1.0]] * 3)

    def test_foreign_value_rejected(self) -> None:
        first = Tape()
        second = Tape()
        x = first.variable(1.0)

        with pytest.raises(TapeError):
            backward(second, x)

    def test_operands_from_two_tapes_rejected(self) -> None:
        x = Tape().variable(1.0)
        y = Tape().variable(2.0)

        with pytest.raises(TapeError):
            _ = x + y

    def test_broadcast_mismatch_rejected(self) -> None:
        tape = Tape()

        with pytest.raises(ShapeError):
            _ = tape.variable(np.ones(3)) + tape.variable(np.ones(4))

    def test_tape_grad_after_backward(self) -> None:
        tape = Tape()
        x = tape.variable([1.0, 2.0])
        hidden = x * x
        backward(tape, ad.reduce_sum(hidden))

        np.testing.assert_allclose(tape.grad(hidden), [1.0, 1.0])


class TestCheckGradient:
    @pytest.mark.parametrize(
        ("fn", "point"),
        [
            (lambda x: ad.reduce_sum(ad.tanh(x) * ad.exp(x)), [0.3, -0.7]),
            (lambda x: ad.reduce_sum(ad.log(x) / x), [1.5, 2.5]),
            (lambda x: ad.reduce_sum(ad.softplus(x, 8.0)), [-0.2, 0.4]),
            (lambda x: ad.reduce_sum(ad.sqrt(x) ** 3.0), [0.5, 4.0]),
            (lambda x: ad.norm2(ad.cos(x) - 0.5), [0.1, 1.2, -2.0]),
            (lambda x: ad.mean(ad.maximum(x, 0.3)), [0.1, 1.2, -2.0]),
        ],
    )
    def test_elementwise(
        self, fn: Callable[[DiffValue], DiffValue], point: list[float]
    ) -> None:
        assert check_gradient(fn, point) < 1e-5

    def test_matmul(self) -> None:
        weights = np.random.default_rng(0).standard_normal((3, 2))

        error = check_gradient(
            lambda x: ad.norm2(ad.matmul(x, weights)),
            np.random.default_rng(1).standard_normal((4, 3)),
        )

        assert error < 1e-5

    def test_conv_and_pool(self) -> None:
        kernel = np.random.default_rng(0).standard_normal((2, 1, 3))

        error = check_gradient(
            lambda x: ad.reduce_sum(ad.tanh(ad.maxpool(ad.conv1d(x, kernel)))),
            np.random.default_rng(1).standard_normal((2, 1, 8)),
        )

        assert error < 1e-5

    def test_fourier_pair(self) -> None:
        phase = np.random.default_rng(2).standard_normal((5, 2))

        error = check_gradient(
            lambda x: ad.norm2(ad.irfft(ad.rfft(x) * phase)),
            np.random.default_rng(3).standard_normal(8),
        )

        assert error < 1e-5

    def test_slice_concat_reshape(self) -> None:
        error = check_gradient(
            lambda x: ad.norm2(
                ad.reshape(ad.concat([x[:, :1] * 2.0, ad.sin(x[:, 1:])]), (6,))
            ),
            [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]],
        )

        assert error < 1e-5


class TestFourier:
    def test_round_trip(self) -> None:
        tape = Tape()
        signal = np.random.default_rng(0).standard_normal((3, 16))

        restored = ad.irfft(ad.rfft(tape.variable(signal)))

        np.testing.assert_allclose(restored.data, signal, atol=1e-12)

    def test_packed_layout(self) -> None:
        tape = Tape()
        signal = np.random.default_rng(0).standard_normal(8)

        spectrum = ad.rfft(tape.variable(signal))

        expected = np.fft.rfft(signal)
        assert spectrum.shape == (5, 2)
        np.testing.assert_allclose(spectrum.data[:, 0], expected.real)
        np.testing.assert_allclose(spectrum.data[:, 1], expected.imag)

    def test_non_power_of_two_rejected(self) -> None:
        tape = Tape()

        with pytest.raises(ShapeError, match="power of two"):
            ad.rfft(tape.variable(np.ones(12)))


class TestStructuralErrors:
    def test_odd_pool_rejected(self) -> None:
        with pytest.raises(ShapeError):
            ad.maxpool(Tape().variable(np.ones((1, 1, 5))))

    def test_conv_channel_mismatch_rejected(self) -> None:
        tape = Tape()

        with pytest.raises(ShapeError):
            ad.conv1d(tape.variable(np.ones((1, 2, 8))), np.ones((4, 3, 3)))

    def test_bad_reshape_rejected(self) -> None:
        with pytest.raises(ShapeError):
            ad.reshape(Tape().variable(np.ones(6)), (4,))


class TestLinearMaps:
    def _gradient(
        self, fn: Callable[[DiffValue], DiffValue], point: np.ndarray
    ) -> np.ndarray:
        tape = Tape()
        x = tape.variable(point)
        return backward(tape, fn(x)).of(x)

    def test_backward_is_linear_in_the_output(self) -> None:
        point = np.random.default_rng(4).standard_normal(6)

        def first(x: DiffValue) -> DiffValue:
            return ad.norm2(ad.sin(x))

        def second(x: DiffValue) -> DiffValue:
            return ad.reduce_sum(ad.tanh(x) * x)

        combined = self._gradient(lambda x: 2.5 * first(x) - 0.5 * second(x), point)

        np.testing.assert_allclose(
            combined,
            2.5 * self._gradient(first, point) - 0.5 * self._gradient(second, point),
            rtol=1e-12,
            atol=1e-14,
        )

    def test_rfft_gradient_is_adjoint(self) -> None:
        rng = np.random.default_rng(5)
        signal, weights = rng.standard_normal(16), rng.standard_normal((9, 2))
        tape = Tape()
        x = tape.variable(signal)
        spectrum = ad.rfft(x)

        pulled = backward(tape, ad.reduce_sum(spectrum * weights)).of(x)

        assert float(np.sum(spectrum.data * weights)) == pytest.approx(
            float(signal @ pulled), rel=1e-12
        )

    def test_irfft_gradient_is_adjoint(self) -> None:
        rng = np.random.default_rng(6)
        packed, weights = rng.standard_normal((9, 2)), rng.standard_normal(16)
        tape = Tape()
        x = tape.variable(packed)
        signal = ad.irfft(x)

        pulled = backward(tape, ad.reduce_sum(signal * weights)).of(x)

        assert float(signal.data @ weights) == pytest.approx(
            float(np.sum(packed * pulled)), rel=1e-12
        )
        assert pulled[0, 1] == 0.0
        assert pulled[-1, 1] == 0.0


def test_tape_is_deterministic() -> None:
    rng = np.random.default_rng(7)
    point, weights = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))

    def run() -> tuple[int, np.ndarray]:
        tape = Tape()
        x = tape.variable(point)
        loss = ad.norm2(ad.tanh(ad.matmul(x, weights)) + ad.sin(x[:, :2]))
        return len(tape), backward(tape, loss).of(x)

    first, second = run(), run()

    assert first[0] == second[0]
    np.testing.assert_array_equal(first[1], second[1])

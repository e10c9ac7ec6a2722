"""
Tests for the tensor core: FFT, activations, autodiff, randomness and gradient checks.
"""

import math

import numpy as np
import pytest

from code_ssm.exceptions import InvalidInputError, NonFiniteError, ShapeError
from code_ssm.numerics import (
    IGNORE_INDEX,
    Rng,
    Tensor,
    cross_entropy,
    default_dtype,
    dropout,
    fft,
    finite_diff_check,
    flip_sequences,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    make_op,
    masked_mean,
    mul,
    next_power_of_two,
    no_grad,
    precision,
    real_dft,
    reduce_sum,
    softmax,
    tensor,
    track_allocations,
)


def _direct_dft(values):
    n = len(values)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ values


class TestFFT:
    """Forward/inverse transform and its algebraic properties."""

    def test_impulse_has_flat_spectrum(self):
        """Test impulse has flat spectrum."""
        np.testing.assert_allclose(fft(np.array([1, 0, 0, 0])), [1, 1, 1, 1], atol=1e-12)

    def test_unit_delay(self):
        """Test unit delay."""
        np.testing.assert_allclose(fft(np.array([0, 1, 0, 0])), [1, -1j, -1, 1j], atol=1e-12)

    def test_matches_direct_dft_and_round_trips(self, rng):
        """Test matches direct dft and round trips."""
        v = rng.normal(64).astype(np.float64) + 1j * rng.normal(64).astype(np.float64)
        np.testing.assert_allclose(fft(v), _direct_dft(v), atol=1e-9)
        np.testing.assert_allclose(fft(fft(v), inverse=True), v, atol=1e-9)

    def test_rejects_non_power_of_two(self):
        """Test rejects non power of two."""
        with pytest.raises(ShapeError):
            fft(np.ones(6))

    def test_linearity(self, rng):
        """Test FFT linearity."""
        u = rng.generator.standard_normal(32) + 1j * rng.generator.standard_normal(32)
        v = rng.generator.standard_normal(32) + 1j * rng.generator.standard_normal(32)
        a, b = 2.5, -0.75 + 0.5j
        np.testing.assert_allclose(fft(a * u + b * v), a * fft(u) + b * fft(v), atol=1e-9)

    def test_parseval(self, rng):
        """Test FFT energy preservation."""
        v = rng.generator.standard_normal(128) + 1j * rng.generator.standard_normal(128)
        assert np.sum(np.abs(v) ** 2) == pytest.approx(np.sum(np.abs(fft(v)) ** 2) / 128, abs=1e-9)

    def test_real_input_is_conjugate_symmetric(self, rng):
        """Test real input is conjugate symmetric."""
        x = fft(rng.generator.standard_normal(16))
        for k in range(1, 16):
            assert x[k] == pytest.approx(np.conj(x[16 - k]), abs=1e-9)

    def test_next_power_of_two(self):
        """Test next power of two."""
        assert [next_power_of_two(n) for n in (1, 2, 3, 64, 65)] == [1, 2, 4, 64, 128]


class TestActivations:
    """GELU, LayerNorm, softmax."""

    def test_gelu_values(self):
        """Test gelu values."""
        out = gelu(tensor([0.0, 10.0, -10.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(10.0, abs=1e-6)
        assert out[2] == pytest.approx(0.0, abs=1e-6)

    def test_gelu_is_exact_cdf_form(self):
        """Test gelu is exact cdf form."""
        x = 0.7
        expected = x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
        assert float(gelu(tensor([x])).data[0]) == pytest.approx(expected, rel=1e-6)

    def test_layer_norm_constant_row(self):
        """Test layer norm constant row."""
        out = layer_norm(tensor([[1.0, 1.0, 1.0, 1.0]]), tensor(np.ones(4)), tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_layer_norm_standardised_row(self):
        """Test layer norm standardised row."""
        out = layer_norm(tensor([[1.0, -1.0]]), tensor(np.ones(2)), tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_layer_norm_rows_have_zero_mean(self, rng):
        """Test layer norm rows have zero mean."""
        out = layer_norm(tensor(rng.normal((4, 8), std=3.0) + 5.0), tensor(np.ones(8)), tensor(np.zeros(8)))
        assert np.all(np.abs(out.data.mean(axis=1)) < 1e-6)

    def test_layer_norm_shape_mismatch(self):
        """Test layer norm shape mismatch."""
        with pytest.raises(ShapeError):
            layer_norm(tensor(np.ones((2, 4))), tensor(np.ones(3)), tensor(np.zeros(3)))

    def test_softmax_rows_sum_to_one(self, rng):
        """Test softmax rows sum to one."""
        out = softmax(tensor(rng.normal((3, 5))), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


class TestAutodiff:
    """Backward passes through the primitive ops."""

    def test_linear_gradients(self):
        """Test linear gradients."""
        x = tensor([[1.0, 2.0]], requires_grad=True)
        w = tensor([[1.0, 0.0, 2.0], [0.0, 1.0, 3.0]], requires_grad=True)
        b = tensor([0.5, 0.5, 0.5], requires_grad=True)
        reduce_sum(linear(x, w, b)).backward()
        np.testing.assert_allclose(x.grad, [[3.0, 4.0]])
        np.testing.assert_allclose(w.grad, [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        np.testing.assert_allclose(b.grad, [1.0, 1.0, 1.0])

    def test_shared_input_accumulates(self):
        """Test shared input accumulates."""
        x = tensor([3.0], requires_grad=True)
        reduce_sum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_no_grad_records_nothing(self):
        """Test no grad records nothing."""
        x = tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad

    def test_backward_needs_seed_for_non_scalar(self):
        """Test backward needs seed for non scalar."""
        with pytest.raises(ShapeError):
            mul(tensor([1.0, 2.0], requires_grad=True), 2.0).backward()

    def test_gradients_of_composite_ops(self):
        """Test gradients of composite ops."""
        with precision(np.float64):
            rng = Rng(3)
            x = tensor(rng.normal((2, 4, 3)), requires_grad=True)
            gamma = tensor(1.0 + rng.normal(3, std=0.1), requires_grad=True)
            beta = tensor(rng.normal(3, std=0.1), requires_grad=True)
            valid = np.array([[True, True, True, False], [True, True, True, True]])

            def loss():
                h = gelu(layer_norm(flip_sequences(x, np.array([3, 4])), gamma, beta))
                pooled = l2_normalize(masked_mean(real_dft(h, axis=1), valid))
                return reduce_sum(mul(softmax(pooled), pooled))

            report = finite_diff_check(loss, {"x": x, "gamma": gamma, "beta": beta})
        assert report.max_rel_error < 1e-6


class TestCrossEntropy:
    """Masked cross-entropy and accuracy."""

    def test_uniform_logits_give_log_vocab(self):
        """Test uniform logits give log vocab."""
        loss, _ = cross_entropy(tensor(np.zeros((4, 11))), np.array([0, 3, 5, 10]))
        assert float(loss.data) == pytest.approx(math.log(11), rel=1e-6)

    def test_confident_correct_logits(self):
        """Test confident correct logits."""
        logits = np.full((3, 5), -50.0)
        labels = np.array([1, 4, 2])
        logits[np.arange(3), labels] = 50.0
        loss, accuracy = cross_entropy(tensor(logits), labels)
        assert accuracy == 1.0
        assert float(loss.data) < 1e-6

    def test_all_ignored(self):
        """Test all ignored."""
        loss, accuracy = cross_entropy(tensor(np.ones((2, 3, 4))), np.full((2, 3), IGNORE_INDEX))
        assert float(loss.data) == 0.0
        assert accuracy is None

    def test_matches_naive_summation(self, rng):
        """Test matches naive summation."""
        logits = rng.normal((6, 7), std=2.0).astype(np.float64)
        labels = rng.integers(0, 7, 6)
        labels[[1, 4]] = IGNORE_INDEX
        loss, accuracy = cross_entropy(tensor(logits), labels)

        total, correct, count = 0.0, 0, 0
        for row, label in zip(logits, labels):
            if label == IGNORE_INDEX:
                continue
            total += -(row[label] - math.log(sum(math.exp(v) for v in row)))
            correct += int(np.argmax(row) == label)
            count += 1
        assert float(loss.data) == pytest.approx(total / count, abs=1e-6)
        assert accuracy == pytest.approx(correct / count)


class TestMiscOps:
    """Masking, pooling, dropout, flips."""

    def test_dropout_identity_at_inference(self, rng):
        """Test dropout identity at inference."""
        x = tensor(np.ones((2, 3)))
        assert dropout(x, 0.5, rng, training=False) is x

    def test_dropout_preserves_expectation(self):
        """Test dropout preserves expectation."""
        out = dropout(tensor(np.ones(20000)), 0.25, Rng(0), training=True).data
        assert set(np.unique(out)) <= {0.0, np.float32(1.0 / 0.75)}
        assert out.mean() == pytest.approx(1.0, abs=0.03)

    def test_flip_respects_lengths(self):
        """Test flip respects lengths."""
        x = tensor(np.arange(8, dtype=np.float32).reshape(2, 4, 1))
        out = flip_sequences(x, np.array([2, 4])).data[..., 0]
        np.testing.assert_array_equal(out, [[1, 0, 2, 3], [7, 6, 5, 4]])

    def test_masked_mean_needs_a_valid_position(self):
        """Test masked mean needs a valid position."""
        with pytest.raises(InvalidInputError):
            masked_mean(tensor(np.ones((1, 2, 3))), np.zeros((1, 2), dtype=bool))

    def test_l2_normalize_rejects_zero(self):
        """Test l2 normalize rejects zero."""
        with pytest.raises(InvalidInputError):
            l2_normalize(tensor(np.zeros((1, 3))))


class TestRng:
    """Seeded Philox streams."""

    def test_same_seed_same_stream(self):
        """Test same seed same stream."""
        np.testing.assert_array_equal(Rng(7).random(10**6), Rng(7).random(10**6))

    def test_different_seeds_differ(self):
        """Test different seeds differ."""
        assert not np.array_equal(Rng(7).random(16), Rng(8).random(16))

    def test_state_round_trip(self):
        """Test state round trip."""
        rng = Rng(11)
        rng.random(5)
        restored = Rng.from_state(11, rng.state())
        np.testing.assert_array_equal(rng.random(100), restored.random(100))

    def test_truncated_normal_bounds(self):
        """Test truncated normal bounds."""
        samples = Rng(2).truncated_normal((1000,), std=0.02)
        assert np.all(np.abs(samples) <= 0.04 + 1e-7)
        assert samples.dtype == np.float32


class TestPrecisionAndTracking:
    """Float mode switching and allocation counters."""

    def test_precision_context(self):
        """Test precision context."""
        assert default_dtype() is np.float32
        with precision(np.float64):
            assert tensor([1.0]).dtype == np.float64
        assert tensor([1.0]).dtype == np.float32

    def test_tracker_counts_live_and_peak(self):
        """Test tracker counts live and peak."""
        with track_allocations() as tracker:
            a = Tensor(np.zeros(1000, dtype=np.float32))
            b = Tensor(np.zeros(500, dtype=np.float32))
            del a
            live_after_release = tracker.live_bytes
            del b
        assert tracker.peak_bytes == 6000
        assert live_after_release == 2000
        assert tracker.allocations == 2


class TestFiniteDiffCheck:
    """The central-difference oracle itself."""

    def test_quadratic(self):
        """Test gradient check on a quadratic."""
        with precision(np.float64):
            w = tensor([3.0], requires_grad=True)
        report = finite_diff_check(lambda: reduce_sum(mul(w, w)), {"w": w})
        assert report.max_rel_error < 1e-8
        assert report.checked_coordinates == 1

    def test_constant_loss(self):
        """Test constant loss."""
        with precision(np.float64):
            w = tensor([3.0], requires_grad=True)
        report = finite_diff_check(lambda: tensor(5.0), {"w": w})
        assert report.max_rel_error == 0.0

    def test_non_finite_loss_names_parameter(self):
        """Test non finite loss names parameter."""
        with precision(np.float64):
            w = tensor([3.0], requires_grad=True)

        def loss():
            if w.data[0] > 3.0:
                return tensor(np.inf)
            return reduce_sum(mul(w, w))

        with pytest.raises(NonFiniteError) as info:
            finite_diff_check(loss, {"w": w})
        assert info.value.tensor_name == "w"

    def test_detects_wrong_gradient(self):
        """Test detects wrong gradient."""
        with precision(np.float64):
            w = tensor([2.0], requires_grad=True)

        # forward computes w^2 but the backward pass reports 3w
        def loss():
            return make_op(np.asarray(w.data[0] ** 2), (w,), lambda g: (np.array([3.0 * float(g)]),))

        assert finite_diff_check(loss, {"w": w}).max_rel_error > 0.1

    def test_subsampling_limits_coordinates(self):
        """Test subsampling limits coordinates."""
        with precision(np.float64):
            w = tensor(np.ones(50), requires_grad=True)
        report = finite_diff_check(lambda: reduce_sum(mul(w, w)), {"w": w}, max_coords_per_param=5,
                                   rng=Rng(0))
        assert report.checked_coordinates == 5
        assert report.max_rel_error < 1e-8

"""
Tests for diagonal SSM kernels, FFT convolution, the recurrence oracle and spectra.
"""

import csv
import math

import numpy as np
import pytest

from code_ssm.exceptions import ShapeError, SingularityError
from code_ssm.numerics import Rng, finite_diff_check, mul, precision, reduce_sum, tensor
from code_ssm.ssm import (
    SPECTRUM_COLUMNS,
    Discretization,
    SSMKernelSpec,
    discretize,
    kernel_spectrum,
    materialize_kernel,
    spectrum,
    ssm_conv,
    ssm_recurrence,
    write_spectrum_csv,
)


def random_spec(rng: Rng, n: int, discretization=Discretization.ZOH) -> SSMKernelSpec:
    g = rng.generator
    lam = -g.uniform(0.05, 1.5, n) + 1j * g.uniform(-5.0, 5.0, n)
    b = g.standard_normal(n) + 1j * g.standard_normal(n)
    c = g.standard_normal(n) + 1j * g.standard_normal(n)
    delta = float(np.exp(g.uniform(math.log(1e-3), math.log(0.5))))
    return SSMKernelSpec.from_complex(lam, b, c, delta, discretization=discretization)


def direct_convolution(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u, dtype=np.float64)
    for t in range(u.shape[0]):
        for lag in range(t + 1):
            out[t] += kernel[lag] * u[t - lag]
    return out


class TestSpec:
    """Parameterisation and initialisation."""

    def test_s4d_lin_initialisation(self):
        """Test s4d lin initialisation."""
        spec = SSMKernelSpec.initialize(8, Rng(0))
        np.testing.assert_allclose(spec.lam.real, -0.5, atol=1e-6)
        np.testing.assert_allclose(spec.lam.imag, math.pi * np.arange(8), rtol=1e-6)
        np.testing.assert_allclose(spec.b, 1.0)
        assert 1e-3 <= spec.delta <= 1e-1
        assert spec.state_size == 8

    def test_same_seed_same_spec(self):
        """Test same seed same spec."""
        a, b = SSMKernelSpec.initialize(4, Rng(5)), SSMKernelSpec.initialize(4, Rng(5))
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(x.data, y.data)

    def test_from_complex_rejects_unstable(self):
        """Test from complex rejects unstable."""
        with pytest.raises(ShapeError):
            SSMKernelSpec.from_complex([0.1 + 1j], [1], [1], 0.1)


class TestDiscretize:
    """Zero-order hold and bilinear rules."""

    def test_zoh_closed_form(self):
        """Test zoh closed form."""
        with precision(np.float64):
            spec = SSMKernelSpec.from_complex([-1.0], [1.0], [1.0], math.log(2.0))
        a_bar, b_bar = discretize(spec)
        assert a_bar[0] == pytest.approx(0.5, abs=1e-12)
        assert b_bar[0] == pytest.approx(0.5, abs=1e-12)

    def test_small_step_limit(self):
        """Test small step limit."""
        delta = 1e-4
        with precision(np.float64):
            spec = SSMKernelSpec.from_complex([-0.7 + 2j], [1.5 - 0.5j], [1.0], delta)
        a_bar, b_bar = discretize(spec)
        assert abs(a_bar[0] - 1.0) < 3 * delta
        assert abs(b_bar[0] - delta * (1.5 - 0.5j)) < 10 * delta ** 2

    def test_stable_eigenvalues_stay_inside_unit_circle(self, rng):
        """Test stable eigenvalues stay inside unit circle."""
        for discretization in Discretization:
            a_bar, _ = discretize(random_spec(rng, 4, discretization))
            assert np.all(np.abs(a_bar) < 1.0)

    def test_zero_eigenvalue_is_singular(self):
        """Test zero eigenvalue is singular."""
        spec = SSMKernelSpec.from_complex([-1.0], [1.0], [1.0], 0.1)
        with precision(np.float64):
            spec.lambda_log_neg_re.data = np.array([-np.inf])
            spec.lambda_im.data = np.array([0.0])
        with pytest.raises(SingularityError):
            discretize(spec)

    def test_bilinear_closed_form(self):
        """Test bilinear closed form."""
        spec = SSMKernelSpec.from_complex([-1.0], [1.0], [1.0], 0.5, discretization=Discretization.BILINEAR)
        a_bar, b_bar = discretize(spec)
        assert a_bar[0] == pytest.approx((1 - 0.25) / (1 + 0.25))
        assert b_bar[0] == pytest.approx(0.5 / (1 + 0.25))


class TestMaterializeKernel:
    """K[l] = factor * Re(sum_n C_n B_bar_n A_bar_n^l)."""

    def test_real_geometric_series(self):
        """Test real geometric series."""
        spec = SSMKernelSpec.from_complex([-1.0], [2.0], [1.0], math.log(2.0), conjugate_pairs=False)
        np.testing.assert_allclose(materialize_kernel(spec, 4).values.data, [1, 0.5, 0.25, 0.125], atol=1e-6)

    def test_zero_output_map(self):
        """Test zero output map."""
        spec = SSMKernelSpec.from_complex([-0.5 + 1j, -0.3], [1, 1], [0, 0], 0.1)
        np.testing.assert_array_equal(materialize_kernel(spec, 16).values.data, 0.0)

    def test_matches_naive_power_iteration(self):
        """Test matches naive power iteration."""
        with precision(np.float64):
            spec = random_spec(Rng(1), 6)
            kernel = materialize_kernel(spec, 64).values.data
        a_bar, b_bar = discretize(spec)
        expected = []
        power = np.ones_like(a_bar)
        for _ in range(64):
            expected.append(2.0 * np.sum(spec.c * b_bar * power).real)
            power = power * a_bar
        np.testing.assert_allclose(kernel, expected, atol=1e-10)

    def test_rejects_empty_length(self):
        """Test rejects empty length."""
        with pytest.raises(ShapeError):
            materialize_kernel(SSMKernelSpec.initialize(2, Rng(0)), 0)

    def test_geometric_decay_envelope(self, rng):
        """Test geometric decay envelope."""
        # |K[l]| <= factor * sum_n |C_n B_bar_n| * rho^l with rho = max |A_bar_n|
        for _ in range(20):
            with precision(np.float64):
                spec = random_spec(rng, 8)
                values = materialize_kernel(spec, 64).values.data
            a_bar, b_bar = discretize(spec)
            rho = np.max(np.abs(a_bar))
            bound = 2.0 * np.sum(np.abs(spec.c * b_bar)) * rho ** np.arange(64)
            assert np.all(np.abs(values) <= bound + 1e-12)
            assert np.all(np.isfinite(values))


class TestConvolution:
    """FFT convolution against time-domain and recurrence oracles."""

    def test_impulse_response(self, rng):
        """Test impulse response."""
        kernel = rng.normal(16)
        u = np.zeros((16, 1), dtype=np.float32)
        u[0, 0] = 1.0
        np.testing.assert_allclose(ssm_conv(kernel, u).data[:, 0], kernel, atol=1e-5)

    def test_identity_kernel(self, rng):
        """Test identity kernel."""
        kernel = np.zeros(16, dtype=np.float32)
        kernel[0] = 1.0
        u = rng.normal((16, 3))
        np.testing.assert_allclose(ssm_conv(kernel, u).data, u, atol=1e-5)

    def test_matches_time_domain_convolution(self, rng):
        """Test matches time domain convolution."""
        with precision(np.float64):
            kernel = rng.normal(32)
            u = rng.normal((32, 3))
            out = ssm_conv(kernel, u).data
        np.testing.assert_allclose(out, direct_convolution(kernel, u), atol=1e-6)

    def test_batched_input(self, rng):
        """Test batched input."""
        with precision(np.float64):
            kernel = rng.normal(8)
            u = rng.normal((2, 8, 3))
            out = ssm_conv(kernel, u).data
        for b in range(2):
            np.testing.assert_allclose(out[b], direct_convolution(kernel, u[b]), atol=1e-9)

    def test_length_mismatch(self, rng):
        """Test length mismatch."""
        with pytest.raises(ShapeError):
            ssm_conv(rng.normal(8), rng.normal((16, 2)))

    def test_linearity(self, rng):
        """Test convolution linearity in the input."""
        with precision(np.float64):
            kernel = rng.normal(32)
            u, v = rng.normal((32, 2)), rng.normal((32, 2))
            combined = ssm_conv(kernel, 1.5 * u - 0.25 * v).data
            separate = 1.5 * ssm_conv(kernel, u).data - 0.25 * ssm_conv(kernel, v).data
        np.testing.assert_allclose(combined, separate, atol=1e-5)

    def test_convolution_equals_recurrence(self):
        """Test convolution equals recurrence."""
        rng = Rng(2024)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 9))
            length = int(rng.integers(1, 65))
            channels = int(rng.integers(1, 5))
            with precision(np.float64):
                spec = random_spec(rng, n)
                u = rng.normal((length, channels))
                conv = ssm_conv(materialize_kernel(spec, length), u).data
            worst = max(worst, float(np.max(np.abs(conv - ssm_recurrence(spec, u)))))
        assert worst < 1e-5


class TestRecurrence:
    """The step-by-step oracle."""

    def test_zero_input(self):
        """Test zero input."""
        spec = SSMKernelSpec.initialize(4, Rng(0))
        np.testing.assert_array_equal(ssm_recurrence(spec, np.zeros((10, 2))), 0.0)

    def test_single_step(self):
        """Test single step."""
        spec = random_spec(Rng(4), 3)
        _, b_bar = discretize(spec)
        out = ssm_recurrence(spec, np.array([[2.0]]))
        assert out[0, 0] == pytest.approx(2.0 * np.sum(spec.c * b_bar).real * 2.0)


class TestGradients:
    """Analytic kernel and convolution gradients against central differences."""

    @pytest.mark.parametrize("discretization", list(Discretization))
    def test_ssm_path_gradients(self, discretization):
        """Test ssm path gradients."""
        with precision(np.float64):
            rng = Rng(9)
            spec = random_spec(rng, 4, discretization)
            u = tensor(rng.normal((2, 12, 3)), requires_grad=True)
            weights = rng.normal((2, 12, 3))

            def loss():
                return reduce_sum(mul(ssm_conv(materialize_kernel(spec, 12), u), weights))

            params = dict(spec.named_parameters())
            params["u"] = u
            report = finite_diff_check(loss, params)
        assert report.max_rel_error < 1e-4, report.worst_parameter


class TestSpectrum:
    """Transfer-function magnitude and phase."""

    def test_impulse(self):
        """Test the spectrum of a unit impulse."""
        omega, magnitude, phase = kernel_spectrum(np.array([1.0, 0.0, 0.0, 0.0]), 4)
        np.testing.assert_allclose(magnitude, 1.0, atol=1e-12)
        np.testing.assert_allclose(phase, 0.0, atol=1e-9)
        np.testing.assert_allclose(omega, 2 * np.pi * np.arange(4) / 4)

    def test_pure_delay(self):
        """Test pure delay."""
        _, magnitude, phase = kernel_spectrum(np.array([0.0, 1.0, 0.0, 0.0]), 4)
        np.testing.assert_allclose(magnitude, 1.0, atol=1e-12)
        expected = -90.0 * np.arange(4)
        np.testing.assert_allclose(np.exp(1j * np.radians(phase)), np.exp(1j * np.radians(expected)), atol=1e-9)
        assert np.all((phase > -180.0) & (phase <= 180.0))

    def test_conjugate_symmetry(self, rng):
        """Test conjugate symmetry."""
        values = rng.generator.standard_normal(10)
        _, magnitude, phase = kernel_spectrum(values, 10)
        rotation = np.exp(1j * np.radians(phase))
        for k in range(1, 10):
            assert magnitude[k] == pytest.approx(magnitude[10 - k], abs=1e-9)
            assert rotation[k] == pytest.approx(np.conj(rotation[10 - k]), abs=1e-9)

    def test_folding_matches_direct_sum(self, rng):
        """Test folding matches direct sum."""
        values = rng.generator.standard_normal(23)
        _, magnitude, _ = kernel_spectrum(values, 8)
        omega = 2 * np.pi * np.arange(8) / 8
        direct = np.array([np.sum(values * np.exp(-1j * w * np.arange(23))) for w in omega])
        np.testing.assert_allclose(magnitude, np.abs(direct), atol=1e-9)

    def test_rejects_single_frequency(self):
        """Test rejects single frequency."""
        with pytest.raises(ShapeError):
            kernel_spectrum(np.ones(4), 1)

    def test_csv_export(self, tmp_path):
        """Test csv export."""
        spec = SSMKernelSpec.initialize(4, Rng(0))
        reports = [spectrum(spec, 10, 10, layer_index=0, direction="forward"),
                   spectrum(spec, 10, 10, layer_index=0, direction="backward")]
        path = write_spectrum_csv(reports, tmp_path / "spectrum.csv")
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0].keys()) == SPECTRUM_COLUMNS
        assert len(rows) == 20
        assert {r["direction"] for r in rows} == {"forward", "backward"}

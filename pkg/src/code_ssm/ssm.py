"""
Diagonal state-space kernels.

This module holds the S4D-style parameterisation of one diagonal SSM, its
discretisation, the materialised convolution kernel and the FFT convolution
that applies it, a step-by-step recurrence used as the reference, and the
transfer-function analyser behind the ``spectrum`` command.

The N stored modes are treated as one half of implicit conjugate pairs, so
outputs take ``2 * Re(.)``; ``conjugate_pairs=False`` keeps the factor at 1
for closed-form checks. D is fixed to zero; the layer residual supplies the
skip path.
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ShapeError, SingularityError
from .numerics import Rng, Tensor, as_tensor, fft, make_op, next_power_of_two, note_scratch, tensor


logger = logging.getLogger(__name__)

DEFAULT_STATE_SIZE = 64
DT_MIN = 1e-3
DT_MAX = 1e-1

SPECTRUM_COLUMNS = ["layer_index", "direction", "freq_index", "omega", "magnitude", "phase_deg"]


class Discretization(Enum):
    """Continuous-to-discrete conversion rule."""
    ZOH = "zoh"
    BILINEAR = "bilinear"


@dataclass
class SSMKernelSpec:
    """Learnable parameters of one diagonal SSM.

    Re(Lambda) is stored as the log of its negation and Delta in log space, so
    any unconstrained update keeps the system stable.
    """

    lambda_log_neg_re: Tensor
    lambda_im: Tensor
    b_re: Tensor
    b_im: Tensor
    c_re: Tensor
    c_im: Tensor
    log_delta: Tensor
    discretization: Discretization = Discretization.ZOH
    conjugate_pairs: bool = True

    FIELDS = ("lambda_log_neg_re", "lambda_im", "b_re", "b_im", "c_re", "c_im", "log_delta")

    @property
    def state_size(self) -> int:
        return self.lambda_im.shape[0]

    @property
    def output_factor(self) -> float:
        return 2.0 if self.conjugate_pairs else 1.0

    @property
    def lam(self) -> np.ndarray:
        return (-np.exp(self.lambda_log_neg_re.data.astype(np.float64))
                + 1j * self.lambda_im.data.astype(np.float64))

    @property
    def b(self) -> np.ndarray:
        return self.b_re.data.astype(np.float64) + 1j * self.b_im.data.astype(np.float64)

    @property
    def c(self) -> np.ndarray:
        return self.c_re.data.astype(np.float64) + 1j * self.c_im.data.astype(np.float64)

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta.data.astype(np.float64)[0]))

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}{name}", getattr(self, name)) for name in self.FIELDS]

    @classmethod
    def initialize(cls, state_size: int, rng: Rng,
                   discretization: Discretization = Discretization.ZOH,
                   dt_min: float = DT_MIN, dt_max: float = DT_MAX) -> "SSMKernelSpec":
        """S4D-Lin initialisation: Lambda_n = -1/2 + i*pi*n, B = 1, C ~ CN(0, 1),
        Delta log-uniform in [dt_min, dt_max]."""
        if state_size < 1:
            raise ShapeError(f"state_size must be positive, got {state_size}")
        c = rng.normal((2, state_size), std=math.sqrt(0.5))
        return cls(
            lambda_log_neg_re=tensor(np.full(state_size, math.log(0.5)), requires_grad=True),
            lambda_im=tensor(math.pi * np.arange(state_size), requires_grad=True),
            b_re=tensor(np.ones(state_size), requires_grad=True),
            b_im=tensor(np.zeros(state_size), requires_grad=True),
            c_re=tensor(c[0], requires_grad=True),
            c_im=tensor(c[1], requires_grad=True),
            log_delta=tensor(np.log(rng.log_uniform(dt_min, dt_max, 1)), requires_grad=True),
            discretization=discretization,
        )

    @classmethod
    def from_complex(cls, lam: Sequence[complex], b: Sequence[complex], c: Sequence[complex],
                     delta: float, conjugate_pairs: bool = True,
                     discretization: Discretization = Discretization.ZOH) -> "SSMKernelSpec":
        """Build a spec from explicit complex values (Re(lam) must be negative)."""
        lam = np.asarray(lam, dtype=np.complex128).reshape(-1)
        b = np.asarray(b, dtype=np.complex128).reshape(-1)
        c = np.asarray(c, dtype=np.complex128).reshape(-1)
        if np.any(lam.real >= 0):
            raise ShapeError("Re(lambda) must be strictly negative")
        if delta <= 0:
            raise ShapeError(f"delta must be positive, got {delta}")
        return cls(
            lambda_log_neg_re=tensor(np.log(-lam.real), requires_grad=True),
            lambda_im=tensor(lam.imag, requires_grad=True),
            b_re=tensor(b.real, requires_grad=True),
            b_im=tensor(b.imag, requires_grad=True),
            c_re=tensor(c.real, requires_grad=True),
            c_im=tensor(c.imag, requires_grad=True),
            log_delta=tensor([math.log(delta)], requires_grad=True),
            discretization=discretization,
            conjugate_pairs=conjugate_pairs,
        )


@dataclass
class DiscreteKernel:
    """A materialised length-L convolution kernel."""

    values: Tensor
    spec: Optional[SSMKernelSpec] = None

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class _Discretized:
    a_bar: np.ndarray
    b_bar: np.ndarray
    da_dlam: np.ndarray
    da_ddelta: np.ndarray
    db_dlam: np.ndarray
    db_ddelta: np.ndarray
    db_db: np.ndarray


def _discretize(lam: np.ndarray, b: np.ndarray, delta: float, rule: Discretization) -> _Discretized:
    if np.any(lam == 0):
        raise SingularityError("state eigenvalue Lambda_n is exactly zero")

    if rule is Discretization.ZOH:
        a_bar = np.exp(delta * lam)
        ratio = (a_bar - 1.0) / lam
        return _Discretized(
            a_bar=a_bar,
            b_bar=ratio * b,
            da_dlam=delta * a_bar,
            da_ddelta=lam * a_bar,
            db_dlam=b * (delta * a_bar * lam - (a_bar - 1.0)) / (lam * lam),
            db_ddelta=b * a_bar,
            db_db=ratio,
        )

    denom = 1.0 - 0.5 * delta * lam
    return _Discretized(
        a_bar=(1.0 + 0.5 * delta * lam) / denom,
        b_bar=delta * b / denom,
        da_dlam=delta / (denom * denom),
        da_ddelta=lam / (denom * denom),
        db_dlam=0.5 * delta * delta * b / (denom * denom),
        db_ddelta=b / (denom * denom),
        db_db=delta / denom,
    )


def discretize(spec: SSMKernelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete (A_bar, B_bar) for ``spec`` under its discretisation rule.

    Zero-order hold gives A_bar = exp(Delta * Lambda) and
    B_bar = (A_bar - 1) / Lambda * B.
    """
    result = _discretize(spec.lam, spec.b, spec.delta, spec.discretization)
    return result.a_bar, result.b_bar


def materialize_kernel(spec: SSMKernelSpec, length: int) -> DiscreteKernel:
    """K[l] = factor * Re(sum_n C_n B_bar_n A_bar_n^l) for l = 0..length-1.

    The result stays attached to the graph, so gradients reach every field of
    ``spec``.
    """
    if length < 1:
        raise ShapeError(f"kernel length must be at least 1, got {length}")

    lam, b, c, delta = spec.lam, spec.b, spec.c, spec.delta
    disc = _discretize(lam, b, delta, spec.discretization)
    factor = spec.output_factor
    weights = c * disc.b_bar
    powers = disc.a_bar[:, None] ** np.arange(length)[None, :]
    note_scratch(powers)
    values = factor * (weights @ powers).real
    dtype = spec.c_re.dtype

    def backward(grad: np.ndarray):
        grad = grad.astype(np.float64)
        moment0 = powers @ grad
        moment1 = powers[:, :-1] @ (np.arange(1, length) * grad[1:]) if length > 1 else np.zeros_like(lam)
        g_weights = factor * np.conj(moment0)
        g_a_bar = factor * np.conj(weights * moment1)
        g_c = np.conj(disc.b_bar) * g_weights
        g_b_bar = np.conj(c) * g_weights
        g_b = np.conj(disc.db_db) * g_b_bar
        g_lam = np.conj(disc.da_dlam) * g_a_bar + np.conj(disc.db_dlam) * g_b_bar
        g_delta = np.real(np.sum(np.conj(disc.da_ddelta) * g_a_bar + np.conj(disc.db_ddelta) * g_b_bar))
        return tuple(np.asarray(g, dtype=dtype) for g in (
            g_lam.real * lam.real,  # d Re(Lambda) / d log(-Re(Lambda)) = Re(Lambda)
            g_lam.imag,
            g_b.real,
            g_b.imag,
            g_c.real,
            g_c.imag,
            np.array([g_delta * delta]),
        ))

    parents = [getattr(spec, name) for name in SSMKernelSpec.FIELDS]
    return DiscreteKernel(values=make_op(values.astype(dtype), parents, backward), spec=spec)


def _fft_along_time(values: np.ndarray, size: int) -> np.ndarray:
    padded = np.zeros(values.shape[:-1] + (size,), dtype=np.complex128)
    padded[..., :values.shape[-1]] = values
    return fft(padded)


def ssm_conv(kernel: Union[DiscreteKernel, Tensor, np.ndarray], u: Union[Tensor, np.ndarray]) -> Tensor:
    """Causal convolution y[t] = sum_{l<=t} K[l] u[t-l] on every channel.

    ``u`` is (L, d) or (B, L, d); the single kernel is shared by all channels.
    Computed with FFTs zero-padded to the next power of two >= 2L.
    """
    kernel_values = as_tensor(kernel.values if isinstance(kernel, DiscreteKernel) else kernel)
    u = as_tensor(u)
    if u.ndim not in (2, 3):
        raise ShapeError(f"ssm_conv expects (L, d) or (B, L, d) input, got {u.shape}")
    length = u.shape[-2]
    if kernel_values.shape != (length,):
        raise ShapeError(f"kernel length {kernel_values.shape} does not match sequence length {length}")

    size = next_power_of_two(2 * length)
    channels_last = np.swapaxes(u.data, -1, -2)
    u_freq = _fft_along_time(channels_last, size)
    k_freq = _fft_along_time(kernel_values.data, size)
    note_scratch(u_freq, k_freq)
    out = fft(u_freq * k_freq, inverse=True)[..., :length].real
    dtype = u.dtype

    def backward(grad: np.ndarray):
        g_freq = _fft_along_time(np.swapaxes(grad, -1, -2), size)
        grad_u = fft(np.conj(k_freq) * g_freq, inverse=True)[..., :length].real
        grad_k = fft(np.conj(u_freq) * g_freq, inverse=True)[..., :length].real
        grad_k = grad_k.reshape(-1, length).sum(axis=0)
        return (np.asarray(grad_k, dtype=kernel_values.dtype),
                np.swapaxes(grad_u, -1, -2).astype(dtype))

    return make_op(np.swapaxes(out, -1, -2).astype(dtype), (kernel_values, u), backward)


def ssm_recurrence(spec: SSMKernelSpec, u: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Run x_k = A_bar x_{k-1} + B_bar u_k, y_k = factor * Re(C x_k) step by step.

    Reference implementation for ``ssm_conv``; returns float64 with the shape
    of ``u``.
    """
    values = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    a_bar, b_bar = discretize(spec)
    c = spec.c
    state = np.zeros(values.shape[:-2] + values.shape[-1:] + (spec.state_size,), dtype=np.complex128)
    out = np.zeros_like(values)
    for step in range(values.shape[-2]):
        state = a_bar * state + b_bar * values[..., step, :, None]
        out[..., step, :] = spec.output_factor * (state @ c).real
    return out


@dataclass
class SpectrumReport:
    """Magnitude and phase of a kernel's transfer function H(omega)."""

    omega: np.ndarray
    magnitude: np.ndarray
    phase_deg: np.ndarray
    layer_index: Optional[int] = None
    direction: str = ""

    def rows(self) -> Iterator[dict]:
        for index, (omega, magnitude, phase) in enumerate(zip(self.omega, self.magnitude, self.phase_deg)):
            yield {
                "layer_index": "" if self.layer_index is None else self.layer_index,
                "direction": self.direction,
                "freq_index": index,
                "omega": float(omega),
                "magnitude": float(magnitude),
                "phase_deg": float(phase),
            }


def kernel_spectrum(values: np.ndarray, n_freq: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate H(omega_k) = sum_l K[l] exp(-i omega_k l) at omega_k = 2*pi*k / n_freq.

    Returns (omega, magnitude, phase in degrees within (-180, 180]).
    """
    if n_freq < 2:
        raise ShapeError(f"n_freq must be at least 2, got {n_freq}")
    values = np.asarray(values, dtype=np.float64)
    if n_freq >= values.shape[0]:
        response = np.fft.fft(values, n=n_freq)
    else:
        # exp(-i omega_k l) is n_freq-periodic in l, so fold before transforming
        folded = np.zeros(n_freq)
        np.add.at(folded, np.arange(values.shape[0]) % n_freq, values)
        response = np.fft.fft(folded)
    phase = np.degrees(np.angle(response))
    phase[phase <= -180.0] += 360.0
    omega = 2.0 * np.pi * np.arange(n_freq) / n_freq
    return omega, np.abs(response), phase


def spectrum(spec: SSMKernelSpec, kernel_len: int, n_freq: int,
             layer_index: Optional[int] = None, direction: str = "") -> SpectrumReport:
    """Transfer function of the kernel materialised at ``kernel_len``."""
    kernel = materialize_kernel(spec, kernel_len)
    omega, magnitude, phase = kernel_spectrum(kernel.values.data, n_freq)
    return SpectrumReport(omega=omega, magnitude=magnitude, phase_deg=phase,
                          layer_index=layer_index, direction=direction)


def write_spectrum_csv(reports: Sequence[SpectrumReport], path: Union[str, Path]) -> Path:
    """Write spectrum rows with the columns of SPECTRUM_COLUMNS."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SPECTRUM_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerows(report.rows())
    logger.info(f"Wrote {len(reports)} spectra to {path}")
    return path

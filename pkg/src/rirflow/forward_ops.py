"""Forward operators for the measurement models and their adjoints/derivatives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import fft as sp_fft
from scipy.special import expit

from .core import InvalidInputError, SignalBuffer, as_array


def _check_len(x, n, what):
    if x.shape[-1] != n:
        raise InvalidInputError(f"{what}: expected length {n}, got {x.shape[-1]}")


class IdentityOperator:
    """``H = I`` on length-``n`` signals."""

    def __init__(self, n: int):
        self.input_len = int(n)
        self.output_len = int(n)

    def apply(self, x):
        x = as_array(x)
        _check_len(x, self.input_len, "identity")
        return x.copy()

    adjoint = apply

    def normal(self, x, weights=None):
        x = as_array(x)
        return x * weights if weights is not None else x.copy()


class ConvOperator:
    """Full linear convolution with a known kernel, applied via zero-padded FFTs.

    ``apply`` maps length ``N`` to ``N + M - 1``; ``adjoint`` is the
    correlation with the kernel (convolution with the time-reversed kernel)
    cropped to the first ``N`` samples.
    """

    def __init__(self, kernel, input_len: int):
        h = as_array(kernel)
        if h.size < 1:
            raise InvalidInputError("empty convolution kernel")
        if int(input_len) < 1:
            raise InvalidInputError("input_len must be >= 1")
        self.kernel = h.copy()
        self.input_len = int(input_len)
        self.output_len = self.input_len + h.size - 1
        self.nfft = sp_fft.next_fast_len(self.output_len, real=True)
        self._kernel_spec = sp_fft.rfft(h, self.nfft)

    @property
    def kernel_len(self) -> int:
        return self.kernel.size

    def apply(self, x):
        x = as_array(x)
        _check_len(x, self.input_len, "convolve")
        return sp_fft.irfft(sp_fft.rfft(x, self.nfft) * self._kernel_spec, self.nfft)[: self.output_len]

    def adjoint(self, r):
        r = as_array(r)
        _check_len(r, self.output_len, "convolve_adjoint")
        return sp_fft.irfft(sp_fft.rfft(r, self.nfft) * np.conj(self._kernel_spec), self.nfft)[: self.input_len]

    def normal(self, x, weights=None):
        """``H^T W H x`` with diagonal ``weights`` (``None`` means identity)."""
        hx = self.apply(x)
        if weights is not None:
            hx = hx * weights
        return self.adjoint(hx)

    def spectrum_power(self, n_fft: Optional[int] = None) -> np.ndarray:
        """``|H(f)|^2`` on an rfft grid of length ``n_fft`` (default: the operator's)."""
        n_fft = self.nfft if n_fft is None else n_fft
        return np.abs(sp_fft.rfft(self.kernel, n_fft)) ** 2


class MaskOperator:
    """Diagonal 0/1 sampling operator; self-adjoint and idempotent."""

    def __init__(self, keep):
        keep = np.asarray(keep, dtype=bool)
        if keep.ndim != 1 or keep.size < 1:
            raise InvalidInputError("mask must be a non-empty 1-D boolean array")
        self.keep = keep
        self.input_len = keep.size
        self.output_len = keep.size

    def apply(self, x):
        x = as_array(x)
        _check_len(x, self.input_len, "mask")
        return np.where(self.keep, x, 0.0)

    adjoint = apply

    def normal(self, x, weights=None):
        out = self.apply(x)
        return out * weights if weights is not None else out

    @classmethod
    def from_gaps(cls, n: int, sample_rate: int, gaps) -> "MaskOperator":
        """Mask that drops the ``(start_s, stop_s)`` intervals in ``gaps``."""
        keep = np.ones(int(n), dtype=bool)
        for start, stop in gaps:
            a = int(round(start * sample_rate))
            b = int(round(stop * sample_rate))
            if not 0 <= a < b:
                raise InvalidInputError(f"invalid gap ({start}, {stop})")
            keep[a:min(b, n)] = False
        return cls(keep)


def convolve(op: ConvOperator, x):
    return op.apply(x)


def convolve_adjoint(op: ConvOperator, r):
    return op.adjoint(r)


def apply_mask(m: MaskOperator, x):
    return m.apply(x)


# --------------------------------------------------------------------------
# clipping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClipSpec:
    """Smooth clipping at threshold ``tau = c * max|y|`` with smoothness ``zeta``."""

    tau: float
    zeta: float = 1000.0
    c: Optional[float] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError("clip threshold tau must be > 0")
        if not self.zeta > 0:
            raise InvalidInputError("clip smoothness zeta must be > 0")
        if self.c is not None and not 0 < self.c <= 1:
            raise InvalidInputError("clip level factor c must be in (0, 1]")

    @classmethod
    def from_level(cls, reference, c: float, zeta: float = 1000.0) -> "ClipSpec":
        peak = float(np.max(np.abs(as_array(reference))))
        if peak == 0.0:
            raise InvalidInputError("cannot derive a clip threshold from a silent signal")
        return cls(tau=c * peak, zeta=zeta, c=c)


def _softplus(z):
    # log(1 + e^z) without overflow
    return np.logaddexp(0.0, z)


def soft_clip(x, spec: ClipSpec):
    """``x - softplus(zeta (x - tau)) / zeta + softplus(zeta (-x - tau)) / zeta``.

    Evaluated as ``sign(x) (tau - softplus(zeta (tau - |x|)) / zeta + softplus(-zeta (|x| + tau)) / zeta)``,
    the same function by ``softplus(z) - softplus(-z) = z`` and oddness, which
    avoids cancelling ``x`` against ``softplus`` for large ``|x|``.
    """
    arr = as_array(x)
    z, tau = spec.zeta, spec.tau
    a = np.abs(arr)
    mag = tau - _softplus(z * (tau - a)) / z + _softplus(-z * (a + tau)) / z
    out = np.copysign(mag, arr)
    return x.with_samples(out) if isinstance(x, SignalBuffer) else out


def soft_clip_deriv(x, spec: ClipSpec):
    """Elementwise derivative ``1 - sigmoid(zeta (x - tau)) - sigmoid(zeta (-x - tau))``, in [0, 1].

    Computed as ``sigmoid(zeta (tau - |x|)) - sigmoid(-zeta (|x| + tau))`` so it
    never rounds below zero.
    """
    arr = as_array(x)
    z, tau = spec.zeta, spec.tau
    a = np.abs(arr)
    out = expit(z * (tau - a)) - expit(-z * (a + tau))
    return x.with_samples(out) if isinstance(x, SignalBuffer) else out


def hard_clip(x, tau: float):
    if not tau > 0:
        raise InvalidInputError("tau must be > 0")
    arr = as_array(x)
    out = np.clip(arr, -tau, tau)
    return x.with_samples(out) if isinstance(x, SignalBuffer) else out


# --------------------------------------------------------------------------
# excitation
# --------------------------------------------------------------------------


def ess_sweep(duration_s: float = 1.0, f_start: float = 20.0, f_end: Optional[float] = None,
              sample_rate: int = 8000, fade_in_s: float = 0.0, fade_out_s: float = 0.0) -> SignalBuffer:
    """Exponential sine sweep with unit peak amplitude.

    Phase ``2 pi f1 L (exp(t / L) - 1)`` with ``L = T / ln(f2 / f1)``, so the
    instantaneous frequency runs from ``f_start`` to ``f_end`` over
    ``duration_s``. ``f_end`` defaults to 0.95 Nyquist. Optional half-Hann
    fades are applied at both ends.
    """
    nyquist = sample_rate / 2.0
    f_end = 0.95 * nyquist if f_end is None else float(f_end)
    if not 0 < f_start < f_end <= nyquist:
        raise InvalidInputError(f"invalid sweep range {f_start}..{f_end} Hz (Nyquist {nyquist} Hz)")
    n = int(round(duration_s * sample_rate))
    if n < 2:
        raise InvalidInputError("sweep too short")
    t = np.arange(n) / sample_rate
    rate = duration_s / np.log(f_end / f_start)
    sweep = np.sin(2.0 * np.pi * f_start * rate * np.expm1(t / rate))
    n_in = int(round(fade_in_s * sample_rate))
    n_out = int(round(fade_out_s * sample_rate))
    if n_in > 0:
        sweep[:n_in] *= np.hanning(2 * n_in)[:n_in]
    if n_out > 0:
        sweep[n - n_out:] *= np.hanning(2 * n_out)[n_out:]
    sweep /= np.max(np.abs(sweep))
    return SignalBuffer(sweep, sample_rate)


def sweep_instantaneous_frequency(t, duration_s: float, f_start: float, f_end: float):
    """Instantaneous frequency of :func:`ess_sweep` at time ``t`` (seconds)."""
    return f_start * np.exp(np.asarray(t) * np.log(f_end / f_start) / duration_s)

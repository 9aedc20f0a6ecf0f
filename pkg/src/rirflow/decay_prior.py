"""Analytic MMSE denoiser for exponentially decaying Gaussian RIRs.

The clean RIR is modelled as ``x_k ~ N(0, alpha^2 e^{-2 lambda k})``. For a
flow state ``x_t = t x_1 + (1 - t) eps`` the conditional mean for fixed
``(lambda, alpha)`` is a per-sample Wiener gain. ``alpha`` is profiled out by a
least-squares fit of the noise-compensated energy decay curve and ``lambda`` is
averaged over a reverberation-time grid with posterior weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .core import InvalidInputError, SignalBuffer, as_array, lambda_to_rt, rt_to_lambda, schroeder_edc
from .filterbank import BandPlan, merge_array, split_array

ALPHA_SQ_FLOOR = 1e-12
# profile fit / likelihood use every sample up to this length, then a stride
MAX_PROFILE_POINTS = 16384
# posterior weights below this are dropped from the gain average
WEIGHT_CUTOFF = 1e-300


def psi_basis(lam: float, n: int) -> np.ndarray:
    """``psi(m) = sum_{k=m}^{n-1} exp(-2 lam k)`` by one backward pass."""
    if not lam > 0:
        raise InvalidInputError("lambda must be > 0")
    if int(n) < 1:
        raise InvalidInputError("n must be >= 1")
    return kernels.reverse_cumsum(np.exp(-2.0 * lam * np.arange(int(n))))


def profile_index(n: int) -> np.ndarray:
    stride = max(1, -(-n // MAX_PROFILE_POINTS))
    return np.arange(0, n, stride)


def profile_alpha_sq(edc_sig, psi, t: float, floor: float = ALPHA_SQ_FLOOR) -> float:
    """Closed-form least-squares amplitude ``argmin_s sum_m (edc_sig(m) - t^2 s psi(m))^2``.

    Negative ``edc_sig`` entries are clamped to zero first; the result is
    clamped at ``floor``.
    """
    if not 0.0 < t <= 1.0:
        raise InvalidInputError("t must be in (0, 1] for amplitude profiling")
    psi = np.asarray(psi, dtype=np.float64)
    den = float(psi @ psi)
    if den == 0.0:
        raise InvalidInputError("psi is identically zero")
    edc = np.maximum(np.asarray(edc_sig, dtype=np.float64), 0.0)
    return max(float(psi @ edc) / (t * t * den), floor)


def profile_log_likelihood(x_t, lam: float, alpha_sq: float, t: float, noise_var: float) -> float:
    """Gaussian log-likelihood of ``x_t`` with variances ``t^2 alpha^2 e^{-2 lam k} + noise_var``."""
    if not alpha_sq > 0:
        raise InvalidInputError("alpha_sq must be > 0")
    if noise_var < 0 or not 0.0 <= t <= 1.0:
        raise InvalidInputError("need noise_var >= 0 and t in [0, 1]")
    x = as_array(x_t)
    v = t * t * alpha_sq * np.exp(-2.0 * lam * np.arange(x.size)) + noise_var
    if np.any(v <= 0.0):
        raise FloatingPointError("non-positive variance in profile likelihood")
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * v) + x * x / v))


@dataclass(frozen=True)
class DecayPosterior:
    log_weights: np.ndarray
    alpha_sq_profiled: np.ndarray
    lambda_values: np.ndarray
    sample_rate: int

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def mean_rt(self) -> float:
        return float(self.weights @ lambda_to_rt(self.lambda_values, self.sample_rate))


@dataclass(frozen=True, eq=False)
class DecayGrid:
    """Reverberation-time grid with its decay rates and log prior.

    ``alpha_sq`` pins the amplitude instead of profiling it (used for oracle
    checks where the generator amplitude is known). ``alpha_sq_max`` caps the
    profiled amplitude, i.e. a flat amplitude prior on ``[0, alpha_max]``; it
    keeps the estimate bounded at small ``t``, where the profiled value scales
    like ``1 / t^2``. Decay and ``psi`` bases are cached per signal length on
    first use.
    """

    rt_values: np.ndarray
    sample_rate: int
    log_prior: Optional[np.ndarray] = None
    alpha_sq: Optional[float] = None
    alpha_sq_max: Optional[float] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        rts = np.atleast_1d(np.asarray(self.rt_values, dtype=np.float64))
        if rts.size < 1 or np.any(rts <= 0) or np.any(np.diff(rts) <= 0):
            raise InvalidInputError("rt_values must be positive and strictly increasing")
        object.__setattr__(self, "rt_values", rts)
        if self.log_prior is None:
            prior = np.full(rts.size, -np.log(rts.size))
        else:
            prior = np.asarray(self.log_prior, dtype=np.float64)
            if prior.shape != rts.shape:
                raise InvalidInputError("log_prior must match rt_values")
            prior = prior - logsumexp(prior)
        object.__setattr__(self, "log_prior", prior)
        if self.alpha_sq is not None and not self.alpha_sq > 0:
            raise InvalidInputError("pinned alpha_sq must be > 0")
        if self.alpha_sq_max is not None and not self.alpha_sq_max > ALPHA_SQ_FLOOR:
            raise InvalidInputError("alpha_sq_max must exceed the amplitude floor")

    @classmethod
    def from_range(cls, sample_rate: int, rt_min: float = 0.1, rt_max: float = 3.0, count: int = 60,
                   spacing: str = "log", **kwargs) -> "DecayGrid":
        if spacing == "log":
            rts = np.geomspace(rt_min, rt_max, count)
        elif spacing == "linear":
            rts = np.linspace(rt_min, rt_max, count)
        else:
            raise InvalidInputError(f"unknown grid spacing {spacing!r}")
        return cls(rts, sample_rate, **kwargs)

    @property
    def lambda_values(self) -> np.ndarray:
        return rt_to_lambda(self.rt_values, self.sample_rate)

    def __len__(self):
        return self.rt_values.size

    def bases(self, n: int):
        """(decay, psi, psi_sq_sum, index) on the profiling index set for length ``n``."""
        hit = self._cache.get(n)
        if hit is None:
            idx = profile_index(n)
            k = np.arange(n)
            decay_full = np.exp(-2.0 * np.outer(self.lambda_values, k))
            psi = np.stack([kernels.reverse_cumsum(row) for row in decay_full])
            if idx.size == n:
                decay = decay_full
            else:
                decay = np.ascontiguousarray(decay_full[:, idx])
                psi = np.ascontiguousarray(psi[:, idx])
            psi_sq_sum = np.einsum("ij,ij->i", psi, psi)
            hit = (decay, psi, psi_sq_sum, idx, decay_full)
            self._cache[n] = hit
        return hit


def default_grid(sample_rate: int = 8000) -> DecayGrid:
    return DecayGrid.from_range(sample_rate)


def _posterior_arrays(x, t, grid: DecayGrid, noise_var):
    n = x.size
    decay, psi, psi_sq_sum, idx, _ = grid.bases(n)
    x_sq = np.ascontiguousarray((x * x)[idx])
    if grid.alpha_sq is not None:
        alpha_sq = np.full(len(grid), float(grid.alpha_sq))
        v = t * t * alpha_sq[:, None] * decay + noise_var
        loglik = -0.5 * (x_sq.size * np.log(2 * np.pi) + np.log(v).sum(axis=1) + (x_sq / v).sum(axis=1))
    else:
        ceil = np.inf if grid.alpha_sq_max is None else float(grid.alpha_sq_max)
        edc = schroeder_edc(x)
        edc_sig = np.maximum(edc - noise_var * (n - np.arange(n)), 0.0)
        edc_sig = np.ascontiguousarray(edc_sig[idx])
        alpha_sq, loglik = kernels.grid_profile(x_sq, edc_sig, decay, psi, psi_sq_sum, t, noise_var,
                                                ALPHA_SQ_FLOOR, ceil)
    log_w = loglik + grid.log_prior
    log_w = log_w - logsumexp(log_w)
    return log_w, alpha_sq


def lambda_posterior(x_t, t: float, grid: DecayGrid, noise_var: Optional[float] = None) -> DecayPosterior:
    """Posterior weights over the grid with ``alpha`` profiled out."""
    if not 0.0 < t <= 1.0:
        raise InvalidInputError("lambda posterior needs t in (0, 1]")
    noise_var = (1.0 - t) ** 2 if noise_var is None else float(noise_var)
    x = as_array(x_t)
    log_w, alpha_sq = _posterior_arrays(x, t, grid, noise_var)
    return DecayPosterior(log_w, alpha_sq, grid.lambda_values, grid.sample_rate)


def posterior_gain(x_t, t: float, grid: DecayGrid, noise_var: Optional[float] = None) -> np.ndarray:
    """Posterior-averaged per-sample Wiener gain (the denoiser is ``gain * x_t``)."""
    x = as_array(x_t)
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError("t must be in [0, 1]")
    if t == 0.0:
        return np.zeros(x.size)
    noise_var = (1.0 - t) ** 2 if noise_var is None else float(noise_var)
    if t == 1.0 and noise_var == 0.0:
        return np.ones(x.size)
    log_w, alpha_sq = _posterior_arrays(x, t, grid, noise_var)
    w = np.exp(log_w)
    w[w < WEIGHT_CUTOFF] = 0.0
    decay_full = grid.bases(x.size)[4]
    return kernels.posterior_gain(decay_full, np.ascontiguousarray(alpha_sq), w, float(t), noise_var)


def denoise(x_t, t: float, grid: DecayGrid, noise_var: Optional[float] = None):
    """MMSE estimate of the clean signal from ``x_t``.

    ``noise_var`` defaults to the flow noise ``(1 - t)^2``. Returns the same
    container type as the input.
    """
    x = as_array(x_t)
    out = posterior_gain(x, t, grid, noise_var) * x
    return x_t.with_samples(out) if isinstance(x_t, SignalBuffer) else out


def vector_field(x_t, t: float, grid: DecayGrid, noise_var: Optional[float] = None):
    """Flow velocity ``(denoise(x_t) - x_t) / (1 - t)``; undefined at ``t = 1``."""
    if t >= 1.0:
        raise ZeroDivisionError("vector field is singular at t = 1; use the denoiser directly")
    x = as_array(x_t)
    out = (as_array(denoise(x, t, grid, noise_var)) - x) / (1.0 - t)
    return x_t.with_samples(out) if isinstance(x_t, SignalBuffer) else out


def denoise_multiband(x_t, t: float, plan: BandPlan, grid: DecayGrid):
    """Split into bands, denoise each with noise ``fraction_b (1 - t)^2``, merge."""
    x = as_array(x_t)
    if t == 0.0:
        out = np.zeros(x.size)
    elif t == 1.0:
        out = x.copy()
    elif plan.n_bands == 1:
        out = posterior_gain(x, t, grid, (1.0 - t) ** 2) * x
    else:
        bands = split_array(x, plan)
        for b, frac in enumerate(plan.bandwidth_fractions):
            bands[b] *= posterior_gain(bands[b], t, grid, frac * (1.0 - t) ** 2)
        out = merge_array(bands, plan)
    return x_t.with_samples(out) if isinstance(x_t, SignalBuffer) else out


def band_posteriors(x_t, t: float, plan: BandPlan, grid: DecayGrid):
    """Per-band decay posteriors with the band-scaled flow noise."""
    bands = split_array(as_array(x_t), plan)
    return [lambda_posterior(band, t, grid, frac * (1.0 - t) ** 2)
            for band, frac in zip(bands, plan.bandwidth_fractions)]

"""Reference methods: Lundeby decay analysis, TruncShape denoising and the
maximum-likelihood solvers for the deconvolution tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .core import InvalidInputError, SignalBuffer, as_array, make_rng, rt_to_lambda
from .filterbank import BandPlan, brickwall, default_plan, merge_array, split_array
from .forward_ops import ClipSpec, ConvOperator
from .refine import (
    MLE_SHIFT,
    SolverTolerances,
    _gauss_newton,
    _irls,
    _precond,
    conjugate_gradient,
)

# Lundeby constants
MIN_INTERVAL_S = 0.010
MAX_INTERVAL_S = 0.050
NOISE_TAIL_FRACTION = 0.1
REGRESSION_START_DB = -5.0
NOISE_MARGIN_DB = 10.0
INTERVALS_PER_10DB = 5
LUNDEBY_MAX_ITER = 10


@dataclass(frozen=True)
class LundebyEstimate:
    """Decay analysis of one (band) signal.

    ``noise_floor_db`` and ``intercept_db`` are relative to ``reference_power``,
    the largest interval-averaged power. The regression line is
    ``intercept_db + slope_db * k`` for sample index ``k``.
    """

    rt_seconds: float
    noise_floor_db: float
    truncation_index: int
    converged: bool
    slope_db: float = float("nan")
    intercept_db: float = float("nan")
    reference_power: float = float("nan")
    iterations: int = 0
    reason: str = ""

    def line_power(self, k):
        """Power per sample predicted by the regression line at index ``k``."""
        return self.reference_power * 10.0 ** ((self.intercept_db + self.slope_db * np.asarray(k)) / 10.0)


def _interval_power(energy, width):
    """Mean power over consecutive ``width``-sample intervals and the interval centres."""
    n_int = energy.size // width
    if n_int < 1:
        return np.empty(0), np.empty(0)
    power = energy[: n_int * width].reshape(n_int, width).mean(axis=1)
    centers = np.arange(n_int) * width + 0.5 * (width - 1)
    return power, centers


def _to_db(p, ref):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(p / ref)


def _regress(level_db, centers, noise_db):
    """Least-squares line through the decay between -5 dB and noise + 10 dB."""
    peak = int(np.argmax(level_db))
    below = np.nonzero(level_db[peak:] <= REGRESSION_START_DB)[0]
    if below.size == 0:
        return None
    start = peak + int(below[0])
    stop_level = noise_db + NOISE_MARGIN_DB
    above = np.nonzero(level_db[start:] < stop_level)[0]
    stop = start + int(above[0]) if above.size else level_db.size
    if stop - start < 2:
        return None
    slope, intercept = np.polyfit(centers[start:stop], level_db[start:stop], 1)
    return float(slope), float(intercept)


def _failed(reason, noise_db=float("nan"), iterations=0):
    return LundebyEstimate(float("nan"), noise_db, 0, False, iterations=iterations, reason=reason)


def lundeby(x, sample_rate: Optional[int] = None, max_iter: int = LUNDEBY_MAX_ITER) -> LundebyEstimate:
    """Iterative reverberation-time and noise-floor estimate.

    The squared signal is averaged over intervals, a noise level is taken from
    the late part, and a line fitted to the decay is intersected with it. The
    interval width and noise window are then adapted to the fitted slope and the
    procedure repeats until the crosspoint moves by less than one interval.
    Never raises for valid input; failure is reported through ``converged``.
    """
    fs = x.sample_rate if isinstance(x, SignalBuffer) else sample_rate
    if fs is None:
        raise InvalidInputError("sample rate unknown")
    arr = as_array(x)
    n = arr.size
    if n < int(np.ceil(0.01 * fs)):
        raise InvalidInputError("signal shorter than 10 ms")
    energy = arr * arr
    if not np.any(energy > 0):
        return _failed("silent input")

    width = max(1, int(round(MIN_INTERVAL_S * fs)))
    power, centers = _interval_power(energy, width)
    ref = float(power.max())
    tail = max(1, int(n * NOISE_TAIL_FRACTION))
    noise_db = float(_to_db(max(energy[-tail:].mean(), 1e-300), ref))
    fit = _regress(_to_db(power, ref), centers, noise_db)
    if fit is None:
        return _failed("no decay range above the noise", noise_db)
    slope, intercept = fit
    if slope >= 0:
        return _failed("non-negative decay slope", noise_db)
    cross = (noise_db - intercept) / slope
    if not 0 < cross < n:
        return _failed("crosspoint outside the signal", noise_db)

    iterations = 0
    for iterations in range(1, max_iter + 1):
        per_10db = 10.0 / -slope
        width = int(round(np.clip(per_10db / INTERVALS_PER_10DB, MIN_INTERVAL_S * fs, MAX_INTERVAL_S * fs)))
        power, centers = _interval_power(energy, width)
        if power.size < 3:
            return _failed("too few intervals", noise_db, iterations)
        ref = float(power.max())
        noise_start = int(min(cross + per_10db, n - tail))
        noise_db = float(_to_db(max(energy[noise_start:].mean(), 1e-300), ref))
        fit = _regress(_to_db(power, ref), centers, noise_db)
        if fit is None:
            return _failed("no decay range above the noise", noise_db, iterations)
        slope, intercept = fit
        if slope >= 0:
            return _failed("non-negative decay slope", noise_db, iterations)
        new_cross = (noise_db - intercept) / slope
        if not 0 < new_cross < n:
            return _failed("crosspoint outside the signal", noise_db, iterations)
        moved = abs(new_cross - cross)
        cross = new_cross
        if moved < width:
            break

    rt = -60.0 / (slope * fs)
    return LundebyEstimate(rt, noise_db, int(cross), True, slope, intercept, ref, iterations)


@dataclass
class TruncShapeResult:
    signal: SignalBuffer
    success: bool
    estimates: List[LundebyEstimate] = field(default_factory=list)
    failed_bands: List[int] = field(default_factory=list)
    # per-band signals before the synthesis merge
    bands: Optional[np.ndarray] = None


def trunc_shape(y, plan: Optional[BandPlan] = None, seed: int = 0) -> TruncShapeResult:
    """Band-wise truncation at the Lundeby crosspoint and exponential tail resynthesis.

    In each band the measured signal is kept up to the truncation index and
    replaced afterwards by band-limited Gaussian noise with envelope
    ``exp(-lambda_hat (k - k0))``, scaled so that its power equals the
    regression line at ``k0`` (hard splice, no crossfade). The bands are then
    merged. A band whose analysis fails is passed through unchanged and the
    result is flagged unsuccessful.
    """
    if not isinstance(y, SignalBuffer):
        raise InvalidInputError("trunc_shape needs a SignalBuffer")
    plan = default_plan(y.sample_rate) if plan is None else plan
    if plan.sample_rate != y.sample_rate:
        raise InvalidInputError("band plan sample rate differs from the signal")
    n = len(y)
    bands = split_array(y.samples, plan)
    carriers = split_array(make_rng(seed, "trunc_shape").standard_normal(n), brickwall(plan))
    out = bands.copy()
    estimates, failed = [], []
    for b, band in enumerate(bands):
        est = lundeby(band, y.sample_rate)
        estimates.append(est)
        if not est.converged:
            failed.append(b)
            continue
        k0 = est.truncation_index
        lam = float(rt_to_lambda(est.rt_seconds, y.sample_rate))
        carrier = carriers[b]
        carrier_rms = np.sqrt(np.mean(carrier * carrier))
        k = np.arange(n - k0)
        out[b, k0:] = np.sqrt(est.line_power(k0)) * np.exp(-lam * k) * carrier[k0:] / carrier_rms
    return TruncShapeResult(SignalBuffer(merge_array(out, plan), y.sample_rate), not failed, estimates, failed, out)


# --------------------------------------------------------------------------
# maximum-likelihood solvers
# --------------------------------------------------------------------------


def _conv_setup(y, h):
    y = as_array(y)
    h = as_array(h)
    n = y.size - h.size + 1
    if n < 1:
        raise InvalidInputError("observation shorter than the kernel")
    return y, ConvOperator(h, n)


def _l2_solve(op, y, tol):
    def apply_a(v):
        return MLE_SHIFT * v + op.normal(v)

    x, _, _ = conjugate_gradient(apply_a, op.adjoint(y), rel_tol=tol.cg_rel_tol, max_iter=tol.cg_max_iter,
                                 precond=_precond(op, tol, MLE_SHIFT, 1.0))
    return x


def _exact_inner(tol: SolverTolerances, **overrides) -> SolverTolerances:
    # baselines solve their reweighted / linearised systems to the full CG
    # tolerance rather than taking truncated steps
    return replace(tol, inner_rel_tol=tol.cg_rel_tol, inner_max_iter=tol.cg_max_iter, **overrides)


def mle_l2_deconv(y, h, sigma_n: float, sample_rate: int = 8000,
                  tol: SolverTolerances = SolverTolerances()) -> SignalBuffer:
    """Least-squares deconvolution ``(H^T H + 1e-8 I) x = H^T y`` by preconditioned CG.

    ``sigma_n`` only scales the objective and does not change the minimiser;
    it is accepted for a uniform baseline signature.
    """
    if not sigma_n > 0:
        raise InvalidInputError("sigma_n must be > 0")
    y, op = _conv_setup(y, h)
    return SignalBuffer(_l2_solve(op, y, tol), sample_rate)


def mle_huber_deconv(y, h, sigma_n: float, laplace_b: float, sample_rate: int = 8000,
                     tol: SolverTolerances = SolverTolerances()) -> SignalBuffer:
    """Huber-loss deconvolution by IRLS, started from the least-squares solution."""
    if not (sigma_n > 0 and laplace_b > 0):
        raise InvalidInputError("sigma_n and laplace_b must be > 0")
    y, op = _conv_setup(y, h)
    x0 = _l2_solve(op, y, tol)
    x, _, _ = _irls(op, y, np.zeros(op.input_len), sigma_n, laplace_b, MLE_SHIFT * sigma_n ** -2, x0,
                    _exact_inner(tol))
    return SignalBuffer(x, sample_rate)


def mle_declip_gn(y, h, clip: ClipSpec, sigma_n: float, sample_rate: int = 8000,
                  tol: SolverTolerances = SolverTolerances(), iters: int = 30) -> SignalBuffer:
    """Data-fidelity-only declipping deconvolution by damped monotone Gauss-Newton from zero."""
    if not sigma_n > 0:
        raise InvalidInputError("sigma_n must be > 0")
    y, op = _conv_setup(y, h)
    gn_tol = _exact_inner(tol, gn_iters=int(iters))
    x, _ = _gauss_newton(op, clip, y, np.zeros(op.input_len), sigma_n, MLE_SHIFT * sigma_n ** -2,
                         np.zeros(op.input_len), gn_tol)
    return SignalBuffer(x, sample_rate)

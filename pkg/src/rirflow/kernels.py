"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``RIRFLOW_DISABLE_NUMBA`` is not
set to a truthy value. Both implementations are always importable under the
``*_numpy`` / ``*_numba`` names so they can be compared against each other.
"""

import math
import os

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("RIRFLOW_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is present, identity otherwise."""

    def decorator(func):
        if HAVE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return decorator


# --------------------------------------------------------------------------
# backward cumulative sums (Schroeder integral and decay basis)
# --------------------------------------------------------------------------


def reverse_cumsum_numpy(a):
    return np.cumsum(a[::-1])[::-1].copy()


@optional_njit(cache=True)
def reverse_cumsum_numba(a):
    n = a.shape[0]
    out = np.empty(n)
    acc = 0.0
    for i in range(n - 1, -1, -1):
        acc += a[i]
        out[i] = acc
    return out


def reverse_cumsum_sq_numpy(x):
    return np.cumsum((x * x)[::-1])[::-1].copy()


@optional_njit(cache=True)
def reverse_cumsum_sq_numba(x):
    n = x.shape[0]
    out = np.empty(n)
    acc = 0.0
    for i in range(n - 1, -1, -1):
        acc += x[i] * x[i]
        out[i] = acc
    return out


# --------------------------------------------------------------------------
# profile likelihood over a decay grid
# --------------------------------------------------------------------------


def grid_profile_numpy(x_sq, edc_sig, decay, psi, psi_sq_sum, t, noise_var, alpha_floor, alpha_ceil=np.inf):
    """Profile alpha^2 and the Gaussian log-likelihood for every grid row.

    ``x_sq``/``edc_sig`` are 1-D over the (possibly strided) index set;
    ``decay``/``psi`` are (L, n) matrices on the same index set.
    """
    t2 = t * t
    alpha_sq = (psi @ edc_sig) / (t2 * psi_sq_sum)
    alpha_sq = np.minimum(np.maximum(alpha_sq, alpha_floor), alpha_ceil)
    v = t2 * alpha_sq[:, None] * decay + noise_var
    if np.any(v <= 0.0):
        raise FloatingPointError("non-positive variance in profile likelihood")
    loglik = -0.5 * (x_sq.shape[0] * _LOG_2PI + np.log(v).sum(axis=1) + (x_sq / v).sum(axis=1))
    return alpha_sq, loglik


# fastmath lets the log/divide loop vectorise; without it numpy's SIMD log wins
@optional_njit(cache=True, fastmath=True, error_model="numpy")
def _grid_profile_loop(x_sq, edc_sig, decay, psi, psi_sq_sum, t, noise_var, alpha_floor, alpha_ceil):
    n_grid, n = decay.shape
    t2 = t * t
    alpha_sq = np.empty(n_grid)
    loglik = np.empty(n_grid)
    bad = False
    for j in range(n_grid):
        num = 0.0
        for k in range(n):
            num += psi[j, k] * edc_sig[k]
        a = num / (t2 * psi_sq_sum[j])
        if a < alpha_floor:
            a = alpha_floor
        if a > alpha_ceil:
            a = alpha_ceil
        alpha_sq[j] = a
        scale = t2 * a
        acc = 0.0
        v_min = np.inf
        for k in range(n):
            v = scale * decay[j, k] + noise_var
            v_min = min(v_min, v)
            acc += math.log(v) + x_sq[k] / v
        if v_min <= 0.0:
            bad = True
        loglik[j] = -0.5 * (n * 1.8378770664093453 + acc)
    return alpha_sq, loglik, bad


def grid_profile_numba(x_sq, edc_sig, decay, psi, psi_sq_sum, t, noise_var, alpha_floor, alpha_ceil=np.inf):
    alpha_sq, loglik, bad = _grid_profile_loop(
        x_sq, edc_sig, decay, psi, psi_sq_sum, float(t), float(noise_var), float(alpha_floor),
        float(alpha_ceil)
    )
    if bad:
        raise FloatingPointError("non-positive variance in profile likelihood")
    return alpha_sq, loglik


# --------------------------------------------------------------------------
# posterior-averaged Wiener gain
# --------------------------------------------------------------------------


def _shrink_numpy(d, t, noise_var):
    den = t * t * d + noise_var
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(den > 0.0, t * d / np.where(den > 0.0, den, 1.0), 1.0 / t)
    return beta


def posterior_gain_numpy(decay, alpha_sq, weights, t, noise_var):
    gain = np.zeros(decay.shape[1])
    for j in np.flatnonzero(weights):
        gain += weights[j] * _shrink_numpy(alpha_sq[j] * decay[j], t, noise_var)
    return gain


@optional_njit(cache=True)
def posterior_gain_numba(decay, alpha_sq, weights, t, noise_var):
    n_grid, n = decay.shape
    gain = np.zeros(n)
    t2 = t * t
    for j in range(n_grid):
        w = weights[j]
        if w == 0.0:
            continue
        a = alpha_sq[j]
        for k in range(n):
            d = a * decay[j, k]
            den = t2 * d + noise_var
            if den > 0.0:
                gain[k] += w * (t * d / den)
            else:
                gain[k] += w / t
    return gain


if USE_NUMBA:
    reverse_cumsum = reverse_cumsum_numba
    reverse_cumsum_sq = reverse_cumsum_sq_numba
    grid_profile = grid_profile_numba
    posterior_gain = posterior_gain_numba
else:
    reverse_cumsum = reverse_cumsum_numpy
    reverse_cumsum_sq = reverse_cumsum_sq_numpy
    grid_profile = grid_profile_numpy
    posterior_gain = posterior_gain_numpy


def backend():
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"

"""Measurement-aware refinement: proximal solves for the guided posterior mean
and covariance-shaped perturbations for every measurement model.

Each solver returns the mean ``mu`` of the local Gaussian approximation
``N(mu, Sigma)`` and, when requested, a draw ``kappa ~ N(0, Sigma)`` obtained
by solving ``Sigma^{-1} kappa = rhs`` with a right-hand side whose covariance is
``Sigma^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import fft as sp_fft

from .core import InvalidInputError, as_array, make_rng
from .forward_ops import ClipSpec, ConvOperator, MaskOperator, soft_clip, soft_clip_deriv

IRLS_RESIDUAL_FLOOR = 1e-10
# Tikhonov shift of the maximum-likelihood baselines, relative to sigma_n^-2
MLE_SHIFT = 1e-8


class SolverError(RuntimeError):
    """An iterative solve failed; carries the final residual and diagnostics."""

    def __init__(self, message, residual_norm=float("nan"), diagnostics=None):
        super().__init__(f"{message} (residual {residual_norm:.3e})")
        self.residual_norm = residual_norm
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SolverTolerances:
    cg_rel_tol: float = 1e-8
    cg_max_iter: int = 500
    # inner linear solves of IRLS and Gauss-Newton (and their kappa draws) are
    # truncated after inner_max_iter iterations
    inner_rel_tol: float = 1e-5
    inner_max_iter: int = 20
    irls_iters: int = 10
    irls_rel_tol: float = 1e-10
    gn_iters: int = 8
    gn_damping: float = 1e-3
    gn_max_halvings: int = 10
    preconditioner: str = "circulant"

    def __post_init__(self):
        for name in ("cg_rel_tol", "cg_max_iter", "inner_rel_tol", "inner_max_iter", "irls_iters", "gn_iters", "gn_damping"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.gn_max_halvings < 0 or self.irls_rel_tol < 0:
            raise InvalidInputError("gn_max_halvings and irls_rel_tol must be >= 0")
        if self.preconditioner not in ("none", "circulant"):
            raise InvalidInputError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class RefineResult:
    mu: np.ndarray
    kappa: np.ndarray
    diagnostics: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# conjugate gradients
# --------------------------------------------------------------------------


def conjugate_gradient(apply_a: Callable, b, x0=None, rel_tol: float = 1e-8, max_iter: int = 500,
                       precond: Optional[Callable] = None, truncate: bool = False):
    """Preconditioned CG for a symmetric positive definite operator.

    Stops when ``||b - A x|| <= rel_tol * ||b||``. Returns ``(x, iterations,
    relative_residual)``. Hitting ``max_iter`` raises :class:`SolverError`
    unless ``truncate`` is set, in which case the last iterate is returned.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), 0, 0.0
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_a(x) if x0 is not None else b.copy()
    target = rel_tol * b_norm
    r_norm = np.linalg.norm(r)
    if r_norm <= target:
        return x, 0, r_norm / b_norm
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = apply_a(p)
        pap = p @ ap
        if not pap > 0:
            raise SolverError("CG: operator is not positive definite", r_norm / b_norm)
        step = rz / pap
        x += step * p
        r -= step * ap
        r_norm = np.linalg.norm(r)
        if r_norm <= target:
            return x, it, r_norm / b_norm
        z = precond(r) if precond is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if truncate:
        return x, max_iter, r_norm / b_norm
    raise SolverError(f"CG did not converge in {max_iter} iterations", r_norm / b_norm,
                      {"iterations": max_iter})


def _circulant_preconditioner(op, prior_prec: float, data_prec: float):
    """Inverse of ``prior_prec I + data_prec H^T H`` with ``H`` approximated as circulant.

    Only convolution operators get one; for diagonal weights pass their mean as
    ``data_prec``.
    """
    if not isinstance(op, ConvOperator):
        return None
    n, nfft = op.input_len, op.nfft
    inv = 1.0 / (prior_prec + data_prec * op.spectrum_power())

    def apply(r):
        return sp_fft.irfft(sp_fft.rfft(r, nfft) * inv, nfft)[:n]

    return apply


def _precond(op, tol: SolverTolerances, prior_prec, data_prec):
    if tol.preconditioner == "circulant":
        return _circulant_preconditioner(op, prior_prec, data_prec)
    return None


def _inner_cg(apply_a, b, tol: SolverTolerances, precond, x0=None):
    # Truncated CG: every iterate lowers the IRLS majoriser (warm start) or is a
    # descent direction of the Gauss-Newton model, so stopping early keeps both
    # outer loops monotone.
    return conjugate_gradient(apply_a, b, x0=x0, rel_tol=tol.inner_rel_tol, max_iter=tol.inner_max_iter,
                              precond=precond, truncate=True)


def _check_positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise InvalidInputError(f"{name} must be > 0, got {value}")


def _rng(rng):
    return make_rng(0, "refine") if rng is None else make_rng(rng)


# --------------------------------------------------------------------------
# denoising: H = I, closed form
# --------------------------------------------------------------------------


def refine_denoise(y, x_hat, sigma_n: float, nu_t: float, rng=None, sample_kappa: bool = True) -> RefineResult:
    """Precision-weighted average of observation and prior estimate."""
    y = as_array(y)
    x_hat = as_array(x_hat)
    if y.shape != x_hat.shape:
        raise InvalidInputError("y and x_hat lengths differ")
    _check_positive(sigma_n=sigma_n, nu_t=nu_t)
    p_data = sigma_n ** -2
    p_prior = nu_t ** -2
    post_var = 1.0 / (p_data + p_prior)
    mu = post_var * (p_data * y + p_prior * x_hat)
    if sample_kappa:
        gen = _rng(rng)
        eps1 = gen.standard_normal(y.size)
        eps2 = gen.standard_normal(y.size)
        kappa = post_var * (eps1 / nu_t + eps2 / sigma_n)
    else:
        kappa = np.zeros_like(mu)
    return RefineResult(mu, kappa, {"posterior_var": post_var})


# --------------------------------------------------------------------------
# linear Gaussian: CG on (nu^-2 I + sigma^-2 H^T H)
# --------------------------------------------------------------------------


def refine_linear_cg(op, y, x_hat, sigma_n: float, nu_t: float, tol: SolverTolerances = SolverTolerances(),
                     rng=None, sample_kappa: bool = True) -> RefineResult:
    """Solve ``(nu^-2 I + sigma^-2 H^T H) mu = nu^-2 x_hat + sigma^-2 H^T y`` matrix-free."""
    y = as_array(y)
    x_hat = as_array(x_hat)
    _check_positive(sigma_n=sigma_n, nu_t=nu_t)
    if y.size != op.output_len or x_hat.size != op.input_len:
        raise InvalidInputError("y / x_hat lengths inconsistent with the operator")
    p_data = sigma_n ** -2
    p_prior = nu_t ** -2

    def apply_a(v):
        return p_prior * v + p_data * op.normal(v)

    precond = _precond(op, tol, p_prior, p_data)
    rhs = p_prior * x_hat + p_data * op.adjoint(y)
    mu, mu_iters, mu_res = conjugate_gradient(apply_a, rhs, x0=x_hat, rel_tol=tol.cg_rel_tol,
                                              max_iter=tol.cg_max_iter, precond=precond)
    diag = {"mu_iters": mu_iters, "mu_residual": mu_res}
    if sample_kappa:
        gen = _rng(rng)
        eps1 = gen.standard_normal(op.input_len)
        eps2 = gen.standard_normal(op.output_len)
        rhs_k = eps1 / nu_t + op.adjoint(eps2) / sigma_n
        kappa, k_iters, k_res = conjugate_gradient(apply_a, rhs_k, rel_tol=tol.cg_rel_tol,
                                                   max_iter=tol.cg_max_iter, precond=precond)
        diag.update(kappa_iters=k_iters, kappa_residual=k_res)
    else:
        kappa = np.zeros_like(mu)
    return RefineResult(mu, kappa, diag)


# --------------------------------------------------------------------------
# Huber loss via IRLS
# --------------------------------------------------------------------------


def huber_rho(r, delta: float):
    """``r^2 / 2`` for ``|r| <= delta``, ``delta (|r| - delta / 2)`` beyond."""
    a = np.abs(np.asarray(r, dtype=np.float64))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_weights(r, sigma_n: float, laplace_b: float):
    """IRLS weights: ``sigma_n^-2`` inside ``delta = sigma_n^2 / b``, ``1 / (b |r|)`` outside."""
    delta = sigma_n ** 2 / laplace_b
    a = np.abs(r)
    w = np.where(a <= delta, sigma_n ** -2, 1.0 / (laplace_b * np.maximum(a, IRLS_RESIDUAL_FLOOR)))
    if not np.all(np.isfinite(w)):
        raise SolverError("non-finite IRLS weights")
    return w


def huber_objective(op, y, x, x_center, sigma_n, laplace_b, prior_prec):
    delta = sigma_n ** 2 / laplace_b
    r = op.apply(x) - y
    return float(huber_rho(r, delta).sum() / sigma_n ** 2 + 0.5 * prior_prec * np.sum((x - x_center) ** 2))


def _irls(op, y, x_center, sigma_n, laplace_b, prior_prec, x0, tol: SolverTolerances):
    x = np.array(x0, dtype=np.float64)
    iters = []
    outer = 0
    for outer in range(1, tol.irls_iters + 1):
        w = huber_weights(op.apply(x) - y, sigma_n, laplace_b)

        def apply_a(v, w=w):
            return prior_prec * v + op.normal(v, w)

        rhs = prior_prec * x_center + op.adjoint(w * y)
        x_new, it, _ = _inner_cg(apply_a, rhs, tol, _precond(op, tol, prior_prec, float(w.mean())), x0=x)
        iters.append(it)
        change = np.linalg.norm(x_new - x)
        x = x_new
        if change <= tol.irls_rel_tol * max(np.linalg.norm(x), 1e-300):
            break
    w = huber_weights(op.apply(x) - y, sigma_n, laplace_b)
    return x, w, {"irls_outer": outer, "cg_iters": iters}


def refine_huber_irls(op, y, x_hat, sigma_n: float, laplace_b: float, nu_t: float,
                      tol: SolverTolerances = SolverTolerances(), rng=None, sample_kappa: bool = True) -> RefineResult:
    """Proximal step for the Huber data term ``sum rho_delta(Hx - y) / sigma_n^2``."""
    y = as_array(y)
    x_hat = as_array(x_hat)
    _check_positive(sigma_n=sigma_n, nu_t=nu_t, laplace_b=laplace_b)
    p_prior = nu_t ** -2
    mu, w, diag = _irls(op, y, x_hat, sigma_n, laplace_b, p_prior, x_hat, tol)
    if sample_kappa:
        gen = _rng(rng)
        eps1 = gen.standard_normal(op.input_len)
        eps2 = gen.standard_normal(op.output_len)

        def apply_a(v):
            return p_prior * v + op.normal(v, w)

        rhs_k = eps1 / nu_t + op.adjoint(np.sqrt(w) * eps2)
        kappa, k_iters, _ = _inner_cg(apply_a, rhs_k, tol, _precond(op, tol, p_prior, float(w.mean())))
        diag["kappa_iters"] = k_iters
    else:
        kappa = np.zeros_like(mu)
    return RefineResult(mu, kappa, diag)


# --------------------------------------------------------------------------
# inpainting: diagonal mask, elementwise closed form
# --------------------------------------------------------------------------


def refine_inpaint(mask: MaskOperator, y, x_hat, sigma_n: float, nu_t: float, rng=None,
                   sample_kappa: bool = True) -> RefineResult:
    y = as_array(y)
    x_hat = as_array(x_hat)
    if not (y.size == x_hat.size == mask.input_len):
        raise InvalidInputError("mask, y and x_hat lengths differ")
    _check_positive(sigma_n=sigma_n, nu_t=nu_t)
    p_data = sigma_n ** -2
    p_prior = nu_t ** -2
    keep = mask.keep
    post_var = np.where(keep, 1.0 / (p_data + p_prior), 1.0 / p_prior)
    mu = np.where(keep, (p_data * y + p_prior * x_hat) / (p_data + p_prior), x_hat)
    if sample_kappa:
        gen = _rng(rng)
        eps1 = gen.standard_normal(y.size)
        eps2 = gen.standard_normal(y.size)
        kappa = post_var * (eps1 / nu_t + np.where(keep, eps2, 0.0) / sigma_n)
    else:
        kappa = np.zeros_like(mu)
    return RefineResult(mu, kappa, {"observed": int(keep.sum())})


# --------------------------------------------------------------------------
# clipped deconvolution: damped Gauss-Newton
# --------------------------------------------------------------------------


def declip_objective(op, clip: ClipSpec, y, x, x_center, sigma_n, prior_prec):
    r = soft_clip(op.apply(x), clip) - y
    return float(0.5 * (r @ r) / sigma_n ** 2 + 0.5 * prior_prec * np.sum((x - x_center) ** 2))


def _gauss_newton(op, clip, y, x_center, sigma_n, prior_prec, x0, tol: SolverTolerances):
    p_data = sigma_n ** -2
    damping = tol.gn_damping * p_data
    x = np.array(x0, dtype=np.float64)
    obj = declip_objective(op, clip, y, x, x_center, sigma_n, prior_prec)
    history = [obj]
    stalled = False
    cg_iters = []
    for _ in range(tol.gn_iters):
        z = op.apply(x)
        slope = soft_clip_deriv(z, clip)
        resid = soft_clip(z, clip) - y
        grad = p_data * op.adjoint(slope * resid) + prior_prec * (x - x_center)
        jw = slope * slope

        def apply_a(v, jw=jw):
            return (prior_prec + damping) * v + p_data * op.normal(v, jw)

        precond = _precond(op, tol, prior_prec + damping, p_data * float(jw.mean()))
        step, it, _ = _inner_cg(apply_a, -grad, tol, precond)
        cg_iters.append(it)
        scale = 1.0
        accepted = False
        for _ in range(tol.gn_max_halvings + 1):
            cand = x + scale * step
            cand_obj = declip_objective(op, clip, y, cand, x_center, sigma_n, prior_prec)
            if cand_obj <= obj:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            stalled = True
            break
        improvement = obj - cand_obj
        x, obj = cand, cand_obj
        history.append(obj)
        if improvement <= 1e-14 * max(abs(obj), 1e-300):
            break
    return x, {"objective": history, "stalled": stalled, "cg_iters": cg_iters}


def refine_declip_gn(op, clip: ClipSpec, y, x_hat, sigma_n: float, nu_t: float,
                     tol: SolverTolerances = SolverTolerances(), rng=None, sample_kappa: bool = True,
                     x0=None) -> RefineResult:
    """Proximal step for ``||C(Hx) - y||^2 / (2 sigma_n^2)`` by damped, monotone Gauss-Newton.

    A step is accepted only if the objective does not increase (up to
    ``gn_max_halvings`` halvings); if no step is accepted the current iterate is
    returned with ``diagnostics["stalled"] = True``.
    """
    y = as_array(y)
    x_hat = as_array(x_hat)
    _check_positive(sigma_n=sigma_n, nu_t=nu_t)
    p_prior = nu_t ** -2
    p_data = sigma_n ** -2
    start = x_hat if x0 is None else as_array(x0)
    mu, diag = _gauss_newton(op, clip, y, x_hat, sigma_n, p_prior, start, tol)
    if sample_kappa:
        gen = _rng(rng)
        eps1 = gen.standard_normal(op.input_len)
        eps2 = gen.standard_normal(op.output_len)
        slope = soft_clip_deriv(op.apply(mu), clip)
        jw = slope * slope

        def apply_a(v):
            return p_prior * v + p_data * op.normal(v, jw)

        rhs_k = eps1 / nu_t + op.adjoint(slope * eps2) / sigma_n
        kappa, k_iters, _ = _inner_cg(apply_a, rhs_k, tol, _precond(op, tol, p_prior, p_data * float(jw.mean())))
        diag["kappa_iters"] = k_iters
    else:
        kappa = np.zeros_like(mu)
    return RefineResult(mu, kappa, diag)

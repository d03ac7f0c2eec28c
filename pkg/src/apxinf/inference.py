"""Pivots, p-values, confidence intervals and the selective MLE.

Everything here consumes a grid of t values with log h-hat per point.
The pivot at mean parameter b is the upper tail mass of the tilted grid
weights

    log w_t = -(t - b)^2 / (2 sigma^2) + log h-hat(t),

summed inclusively from the grid point equal to the observed statistic,
via log-sum-exp.  The pivot is nondecreasing in b, which makes the
interval inversion a pair of bisections.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtri

from .exceptions import DegenerateGrid, NonConvergence
from .volume import grid_log_h

B_SCAN_SD = 20.0  # scan clamp: beyond this the tilt underflows anyway


def make_grid(T_obs, sigma_j, n_points=801, width_sd=12.0):
    """Symmetric grid around T_obs containing it exactly (odd count)."""
    if n_points < 3:
        raise ValueError("need at least 3 grid points")
    if n_points % 2 == 0:
        n_points += 1
    half = n_points // 2
    offsets = (np.arange(n_points) - half) * (width_sd * sigma_j / half)
    return T_obs + offsets


def approximate_pivot(T_obs, b, grid, log_h, sigma_j):
    """Upper-tail probability of T_obs under the tilted grid law at mean b."""
    log_w = -0.5 * ((grid - b) / sigma_j) ** 2 + log_h
    if not np.any(np.isfinite(log_w)):
        raise DegenerateGrid("all grid weights underflowed at b=%g" % b)
    num_mask = grid >= T_obs
    if not num_mask.any():
        raise DegenerateGrid("observed statistic above the grid")
    den = logsumexp(log_w)
    num = logsumexp(log_w[num_mask])
    return float(np.exp(num - den))


def two_sided_pvalue(p_hat):
    return 2.0 * min(p_hat, 1.0 - p_hat)


def invert_interval(T_obs, grid, log_h, sigma_j, alpha, flags=None,
                    tol_factor=1e-6):
    """Acceptance region {b : two-sided pivot p-value > alpha}.

    Endpoints solve pivot = alpha/2 and 1 - alpha/2 by bisection
    (the pivot is monotone in b).  Roots outside the +-20 sigma scan are
    clamped, with a note appended to flags when provided.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    lo_scan = T_obs - B_SCAN_SD * sigma_j
    hi_scan = T_obs + B_SCAN_SD * sigma_j
    tol = tol_factor * sigma_j

    def pivot(b):
        return approximate_pivot(T_obs, b, grid, log_h, sigma_j)

    def root(target, which):
        lo, hi = lo_scan, hi_scan
        if pivot(lo) > target:
            if flags is not None:
                flags.append("scan_clamped_%s" % which)
            return lo
        if pivot(hi) < target:
            if flags is not None:
                flags.append("scan_clamped_%s" % which)
            return hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if pivot(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return root(alpha / 2.0, "lo"), root(1.0 - alpha / 2.0, "hi")


def _tilted_mean(T_obs, b, grid, log_h, sigma_j):
    log_w = (-0.5 * grid**2 + b * grid) / sigma_j**2 + log_h
    log_w -= np.max(log_w)
    w = np.exp(log_w)
    return float(w @ grid / np.sum(w))


def selective_mle(T_obs, grid, log_h, sigma_j, eta=None, tol=None,
                  max_iter=10_000):
    """Gradient descent on the negative log pseudo-likelihood.

    Stops when the update and the estimating-equation residual (the
    tilted mean minus T_obs) both fall below tolerance.  The default
    step eta = sigma^2 turns each update into a fixed-point step on the
    estimating equation.
    """
    var = sigma_j**2
    if eta is None:
        eta = var
    if tol is None:
        tol = 1e-8 * sigma_j
    resid_tol = 1e-8 * sigma_j

    def objective(b):
        return float(-T_obs * b / var
                     + logsumexp((-0.5 * grid**2 + b * grid) / var + log_h))

    b = T_obs
    f = objective(b)
    for _ in range(max_iter):
        resid = _tilted_mean(T_obs, b, grid, log_h, sigma_j) - T_obs
        grad = resid / var
        step = eta
        while True:
            b_new = b - step * grad
            f_new = objective(b_new)
            if f_new <= f + 1e-12 or step < 1e-12 * eta:
                break
            step *= 0.5
        delta = abs(b_new - b)
        b, f = b_new, f_new
        if delta < tol and abs(resid) < resid_tol:
            return b
    raise NonConvergence("selective MLE hit iteration cap",
                         best_point=b, best_value=f)


def naive_interval(T_obs, sigma_j, alpha):
    z = ndtri(1.0 - alpha / 2.0)
    return T_obs - z * sigma_j, T_obs + z * sigma_j


def naive_pivot(T_obs, b, sigma_j):
    """Untruncated Gaussian pivot, same orientation as the selective one."""
    return float(np.exp(log_ndtr((b - T_obs) / sigma_j)))


@dataclass
class InferenceRecord:
    """Per-coefficient selective and naive inference summary."""

    j: int
    T_obs: float
    sigma_j: float
    b_scan: np.ndarray
    pivot_scan: np.ndarray
    pvalue_two_sided: float
    ci: tuple
    mle: float
    naive_ci: tuple
    naive_estimate: float
    flags: list = field(default_factory=list)


def infer_target(ctx, alpha=0.1, grid_points=801, grid_width_sd=12.0,
                 b_null=0.0, n_scan=41):
    """Full per-coefficient pipeline: grid the volume approximation, then
    compute the pivot table, p-value, interval and selective MLE.

    Returns (record, grid_approx); the grid approximation is kept so
    callers can evaluate pivots at other mean values (e.g. a known
    truth) without re-solving.
    """
    flags = []
    grid = make_grid(ctx.T_obs, ctx.sigma_j, grid_points, grid_width_sd)
    approx = grid_log_h(ctx, grid)
    if approx.n_flagged():
        flags.append("grid_nonconverged:%d" % approx.n_flagged())

    b_scan = np.linspace(ctx.T_obs - B_SCAN_SD * ctx.sigma_j,
                         ctx.T_obs + B_SCAN_SD * ctx.sigma_j, n_scan)
    pivot_scan = np.array([
        approximate_pivot(ctx.T_obs, b, approx.grid, approx.log_h, ctx.sigma_j)
        for b in b_scan])

    p_null = approximate_pivot(ctx.T_obs, b_null, approx.grid, approx.log_h,
                               ctx.sigma_j)
    ci = invert_interval(ctx.T_obs, approx.grid, approx.log_h, ctx.sigma_j,
                         alpha, flags=flags)
    try:
        mle = selective_mle(ctx.T_obs, approx.grid, approx.log_h, ctx.sigma_j)
    except NonConvergence as exc:
        mle = float(exc.best_point)
        flags.append("mle_nonconverged")

    record = InferenceRecord(
        j=ctx.j,
        T_obs=ctx.T_obs,
        sigma_j=ctx.sigma_j,
        b_scan=b_scan,
        pivot_scan=pivot_scan,
        pvalue_two_sided=two_sided_pvalue(p_null),
        ci=ci,
        mle=mle,
        naive_ci=naive_interval(ctx.T_obs, ctx.sigma_j, alpha),
        naive_estimate=ctx.T_obs,
        flags=flags,
    )
    return record, approx

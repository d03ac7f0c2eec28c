"""Smooth approximation of the selection probability on a grid.

For a target value t the log selection probability is approximated by
minus the minimum of

    R(A_E t + B_E o + c_E) - H(alpha(o; t)) + barrier(o)

over sign-feasible o, where R is the randomization negative log density
(constants dropped), H the log probability of the inactive-subgradient
cube, alpha(o; t) = A_mE t + B_mE o + c_mE, and the barrier is
log(1 + 1/(s o)) coordinate-wise.  The cube probabilities are evaluated
in log space so excursions of many scales beyond the cube stay finite.

The minimization is a damped Newton descent with Armijo backtracking
(the Hessian is analytic and |E| x |E|).  grid_log_h runs all grid
points as one vectorized batch; solve_inner is the single-point variant.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .exceptions import DomainViolation, GuardExceeded, NonConvergence
from .selector import GAUSSIAN

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _gauss_interval_terms(lo, hi, need_ratios=True):
    """log(Phi(hi) - Phi(lo)) with endpoint pdf/mass ratios and the
    pdf-derivative term fd = lo*r_lo - hi*r_hi used by curvatures.

    Reflected so the interval midpoint sits in the left tail, where
    log_ndtr carries the magnitude; stable for |lo|, |hi| far beyond 37.
    """
    refl = (lo + hi) > 0
    a = np.where(refl, -hi, lo)
    b = np.where(refl, -lo, hi)
    la = log_ndtr(a)
    lb = log_ndtr(b)
    with np.errstate(divide="ignore"):
        logdiff = lb + np.log(-np.expm1(np.minimum(la - lb, -1e-300)))
    if not need_ratios:
        return logdiff, None, None, None
    r_a = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - logdiff)
    r_b = np.exp(-0.5 * b * b - _LOG_SQRT_2PI - logdiff)
    r_lo = np.where(refl, r_b, r_a)
    r_hi = np.where(refl, r_a, r_b)
    # a r_a - b r_b is invariant under the reflection
    return logdiff, r_lo, r_hi, a * r_a - b * r_b


def _laplace_interval_terms(lo, hi, need_ratios=True):
    """Same contract as the Gaussian version for the standard Laplace CDF."""
    refl = (lo + hi) > 0
    a = np.where(refl, -hi, lo)
    b = np.where(refl, -lo, hi)
    # after reflection a <= b and a <= 0
    both_neg = b <= 0
    b_pos = np.maximum(b, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_case = b - math.log(2.0) + np.log(-np.expm1(np.minimum(a - b, -1e-300)))
        mix_case = np.log(-0.5 * np.expm1(a) - 0.5 * np.expm1(-b_pos))
    logdiff = np.where(both_neg, neg_case, mix_case)
    if not need_ratios:
        return logdiff, None, None, None
    r_a = np.exp(-np.abs(a) - math.log(2.0) - logdiff)
    r_b = np.exp(-np.abs(b) - math.log(2.0) - logdiff)
    r_lo = np.where(refl, r_b, r_a)
    r_hi = np.where(refl, r_a, r_b)
    return logdiff, r_lo, r_hi, np.sign(a) * r_a - np.sign(b) * r_b


def _interval_terms(lo, hi, kind, need_ratios=True):
    if kind == GAUSSIAN:
        return _gauss_interval_terms(lo, hi, need_ratios)
    return _laplace_interval_terms(lo, hi, need_ratios)


def _cube_value(alpha, lam, rnd):
    """Summed cube log-probability only; alpha (..., m), lam broadcastable."""
    if alpha.shape[-1] == 0:
        return np.zeros(alpha.shape[:-1])
    s = rnd.scale
    lo = (alpha - lam) / s
    hi = (alpha + lam) / s
    logdiff = _interval_terms(lo, hi, rnd.kind, need_ratios=False)[0]
    return np.sum(logdiff, axis=-1)


def _cube_full(alpha, lam, rnd):
    """Cube log-probability with first and second derivatives.

    Coordinate i contributes log(F((lam + alpha_i)/s) - F((-lam + alpha_i)/s))
    with F the standard CDF of the randomization kind and s its scale.
    Returns (value, d/dalpha, d/dlam, d2/dalpha2 per coordinate, d2/dlam2);
    second derivatives are clamped nonpositive (the cube measure is
    log-concave in both the shift and the half-width).  All outputs keep
    the leading batch shape of alpha.
    """
    m = alpha.shape[-1]
    if m == 0:
        batch = alpha.shape[:-1]
        zero = np.zeros(batch)
        return zero, np.zeros(alpha.shape), zero.copy(), np.zeros(alpha.shape), zero.copy()
    s = rnd.scale
    lo = (alpha - lam) / s
    hi = (alpha + lam) / s
    logdiff, r_lo, r_hi, fd = _interval_terms(lo, hi, rnd.kind)
    grad_alpha = (r_hi - r_lo) / s
    dval_dlam = np.sum(r_hi + r_lo, axis=-1) / s
    curv_alpha = np.minimum(fd - (r_hi - r_lo) ** 2, 0.0) / s**2
    curv_lam = np.sum(np.minimum(fd - (r_hi + r_lo) ** 2, 0.0), axis=-1) / s**2
    return np.sum(logdiff, axis=-1), grad_alpha, dval_dlam, curv_alpha, curv_lam


def cube_log_prob(alpha, lam, rnd):
    """Log probability of the randomization lying in the shifted cube.

    Returns the value and its exact gradient in alpha.  m = 0 gives
    (0.0, empty); the function is total on lam > 0.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size > 0 and not lam > 0:
        raise ValueError("lam must be positive")
    value, grad = _cube_full(alpha, lam, rnd)[:2]
    return float(value), grad


@dataclass(frozen=True)
class VolumeProblem:
    """One inner optimization: a target context pinned at a grid value."""

    ctx: object
    t: float


class _BatchObjective:
    """Objective pieces for a batch of grid values evaluated at once.

    O has shape (G, k); all outputs carry the leading G axis.  The
    single-point interface passes G = 1.
    """

    def __init__(self, ctx, ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        self.ctx = ctx
        self.act_base = ts[:, None] * ctx.A_jE + ctx.c_jE        # (G, k)
        self.inact_base = ts[:, None] * ctx.A_jmE + ctx.c_jmE    # (G, m)
        self.s = ctx.s_E
        self.rnd = ctx.randomization
        self.k = ctx.B_E.shape[1]
        # stepwise: B_mE is all zero, so alpha is constant in o
        self._static_alpha = ctx.variable_cube or not ctx.B_mE.any()
        if self.rnd.kind == GAUSSIAN:
            self._quad_hess = ctx.B_E.T @ ctx.B_E / self.rnd.scale**2
        else:
            self._quad_hess = None  # curvature proxy built per point

    def default_init(self):
        if self.ctx.variable_cube:
            start = self.ctx.lam_obs
            if not np.isfinite(start) or start <= 0:
                start = 1.0
            return np.array([start])
        return self.s.astype(float).copy()

    def _check_domain(self, O, strict):
        g = O * self.s
        feasible = np.min(g, axis=-1) > 0
        if not feasible.all():
            if strict:
                raise DomainViolation("need sign(o_E) = s_E strictly")
            # infeasible probe rows get +inf and fail the line search
            g = np.where(feasible[:, None], g, 1.0)
        return g, feasible

    def _pieces(self, O, rows=None):
        act = self.act_base if rows is None else self.act_base[rows]
        inact = self.inact_base if rows is None else self.inact_base[rows]
        v = act + O @ self.ctx.B_E.T
        if self._static_alpha:
            alpha = inact
        else:
            alpha = inact + O @ self.ctx.B_mE.T
        lam = np.abs(O[:, 0]) if self.ctx.variable_cube else self.ctx.lam
        return v, alpha, lam

    def value(self, O, rows=None):
        g, feasible = self._check_domain(O, strict=False)
        v, alpha, lam = self._pieces(O, rows)
        if self.rnd.kind == GAUSSIAN:
            val = 0.5 * np.sum(v * v, axis=-1) / self.rnd.scale**2
        else:
            val = np.sum(np.abs(v), axis=-1) / self.rnd.scale
        val = val - _cube_value(alpha, lam if np.isscalar(lam) else lam[:, None],
                                self.rnd)
        val = val + np.sum(np.log1p(1.0 / g), axis=-1)
        return np.where(feasible, val, np.inf)

    def value_grad_hess(self, O, rows=None, strict=True):
        ctx = self.ctx
        g, _ = self._check_domain(O, strict=strict)
        v, alpha, lam = self._pieces(O, rows)
        G = O.shape[0]
        scale = self.rnd.scale
        if self.rnd.kind == GAUSSIAN:
            val = 0.5 * np.sum(v * v, axis=-1) / scale**2
            grad = (v / scale**2) @ ctx.B_E
            hess = np.broadcast_to(self._quad_hess, (G, self.k, self.k)).copy()
        else:
            val = np.sum(np.abs(v), axis=-1) / scale
            grad = (np.sign(v) / scale) @ ctx.B_E
            # |v|/b has no curvature; a pseudo-Huber proxy lets the Newton
            # step see the kink walls (value/grad stay exact)
            mu = 1e-3 * scale
            w = mu * mu / (v * v + mu * mu) ** 1.5 / scale
            hess = np.einsum("gm,mi,mj->gij", w, ctx.B_E, ctx.B_E, optimize=True)

        h_val, h_ga, h_dlam, h_ca, h_clam = _cube_full(
            alpha, lam if np.isscalar(lam) else lam[:, None], self.rnd)
        val = val - h_val
        if ctx.variable_cube:
            grad[:, 0] -= h_dlam
            hess[:, 0, 0] -= h_clam
        elif not self._static_alpha:
            grad -= h_ga @ ctx.B_mE
            hess -= np.einsum("gm,mi,mj->gij", h_ca, ctx.B_mE, ctx.B_mE,
                              optimize=True)

        val = val + np.sum(np.log1p(1.0 / g), axis=-1)
        grad = grad - self.s / (g * (1.0 + g))
        diag = (2.0 * g + 1.0) / (g * (1.0 + g)) ** 2
        idx = np.arange(self.k)
        hess[:, idx, idx] += diag
        return val, grad, hess


def selective_objective(prob, o_E):
    """Evaluate the barrier-smoothed objective and its exact gradient."""
    o_E = np.asarray(o_E, dtype=float)
    obj = _BatchObjective(prob.ctx, [prob.t])
    val, grad, _ = obj.value_grad_hess(o_E[None, :])
    return float(val[0]), grad[0]


def _newton_direction(hess, grad):
    """Batched Newton directions with a steepest-descent fallback."""
    try:
        d = np.linalg.solve(hess, -grad[..., None])[..., 0]
    except np.linalg.LinAlgError:
        idx = np.arange(hess.shape[-1])
        bumped = hess.copy()
        bumped[..., idx, idx] += 1e-8 * (1.0 + np.abs(bumped[..., idx, idx]))
        try:
            d = np.linalg.solve(bumped, -grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            return -grad.copy(), -np.sum(grad * grad, axis=-1)
    bad = ~np.isfinite(d).all(axis=-1)
    slope = np.sum(grad * d, axis=-1)
    bad |= ~(slope < 0)
    if bad.any():
        d[bad] = -grad[bad]
        slope[bad] = -np.sum(grad[bad] * grad[bad], axis=-1)
    return d, slope


def _feasible_step_cap(s, O, d):
    """Largest step keeping s (O + t d) > 0, shrunk to 99% of the gap."""
    sd = d * s
    ratio = np.where(sd < 0, (O * s) / np.where(sd < 0, -sd, 1.0), np.inf)
    return 0.99 * ratio.min(axis=-1)


def _batch_descend(obj, O, max_iter, grad_tol, step_tol, armijo=1e-4):
    """Damped Newton descent over a batch of independent problems.

    Returns (O_star, values, converged).  A stalled line search
    (subgradient kink under Laplace randomization, or the float limit)
    counts as converged at the best iterate; rows still moving at the
    iteration cap come back with converged = False.
    """
    G = O.shape[0]
    f, grad, hess = obj.value_grad_hess(O)
    best_O, best_f = O.copy(), f.copy()
    t_prev = np.ones(G)
    alive = np.ones(G, dtype=bool)
    for _ in range(max_iter):
        alive &= np.max(np.abs(grad), axis=-1) >= grad_tol
        rows = np.nonzero(alive)[0]
        if rows.size == 0:
            return best_O, best_f, np.ones(G, dtype=bool)
        d, slope = _newton_direction(hess[rows], grad[rows])
        t = np.minimum(1.0, np.minimum(4.0 * t_prev[rows],
                                       _feasible_step_cap(obj.s, O[rows], d)))
        dnorm = np.sqrt(np.sum(d * d, axis=-1))
        accepted = np.zeros(rows.size, dtype=bool)
        f_cand = np.empty(rows.size)
        O_cand = np.empty_like(d)
        live = t * dnorm >= step_tol
        while live.any():
            idx = np.nonzero(live)[0]
            O_try = O[rows[idx]] + t[idx, None] * d[idx]
            f_try = obj.value(O_try, rows=rows[idx])
            ok = f_try <= f[rows[idx]] + armijo * t[idx] * slope[idx]
            take = idx[ok]
            accepted[take] = True
            O_cand[take] = O_try[ok]
            f_cand[take] = f_try[ok]
            live[take] = False
            rest = idx[~ok]
            t[rest] *= 0.5
            live[rest] = t[rest] * dnorm[rest] >= step_tol
        # stalled rows are done (kink or float limit): keep best iterate
        alive[rows[~accepted]] = False
        moved = rows[accepted]
        if moved.size:
            t_prev[moved] = t[accepted]
            O[moved] = O_cand[accepted]
            f_new, g_new, h_new = obj.value_grad_hess(O[moved], rows=moved)
            f[moved] = f_new
            grad[moved] = g_new
            hess[moved] = h_new
            better = np.nonzero(f_new < best_f[moved])[0]
            if better.size:
                best_O[moved[better]] = O[moved[better]]
                best_f[moved[better]] = f_new[better]
    return best_O, best_f, ~alive


def solve_inner(prob, init=None, max_iter=500, grad_tol=1e-8, step_tol=1e-10):
    """Minimize the smoothed objective at one grid value.

    Returns (o_star, log_h) with log_h = minus the minimized value,
    always negative.  For the stepwise variable-cube problem the cold
    start tries several spread magnitudes.  Raises NonConvergence (with
    the best iterate attached) if no start finishes under the cap.
    """
    ctx = prob.ctx
    obj = _BatchObjective(ctx, [prob.t])
    if init is not None:
        starts = [np.asarray(init, dtype=float)]
    elif ctx.variable_cube:
        base = obj.default_init()[0]
        starts = [np.array([f * base]) for f in (1.0, 0.1, 0.5, 2.0, 5.0)]
    else:
        starts = [obj.default_init()]

    best = None
    any_converged = False
    for start in starts:
        O, f, conv = _batch_descend(obj, start[None, :].copy(), max_iter,
                                    grad_tol, step_tol)
        any_converged |= bool(conv[0])
        if best is None or f[0] < best[1]:
            best = (O[0], float(f[0]))
    if not any_converged:
        raise NonConvergence("inner solve hit iteration cap",
                             best_point=best[0], best_value=-best[1])
    return best[0], -best[1]


@dataclass
class GridApprox:
    """Grid of t values with log h-hat and the per-point minimizers."""

    grid: np.ndarray
    log_h: np.ndarray
    argmins: np.ndarray
    converged: np.ndarray

    def n_flagged(self):
        return int(np.sum(~self.converged))


def grid_log_h(ctx, grid, max_iter=500, grad_tol=1e-8, step_tol=1e-10):
    """Solve the inner problem at every grid value as one batch.

    The batch is started from the middle point's solution (the classical
    warm start); points that hit the iteration cap keep their best
    iterate and are flagged.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be nonempty and strictly increasing")
    mid = grid.size // 2
    o_mid, _ = solve_inner(VolumeProblem(ctx, float(grid[mid])),
                           max_iter=max_iter, grad_tol=grad_tol,
                           step_tol=step_tol)
    obj = _BatchObjective(ctx, grid)
    O0 = np.tile(o_mid, (grid.size, 1))
    O_star, values, converged = _batch_descend(obj, O0, max_iter,
                                               grad_tol, step_tol)
    return GridApprox(grid=grid, log_h=-values, argmins=O_star,
                      converged=converged)


MC_MAX_P = 12
MC_MAX_ACTIVE = 3


def _mc_proposal_means(ctx, t):
    """Exponential proposal means: cover the active-part optimum generously."""
    k = ctx.B_E.shape[1]
    scale = ctx.randomization.scale
    diag = np.abs(np.diag(ctx.B_E)) + 1e-12
    means = np.maximum(3.0 * scale / diag, 0.5)
    try:
        center = np.linalg.solve(ctx.B_E, -(ctx.A_jE * t + ctx.c_jE))
    except np.linalg.LinAlgError:
        center = np.zeros(k)
    return np.maximum(means, 2.0 * np.maximum(ctx.s_E * center, 0.0))


def _mc_guard(ctx):
    k = ctx.B_E.shape[1]
    m = ctx.c_jmE.size
    if k + m > MC_MAX_P or k > MC_MAX_ACTIVE:
        raise GuardExceeded("oracle limited to p <= %d, |E| <= %d"
                            % (MC_MAX_P, MC_MAX_ACTIVE))


def _mc_draw(ctx, t, n_samples, rng):
    """Draw proposal samples; returns (o_act, o_inact, log proposal density)."""
    k = ctx.B_E.shape[1]
    m = ctx.c_jmE.size
    if ctx.variable_cube:
        mean = 2.0 * (ctx.lam_obs if np.isfinite(ctx.lam_obs) else 1.0)
        lam_s = rng.exponential(mean, n_samples)
        o_act = lam_s[:, None]
        log_q = -lam_s / mean - math.log(mean)
        o_inact = (rng.random((n_samples, m)) * 2.0 - 1.0) * lam_s[:, None]
        log_q = log_q - m * np.log(2.0 * lam_s)
    else:
        means = _mc_proposal_means(ctx, t)
        mags = rng.exponential(1.0, (n_samples, k)) * means
        o_act = mags * ctx.s_E
        log_q = np.sum(-mags / means - np.log(means), axis=1)
        if m:
            o_inact = (rng.random((n_samples, m)) * 2.0 - 1.0) * ctx.lam
            log_q = log_q - m * math.log(2.0 * ctx.lam)
        else:
            o_inact = np.zeros((n_samples, 0))
    return o_act, o_inact, log_q


def mc_volume_oracle(ctx, t, n_samples, seed):
    """Importance-sampling estimate of the exact selection volume at t.

    Samples the active block from sign-matched exponentials and the
    inactive block uniformly on its cube; small instances only.
    Returns (estimate, stderr).
    """
    _mc_guard(ctx)
    rng = np.random.default_rng(seed)
    o_act, o_inact, log_q = _mc_draw(ctx, t, n_samples, rng)
    v_act = t * ctx.A_jE + o_act @ ctx.B_E.T + ctx.c_jE
    v_inact = t * ctx.A_jmE + o_act @ ctx.B_mE.T + ctx.c_jmE + o_inact
    v = np.concatenate([v_act, v_inact], axis=1)
    log_w = ctx.randomization.log_density_full(v) - log_q
    shift = float(np.max(log_w))
    w = np.exp(log_w - shift)
    est = float(np.mean(w))
    se = float(np.std(w) / math.sqrt(n_samples))
    return math.exp(shift) * est, math.exp(shift) * se


def mc_log_volume_curve(ctx, grid, n_samples, seed, chunk=200_000):
    """Oracle log-volume along a whole grid from one shared sample set.

    Gaussian randomization only: the per-sample quadratic decomposes in t,
    so the cost is O(n_samples) per grid point after one pass.
    """
    _mc_guard(ctx)
    if ctx.randomization.kind != GAUSSIAN:
        raise GuardExceeded("volume curve oracle supports gaussian only")
    grid = np.asarray(grid, dtype=float)
    rng = np.random.default_rng(seed)
    tau = ctx.randomization.scale
    A = np.concatenate([ctx.A_jE, ctx.A_jmE])
    a2 = float(A @ A)
    p = A.size

    t_ref = float(np.median(grid))
    done = 0
    q0_parts, q1_parts, lq_parts = [], [], []
    while done < n_samples:
        nb = min(chunk, n_samples - done)
        o_act, o_inact, log_q = _mc_draw(ctx, t_ref, nb, rng)
        u_act = o_act @ ctx.B_E.T + ctx.c_jE
        u_inact = o_act @ ctx.B_mE.T + ctx.c_jmE + o_inact
        u = np.concatenate([u_act, u_inact], axis=1)
        q0_parts.append(np.sum(u * u, axis=1))
        q1_parts.append(u @ A)
        lq_parts.append(log_q)
        done += nb
    q0 = np.concatenate(q0_parts)
    q1 = np.concatenate(q1_parts)
    log_q = np.concatenate(lq_parts)
    const = -p * math.log(math.sqrt(2.0 * math.pi) * tau)
    out = np.empty(grid.size)
    for i, t in enumerate(grid):
        log_w = -(q0 + 2.0 * t * q1 + t * t * a2) / (2.0 * tau**2) + const - log_q
        out[i] = logsumexp(log_w) - math.log(n_samples)
    return out

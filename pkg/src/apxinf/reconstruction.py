"""Refit statistics and the affine reconstruction of the randomization.

The drawn randomization satisfies (exactly for squared error, to Taylor
error for logistic)

    omega = A0 D + B_cols beta_E_hat + (0; u_{-E}) + gamma

in the partitioned coordinate order (E rows first, then the complement).
Per-target decomposition splits A0 D into a component along the target
statistic and an observed remainder, and partitions every block into
active / inactive rows.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import Separation, SingularDesign
from .selector import FORWARD_STEPWISE, LOGISTIC, RandomizationSpec

COND_LIMIT = 1e12


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_conditioning(G):
    if np.linalg.cond(G) > COND_LIMIT:
        raise SingularDesign("active design is numerically singular")


def refit_unpenalized(data, E):
    """Unpenalized, non-randomized refit on the active columns.

    Squared error (and forward stepwise): least squares.  Logistic:
    Newton iterations until the score X_E'(y - pi) has sup-norm below
    1e-10.
    """
    XE = data.X[:, E]
    if data.loss_kind == LOGISTIC:
        return _logistic_refit(XE, data.y)
    G = XE.T @ XE
    _check_conditioning(G)
    return np.linalg.solve(G, XE.T @ data.y)


def _logistic_refit(XE, y, tol=1e-10, max_iter=100):
    beta = np.zeros(XE.shape[1])
    score_norm = np.inf

    def norm_at(b):
        return float(np.max(np.abs(XE.T @ (y - _expit(XE @ b)))))

    for _ in range(max_iter):
        pi = _expit(XE @ beta)
        score = XE.T @ (y - pi)
        score_norm = float(np.max(np.abs(score)))
        if score_norm < tol:
            return beta
        W = pi * (1.0 - pi)
        if float(np.max(np.abs(beta))) > 1e3:
            raise Separation("diverging logistic refit")
        H = XE.T @ (W[:, None] * XE)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            raise SingularDesign("singular logistic information matrix")
        # halve on score increase to keep Newton from overshooting
        t = 1.0
        while norm_at(beta + t * step) > score_norm and t > 1e-8:
            t *= 0.5
        beta = beta + t * step
    raise Separation("logistic refit did not converge")


def build_data_vector(data, E, beta_bar_E):
    """Data vector in partitioned order: (refit coefficients, inactive scores).

    Forward stepwise uses the raw score vector X'y instead.
    """
    not_E = np.setdiff1d(np.arange(data.X.shape[1]), E)
    XmE = data.X[:, not_E]
    if data.loss_kind == FORWARD_STEPWISE:
        scores = data.X.T @ data.y
        return np.concatenate([scores[E], scores[not_E]])
    XE = data.X[:, E]
    if data.loss_kind == LOGISTIC:
        resid = data.y - _expit(XE @ beta_bar_E)
    else:
        resid = data.y - XE @ beta_bar_E
    return np.concatenate([beta_bar_E, XmE.T @ resid])


@dataclass
class KKTMap:
    """Affine reconstruction blocks, partitioned order (E first)."""

    A0: np.ndarray
    B_cols: np.ndarray
    gamma: np.ndarray
    E: np.ndarray
    not_E: np.ndarray
    s_E: np.ndarray
    D_obs: np.ndarray
    beta_bar_E: np.ndarray
    lam: float
    epsilon: float
    loss_kind: str
    lam_obs: float = field(default=float("nan"))


def build_kkt_map(data, event, beta_bar_E):
    """Assemble A0, B_cols and gamma from the subgradient stationarity system."""
    p = data.X.shape[1]
    E = np.asarray(event.E)
    not_E = np.setdiff1d(np.arange(p), E)
    k, m = E.size, not_E.size
    D = build_data_vector(data, E, beta_bar_E)

    if data.loss_kind == FORWARD_STEPWISE:
        A0 = -np.eye(p)
        B_cols = np.zeros((p, 1))
        B_cols[0, 0] = event.s_E[0]
        return KKTMap(A0, B_cols, np.zeros(p), E, not_E, event.s_E.copy(),
                      D, beta_bar_E, float("nan"), 0.0, data.loss_kind,
                      lam_obs=float(event.beta_E_hat[0]))

    XE = data.X[:, E]
    XmE = data.X[:, not_E]
    if data.loss_kind == LOGISTIC:
        pi = _expit(XE @ beta_bar_E)
        W = pi * (1.0 - pi)
        Q = XE.T @ (W[:, None] * XE)
        C = XmE.T @ (W[:, None] * XE)
    else:
        Q = XE.T @ XE
        C = XmE.T @ XE

    A0 = np.zeros((p, p))
    A0[:k, :k] = -Q
    A0[k:, :k] = -C
    A0[k:, k:] = -np.eye(m)
    B_cols = np.vstack([Q + event.epsilon * np.eye(k), C])
    gamma = np.concatenate([event.lam * event.s_E, np.zeros(m)])
    return KKTMap(A0, B_cols, gamma, E, not_E, event.s_E.copy(),
                  D, beta_bar_E, event.lam, event.epsilon, data.loss_kind)


def reconstruct_omega(kkt, event):
    """Evaluate the affine map at the observed optimization variables."""
    if kkt.loss_kind == FORWARD_STEPWISE:
        o_inactive = event.beta_E_hat[0] * event.u_minus_E
    else:
        o_inactive = event.u_minus_E
    return (kkt.A0 @ kkt.D_obs + kkt.B_cols @ event.beta_E_hat
            + np.concatenate([np.zeros(kkt.E.size), o_inactive]) + kkt.gamma)


@dataclass
class TargetContext:
    """Everything the volume approximation needs for one coefficient.

    For forward stepwise the optimization variable is the positive score
    magnitude: s_E is +1 (the feasibility sign), the selected sign is
    folded into B_E, and the inactive cube half-width is the variable
    itself (variable_cube is True, lam is NaN and lam_obs holds the
    observed magnitude).
    """

    j: int
    T_obs: float
    sigma_j: float
    A_jE: np.ndarray
    A_jmE: np.ndarray
    B_E: np.ndarray
    B_mE: np.ndarray
    c_jE: np.ndarray
    c_jmE: np.ndarray
    lam: float
    s_E: np.ndarray
    randomization: RandomizationSpec
    variable_cube: bool = False
    lam_obs: float = field(default=float("nan"))


def estimate_noise_variance(data, E, beta_bar_E):
    """Residual variance of the least-squares refit, denominator n - |E|."""
    n = data.X.shape[0]
    if n <= len(E):
        raise SingularDesign("no residual degrees of freedom")
    r = data.y - data.X[:, E] @ beta_bar_E
    return float(r @ r) / (n - len(E))


def decompose_target(kkt, data, j, randomization, sigma_sq=None):
    """Per-coefficient decomposition A0 D = A_j T + F_j and block partition.

    The covariance plug-in treats the refit residual as orthogonal to the
    active column space, so the target cross-covaries only with the refit
    block of D (squared error: sigma_sq (X_E'X_E)^{-1} e_j; logistic:
    Q_E^{-1} e_j); forward stepwise uses the exact covariance of X'y
    with the selected score.  sigma_sq is the noise variance for the
    squared-error and stepwise losses; when None it is estimated from
    refit residuals.  Logistic uses the information plug-in and ignores
    sigma_sq.
    """
    E, not_E = kkt.E, kkt.not_E
    pos = int(np.nonzero(E == j)[0][0])
    k = E.size

    if kkt.loss_kind == FORWARD_STEPWISE:
        if sigma_sq is None:
            sigma_sq = estimate_noise_variance(data, E, kkt.beta_bar_E)
        x_sel = data.X[:, E[pos]]
        sigma_DT = sigma_sq * np.concatenate(
            [data.X[:, E].T @ x_sel, data.X[:, not_E].T @ x_sel])
        sigma_j_sq = sigma_sq * float(x_sel @ x_sel)
        T_obs = float(kkt.D_obs[pos])
    elif kkt.loss_kind == LOGISTIC:
        XE = data.X[:, E]
        pi = _expit(XE @ kkt.beta_bar_E)
        Q = XE.T @ ((pi * (1.0 - pi))[:, None] * XE)
        _check_conditioning(Q)
        cov_E = np.linalg.inv(Q)
        sigma_DT = np.concatenate([cov_E[:, pos], np.zeros(not_E.size)])
        sigma_j_sq = float(cov_E[pos, pos])
        T_obs = float(kkt.beta_bar_E[pos])
    else:
        if sigma_sq is None:
            sigma_sq = estimate_noise_variance(data, E, kkt.beta_bar_E)
        XE = data.X[:, E]
        G = XE.T @ XE
        _check_conditioning(G)
        cov_E = sigma_sq * np.linalg.inv(G)
        sigma_DT = np.concatenate([cov_E[:, pos], np.zeros(not_E.size)])
        sigma_j_sq = float(cov_E[pos, pos])
        T_obs = float(kkt.beta_bar_E[pos])

    A_j = kkt.A0 @ (sigma_DT / sigma_j_sq)
    F_obs = kkt.A0 @ kkt.D_obs - A_j * T_obs
    c_j = F_obs + kkt.gamma

    is_fs = kkt.loss_kind == FORWARD_STEPWISE
    return TargetContext(
        j=int(j),
        T_obs=T_obs,
        sigma_j=float(np.sqrt(sigma_j_sq)),
        A_jE=A_j[:k],
        A_jmE=A_j[k:],
        B_E=kkt.B_cols[:k, :],
        B_mE=kkt.B_cols[k:, :],
        c_jE=c_j[:k],
        c_jmE=c_j[k:],
        lam=kkt.lam,
        s_E=np.ones(1) if is_fs else kkt.s_E.astype(float),
        randomization=randomization,
        variable_cube=is_fs,
        lam_obs=kkt.lam_obs,
    )

"""Randomized l1-penalized selection.

Solves

    minimize  loss(beta) + lam * ||beta||_1 - omega' beta + (eps/2) ||beta||_2^2

by proximal gradient with backtracking, for squared-error and logistic
losses, and the single randomized forward-stepwise step for the
linear-loss / l1-ball variant.  Emits the selection event (active set,
signs, active coefficients, inactive subgradients).
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import EmptySelection, NonConvergence

SQUARED_ERROR = "squared_error"
LOGISTIC = "logistic"
FORWARD_STEPWISE = "forward_stepwise"
LOSS_KINDS = (SQUARED_ERROR, LOGISTIC, FORWARD_STEPWISE)

GAUSSIAN = "gaussian"
LAPLACE = "laplace"

# prox produces exact zeros; threshold only guards float noise
ACTIVE_TOL = 1e-8


@dataclass(frozen=True)
class Dataset:
    """Fixed design and response; columns of X are unit-norm."""

    X: np.ndarray
    y: np.ndarray
    loss_kind: str


def make_dataset(X, y, loss_kind):
    """Validate and column-normalize; normalization happens only here."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x p with len(y) == n")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError("need n >= 1 and p >= 1")
    if loss_kind not in LOSS_KINDS:
        raise ValueError("unknown loss kind %r" % (loss_kind,))
    if loss_kind == LOGISTIC and not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("logistic loss needs y in {0, 1}")
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise ValueError("zero column in X")
    return Dataset(X=X / norms, y=y, loss_kind=loss_kind)


@dataclass(frozen=True)
class RandomizationSpec:
    """Isotropic randomization: kind in {gaussian, laplace}, common scale."""

    kind: str
    scale: float
    dimension: int

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, LAPLACE):
            raise ValueError("unknown randomization kind %r" % (self.kind,))
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def draw(self, rng):
        if self.kind == GAUSSIAN:
            return rng.normal(0.0, self.scale, self.dimension)
        return rng.laplace(0.0, self.scale, self.dimension)

    def neg_log_density(self, v):
        """Negative log density summed over coordinates, constants dropped."""
        if self.kind == GAUSSIAN:
            return 0.5 * float(v @ v) / self.scale**2
        return float(np.sum(np.abs(v))) / self.scale

    def neg_log_density_grad(self, v):
        if self.kind == GAUSSIAN:
            return v / self.scale**2
        return np.sign(v) / self.scale

    def log_density_full(self, v):
        """Exact log density (constants included), for Monte Carlo oracles."""
        m = v.shape[-1]
        if self.kind == GAUSSIAN:
            return (-0.5 * np.sum(v * v, axis=-1) / self.scale**2
                    - m * np.log(np.sqrt(2.0 * np.pi) * self.scale))
        return (-np.sum(np.abs(v), axis=-1) / self.scale
                - m * np.log(2.0 * self.scale))


@dataclass(frozen=True)
class PenaltySpec:
    """l1 level and ridge term; lam is ignored by forward stepwise."""

    lam: float
    epsilon: float


def validate_penalty(penalty, loss_kind):
    if loss_kind == FORWARD_STEPWISE:
        return
    if not penalty.lam > 0:
        raise ValueError("lam must be positive for l1 losses")
    if not penalty.epsilon > 0:
        raise ValueError("epsilon must be positive (solution existence)")


@dataclass(frozen=True)
class SelectionEvent:
    """Observed output of the randomized program.

    For the l1 losses, beta_E_hat are the active coefficients and
    u_minus_E the inactive subgradients on the lam scale
    (||u_minus_E||_inf <= lam).  For forward stepwise, beta_E_hat holds
    the achieved score magnitude (a positive scalar) and u_minus_E the
    inactive scores normalized to [-1, 1]; s_E is the selected sign.
    """

    E: np.ndarray
    s_E: np.ndarray
    beta_E_hat: np.ndarray
    u_minus_E: np.ndarray
    omega: np.ndarray
    lam: float
    epsilon: float


def draw_randomization(spec, seed):
    """i.i.d. draw of the randomization vector; deterministic given seed."""
    return spec.draw(np.random.default_rng(seed))


def tune_lambda(data, c, n_draws=600, seed=0):
    """Empirical mean of c * ||X' Z||_inf over fresh draws of Z.

    Z is standard normal for squared-error / forward stepwise and
    Bernoulli(1/2) for logistic.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)
    n = data.X.shape[0]
    if data.loss_kind == LOGISTIC:
        Z = (rng.random((n, n_draws)) < 0.5).astype(float)
    else:
        Z = rng.standard_normal((n, n_draws))
    return c * float(np.abs(data.X.T @ Z).max(axis=0).mean())


def _loss_value_grad(data, beta):
    """Loss value and gradient for the l1-penalized losses."""
    X, y = data.X, data.y
    if data.loss_kind == SQUARED_ERROR:
        r = X @ beta - y
        return 0.5 * float(r @ r), X.T @ r
    eta = X @ beta
    # sum log(1 + e^eta) - y'eta, stable for large |eta|
    val = float(np.sum(np.logaddexp(0.0, eta)) - y @ eta)
    pi = 0.5 * (1.0 + np.tanh(0.5 * eta))
    return val, X.T @ (pi - y)


def _lipschitz_bound(data, epsilon):
    sq = np.linalg.norm(data.X, 2) ** 2
    if data.loss_kind == LOGISTIC:
        sq *= 0.25
    return sq + epsilon


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _prox_gradient(data, penalty, omega, max_iter=5000, step_norm_tol=1e-9):
    """Proximal gradient with backtracking on the smooth part.

    The backtracking starts above the safe 1/L step and shrinks to it;
    at 1/L the majorization holds exactly for both losses, so every
    accepted step decreases the penalized objective.  Convergence is
    declared when the fixed-step proximal step norm falls below
    step_norm_tol.  Returns (beta, objective history, converged).
    """
    lam, eps = penalty.lam, penalty.epsilon
    p = data.X.shape[1]
    beta = np.zeros(p)

    def smooth(b):
        val, grad = _loss_value_grad(data, b)
        val += -float(omega @ b) + 0.5 * eps * float(b @ b)
        grad = grad - omega + eps * b
        return val, grad

    f, g = smooth(beta)
    history = [f + lam * float(np.sum(np.abs(beta)))]
    t_safe = 1.0 / _lipschitz_bound(data, eps)
    step = t_safe
    for _ in range(max_iter):
        d_safe = _soft_threshold(beta - t_safe * g, t_safe * lam) - beta
        if np.sqrt(float(d_safe @ d_safe)) < step_norm_tol:
            return beta, history, True
        t = max(step, t_safe)
        while True:
            if t <= t_safe:
                # guaranteed majorization step
                beta_new = beta + d_safe
                t = t_safe
                f_new, g_new = smooth(beta_new)
                break
            beta_new = _soft_threshold(beta - t * g, t * lam)
            d = beta_new - beta
            f_new, g_new = smooth(beta_new)
            if f_new <= f + float(g @ d) + 0.5 * float(d @ d) / t:
                break
            t *= 0.5
        beta, f, g = beta_new, f_new, g_new
        history.append(f + lam * float(np.sum(np.abs(beta))))
        step = t * 2.0
    return beta, history, False


def _solve_forward_stepwise(data, omega):
    scores = data.X.T @ data.y + omega
    j = int(np.argmax(np.abs(scores)))
    lam_hat = float(np.abs(scores[j]))
    if lam_hat <= ACTIVE_TOL:
        raise EmptySelection("degenerate forward-stepwise scores")
    u = scores / lam_hat
    return SelectionEvent(
        E=np.array([j]),
        s_E=np.array([np.sign(scores[j])]),
        beta_E_hat=np.array([lam_hat]),
        u_minus_E=np.delete(u, j),
        omega=omega,
        lam=float("nan"),
        epsilon=0.0,
    )


def solve_randomized_program(data, penalty, omega):
    """Solve the randomized program and recover the selection event.

    The inactive subgradient is recovered from stationarity,
    u_{-E} = omega_{-E} - grad_loss(beta_hat)_{-E}.

    Raises EmptySelection if no variable is selected and NonConvergence
    if the solver exceeds its iteration cap.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (data.X.shape[1],):
        raise ValueError("omega must have length p")
    if data.loss_kind == FORWARD_STEPWISE:
        return _solve_forward_stepwise(data, omega)
    validate_penalty(penalty, data.loss_kind)

    beta, _, converged = _prox_gradient(data, penalty, omega)
    if not converged:
        raise NonConvergence("proximal gradient hit iteration cap")
    active = np.abs(beta) > ACTIVE_TOL
    if not active.any():
        raise EmptySelection("all coefficients at zero")
    beta = np.where(active, beta, 0.0)
    E = np.nonzero(active)[0]
    _, grad = _loss_value_grad(data, beta)
    u = omega - grad
    return SelectionEvent(
        E=E,
        s_E=np.sign(beta[E]),
        beta_E_hat=beta[E],
        u_minus_E=u[~active],
        omega=omega,
        lam=penalty.lam,
        epsilon=penalty.epsilon,
    )

"""MIMO uncertainty estimator with closed-form error and output bounds.

The estimator carries an auxiliary vector xi with
    delta_hat = Lambda x - xi,
    xi_dot    = Lambda (f_hat(x) + g_hat(x) u + delta_hat),
so the estimation error e = Delta - delta_hat obeys e_dot = Delta_dot - Lambda e.
The Hurwitz matrix of the error dynamics is -Lambda; its Lyapunov solution
P (-Lambda) + (-Lambda)^T P = -I is diagonal, P = diag(1 / (2 lambda_i)),
which gives every bound below in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlAffineModel
from .exceptions import ConfigurationError
from .trace import SimulationTrace


@dataclass(frozen=True)
class EstimatorGain:
    lambdas: np.ndarray          # diagonal of Lambda
    delta_L: float
    lambda_min: float
    lambda_max: float
    P_diag: np.ndarray           # diagonal of the Lyapunov solution
    P_norm: float                # ||P|| = 1 / (2 lambda_min)
    script_P: float              # sqrt(||P^-1|| ||P||) = sqrt(lambda_max / lambda_min)
    mu_e: float                  # lambda_min / 4
    gamma_deltaL: float          # delta_L^2 / (2 lambda_min)

    @property
    def n(self) -> int:
        return len(self.lambdas)

    @property
    def Lambda(self) -> np.ndarray:
        return np.diag(self.lambdas)

    @property
    def Lambda_norm(self) -> float:
        return self.lambda_max

    def lyapunov_residual(self) -> float:
        """Max-norm residual of P(-Lambda) + (-Lambda)^T P + I."""
        P = np.diag(self.P_diag)
        A = -self.Lambda
        return float(np.abs(P @ A + A.T @ P + np.eye(self.n)).max())


def make_gain(lambdas, delta_L: float) -> EstimatorGain:
    """Build an EstimatorGain from the diagonal entries of Lambda."""
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lam.ndim != 1 or len(lam) == 0 or np.any(lam <= 0):
        raise ConfigurationError("Lambda diagonal entries must be positive")
    if delta_L <= 0:
        raise ConfigurationError("delta_L must be positive")
    lmin = float(lam.min())
    lmax = float(lam.max())
    return EstimatorGain(
        lambdas=lam,
        delta_L=float(delta_L),
        lambda_min=lmin,
        lambda_max=lmax,
        P_diag=1.0 / (2.0 * lam),
        P_norm=1.0 / (2.0 * lmin),
        script_P=float(np.sqrt(lmax / lmin)),
        mu_e=lmin / 4.0,
        gamma_deltaL=delta_L ** 2 / (2.0 * lmin),
    )


def lyapunov_solve_dense(A: np.ndarray) -> np.ndarray:
    """Dense Lyapunov solve P A + A^T P = -I by Kronecker vectorization.

    Validation-only fallback for the diagonal closed form; not used on the
    simulation hot path.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    I = np.eye(n)
    K = np.kron(I, A.T) + np.kron(A.T, I)
    vecP = np.linalg.solve(K, -I.reshape(-1))
    return vecP.reshape(n, n)


@dataclass
class EstimatorState:
    xi: np.ndarray
    gain: EstimatorGain
    delta_hat_cached: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.xi.shape != (self.gain.n,):
            raise ConfigurationError("xi dimension does not match gain")
        self.delta_hat_cached = np.zeros(self.gain.n)


def init_estimator(gain: EstimatorGain, x0) -> EstimatorState:
    """Initialize with xi = Lambda x0 so that delta_hat(0) = 0."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (gain.n,):
        raise ConfigurationError(f"x0 has shape {x0.shape}, expected ({gain.n},)")
    return EstimatorState(xi=gain.lambdas * x0, gain=gain)


def estimator_output(est: EstimatorState, x) -> np.ndarray:
    """delta_hat = Lambda x - xi."""
    out = est.gain.lambdas * np.asarray(x, dtype=float) - est.xi
    est.delta_hat_cached = out
    return out


def estimator_derivative(est: EstimatorState, model: ControlAffineModel, x, u) -> np.ndarray:
    """xi_dot = Lambda (f_hat(x) + g_hat(x) u + delta_hat)."""
    delta_hat = est.gain.lambdas * np.asarray(x, dtype=float) - est.xi
    return est.gain.lambdas * (model.eval(x, u) + delta_hat)


def error_bound(gain: EstimatorGain, delta_L: float, delta_b: float, t) -> np.ndarray:
    """Certified bound on ||Delta(t) - delta_hat(t)||.

    script_P (delta_b - 2 delta_L ||P||) exp(-t / (2||P||)) + 2 script_P ||P|| delta_L,
    assuming delta_hat(0) = 0 so the initial error is at most delta_b.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ConfigurationError("t must be nonnegative")
    decay = np.exp(-t / (2.0 * gain.P_norm))
    out = gain.script_P * ((delta_b - 2.0 * delta_L * gain.P_norm) * decay
                           + 2.0 * gain.P_norm * delta_L)
    return out if out.ndim else float(out)


def output_bound(gain: EstimatorGain, delta_b: float, t) -> np.ndarray:
    """Certified bound on ||delta_hat(t)||: 2 script_P delta_b ||Lambda|| ||P|| (1 - exp(-t/(2||P||)))."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ConfigurationError("t must be nonnegative")
    out = (2.0 * gain.script_P * delta_b * gain.Lambda_norm * gain.P_norm
           * (1.0 - np.exp(-t / (2.0 * gain.P_norm))))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class IssReport:
    n_checked: int
    violations: np.ndarray       # step indices where the decrement failed
    max_excess: float            # worst Vdot - rhs over all checked steps
    slack: float

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0


def iss_decrement_check(trace: SimulationTrace, gain: EstimatorGain, delta_L: float,
                        slack: float) -> IssReport:
    """Verify the Lyapunov decrement of the error dynamics along a trace.

    From the logged true and estimated uncertainty, compute V = ||e||^2 / 2
    and flag steps where its finite-difference derivative exceeds
    -(lambda_min / 2) ||e||^2 + delta_L^2 / (2 lambda_min) by more than
    `slack`.  Central differences are used in the interior; the comparison
    uses ||e|| at the same sample.
    """
    e = trace.column_block("delta_true_") - trace.column_block("delta_hat_")
    V = 0.5 * np.sum(e * e, axis=1)
    Vdot = np.gradient(V, trace.t)
    e_sq = np.sum(e * e, axis=1)
    rhs = -(gain.lambda_min / 2.0) * e_sq + delta_L ** 2 / (2.0 * gain.lambda_min)
    excess = Vdot - rhs
    bad = np.where(excess > slack)[0]
    return IssReport(n_checked=len(V), violations=bad,
                     max_excess=float(excess.max()), slack=slack)

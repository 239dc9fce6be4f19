"""Constraint-row builders for the safety filter variants.

Every builder returns an AffineConstraint a . u >= b over the control (or
the extended (u, relaxation) vector for the CLF row), tagged with a
label that identifies the row in solver diagnostics.  Robust variants
differ only in what gets folded into b: the Method-1 row adds a gradient-
squared margin derived from the estimator's ISS rate, while Method-2 rows
add the estimate itself plus a time-decaying error-bound inflation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ControlAffineModel, UncertaintySpec
from .estimator import EstimatorGain, error_bound
from .exceptions import ConfigurationError, MatchingError
from .qp import AffineConstraint


@dataclass(frozen=True)
class BarrierFunction:
    """Scalar barrier h with analytic gradient and an extended class-K rate.

    The rate is the linear family alpha * h by default; pass `alpha_fn` for
    a general strictly increasing map through zero.
    """

    h: Callable[[np.ndarray], float]
    grad_h: Callable[[np.ndarray], np.ndarray]
    alpha_gain: float = 1.0
    alpha_fn: Optional[Callable[[float], float]] = None

    def alpha_of(self, hval: float) -> float:
        if self.alpha_fn is not None:
            return self.alpha_fn(hval)
        return self.alpha_gain * hval

    def check_gradient(self, states, rel_tol=1e-5, fd_step=1e-6) -> float:
        """Central finite-difference consistency of grad_h at sample states."""
        worst = 0.0
        for x in states:
            x = np.asarray(x, dtype=float)
            g = np.asarray(self.grad_h(x), dtype=float)
            num = np.zeros_like(g)
            for i in range(len(x)):
                dx = np.zeros_like(x)
                dx[i] = fd_step * max(1.0, abs(x[i]))
                num[i] = (self.h(x + dx) - self.h(x - dx)) / (2 * dx[i])
            scale = max(1.0, float(np.linalg.norm(g)))
            worst = max(worst, float(np.linalg.norm(num - g)) / scale)
            if worst > rel_tol:
                raise ConfigurationError(
                    f"grad_h inconsistent with h at {x}: rel err {worst:.2e}")
        return worst


@dataclass(frozen=True)
class Method1Params:
    """Rates for the shrunk-barrier constraint; requires D > 0."""

    mu_h: float
    sigma_V: float
    mu_e: float

    def __post_init__(self):
        if self.mu_h <= 0 or self.sigma_V <= 0:
            raise ConfigurationError("mu_h and sigma_V must be positive")
        if self.D <= 0:
            raise ConfigurationError(
                f"need 4 sigma_V mu_e - 2 sigma_V mu_h > 0, got D = {self.D}")

    @property
    def D(self) -> float:
        return 4.0 * self.sigma_V * self.mu_e - 2.0 * self.sigma_V * self.mu_h


def nominal_cbf_row(model: ControlAffineModel, bar: BarrierFunction, x) -> AffineConstraint:
    """L_fhat h + L_ghat h u >= -alpha(h), rearranged to a . u >= b."""
    x = np.asarray(x, dtype=float)
    grad = np.asarray(bar.grad_h(x), dtype=float)
    a = grad @ model.g_hat(x)
    b = -bar.alpha_of(bar.h(x)) - float(grad @ model.f_hat(x))
    return AffineConstraint(a, b, label="nominal.cbf")


def matching_matrix_Q(model: ControlAffineModel, x, min_sv=1e-10) -> np.ndarray:
    """Left pseudo-inverse (g^T g)^-1 g^T of the input matrix.

    Satisfies g Q w = w for every w in range(g); verified on a probe vector
    each call.  Requires full column rank at x.
    """
    g = model.g_hat(np.asarray(x, dtype=float))
    sv = np.linalg.svd(g, compute_uv=False)
    if sv.min() <= min_sv:
        raise MatchingError(f"g_hat(x) rank-deficient (sigma_min = {sv.min():.3e})")
    Q = np.linalg.solve(g.T @ g, g.T)
    probe = g @ np.arange(1.0, model.m + 1.0)
    if not np.allclose(g @ (Q @ probe), probe, atol=1e-8 * max(1.0, np.abs(probe).max())):
        raise MatchingError("matching identity g Q w = w failed on probe vector")
    return Q


def method1_row(model: ControlAffineModel, bar: BarrierFunction, params: Method1Params,
                gain: EstimatorGain, delta_L: float, x) -> AffineConstraint:
    """Shrunk-barrier constraint on the pre-compensation control u~.

    L_fhat h + L_ghat h u~ >= -mu_h h + ||grad h||^2 / D + sigma_V gamma(delta_L).
    """
    x = np.asarray(x, dtype=float)
    grad = np.asarray(bar.grad_h(x), dtype=float)
    gamma = delta_L ** 2 / (2.0 * gain.lambda_min)
    S = (-params.mu_h * bar.h(x)
         + float(grad @ grad) / params.D
         + params.sigma_V * gamma)
    a = grad @ model.g_hat(x)
    b = S - float(grad @ model.f_hat(x))
    return AffineConstraint(a, b, label="method1.shrunk-barrier")


def method1_control(u_tilde, Q, delta_hat) -> np.ndarray:
    """Applied control u = u~ - Q delta_hat (uncertainty compensation)."""
    return np.asarray(u_tilde, dtype=float) - np.asarray(Q) @ np.asarray(delta_hat)


def method1_alt_row(model: ControlAffineModel, bar: BarrierFunction, gain: EstimatorGain,
                    delta_L: float, delta_b: float, x, t: float) -> AffineConstraint:
    """Alternative Method-1 row: nominal row inflated by ||grad h|| * error bound.

    Valid on the compensated closed loop, whose residual dynamics are the
    nominal model plus the estimation error.
    """
    row = nominal_cbf_row(model, bar, x)
    grad = np.asarray(bar.grad_h(np.asarray(x, dtype=float)), dtype=float)
    inflation = float(np.linalg.norm(grad)) * error_bound(gain, delta_L, delta_b, t)
    return AffineConstraint(row.a, row.b + inflation, label="method1.bound-inflated")


def method2_row(model: ControlAffineModel, bar: BarrierFunction, delta_hat,
                gain: EstimatorGain, delta_L: float, delta_b: float,
                x, t: float) -> AffineConstraint:
    """Estimator-robustified row on the applied control.

    grad h (f_hat + g_hat u + delta_hat) - ||grad h|| ||e|| >= -alpha(h), with the
    unknown ||e|| replaced by its certified time-dependent bound.
    """
    x = np.asarray(x, dtype=float)
    grad = np.asarray(bar.grad_h(x), dtype=float)
    a = grad @ model.g_hat(x)
    b = (-bar.alpha_of(bar.h(x))
         - float(grad @ model.f_hat(x))
         - float(grad @ np.asarray(delta_hat, dtype=float))
         + float(np.linalg.norm(grad)) * error_bound(gain, delta_L, delta_b, t))
    return AffineConstraint(a, b, label="method2.estimate-robust")


class HocbfCascade:
    """Linear-gain high-order barrier cascade phi_i = phi_{i-1}' + alpha_i phi_{i-1}.

    The caller supplies the drift-derivative chain of h along the nominal
    model: lie_chain[k] = (value, gradient) callables of L_f^k h for
    k = 0..m-1.  With linear gains, phi_{m-1} is a fixed linear combination
    of that chain, with coefficients from expanding prod_i (s + alpha_i);
    the residual terms of the top-order constraint follow from the same
    coefficients, so no symbolic differentiation is needed.
    """

    def __init__(self, lie_chain: Sequence[tuple], alphas: Sequence[float]):
        if len(alphas) != len(lie_chain):
            raise ConfigurationError("need one alpha per cascade order")
        if any(a <= 0 for a in alphas):
            raise ConfigurationError("cascade gains must be positive")
        self.lie_chain = list(lie_chain)
        self.alphas = [float(a) for a in alphas]
        self.m = len(lie_chain)
        # coeffs[k][j]: phi_k = sum_j coeffs[k][j] * L_f^j h  (ascending powers)
        self.coeffs = [np.array([1.0])]
        for a in self.alphas[:-1]:
            prev = self.coeffs[-1]
            self.coeffs.append(np.convolve(prev, np.array([a, 1.0])))

    def chain_values(self, x) -> np.ndarray:
        return np.array([float(f(x)) for f, _ in self.lie_chain])

    def phi_values(self, x) -> np.ndarray:
        """phi_0 .. phi_{m-1} at x."""
        vals = self.chain_values(x)
        return np.array([float(c @ vals[: len(c)]) for c in self.coeffs])

    def validate(self, model: ControlAffineModel, states, rel_tol=1e-4, fd_step=1e-6):
        """Finite-difference check that lie_chain[k+1] = grad(lie_chain[k]) . f_hat
        and that each stored gradient matches its value function."""
        for k, (fk, gk) in enumerate(self.lie_chain):
            BarrierFunction(fk, gk).check_gradient(states, rel_tol=rel_tol, fd_step=fd_step)
            if k + 1 < self.m:
                fk1 = self.lie_chain[k + 1][0]
                for x in states:
                    x = np.asarray(x, dtype=float)
                    lhs = float(np.asarray(gk(x)) @ model.f_hat(x))
                    rhs = float(fk1(x))
                    if abs(lhs - rhs) > rel_tol * max(1.0, abs(rhs)):
                        raise ConfigurationError(
                            f"cascade inconsistency at order {k + 1}: "
                            f"{lhs:.6e} vs {rhs:.6e}")


def hocbf_method2_row(model: ControlAffineModel, cascade: HocbfCascade, delta_hat,
                      gain: EstimatorGain, delta_L: float, delta_b: float,
                      x, t: float) -> AffineConstraint:
    """Top-order robust cascade row, a single affine constraint in u.

    All drift terms (including the cascade residual), the estimate term and
    the error-bound inflation are folded into b.  For m = 1 this reduces
    exactly to method2_row.
    """
    x = np.asarray(x, dtype=float)
    m = cascade.m
    grad_top = np.asarray(cascade.lie_chain[m - 1][1](x), dtype=float)
    vals = cascade.chain_values(x)
    c = cascade.coeffs[m - 1]
    # phi_{m-1}' along the nominal drift: sum_j c_j L_f^{j+1} h, top term via grad_top
    lf_top = float(grad_top @ model.f_hat(x))
    drift = lf_top + float(c[: m - 1] @ vals[1:m]) if m > 1 else lf_top
    phi_m1 = float(c @ vals)
    a = grad_top @ model.g_hat(x)
    b = (-cascade.alphas[-1] * phi_m1
         - drift
         - float(grad_top @ np.asarray(delta_hat, dtype=float))
         + float(np.linalg.norm(grad_top)) * error_bound(gain, delta_L, delta_b, t))
    return AffineConstraint(a, b, label="method2.hocbf")


def clf_row(V, grad_V, model: ControlAffineModel, lambda_rate: float, x) -> AffineConstraint:
    """Relaxed Lyapunov decrease row over the extended vector (u, delta_c).

    Vdot(x, u) <= -lambda V + delta_c becomes
    (-L_ghat V, 1) . (u, delta_c) >= lambda V + L_fhat V.
    """
    x = np.asarray(x, dtype=float)
    gV = np.asarray(grad_V(x), dtype=float)
    a = np.concatenate([-(gV @ model.g_hat(x)), [1.0]])
    b = lambda_rate * float(V(x)) + float(gV @ model.f_hat(x))
    return AffineConstraint(a, b, label="clf.relaxed")


def _numeric_grad(fn, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        dx = np.zeros_like(x)
        dx[i] = step * max(1.0, abs(x[i]))
        g[i] = (fn(x + dx) - fn(x - dx)) / (2 * dx[i])
    return g


def check_relative_degrees(model: ControlAffineModel, unc: UncertaintySpec,
                           bar: BarrierFunction, max_order: int, states,
                           u_probes=None, rel_tol=1e-3):
    """Numerically estimate input and disturbance relative degrees.

    Builds L_f^k h by nested central differences and measures, per order,
    how strongly the control (via g_hat) and the uncertainty channel touch
    the output over the sampled states.  Structural zeros are classified
    relative to the largest magnitude seen across orders, since nested
    differencing noise grows with depth and an absolute test would
    misfire.  Returns (ird, drd, matched); a channel silent through
    max_order is reported as None with matched = False (inconclusive).
    """
    states = [np.asarray(x, dtype=float) for x in states]
    if u_probes is None:
        u_probes = [np.zeros(model.m), np.ones(model.m)]

    g_hits, d_hits = [], []
    lie = bar.h
    for order in range(1, max_order + 1):
        prev = lie

        def grad_prev(x, _f=prev):
            return _numeric_grad(_f, x)

        g_hits.append(max(float(np.abs(np.asarray(grad_prev(x)) @ model.g_hat(x)).max())
                          for x in states))
        d_hits.append(max(abs(float(np.asarray(grad_prev(x)) @ unc.delta(x, u, 0.0)))
                          for x in states for u in u_probes))
        if order < max_order:
            def lie_next(x, _f=prev):
                return float(np.asarray(_numeric_grad(_f, x)) @ model.f_hat(x))

            lie = lie_next

    def first_order(hits):
        thresh = rel_tol * max(max(hits), 1e-30)
        for k, v in enumerate(hits):
            if v > thresh:
                return k + 1
        return None

    ird = first_order(g_hits)
    drd = first_order(d_hits)
    matched = ird is not None and ird == drd
    return ird, drd, matched

"""Small dense strictly convex QP solver.

Problems have the form
    min_z  sum_i w_i (z_i - r_i)^2   s.t.  a_j . z >= b_j,
with a handful of rows and at most ~5 decision variables.  For this size
an exact combinatorial active-set search is both simpler and more robust
than an iterative method: enumerate candidate active subsets (smallest
first, warm-started from the previous solve), solve each equality-
constrained subproblem in closed form, and accept the first KKT-consistent
point.  Strict convexity makes that point the unique optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, SolverFault

_FEAS_TOL = 1e-9
_DUAL_TOL = 1e-9


@dataclass(frozen=True)
class AffineConstraint:
    """One half-space row a . u >= b over the decision vector."""

    a: np.ndarray
    b: float
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=float)))
        object.__setattr__(self, "b", float(self.b))

    def satisfied(self, z, tol=_FEAS_TOL) -> bool:
        return float(self.a @ z) >= self.b - tol

    @property
    def vacuous(self) -> bool:
        return float(np.linalg.norm(self.a)) == 0.0 and self.b <= 0.0

    @property
    def infeasible_by_construction(self) -> bool:
        return float(np.linalg.norm(self.a)) == 0.0 and self.b > 0.0


@dataclass(frozen=True)
class QpProblem:
    dim: int
    hessian_diag: np.ndarray
    linear_ref: np.ndarray
    constraints: tuple
    box: Optional[tuple] = None   # (lower, upper) per-coordinate arrays, np.inf allowed

    def __post_init__(self):
        object.__setattr__(self, "hessian_diag",
                           np.asarray(self.hessian_diag, dtype=float))
        object.__setattr__(self, "linear_ref",
                           np.asarray(self.linear_ref, dtype=float))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.hessian_diag.shape != (self.dim,) or self.linear_ref.shape != (self.dim,):
            raise ConfigurationError("hessian_diag / linear_ref dimension mismatch")
        if np.any(self.hessian_diag <= 0):
            raise ConfigurationError("hessian_diag entries must be positive")

    def all_rows(self) -> list[AffineConstraint]:
        rows = list(self.constraints)
        if self.box is not None:
            lo, hi = self.box
            for i in range(self.dim):
                e = np.zeros(self.dim)
                if np.isfinite(lo[i]):
                    e_i = e.copy(); e_i[i] = 1.0
                    rows.append(AffineConstraint(e_i, lo[i], label=f"box.lo{i}"))
                if np.isfinite(hi[i]):
                    e_i = e.copy(); e_i[i] = -1.0
                    rows.append(AffineConstraint(e_i, -hi[i], label=f"box.hi{i}"))
        return rows

    def objective(self, z) -> float:
        d = np.asarray(z) - self.linear_ref
        return float(np.sum(self.hessian_diag * d * d))


@dataclass
class QpSolution:
    u_star: Optional[np.ndarray]
    active_set: tuple
    kkt_residual: float
    status: str                   # "optimal" | "infeasible"
    duals: dict = field(default_factory=dict)


def _equality_solve(w, r, A, b):
    """Minimize sum w_i (z_i - r_i)^2 subject to A z = b.

    Returns (z, lambdas) or None if the active rows are linearly dependent.
    z = r + W^-1 A^T lam with (A W^-1 A^T) lam = b - A r.
    """
    Winv_At = (A / w).T          # W^-1 A^T, shape (dim, k)
    S = A @ Winv_At
    try:
        lam = np.linalg.solve(S, b - A @ r)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(lam)):
        return None
    z = r + Winv_At @ lam
    return z, lam


def _kkt_residual(p: QpProblem, rows, z, active, lams) -> float:
    grad = 2.0 * p.hessian_diag * (z - p.linear_ref)
    for idx, lam in zip(active, lams):
        grad = grad - lam * rows[idx].a
    stat = float(np.abs(grad).max()) if p.dim else 0.0
    primal = max((rows[j].b - float(rows[j].a @ z) for j in range(len(rows))), default=0.0)
    comp = max((abs(lam * (float(rows[idx].a @ z) - rows[idx].b))
                for idx, lam in zip(active, lams)), default=0.0)
    dual = max((-lam for lam in lams), default=0.0)
    return max(stat, primal, comp, dual, 0.0)


def _certify_infeasible(rows) -> bool:
    """Farkas certificate: find y >= 0 with sum y_j a_j = 0 and sum y_j b_j = 1."""
    from scipy.optimize import linprog
    A_eq = np.vstack([np.array([row.a for row in rows]).T,
                      np.array([[row.b for row in rows]])])
    b_eq = np.zeros(A_eq.shape[0]); b_eq[-1] = 1.0
    res = linprog(c=np.zeros(len(rows)), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * len(rows), method="highs")
    return bool(res.success)


def solve(p: QpProblem, warm_active: tuple = ()) -> QpSolution:
    """Exact active-set solve by subset enumeration.

    warm_active is tried first (constraint activity rarely flips between
    consecutive simulation steps).  status == "infeasible" means the
    constraint set is empty, certified by a Farkas dual ray.
    """
    rows = p.all_rows()
    for row in rows:
        if row.infeasible_by_construction:
            return QpSolution(None, (), 0.0, "infeasible")
    rows = [row for row in rows if not row.vacuous]
    w = 2.0 * p.hessian_diag     # objective Hessian diagonal
    r = p.linear_ref
    n_rows = len(rows)
    max_active = min(p.dim, n_rows)

    def try_subset(active):
        if not active:
            z, lams = r.copy(), []
        else:
            A = np.array([rows[i].a for i in active])
            b = np.array([rows[i].b for i in active])
            out = _equality_solve(w, r, A, b)
            if out is None:
                return None
            z, lams = out
            if np.any(np.asarray(lams) < -_DUAL_TOL):
                return None
        for j in range(n_rows):
            if j not in active and not rows[j].satisfied(z):
                return None
        res = _kkt_residual(p, rows, z, active, list(lams))
        return QpSolution(z, tuple(active), res, "optimal",
                          duals={rows[i].label or i: float(l)
                                 for i, l in zip(active, lams)})

    candidates = []
    if warm_active and all(0 <= i < n_rows for i in warm_active):
        candidates.append(tuple(sorted(warm_active)))
    for k in range(max_active + 1):
        candidates.extend(combinations(range(n_rows), k))

    seen = set()
    for active in candidates:
        if active in seen:
            continue
        seen.add(active)
        sol = try_subset(active)
        if sol is not None:
            if sol.kkt_residual > 1e-6:
                raise SolverFault(f"KKT residual blowup: {sol.kkt_residual:.3e}")
            return sol

    if _certify_infeasible(rows):
        return QpSolution(None, (), 0.0, "infeasible")
    raise SolverFault("no KKT point found and infeasibility not certified")


def oracle_project(kd, c: AffineConstraint) -> np.ndarray:
    """Closed-form Euclidean projection of kd onto {u : a . u >= b}.

    Independent oracle for single-constraint problems with unit weights.
    """
    kd = np.asarray(kd, dtype=float)
    nrm2 = float(c.a @ c.a)
    if nrm2 == 0.0:
        raise ConfigurationError("cannot project onto a zero row")
    gap = c.b - float(c.a @ kd)
    if gap <= 0:
        return kd.copy()
    return kd + c.a * (gap / nrm2)

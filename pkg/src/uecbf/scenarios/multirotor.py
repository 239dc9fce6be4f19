"""Multirotor obstacle avoidance with a high-order robust barrier filter.

The vehicle is modelled through the differentially-flat jerk channel: the
10-dim state x = (p, pdot, pddot, psi) follows a triple integrator per
position axis (single integrator for yaw) driven by the auxiliary input
v = B_u u, where u = (thrust rate, body rates) and B_u is evaluated from
the physical thrust/attitude states (T, phi, theta) carried alongside.
Spherical-obstacle barriers h_i = ||p - p_obs|| - r_i - r0 have relative
degree 3, so the filter enforces the robust top-order cascade row; the
injected uncertainty is an aerodynamic jerk term c_d*tanh(pdot) plus a
fractional input reduction on each channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..dynamics import ControlAffineModel, IntegratorConfig, rk4_step
from ..estimator import (EstimatorGain, error_bound, make_gain, output_bound)
from ..exceptions import ConfigurationError, ScenarioFault
from ..filters import HocbfCascade, hocbf_method2_row
from ..qp import AffineConstraint, QpProblem, solve
from ..trace import SimulationTrace

MR_MODES = ("nominal", "method2_hocbf", "unprotected")

GRAVITY = 9.81


@dataclass(frozen=True)
class MultirotorUncertainty:
    """Jerk-channel drag c_d*tanh(pdot) plus per-input reduction fractions."""

    c_d: float = 0.055
    delta_u: tuple = (-0.0005, -0.0005, -0.0005, -0.0005)

    def __post_init__(self):
        if any(d > 0 or d <= -1 for d in self.delta_u):
            raise ConfigurationError("input reduction fractions must lie in (-1, 0]")


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float


@dataclass(frozen=True)
class MultirotorScenario:
    p0: tuple = (-9.0, 0.0, 1.0)
    v_ref: tuple = (1.4, 0.0, 0.0)     # constant-velocity reference line
    psi0: float = 0.0
    obstacles: tuple = (Obstacle(center=(0.0, 0.02, 1.0), radius=4.0),)
    r0: float = 0.3
    uncertainty: MultirotorUncertainty = field(default_factory=MultirotorUncertainty)
    delta_L: float = 0.1
    delta_b: float = 0.1
    lambdas: tuple = (50.0,) * 10
    alphas: tuple = (1.1, 1.1, 1.1)    # nested cascade gains (a1, a2, outer)
    poles: tuple = (-2.0, -2.5, -3.0)  # per-axis tracker poles
    k_psi: float = 2.0
    min_thrust: float = 0.5            # B_u conditioning guards
    max_tilt: float = 1.2              # [rad], keeps sec(theta), sec(phi) sane
    u1_max: float = 3.0                # thrust-rate authority [m/s^3]
    rate_max: float = 1.5              # body-rate authority [rad/s]
    a_max: float = 2.0                 # tracker acceleration envelope [m/s^2]

    def __post_init__(self):
        x0 = self.initial_state()
        for ob in self.obstacles:
            if self.barrier_value(x0, ob) < 0:
                raise ConfigurationError("initial position is inside an obstacle")

    # -- state layout -------------------------------------------------------

    def initial_state(self) -> np.ndarray:
        """x = (p, pdot, pddot, psi); starts on the reference line."""
        return np.concatenate([self.p0, self.v_ref, np.zeros(3), [self.psi0]])

    def initial_aux(self) -> np.ndarray:
        """(T, phi, theta) at level hover: thrust balances gravity."""
        return np.array([GRAVITY, 0.0, 0.0])

    def reference(self, t: float) -> np.ndarray:
        """Reference 10-dim state at time t (constant-velocity line)."""
        p = np.asarray(self.p0) + t * np.asarray(self.v_ref)
        return np.concatenate([p, self.v_ref, np.zeros(3), [0.0]])

    # -- attitude / input map ----------------------------------------------

    def rotation(self, aux: np.ndarray, psi: float) -> np.ndarray:
        _, phi, th = aux
        cf, sf = np.cos(phi), np.sin(phi)
        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(psi), np.sin(psi)
        return np.array([
            [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
            [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
            [-st, ct * sf, ct * cf],
        ])

    def euler_rate_matrix(self, aux: np.ndarray) -> np.ndarray:
        _, phi, th = aux
        cf, sf = np.cos(phi), np.sin(phi)
        tt, sec = np.tan(th), 1.0 / np.cos(th)
        return np.array([
            [1.0, sf * tt, cf * tt],
            [0.0, cf, -sf],
            [0.0, sf * sec, cf * sec],
        ])

    def input_matrix(self, aux: np.ndarray, psi: float) -> np.ndarray:
        """B_u mapping u = (T_rate, body rates) to (jerk, yaw rate)."""
        T = aux[0]
        R = self.rotation(aux, psi)
        W = self.euler_rate_matrix(aux)
        e3 = np.array([0.0, 0.0, 1.0])
        skew_e3 = np.array([[0.0, -1.0, 0.0],
                            [1.0, 0.0, 0.0],
                            [0.0, 0.0, 0.0]])
        B = np.zeros((4, 4))
        B[:3, 0] = R @ e3
        B[:3, 1:] = -T * R @ skew_e3
        B[3, 1:] = W[2]
        return B

    def check_chart(self, aux: np.ndarray):
        if aux[0] < self.min_thrust:
            raise ScenarioFault(f"thrust {aux[0]:.3f} below invertibility floor")
        if max(abs(aux[1]), abs(aux[2])) > self.max_tilt:
            raise ScenarioFault("attitude left the valid chart (tilt too large)")

    # -- nominal model in the flat coordinates ------------------------------

    def model(self, aux: np.ndarray, psi: float) -> ControlAffineModel:
        B = self.input_matrix(aux, psi)
        G = np.zeros((10, 4))
        G[6:, :] = np.eye(4)

        def f_hat(x):
            out = np.zeros(10)
            out[0:3] = x[3:6]
            out[3:6] = x[6:9]
            return out

        def g_hat(x):
            return G @ B

        return ControlAffineModel(n=10, m=4, f_hat=f_hat, g_hat=g_hat)

    # -- uncertainty --------------------------------------------------------

    def delta_true(self, x: np.ndarray, u: np.ndarray, aux: np.ndarray) -> np.ndarray:
        d = np.zeros(10)
        d[6:9] = self.uncertainty.c_d * np.tanh(x[3:6])
        B = self.input_matrix(aux, x[9])
        d[6:] += B @ (np.asarray(self.uncertainty.delta_u) * u)
        return d

    # -- barriers -----------------------------------------------------------

    def barrier_value(self, x: np.ndarray, ob: Obstacle) -> float:
        return float(np.linalg.norm(x[0:3] - np.asarray(ob.center))
                     - ob.radius - self.r0)

    def cascade_for(self, ob: Obstacle) -> HocbfCascade:
        center = np.asarray(ob.center, dtype=float)
        margin = ob.radius + self.r0

        def h(x):
            return float(np.linalg.norm(x[0:3] - center) - margin)

        def grad_h(x):
            g = np.zeros(10)
            d = x[0:3] - center
            g[0:3] = d / np.linalg.norm(d)
            return g

        def lfh(x):
            d = x[0:3] - center
            return float(d @ x[3:6] / np.linalg.norm(d))

        def grad_lfh(x):
            g = np.zeros(10)
            d = x[0:3] - center
            nd = np.linalg.norm(d)
            dh = d / nd
            proj = x[3:6] / nd - dh * float(dh @ x[3:6]) / nd
            g[0:3] = proj
            g[3:6] = dh
            return g

        def lf2h(x):
            d = x[0:3] - center
            nd = np.linalg.norm(d)
            dh = d / nd
            v = x[3:6]
            return float((v @ v - (dh @ v) ** 2) / nd + dh @ x[6:9])

        def grad_lf2h(x):
            g = np.zeros(10)
            d = x[0:3] - center
            nd = np.linalg.norm(d)
            dh = d / nd
            v, a = x[3:6], x[6:9]
            dv = float(dh @ v)
            # d/dp of (||v||^2 - (dh.v)^2)/nd + dh.a
            g[0:3] = (-(v @ v - dv * dv) * dh / nd ** 2
                      - 2.0 * dv * (v - dh * dv) / nd ** 2
                      + (a - dh * float(dh @ a)) / nd)
            g[3:6] = 2.0 * (v - dh * dv) / nd
            g[6:9] = dh
            return g

        return HocbfCascade(
            lie_chain=[(h, grad_h), (lfh, grad_lfh), (lf2h, grad_lf2h)],
            alphas=self.alphas,
        )

    # -- estimator and tracker ---------------------------------------------

    def gain(self) -> EstimatorGain:
        return make_gain(self.lambdas, self.delta_L)

    def tracker_gains(self) -> np.ndarray:
        """Coefficients (k_p, k_v, k_a) of the per-axis jerk law."""
        c = np.poly(self.poles)          # monic: [1, k_a, k_v, k_p]
        return np.array([c[3], c[2], c[1]])


def multirotor_defaults() -> MultirotorScenario:
    return MultirotorScenario()


def sample_multirotor_uncertainty(rng: np.random.Generator) -> MultirotorUncertainty:
    """Draws inside the family certified by delta_L = delta_b = 0.1."""
    return MultirotorUncertainty(
        c_d=rng.uniform(0.04, 0.055),
        delta_u=tuple(-rng.uniform(0.0, 0.0008, size=4)),
    )


def multirotor_scenario_for_seed(seed) -> MultirotorScenario:
    base = multirotor_defaults()
    if not seed:
        return base
    rng = np.random.default_rng(seed)
    return replace(base, uncertainty=sample_multirotor_uncertainty(rng))


def mr_columns(n_obs: int) -> tuple:
    cols = ["p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "a_x", "a_y", "a_z", "psi",
            "T", "phi", "theta", "u_1", "u_2", "u_3", "u_4", "track_err"]
    for i in range(1, n_obs + 1):
        cols += [f"h_{i}", f"h_e_{i}"]
    cols += ["err_norm", "err_bound", "out_bound", "qp_status"]
    return tuple(cols)


def multirotor_trace_from_arrays(sc: MultirotorScenario, mode: str,
                                 cfg: IntegratorConfig, raw: np.ndarray) -> SimulationTrace:
    """Wrap the compiled kernel's column block into a SimulationTrace."""
    ts = np.arange(cfg.n_steps + 1) * cfg.dt
    names = mr_columns(len(sc.obstacles))
    cols = {name: np.ascontiguousarray(raw[:, i]) for i, name in enumerate(names)}
    return SimulationTrace(t=ts, columns=cols,
                           meta={"scenario": "multirotor", "mode": mode,
                                 "backend": "compiled"})


def run_multirotor(sc: MultirotorScenario, mode: str, cfg: IntegratorConfig,
                   backend: str = "auto") -> SimulationTrace:
    """Closed-loop obstacle-avoidance run.

    Per step: estimator output, pole-placement tracker jerk v mapped to
    u = B_u^-1 v, one robust (or nominal) top-order barrier row per
    obstacle, QP projection of u, then RK4 of the stacked
    (x, thrust/attitude, xi) with zero-order hold.
    """
    if mode not in MR_MODES:
        raise ConfigurationError(f"unknown multirotor mode {mode!r}; expected one of {MR_MODES}")
    if backend not in ("auto", "python", "compiled"):
        raise ConfigurationError(f"unknown backend {backend!r}")
    if backend != "python":
        from .. import engine
        if engine.HAVE_FAST_KERNELS:
            return engine.run_multirotor_compiled(sc, mode, cfg)
        if backend == "compiled":
            raise ConfigurationError("compiled kernels are not available")
    return _run_multirotor_python(sc, mode, cfg)


def _run_multirotor_python(sc: MultirotorScenario, mode: str,
                           cfg: IntegratorConfig) -> SimulationTrace:
    with_unc = mode != "nominal"
    robust = mode == "method2_hocbf"
    gain = sc.gain()
    lam = np.asarray(sc.lambdas, dtype=float)
    cascades = [sc.cascade_for(ob) for ob in sc.obstacles]
    kp, kv, ka = sc.tracker_gains()
    n_steps = cfg.n_steps
    ts = np.arange(n_steps + 1) * cfg.dt

    x = sc.initial_state()
    aux = sc.initial_aux()
    xi = lam * x                      # estimator output starts at zero
    columns = {name: np.zeros(n_steps + 1) for name in mr_columns(len(sc.obstacles))}
    u_hold = np.zeros(4)
    warm = ()
    G = np.zeros((10, 4))
    G[6:, :] = np.eye(4)

    for k in range(n_steps + 1):
        t = ts[k]
        sc.check_chart(aux)
        delta_hat = lam * x - xi
        model = sc.model(aux, x[9])

        # tracking jerk demand and yaw-rate demand
        eta = x - sc.reference(t)
        v_des = np.empty(4)
        v_des[:3] = -kp * eta[0:3] - kv * eta[3:6] - ka * eta[6:9]
        v_des[3] = -sc.k_psi * eta[9]
        # acceleration envelope: stop the tracker from demanding jerk that
        # grows ||a|| past a_max (the safety rows may still override)
        a_norm = float(np.linalg.norm(x[6:9]))
        if a_norm > sc.a_max:
            ah = x[6:9] / a_norm
            outward = float(ah @ v_des[:3])
            if outward > 0.0:
                v_des[:3] -= outward * ah
            v_des[:3] -= 2.0 * (a_norm - sc.a_max) * ah
        B = sc.input_matrix(aux, x[9])
        u_des = np.linalg.solve(B, v_des)

        rows = []
        for casc in cascades:
            if robust:
                row = hocbf_method2_row(model, casc, delta_hat, gain,
                                        sc.delta_L, sc.delta_b, x, t)
            else:
                row = hocbf_method2_row(model, casc, np.zeros(10), gain,
                                        0.0, 0.0, x, t)
                row = AffineConstraint(row.a, row.b, label="nominal.hocbf")
            rows.append(row)

        u_hi = np.array([sc.u1_max, sc.rate_max, sc.rate_max, sc.rate_max])
        prob = QpProblem(dim=4, hessian_diag=np.ones(4), linear_ref=u_des,
                         constraints=tuple(rows), box=(-u_hi, u_hi))
        sol = solve(prob, warm_active=warm)
        if sol.status == "optimal":
            warm = sol.active_set
            u = sol.u_star.copy()
            qp_ok = 1.0
        else:
            u = u_hold.copy()
            qp_ok = 0.0
        u_hold = u

        delta = sc.delta_true(x, u, aux) if with_unc else np.zeros(10)
        e = delta - delta_hat
        columns["p_x"][k], columns["p_y"][k], columns["p_z"][k] = x[0:3]
        columns["v_x"][k], columns["v_y"][k], columns["v_z"][k] = x[3:6]
        columns["a_x"][k], columns["a_y"][k], columns["a_z"][k] = x[6:9]
        columns["psi"][k] = x[9]
        columns["T"][k], columns["phi"][k], columns["theta"][k] = aux
        for j in range(4):
            columns[f"u_{j + 1}"][k] = u[j]
        columns["track_err"][k] = float(np.linalg.norm(eta[0:3]))
        for i, casc in enumerate(cascades, start=1):
            phis = casc.phi_values(x)
            columns[f"h_{i}"][k] = phis[0]
            columns[f"h_e_{i}"][k] = phis[2]
        columns["err_norm"][k] = float(np.linalg.norm(e))
        columns["err_bound"][k] = error_bound(gain, sc.delta_L, sc.delta_b, t)
        columns["out_bound"][k] = output_bound(gain, sc.delta_b, t)
        columns["qp_status"][k] = qp_ok
        if k == n_steps:
            break

        def zdot(zv, tv):
            xv, auxv, xiv = zv[:10], zv[10:13], zv[13:]
            Bv = sc.input_matrix(auxv, xv[9])
            nominal = np.zeros(10)
            nominal[0:3] = xv[3:6]
            nominal[3:6] = xv[6:9]
            nominal = nominal + G @ (Bv @ u)
            xdot = nominal.copy()
            if with_unc:
                xdot = xdot + sc.delta_true(xv, u, auxv)
            Wv = sc.euler_rate_matrix(auxv)
            auxdot = np.array([u[0],
                               Wv[0] @ u[1:],
                               Wv[1] @ u[1:]])
            xidot = lam * (nominal + lam * xv - xiv)
            return np.concatenate([xdot, auxdot, xidot])

        z = np.concatenate([x, aux, xi])
        z = rk4_step(zdot, z, t, cfg.dt)
        x, aux, xi = z[:10], z[10:13], z[13:]

    return SimulationTrace(t=ts, columns=columns,
                           meta={"scenario": "multirotor", "mode": mode,
                                 "backend": "python"})

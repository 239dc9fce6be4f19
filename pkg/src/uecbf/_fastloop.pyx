# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the closed-loop scenario hot paths.

The pure-Python loops in ``scenarios/`` are the reference implementation;
the kernels here replicate them step for step (same row construction,
same exact active-set QP enumeration including warm starting, same
stacked RK4) so that backend equivalence can be pinned by tests.  The
embedded QP solver mirrors ``qp.solve``; on the rare enumeration miss it
falls back to the Python solver for the authoritative infeasibility
certificate.
"""

import numpy as np

from libc.math cimport M_PI, cos, exp, fabs, isfinite, sin, sqrt, tan, tanh

from .exceptions import IntegrationFault, ScenarioFault, SolverFault
from .qp import AffineConstraint, QpProblem
from .qp import solve as _py_solve

cdef double _FEAS_TOL = 1e-9
cdef double _DUAL_TOL = 1e-9
cdef double _KKT_LIMIT = 1e-6


# ---------------------------------------------------------------------------
# small dense linear algebra
# ---------------------------------------------------------------------------

cdef int _gauss(int n, double* A, double* rhs) noexcept nogil:
    """In-place partial-pivot solve of A x = rhs (row-major, destroyed).

    Returns -1 on an exact zero pivot, matching LAPACK's singularity
    criterion used by numpy.linalg.solve.
    """
    cdef int i, j, k, piv
    cdef double mx, tmp, f
    for k in range(n):
        piv = k
        mx = fabs(A[k * n + k])
        for i in range(k + 1, n):
            if fabs(A[i * n + k]) > mx:
                mx = fabs(A[i * n + k])
                piv = i
        if mx == 0.0:
            return -1
        if piv != k:
            for j in range(k, n):
                tmp = A[k * n + j]; A[k * n + j] = A[piv * n + j]; A[piv * n + j] = tmp
            tmp = rhs[k]; rhs[k] = rhs[piv]; rhs[piv] = tmp
        for i in range(k + 1, n):
            f = A[i * n + k] / A[k * n + k]
            if f != 0.0:
                for j in range(k + 1, n):
                    A[i * n + j] -= f * A[k * n + j]
                rhs[i] -= f * rhs[k]
    for k in range(n - 1, -1, -1):
        tmp = rhs[k]
        for j in range(k + 1, n):
            tmp -= A[k * n + j] * rhs[j]
        rhs[k] = tmp / A[k * n + k]
    return 0


# ---------------------------------------------------------------------------
# exact active-set QP (mirror of qp.solve for rows with nonzero coefficients)
# ---------------------------------------------------------------------------

cdef int _qp_try_subset(int dim, int n_rows, double* A, double* b, double* w,
                        double* hess, double* ref, int* act, int n_act,
                        double* z, double* lam, double* kkt) noexcept nogil:
    """Equality-solve one candidate active set; 1 = KKT-consistent point."""
    cdef double S[25]
    cdef double rhs[5]
    cdef int i, j, l, rj
    cdef bint is_act
    cdef double dot, g, stat, primal, comp, dual

    if n_act == 0:
        for i in range(dim):
            z[i] = ref[i]
    else:
        for j in range(n_act):
            for l in range(n_act):
                dot = 0.0
                for i in range(dim):
                    dot += A[act[j] * dim + i] * A[act[l] * dim + i] / w[i]
                S[j * n_act + l] = dot
            dot = b[act[j]]
            for i in range(dim):
                dot -= A[act[j] * dim + i] * ref[i]
            rhs[j] = dot
        if _gauss(n_act, S, rhs) != 0:
            return 0
        for j in range(n_act):
            lam[j] = rhs[j]
            if not isfinite(lam[j]):
                return 0
        for j in range(n_act):
            if lam[j] < -_DUAL_TOL:
                return 0
        for i in range(dim):
            dot = ref[i]
            for j in range(n_act):
                dot += A[act[j] * dim + i] * lam[j] / w[i]
            z[i] = dot

    for rj in range(n_rows):
        is_act = False
        for j in range(n_act):
            if act[j] == rj:
                is_act = True
                break
        if is_act:
            continue
        dot = 0.0
        for i in range(dim):
            dot += A[rj * dim + i] * z[i]
        if dot < b[rj] - _FEAS_TOL:
            return 0

    stat = 0.0
    for i in range(dim):
        g = 2.0 * hess[i] * (z[i] - ref[i])
        for j in range(n_act):
            g -= lam[j] * A[act[j] * dim + i]
        if fabs(g) > stat:
            stat = fabs(g)
    primal = -1e300
    for rj in range(n_rows):
        dot = 0.0
        for i in range(dim):
            dot += A[rj * dim + i] * z[i]
        if b[rj] - dot > primal:
            primal = b[rj] - dot
    if n_rows == 0:
        primal = 0.0
    comp = 0.0
    dual = 0.0
    for j in range(n_act):
        dot = 0.0
        for i in range(dim):
            dot += A[act[j] * dim + i] * z[i]
        if fabs(lam[j] * (dot - b[act[j]])) > comp:
            comp = fabs(lam[j] * (dot - b[act[j]]))
        if -lam[j] > dual:
            dual = -lam[j]
    kkt[0] = stat
    if primal > kkt[0]:
        kkt[0] = primal
    if comp > kkt[0]:
        kkt[0] = comp
    if dual > kkt[0]:
        kkt[0] = dual
    if kkt[0] < 0.0:
        kkt[0] = 0.0
    return 1


cdef int _qp_solve(int dim, int n_rows, double* A, double* b, double* hess,
                   double* ref, int* warm, int n_warm,
                   double* z, int* act_out, int* n_act_out) noexcept nogil:
    """Subset enumeration, warm set first.  1 optimal, 0 no subset, -1 KKT blowup."""
    cdef double w[5]
    cdef double lam[5]
    cdef double kkt
    cdef int act[5]
    cdef int i, j, k, ok
    cdef bint same, warm_valid
    cdef int max_active = dim if dim < n_rows else n_rows

    for i in range(dim):
        w[i] = 2.0 * hess[i]

    if n_warm > 0:
        warm_valid = True
        for j in range(n_warm):
            if warm[j] < 0 or warm[j] >= n_rows:
                warm_valid = False
        if warm_valid:
            for j in range(n_warm):
                act[j] = warm[j]
            ok = _qp_try_subset(dim, n_rows, A, b, w, hess, ref, act, n_warm, z, lam, &kkt)
            if ok:
                if kkt > _KKT_LIMIT:
                    return -1
                for j in range(n_warm):
                    act_out[j] = act[j]
                n_act_out[0] = n_warm
                return 1

    # size-0 subset (the unconstrained minimizer)
    ok = _qp_try_subset(dim, n_rows, A, b, w, hess, ref, act, 0, z, lam, &kkt)
    if ok:
        if kkt > _KKT_LIMIT:
            return -1
        n_act_out[0] = 0
        return 1

    for k in range(1, max_active + 1):
        for j in range(k):
            act[j] = j
        while True:
            same = (k == n_warm)
            if same:
                for j in range(k):
                    if act[j] != warm[j]:
                        same = False
                        break
            if not same:
                ok = _qp_try_subset(dim, n_rows, A, b, w, hess, ref, act, k, z, lam, &kkt)
                if ok:
                    if kkt > _KKT_LIMIT:
                        return -1
                    for j in range(k):
                        act_out[j] = act[j]
                    n_act_out[0] = k
                    return 1
            j = k - 1
            while j >= 0 and act[j] == n_rows - k + j:
                j -= 1
            if j < 0:
                break
            act[j] += 1
            for i in range(j + 1, k):
                act[i] = act[i - 1] + 1
    return 0


def _fallback_solve(int dim, A_np, b_np, hess_np, ref_np, n_con, box, warm):
    """Authoritative Python solve for the rare enumeration miss.

    Returns (status, z, active) with the same semantics as qp.solve; raises
    SolverFault exactly where the reference implementation would.
    """
    rows = tuple(AffineConstraint(A_np[j], b_np[j]) for j in range(n_con))
    prob = QpProblem(dim=dim, hessian_diag=hess_np, linear_ref=ref_np,
                     constraints=rows, box=box)
    sol = _py_solve(prob, warm_active=tuple(warm))
    if sol.status == "optimal":
        return 1, sol.u_star, sol.active_set
    return 0, None, ()


# ---------------------------------------------------------------------------
# adaptive cruise control kernel
# ---------------------------------------------------------------------------

def acc_loop(sc, mode, double dt, int n_steps):
    """Compiled ACC closed loop; returns the (n_steps+1, 16) trace column block."""
    cdef int imode
    if mode == "nominal":
        imode = 0
    elif mode == "method1":
        imode = 1
    elif mode == "method1_alt":
        imode = 2
    elif mode == "method2":
        imode = 3
    elif mode == "unprotected":
        imode = 4
    else:
        raise ValueError(f"unknown ACC mode {mode!r}")
    if len(sc.lambdas) != 2:
        raise ValueError("ACC kernel requires a 2-dim estimator gain")

    unc = sc.uncertainty
    gain = sc.gain()
    cdef double M = sc.M, f0 = sc.f0, f1 = sc.f1, f2 = sc.f2
    cdef double tau_d = sc.tau_d, v_l = sc.v_l, v_d = sc.v_d
    cdef double delta_L = sc.delta_L, delta_b = sc.delta_b
    cdef double mu_h = sc.mu_h, sigma_V = sc.sigma_V, alpha_cbf = sc.alpha_cbf
    cdef double clf_lambda = sc.clf_lambda, p_c = sc.p_c, u_max = sc.u_max
    cdef double amp = unc.amp, freq = unc.freq, phase = unc.phase
    cdef double drag_frac = unc.drag_frac, input_gain = unc.input_gain
    cdef double lam0 = sc.lambdas[0], lam1 = sc.lambdas[1]
    cdef double P_norm = gain.P_norm, script_P = gain.script_P
    cdef double lmin = gain.lambda_min, lmax = gain.lambda_max
    cdef double D_m1 = 1.0
    if imode == 1:
        D_m1 = sc.method1_params().D     # construction validates D > 0
    cdef bint with_unc = imode != 0
    cdef bint compensate = imode == 1 or imode == 2
    # matching matrix first entry, computed the way the reference path does
    cdef double Q0 = (1.0 / M) / (1.0 / (M * M))

    out_np = np.zeros((n_steps + 1, 16))
    cdef double[:, ::1] out = out_np
    cdef double x0 = sc.x0[0], x1 = sc.x0[1]
    cdef double xi0 = lam0 * x0, xi1 = lam1 * x1
    cdef double u_hold = 0.0
    cdef int warm[5]
    cdef int n_warm = 0

    cdef double A[8]          # 4 rows x dim 2
    cdef double brow[4]
    cdef double hess[2]
    cdef double ref[2]
    cdef double z[2]
    cdef int act[5]
    cdef int n_act = 0
    hess[0] = 1.0
    hess[1] = p_c

    cdef int k, j, ret
    cdef double t, dh0, dh1, Fr, gradf, h, a_cbf, errb, outb, bc, gamma, Sm, nrm
    cdef double comp, gV0, a_clf0, b_clf, u_tilde, delta_c, qp_ok, u, dt1, e0, e1
    cdef double kd
    # RK4 scratch
    cdef double zs[4]
    cdef double k1[4]
    cdef double k2[4]
    cdef double k3[4]
    cdef double k4[4]
    cdef double ztmp[4]
    cdef double Frv, fd0, fd1, uk, tv
    cdef int stage, ii
    nrm = sqrt(tau_d * tau_d + 1.0)

    for k in range(n_steps + 1):
        t = k * dt
        dh0 = lam0 * x0 - xi0
        dh1 = lam1 * x1 - xi1
        Fr = f0 + f1 * x0 + f2 * x0 * x0
        gradf = (-tau_d) * (-Fr / M) + (v_l - x0)
        h = x1 - tau_d * x0
        a_cbf = (-tau_d) * (1.0 / M)
        errb = script_P * ((delta_b - 2.0 * delta_L * P_norm)
                           * exp(-t / (2.0 * P_norm)) + 2.0 * P_norm * delta_L)
        outb = (2.0 * script_P * delta_b * lmax * P_norm
                * (1.0 - exp(-t / (2.0 * P_norm))))

        if imode == 1:
            gamma = delta_L * delta_L / (2.0 * lmin)
            Sm = -mu_h * h + (tau_d * tau_d + 1.0) / D_m1 + sigma_V * gamma
            bc = Sm - gradf
        elif imode == 2:
            bc = (-alpha_cbf * h - gradf) + nrm * errb
        elif imode == 3:
            bc = (-alpha_cbf * h - gradf
                  - ((-tau_d) * dh0 + dh1) + nrm * errb)
        else:
            bc = -alpha_cbf * h - gradf

        comp = 0.0
        if compensate:
            comp = Q0 * dh0

        gV0 = 2.0 * (x0 - v_d)
        a_clf0 = -(gV0 * (1.0 / M))
        b_clf = clf_lambda * (x0 - v_d) * (x0 - v_d) + gV0 * (-Fr / M)
        if compensate:
            b_clf = b_clf + a_clf0 * comp

        kd = Fr
        ref[0] = kd / M
        ref[1] = 0.0
        A[0] = a_cbf * M; A[1] = 0.0; brow[0] = bc
        A[2] = a_clf0 * M; A[3] = 1.0; brow[1] = b_clf
        A[4] = 1.0; A[5] = 0.0; brow[2] = -u_max / M
        A[6] = -1.0; A[7] = 0.0; brow[3] = -(u_max / M)

        ret = _qp_solve(2, 4, A, brow, hess, ref, warm, n_warm, z, act, &n_act)
        if ret == -1:
            raise SolverFault("KKT residual blowup in compiled ACC kernel")
        if ret == 0:
            A_np = np.array([[A[0], A[1]], [A[2], A[3]]])
            b_np = np.array([brow[0], brow[1]])
            box = (np.array([-u_max / M, -np.inf]), np.array([u_max / M, np.inf]))
            status, z_py, act_py = _fallback_solve(
                2, A_np, b_np, np.array([1.0, p_c]),
                np.array([ref[0], ref[1]]), 2, box, tuple(warm[j] for j in range(n_warm)))
            if status == 1:
                z[0] = z_py[0]; z[1] = z_py[1]
                n_act = len(act_py)
                for j in range(n_act):
                    act[j] = act_py[j]
                ret = 1
        if ret == 1:
            n_warm = n_act
            for j in range(n_act):
                warm[j] = act[j]
            u_tilde = z[0] * M
            delta_c = z[1]
            qp_ok = 1.0
        else:
            u_tilde = u_hold
            delta_c = 0.0
            qp_ok = 0.0
        if compensate:
            u = u_tilde - comp
        else:
            u = u_tilde
        u_hold = u_tilde

        if with_unc:
            dt1 = (drag_frac * Fr / M + input_gain * u / M
                   + amp * sin(2.0 * M_PI * freq * t + phase) / M)
        else:
            dt1 = 0.0
        e0 = dt1 - dh0
        e1 = 0.0 - dh1

        out[k, 0] = x0
        out[k, 1] = x1
        out[k, 2] = u
        out[k, 3] = u_tilde
        out[k, 4] = delta_c
        out[k, 5] = h
        out[k, 6] = h - sigma_V * 0.5 * (e0 * e0 + e1 * e1)
        out[k, 7] = (x0 - v_d) * (x0 - v_d)
        out[k, 8] = dt1
        out[k, 9] = 0.0
        out[k, 10] = dh0
        out[k, 11] = dh1
        out[k, 12] = sqrt(e0 * e0 + e1 * e1)
        out[k, 13] = errb
        out[k, 14] = outb
        out[k, 15] = qp_ok
        if k == n_steps:
            break

        # stacked RK4 of (x, xi) under zero-order hold
        zs[0] = x0; zs[1] = x1; zs[2] = xi0; zs[3] = xi1
        uk = u
        for stage in range(4):
            if stage == 0:
                for ii in range(4):
                    ztmp[ii] = zs[ii]
                tv = t
            elif stage == 1:
                for ii in range(4):
                    ztmp[ii] = zs[ii] + 0.5 * dt * k1[ii]
                tv = t + 0.5 * dt
            elif stage == 2:
                for ii in range(4):
                    ztmp[ii] = zs[ii] + 0.5 * dt * k2[ii]
                tv = t + 0.5 * dt
            else:
                for ii in range(4):
                    ztmp[ii] = zs[ii] + dt * k3[ii]
                tv = t + dt
            Frv = f0 + f1 * ztmp[0] + f2 * ztmp[0] * ztmp[0]
            fd0 = -Frv / M + (1.0 / M) * uk
            fd1 = v_l - ztmp[0]
            if stage == 0:
                k1[0] = fd0; k1[1] = fd1
            elif stage == 1:
                k2[0] = fd0; k2[1] = fd1
            elif stage == 2:
                k3[0] = fd0; k3[1] = fd1
            else:
                k4[0] = fd0; k4[1] = fd1
            if with_unc:
                dt1 = (drag_frac * Frv / M + input_gain * uk / M
                       + amp * sin(2.0 * M_PI * freq * tv + phase) / M)
                if stage == 0:
                    k1[0] += dt1
                elif stage == 1:
                    k2[0] += dt1
                elif stage == 2:
                    k3[0] += dt1
                else:
                    k4[0] += dt1
            if stage == 0:
                k1[2] = lam0 * (fd0 + lam0 * ztmp[0] - ztmp[2])
                k1[3] = lam1 * (fd1 + lam1 * ztmp[1] - ztmp[3])
            elif stage == 1:
                k2[2] = lam0 * (fd0 + lam0 * ztmp[0] - ztmp[2])
                k2[3] = lam1 * (fd1 + lam1 * ztmp[1] - ztmp[3])
            elif stage == 2:
                k3[2] = lam0 * (fd0 + lam0 * ztmp[0] - ztmp[2])
                k3[3] = lam1 * (fd1 + lam1 * ztmp[1] - ztmp[3])
            else:
                k4[2] = lam0 * (fd0 + lam0 * ztmp[0] - ztmp[2])
                k4[3] = lam1 * (fd1 + lam1 * ztmp[1] - ztmp[3])
        for ii in range(4):
            zs[ii] = zs[ii] + (dt / 6.0) * (k1[ii] + 2.0 * k2[ii] + 2.0 * k3[ii] + k4[ii])
            if not isfinite(zs[ii]):
                raise IntegrationFault(f"non-finite state after step at t={t}", t=t)
        x0 = zs[0]; x1 = zs[1]; xi0 = zs[2]; xi1 = zs[3]

    return out_np


# ---------------------------------------------------------------------------
# multirotor kernel
# ---------------------------------------------------------------------------

cdef void _mr_build_B(double T, double phi, double th, double psi, double* B) noexcept nogil:
    """Input matrix mapping (thrust rate, body rates) to (jerk, yaw rate)."""
    cdef double cf = cos(phi), sf = sin(phi)
    cdef double ct = cos(th), st = sin(th)
    cdef double cp = cos(psi), sp = sin(psi)
    cdef double R[9]
    cdef int i
    R[0] = cp * ct; R[1] = cp * st * sf - sp * cf; R[2] = cp * st * cf + sp * sf
    R[3] = sp * ct; R[4] = sp * st * sf + cp * cf; R[5] = sp * st * cf - cp * sf
    R[6] = -st;     R[7] = ct * sf;                R[8] = ct * cf
    for i in range(3):
        B[i * 4 + 0] = R[i * 3 + 2]
        B[i * 4 + 1] = -T * R[i * 3 + 1]
        B[i * 4 + 2] = T * R[i * 3 + 0]
        B[i * 4 + 3] = 0.0
    B[12] = 0.0
    B[13] = 0.0
    B[14] = sf / ct
    B[15] = cf / ct


cdef void _mr_delta(double* xv, double* u, double* B, double c_d,
                    double* du, double* d) noexcept nogil:
    cdef int i, j
    cdef double s
    for i in range(10):
        d[i] = 0.0
    for i in range(3):
        d[6 + i] = c_d * tanh(xv[3 + i])
    for i in range(4):
        s = 0.0
        for j in range(4):
            s += B[i * 4 + j] * (du[j] * u[j])
        d[6 + i] += s


cdef void _mr_deriv(double* zv, double tv, double* u, double* lam,
                    bint with_unc, double c_d, double* du, double* out) noexcept nogil:
    """Stacked derivative of (x[10], aux[3], xi[10]) under zero-order hold."""
    cdef double B[16]
    cdef double nominal[10]
    cdef double d[10]
    cdef int i, j
    cdef double s, cf, sf, tt
    _mr_build_B(zv[10], zv[11], zv[12], zv[9], B)
    for i in range(10):
        nominal[i] = 0.0
    for i in range(3):
        nominal[i] = zv[3 + i]
        nominal[3 + i] = zv[6 + i]
    for i in range(4):
        s = 0.0
        for j in range(4):
            s += B[i * 4 + j] * u[j]
        nominal[6 + i] += s
    for i in range(10):
        out[i] = nominal[i]
    if with_unc:
        _mr_delta(zv, u, B, c_d, du, d)
        for i in range(10):
            out[i] += d[i]
    cf = cos(zv[11]); sf = sin(zv[11]); tt = tan(zv[12])
    out[10] = u[0]
    out[11] = 1.0 * u[1] + sf * tt * u[2] + cf * tt * u[3]
    out[12] = cf * u[2] + (-sf) * u[3]
    for i in range(10):
        out[13 + i] = lam[i] * (nominal[i] + lam[i] * zv[i] - zv[13 + i])


def multirotor_loop(sc, mode, double dt, int n_steps):
    """Compiled multirotor closed loop; returns the full trace column block."""
    cdef int imode
    if mode == "nominal":
        imode = 0
    elif mode == "method2_hocbf":
        imode = 1
    elif mode == "unprotected":
        imode = 2
    else:
        raise ValueError(f"unknown multirotor mode {mode!r}")
    cdef bint with_unc = imode != 0
    cdef bint robust = imode == 1

    gain = sc.gain()
    cdef int n_obs = len(sc.obstacles)
    if n_obs > 8:
        raise ValueError("compiled kernel supports at most 8 obstacles")
    centers_np = np.array([obst.center for obst in sc.obstacles], dtype=float)
    margins_np = np.array([obst.radius + sc.r0 for obst in sc.obstacles])
    cdef double[:, ::1] centers = centers_np
    cdef double[::1] margins = margins_np
    lam_np = np.asarray(sc.lambdas, dtype=float)
    cdef double[::1] lam = lam_np
    du_np = np.asarray(sc.uncertainty.delta_u, dtype=float)
    cdef double[::1] du = du_np
    cdef double c_d = sc.uncertainty.c_d
    cdef double a1 = sc.alphas[0], a2 = sc.alphas[1], a3 = sc.alphas[2]
    cdef double c0 = a1 * a2, c1 = a1 + a2          # prod (s + a_i) over the inner gains
    kg = sc.tracker_gains()
    cdef double kp = kg[0], kv = kg[1], ka = kg[2]
    cdef double k_psi = sc.k_psi, a_max = sc.a_max
    cdef double min_thrust = sc.min_thrust, max_tilt = sc.max_tilt
    cdef double u1_max = sc.u1_max, rate_max = sc.rate_max
    cdef double delta_L = sc.delta_L, delta_b = sc.delta_b
    cdef double P_norm = gain.P_norm, script_P = gain.script_P, lmax = gain.lambda_max
    p0_np = np.asarray(sc.p0, dtype=float)
    vref_np = np.asarray(sc.v_ref, dtype=float)
    cdef double[::1] p0 = p0_np
    cdef double[::1] vref = vref_np

    cdef int n_cols = 22 + 2 * n_obs
    out_np = np.zeros((n_steps + 1, n_cols))
    cdef double[:, ::1] out = out_np

    x0_np = sc.initial_state()
    aux0_np = sc.initial_aux()
    cdef double zs[23]
    cdef int i, j, k
    for i in range(10):
        zs[i] = x0_np[i]
        zs[13 + i] = lam[i] * x0_np[i]
    for i in range(3):
        zs[10 + i] = aux0_np[i]

    cdef double u[4]
    cdef double u_hold[4]
    for i in range(4):
        u_hold[i] = 0.0
    cdef int warm[5]
    cdef int n_warm = 0

    cdef int n_rows = n_obs + 8
    cdef double A[64]         # up to 16 rows x dim 4
    cdef double brow[16]
    cdef double hess[4]
    cdef double ref[4]
    cdef double zsol[4]
    cdef int act[5]
    cdef int n_act = 0
    for i in range(4):
        hess[i] = 1.0
    cdef double u_hi[4]
    u_hi[0] = u1_max
    u_hi[1] = rate_max; u_hi[2] = rate_max; u_hi[3] = rate_max

    cdef double B[16]
    cdef double Bcopy[16]
    cdef double v_des[4]
    cdef double eta[10]
    cdef double delta[10]
    cdef double dhat[10]
    cdef double grad_top[9]
    cdef double dvec[3]
    cdef double dh[3]
    cdef double k1[23]
    cdef double k2[23]
    cdef double k3[23]
    cdef double k4[23]
    cdef double ztmp[23]
    cdef double derv[23]
    cdef int stage, ob, ret
    cdef double t, tv, a_norm, outward, s, nd, dv, da, h, lfh, lf2h, lf_top
    cdef double drift, phi_m1, errb, outb, b_ob, nrm_g, qp_ok, vv, tmp
    cdef double hvals[8]
    cdef double hevals[8]

    for k in range(n_steps + 1):
        t = k * dt
        if zs[10] < min_thrust:
            raise ScenarioFault(f"thrust {zs[10]:.3f} below invertibility floor")
        if max(fabs(zs[11]), fabs(zs[12])) > max_tilt:
            raise ScenarioFault("attitude left the valid chart (tilt too large)")
        for i in range(10):
            dhat[i] = lam[i] * zs[i] - zs[13 + i]

        # tracking error against the constant-velocity reference line
        for i in range(3):
            eta[i] = zs[i] - (p0[i] + t * vref[i])
            eta[3 + i] = zs[3 + i] - vref[i]
            eta[6 + i] = zs[6 + i]
        eta[9] = zs[9]
        for i in range(3):
            v_des[i] = -kp * eta[i] - kv * eta[3 + i] - ka * eta[6 + i]
        v_des[3] = -k_psi * eta[9]
        # acceleration envelope: stop the tracker from demanding jerk that
        # grows ||a|| past a_max (the safety rows may still override)
        a_norm = sqrt(zs[6] * zs[6] + zs[7] * zs[7] + zs[8] * zs[8])
        if a_norm > a_max:
            outward = 0.0
            for i in range(3):
                outward += (zs[6 + i] / a_norm) * v_des[i]
            if outward > 0.0:
                for i in range(3):
                    v_des[i] -= outward * (zs[6 + i] / a_norm)
            for i in range(3):
                v_des[i] -= 2.0 * (a_norm - a_max) * (zs[6 + i] / a_norm)

        _mr_build_B(zs[10], zs[11], zs[12], zs[9], B)
        for i in range(16):
            Bcopy[i] = B[i]
        for i in range(4):
            ref[i] = v_des[i]
        if _gauss(4, Bcopy, ref) != 0:
            raise ScenarioFault("input map is singular; attitude chart invalid")
        # ref now holds u_des = B^-1 v_des

        errb = script_P * ((delta_b - 2.0 * delta_L * P_norm)
                           * exp(-t / (2.0 * P_norm)) + 2.0 * P_norm * delta_L) \
            if robust else 0.0
        outb = (2.0 * script_P * delta_b * lmax * P_norm
                * (1.0 - exp(-t / (2.0 * P_norm))))

        for ob in range(n_obs):
            nd = 0.0
            for i in range(3):
                dvec[i] = zs[i] - centers[ob, i]
                nd += dvec[i] * dvec[i]
            nd = sqrt(nd)
            for i in range(3):
                dh[i] = dvec[i] / nd
            h = nd - margins[ob]
            dv = 0.0
            da = 0.0
            vv = 0.0
            for i in range(3):
                dv += dh[i] * zs[3 + i]
                da += dh[i] * zs[6 + i]
                vv += zs[3 + i] * zs[3 + i]
            lfh = 0.0
            for i in range(3):
                lfh += dvec[i] * zs[3 + i]
            lfh = lfh / nd
            lf2h = (vv - dv * dv) / nd + da
            # gradient of L_f^2 h: position, velocity and acceleration blocks
            for i in range(3):
                grad_top[i] = (-(vv - dv * dv) * dh[i] / (nd * nd)
                               - 2.0 * dv * (zs[3 + i] - dh[i] * dv) / (nd * nd)
                               + (zs[6 + i] - dh[i] * da) / nd)
                grad_top[3 + i] = 2.0 * (zs[3 + i] - dh[i] * dv) / nd
                grad_top[6 + i] = dh[i]
            lf_top = 0.0
            for i in range(3):
                lf_top += grad_top[i] * zs[3 + i] + grad_top[3 + i] * zs[6 + i]
            drift = lf_top + c0 * lfh + c1 * lf2h
            phi_m1 = c0 * h + c1 * lfh + lf2h
            nrm_g = 0.0
            for i in range(9):
                nrm_g += grad_top[i] * grad_top[i]
            nrm_g = sqrt(nrm_g)
            # a = grad_top[6:9] . B[0:3, :]
            for j in range(4):
                s = 0.0
                for i in range(3):
                    s += grad_top[6 + i] * B[i * 4 + j]
                A[ob * 4 + j] = s
            s = 0.0
            if robust:
                for i in range(9):
                    s += grad_top[i] * dhat[i]
            b_ob = -a3 * phi_m1 - drift - s + nrm_g * errb
            brow[ob] = b_ob
            hvals[ob] = h
            hevals[ob] = phi_m1

        for i in range(4):
            A[(n_obs + 2 * i) * 4 + 0] = 0.0
            A[(n_obs + 2 * i) * 4 + 1] = 0.0
            A[(n_obs + 2 * i) * 4 + 2] = 0.0
            A[(n_obs + 2 * i) * 4 + 3] = 0.0
            A[(n_obs + 2 * i) * 4 + i] = 1.0
            brow[n_obs + 2 * i] = -u_hi[i]
            A[(n_obs + 2 * i + 1) * 4 + 0] = 0.0
            A[(n_obs + 2 * i + 1) * 4 + 1] = 0.0
            A[(n_obs + 2 * i + 1) * 4 + 2] = 0.0
            A[(n_obs + 2 * i + 1) * 4 + 3] = 0.0
            A[(n_obs + 2 * i + 1) * 4 + i] = -1.0
            brow[n_obs + 2 * i + 1] = -u_hi[i]

        ret = _qp_solve(4, n_rows, A, brow, hess, ref, warm, n_warm, zsol, act, &n_act)
        if ret == -1:
            raise SolverFault("KKT residual blowup in compiled multirotor kernel")
        if ret == 0:
            A_np = np.array([[A[ob * 4 + j] for j in range(4)] for ob in range(n_obs)])
            b_np = np.array([brow[ob] for ob in range(n_obs)])
            box = (np.array([-u_hi[i] for i in range(4)]),
                   np.array([u_hi[i] for i in range(4)]))
            status, z_py, act_py = _fallback_solve(
                4, A_np, b_np, np.ones(4), np.array([ref[i] for i in range(4)]),
                n_obs, box, tuple(warm[j] for j in range(n_warm)))
            if status == 1:
                for i in range(4):
                    zsol[i] = z_py[i]
                n_act = len(act_py)
                for j in range(n_act):
                    act[j] = act_py[j]
                ret = 1
        if ret == 1:
            n_warm = n_act
            for j in range(n_act):
                warm[j] = act[j]
            for i in range(4):
                u[i] = zsol[i]
            qp_ok = 1.0
        else:
            for i in range(4):
                u[i] = u_hold[i]
            qp_ok = 0.0
        for i in range(4):
            u_hold[i] = u[i]

        if with_unc:
            _mr_delta(zs, u, B, c_d, &du[0], delta)
        else:
            for i in range(10):
                delta[i] = 0.0

        for i in range(3):
            out[k, i] = zs[i]
            out[k, 3 + i] = zs[3 + i]
            out[k, 6 + i] = zs[6 + i]
        out[k, 9] = zs[9]
        out[k, 10] = zs[10]; out[k, 11] = zs[11]; out[k, 12] = zs[12]
        for i in range(4):
            out[k, 13 + i] = u[i]
        out[k, 17] = sqrt(eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2])
        for ob in range(n_obs):
            out[k, 18 + 2 * ob] = hvals[ob]
            out[k, 19 + 2 * ob] = hevals[ob]
        s = 0.0
        for i in range(10):
            tmp = delta[i] - dhat[i]
            s += tmp * tmp
        out[k, 18 + 2 * n_obs] = sqrt(s)
        out[k, 19 + 2 * n_obs] = script_P * ((delta_b - 2.0 * delta_L * P_norm)
                                             * exp(-t / (2.0 * P_norm))
                                             + 2.0 * P_norm * delta_L)
        out[k, 20 + 2 * n_obs] = outb
        out[k, 21 + 2 * n_obs] = qp_ok
        if k == n_steps:
            break

        for stage in range(4):
            if stage == 0:
                for i in range(23):
                    ztmp[i] = zs[i]
                tv = t
            elif stage == 1:
                for i in range(23):
                    ztmp[i] = zs[i] + 0.5 * dt * k1[i]
                tv = t + 0.5 * dt
            elif stage == 2:
                for i in range(23):
                    ztmp[i] = zs[i] + 0.5 * dt * k2[i]
                tv = t + 0.5 * dt
            else:
                for i in range(23):
                    ztmp[i] = zs[i] + dt * k3[i]
                tv = t + dt
            _mr_deriv(ztmp, tv, u, &lam[0], with_unc, c_d, &du[0], derv)
            if stage == 0:
                for i in range(23):
                    k1[i] = derv[i]
            elif stage == 1:
                for i in range(23):
                    k2[i] = derv[i]
            elif stage == 2:
                for i in range(23):
                    k3[i] = derv[i]
            else:
                for i in range(23):
                    k4[i] = derv[i]
        for i in range(23):
            zs[i] = zs[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if not isfinite(zs[i]):
                raise IntegrationFault(f"non-finite state after step at t={t}", t=t)

    return out_np

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ADMM iteration loop for the inner problem.

Mirrors the numpy backend in ``adversim.solver``: same channel order, same
update equations, same stopping, stall, and penalty-adaptation rules. The
constraint map is never materialized; channel values come from the integrator
recurrence and the adjoint from its reverse pass. The factorization is redone
in place when the penalty parameter adapts, and splits into per-axis blocks
when the problem carries no x/y coupling (axis-aligned corridors).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


cdef void _cholesky_block(double* m, double* L, int start, int end, int n) noexcept:
    """Lower Cholesky of the [start:end) diagonal block of an n-stride matrix."""
    cdef int i, j, k
    cdef double acc
    for i in range(start, end):
        for j in range(start, i + 1):
            acc = m[i * n + j]
            for k in range(start, j):
                acc -= L[i * n + k] * L[j * n + k]
            if i == j:
                L[i * n + i] = sqrt(acc)
            else:
                L[i * n + j] = acc / L[j * n + j]


cdef void _solve_block(double* L, double* LT, double* rhs, double* out, double* scratch,
                       int start, int end, int n) noexcept:
    cdef int i, k
    cdef double acc
    for i in range(start, end):
        acc = rhs[i]
        for k in range(start, i):
            acc -= L[i * n + k] * scratch[k]
        scratch[i] = acc / L[i * n + i]
    for i in range(end - 1, start - 1, -1):
        acc = scratch[i]
        for k in range(i + 1, end):
            acc -= LT[i * n + k] * out[k]
        out[i] = acc / LT[i * n + i]


cdef void _transpose_block(double* L, double* LT, int start, int end, int n) noexcept:
    cdef int i, k
    for i in range(start, end):
        for k in range(start, end):
            LT[i * n + k] = L[k * n + i]


cdef void _project_lens(double* z, int off, double nx, double ny, double lo, double hi) noexcept:
    """Project the pair z[off], z[off+1] onto the unit disc cut by the slab (nx, ny, lo, hi)."""
    cdef double wx = z[off], wy = z[off + 1]
    cdef double t = nx * wx + ny * wy
    cdef double t_cl = t
    if t_cl < lo: t_cl = lo
    if t_cl > hi: t_cl = hi
    cdef double qx = wx + (t_cl - t) * nx
    cdef double qy = wy + (t_cl - t) * ny
    cdef double nw, ta, edge, span, px, py, side
    if sqrt(qx * qx + qy * qy) <= 1.0:
        z[off] = qx; z[off + 1] = qy
        return
    nw = sqrt(wx * wx + wy * wy)
    if nw > 1.0:
        qx = wx / nw; qy = wy / nw
        ta = nx * qx + ny * qy
        if lo <= ta <= hi:
            z[off] = qx; z[off + 1] = qy
            return
        edge = hi if ta > hi else lo
    else:
        edge = hi if t > hi else lo
    if edge > 1.0: edge = 1.0
    if edge < -1.0: edge = -1.0
    span = 1.0 - edge * edge
    span = sqrt(span) if span > 0.0 else 0.0
    px = -ny; py = nx
    side = 1.0 if (px * wx + py * wy) >= 0.0 else -1.0
    z[off] = edge * nx + side * span * px
    z[off + 1] = edge * ny + side * span * py


cdef void _project_channels(
    double* z, int off_v, int off_a, int off_j, int off_hs, int off_term,
    bint has_v, bint has_a, bint has_j, bint has_term, int n_hs, int T,
    bint has_lens, double lens_nx, double lens_ny, double lens_lo, double lens_hi,
) noexcept:
    cdef int t, i
    cdef double nrm
    if has_v:
        for t in range(T):
            nrm = sqrt(z[off_v + 2 * t] ** 2 + z[off_v + 2 * t + 1] ** 2)
            if nrm > 1.0:
                z[off_v + 2 * t] /= nrm
                z[off_v + 2 * t + 1] /= nrm
    if has_a:
        for t in range(T):
            nrm = sqrt(z[off_a + 2 * t] ** 2 + z[off_a + 2 * t + 1] ** 2)
            if nrm > 1.0:
                z[off_a + 2 * t] /= nrm
                z[off_a + 2 * t + 1] /= nrm
    if has_j:
        for t in range(T):
            nrm = sqrt(z[off_j + 2 * t] ** 2 + z[off_j + 2 * t + 1] ** 2)
            if nrm > 1.0:
                z[off_j + 2 * t] /= nrm
                z[off_j + 2 * t + 1] /= nrm
    for i in range(n_hs):
        if z[off_hs + i] > 0.0:
            z[off_hs + i] = 0.0
    if has_term:
        if has_lens:
            _project_lens(z, off_term, lens_nx, lens_ny, lens_lo, lens_hi)
        else:
            nrm = sqrt(z[off_term] ** 2 + z[off_term + 1] ** 2)
            if nrm > 1.0:
                z[off_term] /= nrm
                z[off_term + 1] /= nrm


cdef void _adjoint(
    double* y, double* out,
    double* gpx, double* gpy, double* gvx, double* gvy, double* gax, double* gay,
    int T, double dt, double v_max, double a_max, double jerk_ball,
    const cnp.int64_t[::1] hs_steps, const double[:, ::1] hs_normals, int term_step, double term_radius,
    int off_v, int off_a, int off_j, int off_hs, int off_term,
    bint has_v, bint has_a, bint has_j, bint has_term, int n_hs,
) noexcept:
    """out = G^T y via the reverse pass of the integrator recurrence."""
    cdef int t, i
    cdef double rpx, rpy, rvx, rvy, rax, ray
    for t in range(T + 1):
        gpx[t] = 0.0; gpy[t] = 0.0
        gvx[t] = 0.0; gvy[t] = 0.0
        gax[t] = 0.0; gay[t] = 0.0
    if has_v:
        for t in range(T):
            gvx[t + 1] += y[off_v + 2 * t] / v_max
            gvy[t + 1] += y[off_v + 2 * t + 1] / v_max
    if has_a:
        for t in range(T):
            gax[t + 1] += y[off_a + 2 * t] / a_max
            gay[t + 1] += y[off_a + 2 * t + 1] / a_max
    for i in range(n_hs):
        t = <int>hs_steps[i]
        gpx[t] += hs_normals[i, 0] * y[off_hs + i]
        gpy[t] += hs_normals[i, 1] * y[off_hs + i]
    if has_term:
        gpx[term_step] += y[off_term] / term_radius
        gpy[term_step] += y[off_term + 1] / term_radius

    rpx = 0.0; rpy = 0.0; rvx = 0.0; rvy = 0.0; rax = 0.0; ray = 0.0
    for t in range(T, 0, -1):
        rpx += gpx[t]; rpy += gpy[t]
        rvx += gvx[t]; rvy += gvy[t]
        rax += gax[t]; ray += gay[t]
        out[t - 1] = rax * dt
        out[T + t - 1] = ray * dt
        # pull state gradients back one step
        rax += rvx * dt + rpx * 0.5 * dt * dt
        ray += rvy * dt + rpy * 0.5 * dt * dt
        rvx += rpx * dt
        rvy += rpy * dt
    if has_j:
        for t in range(T):
            out[t] += y[off_j + 2 * t] / jerk_ball
            out[T + t] += y[off_j + 2 * t + 1] / jerk_ball


def admm_solve(
    int T,
    double dt,
    const double[::1] p0, const double[::1] v0, const double[::1] a0,
    const double[::1] q,
    const double[:, ::1] big_h,
    const double[:, ::1] gram_base,
    double v_max, double a_max, double jerk_ball,
    const cnp.int64_t[::1] hs_steps, const double[:, ::1] hs_normals, const double[::1] hs_offsets,
    int term_step, const double[::1] term_center, double term_radius,
    int has_lens_i, double lens_nx, double lens_ny, double lens_lo, double lens_hi,
    double rho, double alpha, double tol, double eps_dual, int max_iter,
    int stall_window, double stall_residual,
    double rho_min, double rho_max, int adapt_interval, double adapt_trigger,
    double[::1] x, double[::1] u, int warm_flag,
    double[::1] history, int collect_history,
):
    cdef int n = 2 * T
    cdef int n_hs = hs_steps.shape[0]
    cdef bint has_v = v_max > 0.0
    cdef bint has_a = a_max > 0.0
    cdef bint has_j = jerk_ball > 0.0
    cdef bint has_term = term_step > 0
    cdef bint has_lens = has_lens_i != 0

    cdef int off_v = 0
    cdef int off_a = off_v + (2 * T if has_v else 0)
    cdef int off_j = off_a + (2 * T if has_a else 0)
    cdef int off_hs = off_j + (2 * T if has_j else 0)
    cdef int off_term = off_hs + n_hs
    cdef int m = off_term + (2 if has_term else 0)
    if m == 0 or u.shape[0] != m or x.shape[0] != n:
        raise ValueError("inconsistent problem dimensions")

    work = np.empty((9, m if m > n else n), dtype=np.float64)
    cdef double[:, ::1] wk = work
    cdef double* h = &wk[0, 0]
    cdef double* z = &wk[1, 0]
    cdef double* w = &wk[2, 0]
    cdef double* s = &wk[3, 0]
    cdef double* zprev = &wk[4, 0]
    cdef double* rhs = &wk[5, 0]
    cdef double* xbuf = &wk[6, 0]
    cdef double* scratch = &wk[7, 0]
    cdef double* term_row = &wk[8, 0]

    state = np.empty((6, T + 1), dtype=np.float64)
    cdef double[:, ::1] st = state
    cdef double* px = &st[0, 0]
    cdef double* py = &st[1, 0]
    cdef double* vx = &st[2, 0]
    cdef double* vy = &st[3, 0]
    cdef double* ax = &st[4, 0]
    cdef double* ay = &st[5, 0]

    grads = np.empty((6, T + 1), dtype=np.float64)
    cdef double[:, ::1] gr = grads
    cdef double* gpx = &gr[0, 0]
    cdef double* gpy = &gr[1, 0]
    cdef double* gvx = &gr[2, 0]
    cdef double* gvy = &gr[3, 0]
    cdef double* gax = &gr[4, 0]
    cdef double* gay = &gr[5, 0]

    mats = np.empty((3, n, n), dtype=np.float64)
    cdef double[:, :, ::1] mt = mats
    cdef double* gram = &mt[0, 0, 0]
    cdef double* mwork = &mt[1, 0, 0]
    cdef double* lfac = &mt[2, 0, 0]
    trans = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] tr = trans
    cdef double* ltrans = &tr[0, 0]

    cdef int t, i, k, it_count = 0, it = 0
    cdef int best_iter = 0
    cdef int status = 2
    cdef int last_adapt = 0
    cdef double lag, coeff, nrm, excess, viol, r_dual, dual_scale, q_scale
    cdef double best_viol = 1e300
    cdef double rp_rel, rd_rel, w_mag, ratio, rho_new
    cdef bint init_phase = True
    cdef bint block_diag

    q_scale = 1.0
    for i in range(n):
        if fabs(q[i]) > q_scale: q_scale = fabs(q[i])
    cdef double dual_force_max = 0.0

    # full Gram: corridor-level part plus the terminal rank-2 contribution
    for i in range(n):
        for k in range(n):
            gram[i * n + k] = gram_base[i, k]
    if has_term:
        for i in range(n):
            term_row[i] = 0.0
        for i in range(T):
            lag = term_step - 1 - i
            coeff = 0.5 * dt * dt * dt * lag * lag if lag >= 1 else 0.0
            term_row[i] = coeff / term_radius
        for i in range(T):
            for k in range(T):
                gram[i * n + k] += term_row[i] * term_row[k]
                gram[(T + i) * n + (T + k)] += term_row[i] * term_row[k]

    block_diag = True
    for i in range(T):
        for k in range(T, n):
            if gram[i * n + k] != 0.0 or big_h[i, k] != 0.0:
                block_diag = False
                break
        if not block_diag:
            break

    # factorization at the current rho
    for i in range(n):
        for k in range(n):
            mwork[i * n + k] = big_h[i, k] + rho * gram[i * n + k]
    if block_diag:
        _cholesky_block(mwork, lfac, 0, T, n)
        _cholesky_block(mwork, lfac, T, n, n)
        _transpose_block(lfac, ltrans, 0, T, n)
        _transpose_block(lfac, ltrans, T, n, n)
    else:
        _cholesky_block(mwork, lfac, 0, n, n)
        _transpose_block(lfac, ltrans, 0, n, n)

    # constant channel terms h: the zero-jerk response
    px[0] = p0[0]; py[0] = p0[1]
    vx[0] = v0[0]; vy[0] = v0[1]
    ax[0] = a0[0]; ay[0] = a0[1]
    for t in range(T):
        px[t + 1] = px[t] + vx[t] * dt + 0.5 * ax[t] * dt * dt
        py[t + 1] = py[t] + vy[t] * dt + 0.5 * ay[t] * dt * dt
        vx[t + 1] = vx[t] + ax[t] * dt
        vy[t + 1] = vy[t] + ay[t] * dt
        ax[t + 1] = ax[t]
        ay[t + 1] = ay[t]
    if has_v:
        for t in range(T):
            h[off_v + 2 * t] = vx[t + 1] / v_max
            h[off_v + 2 * t + 1] = vy[t + 1] / v_max
    if has_a:
        for t in range(T):
            h[off_a + 2 * t] = ax[t + 1] / a_max
            h[off_a + 2 * t + 1] = ay[t + 1] / a_max
    if has_j:
        for t in range(2 * T):
            h[off_j + t] = 0.0
    for i in range(n_hs):
        t = <int>hs_steps[i]
        h[off_hs + i] = hs_normals[i, 0] * px[t] + hs_normals[i, 1] * py[t] - hs_offsets[i]
    if has_term:
        h[off_term] = (px[term_step] - term_center[0]) / term_radius
        h[off_term + 1] = (py[term_step] - term_center[1]) / term_radius

    if warm_flag == 0:
        for i in range(n):
            x[i] = 0.0
        for i in range(m):
            u[i] = 0.0

    while True:
        # forward pass: propagate x -> states -> channel values w
        px[0] = p0[0]; py[0] = p0[1]
        vx[0] = v0[0]; vy[0] = v0[1]
        ax[0] = a0[0]; ay[0] = a0[1]
        for t in range(T):
            px[t + 1] = px[t] + vx[t] * dt + 0.5 * ax[t] * dt * dt
            py[t + 1] = py[t] + vy[t] * dt + 0.5 * ay[t] * dt * dt
            vx[t + 1] = vx[t] + ax[t] * dt
            vy[t + 1] = vy[t] + ay[t] * dt
            ax[t + 1] = ax[t] + x[t] * dt
            ay[t + 1] = ay[t] + x[T + t] * dt
        if has_v:
            for t in range(T):
                w[off_v + 2 * t] = vx[t + 1] / v_max
                w[off_v + 2 * t + 1] = vy[t + 1] / v_max
        if has_a:
            for t in range(T):
                w[off_a + 2 * t] = ax[t + 1] / a_max
                w[off_a + 2 * t + 1] = ay[t + 1] / a_max
        if has_j:
            for t in range(T):
                w[off_j + 2 * t] = x[t] / jerk_ball
                w[off_j + 2 * t + 1] = x[T + t] / jerk_ball
        for i in range(n_hs):
            t = <int>hs_steps[i]
            w[off_hs + i] = hs_normals[i, 0] * px[t] + hs_normals[i, 1] * py[t] - hs_offsets[i]
        if has_term:
            w[off_term] = (px[term_step] - term_center[0]) / term_radius
            w[off_term + 1] = (py[term_step] - term_center[1]) / term_radius

        if init_phase:
            for i in range(m):
                z[i] = w[i] + u[i]
            _project_channels(z, off_v, off_a, off_j, off_hs, off_term,
                              has_v, has_a, has_j, has_term, n_hs, T,
                              has_lens, lens_nx, lens_ny, lens_lo, lens_hi)
            init_phase = False
        else:
            viol = 0.0
            if has_v:
                for t in range(T):
                    nrm = sqrt(w[off_v + 2 * t] ** 2 + w[off_v + 2 * t + 1] ** 2)
                    excess = (nrm - 1.0) * v_max
                    if excess > viol: viol = excess
            if has_a:
                for t in range(T):
                    nrm = sqrt(w[off_a + 2 * t] ** 2 + w[off_a + 2 * t + 1] ** 2)
                    excess = (nrm - 1.0) * a_max
                    if excess > viol: viol = excess
            if has_j:
                for t in range(T):
                    nrm = sqrt(w[off_j + 2 * t] ** 2 + w[off_j + 2 * t + 1] ** 2)
                    excess = (nrm - 1.0) * jerk_ball
                    if excess > viol: viol = excess
            for i in range(n_hs):
                if w[off_hs + i] > viol: viol = w[off_hs + i]
            if has_term:
                nrm = sqrt(w[off_term] ** 2 + w[off_term + 1] ** 2)
                excess = (nrm - 1.0) * term_radius
                if excess > viol: viol = excess
            if viol < 0.0: viol = 0.0
            if collect_history:
                history[it - 1] = viol

            for i in range(m):
                zprev[i] = z[i]
                s[i] = alpha * w[i] + (1.0 - alpha) * z[i]
                z[i] = s[i] + u[i]
            _project_channels(z, off_v, off_a, off_j, off_hs, off_term,
                              has_v, has_a, has_j, has_term, n_hs, T,
                              has_lens, lens_nx, lens_ny, lens_lo, lens_hi)
            for i in range(m):
                u[i] = u[i] + s[i] - z[i]

            for i in range(m):
                s[i] = z[i] - zprev[i]
            _adjoint(s, rhs, gpx, gpy, gvx, gvy, gax, gay,
                     T, dt, v_max, a_max, jerk_ball,
                     hs_steps, hs_normals, term_step, term_radius,
                     off_v, off_a, off_j, off_hs, off_term,
                     has_v, has_a, has_j, has_term, n_hs)
            r_dual = 0.0
            for i in range(n):
                if fabs(rhs[i]) > r_dual: r_dual = fabs(rhs[i])
            r_dual *= rho

            dual_scale = q_scale if q_scale > dual_force_max else dual_force_max
            if viol < 0.99 * best_viol:
                best_viol = viol
                best_iter = it
            if viol <= tol and r_dual <= eps_dual * dual_scale:
                status = 0
                it_count = it
                break
            if it - best_iter >= stall_window and best_viol > stall_residual:
                status = 1
                it_count = it
                break
            if it >= max_iter:
                status = 2
                it_count = it
                break

            # penalty adaptation (OSQP-style), with dual rescale and refactorization
            if it - last_adapt >= adapt_interval:
                w_mag = 1e-10
                for i in range(m):
                    if fabs(w[i]) > w_mag: w_mag = fabs(w[i])
                    if fabs(z[i]) > w_mag: w_mag = fabs(z[i])
                rp_rel = 0.0
                for i in range(m):
                    if fabs(w[i] - z[i]) > rp_rel: rp_rel = fabs(w[i] - z[i])
                rp_rel /= w_mag
                rd_rel = r_dual / (dual_scale if dual_scale > 1e-10 else 1e-10)
                if rp_rel > 1e-300 and rd_rel > 1e-300:
                    ratio = sqrt(rp_rel / rd_rel)
                    if ratio > adapt_trigger or ratio < 1.0 / adapt_trigger:
                        rho_new = rho * ratio
                        if rho_new < rho_min: rho_new = rho_min
                        if rho_new > rho_max: rho_new = rho_max
                        if rho_new != rho:
                            for i in range(m):
                                u[i] *= rho / rho_new
                            rho = rho_new
                            for i in range(n):
                                for k in range(n):
                                    mwork[i * n + k] = big_h[i, k] + rho * gram[i * n + k]
                            if block_diag:
                                _cholesky_block(mwork, lfac, 0, T, n)
                                _cholesky_block(mwork, lfac, T, n, n)
                                _transpose_block(lfac, ltrans, 0, T, n)
                                _transpose_block(lfac, ltrans, T, n, n)
                            else:
                                _cholesky_block(mwork, lfac, 0, n, n)
                                _transpose_block(lfac, ltrans, 0, n, n)
                        last_adapt = it

        it += 1
        for i in range(m):
            s[i] = z[i] - u[i] - h[i]
        _adjoint(s, rhs, gpx, gpy, gvx, gvy, gax, gay,
                 T, dt, v_max, a_max, jerk_ball,
                 hs_steps, hs_normals, term_step, term_radius,
                 off_v, off_a, off_j, off_hs, off_term,
                 has_v, has_a, has_j, has_term, n_hs)
        dual_force_max = 0.0
        for i in range(n):
            rhs[i] = rho * rhs[i]
            if fabs(rhs[i]) > dual_force_max: dual_force_max = fabs(rhs[i])
            rhs[i] -= q[i]
        if block_diag:
            _solve_block(lfac, ltrans, rhs, xbuf, scratch, 0, T, n)
            _solve_block(lfac, ltrans, rhs, xbuf, scratch, T, n, n)
        else:
            _solve_block(lfac, ltrans, rhs, xbuf, scratch, 0, n, n)
        for i in range(n):
            x[i] = xbuf[i]

    return status, it_count

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for quadratic federations.

Every floating-point operation here is ordered exactly like the pure-python
round functions in dpfedsim.algorithms (elementwise temporaries, ascending
client-index reductions, sequential dot products), and the extension is
built with FMA contraction disabled.  Consequence: a full compiled run is
bit-identical to stepping the compiled backend round by round, which the
test suite asserts.
"""

import math

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

_PY_NAN = math.nan


cdef inline double _row_dot(const double[:, :, ::1] a, Py_ssize_t i,
                            Py_ssize_t k, const double[:, ::1] v,
                            Py_ssize_t vi, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t j
    cdef double s = 0.0
    for j in range(d):
        s = s + a[i, k, j] * v[vi, j]
    return s


def quad_gradient(const double[:, ::1] a_mat, const double[::1] b_vec,
                  const double[::1] x):
    """A x - b with a sequential per-row accumulation."""
    cdef Py_ssize_t d = a_mat.shape[0]
    out_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t k, j
    cdef double s
    for k in range(d):
        s = 0.0
        for j in range(d):
            s = s + a_mat[k, j] * x[j]
        out[k] = s - b_vec[k]
    return out_arr


def quad_value(const double[:, ::1] a_mat, const double[::1] b_vec,
               double offset, const double[::1] x):
    """0.5 x'Ax - b'x + offset."""
    cdef Py_ssize_t d = a_mat.shape[0]
    cdef Py_ssize_t k, j
    cdef double s, s1 = 0.0, s2 = 0.0
    for k in range(d):
        s = 0.0
        for j in range(d):
            s = s + a_mat[k, j] * x[j]
        s1 = s1 + x[k] * s
        s2 = s2 + b_vec[k] * x[k]
    return 0.5 * s1 - s2 + offset


def sq_norm(const double[::1] v):
    cdef Py_ssize_t k
    cdef double s = 0.0
    for k in range(v.shape[0]):
        s = s + v[k] * v[k]
    return s


cdef inline double _client_sq_dist(const double[:, ::1] a, Py_ssize_t i,
                                   const double[::1] ref, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t k
    cdef double s = 0.0, dd
    for k in range(d):
        dd = a[i, k] - ref[k]
        s = s + dd * dd
    return s


cdef inline bint _state_bad(const double[:, ::1] cx, Py_ssize_t n,
                            Py_ssize_t d, double guard) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double v
    for i in range(n):
        for k in range(d):
            v = cx[i, k]
            if v != v or fabs(v) > guard:
                return True
    return False


def run_scaffnew_quad(const double[:, :, ::1] a_mats,
                      const double[:, ::1] b_vecs,
                      const double[::1] offsets,
                      const double[::1] x0,
                      const double[:, ::1] h0,
                      double eta, double p, Py_ssize_t rounds,
                      double clip_c,
                      const double[:, :, ::1] noise,
                      const unsigned char[::1] coins,
                      bint has_opt,
                      const double[::1] x_star,
                      const double[:, ::1] h_star,
                      double guard):
    """Drift-corrected private rounds with randomized communication.

    noise must already be scaled by the noise standard deviation.
    Returns (x, client_x, client_h, psi, loss, dist, max_update, clip_count,
    comm_flags, completed_rounds, diverged, comm_total).
    """
    cdef Py_ssize_t n = a_mats.shape[0]
    cdef Py_ssize_t d = a_mats.shape[1]

    x_arr = np.array(x0, dtype=np.float64, copy=True)
    cx_arr = np.empty((n, d), dtype=np.float64)
    ch_arr = np.array(h0, dtype=np.float64, copy=True)
    cdef double[::1] x = x_arr
    cdef double[:, ::1] cx = cx_arr
    cdef double[:, ::1] ch = ch_arr
    cdef Py_ssize_t i, k
    for i in range(n):
        for k in range(d):
            cx[i, k] = x[k]

    psi_arr = np.empty(rounds, dtype=np.float64)
    loss_arr = np.empty(rounds, dtype=np.float64)
    dist_arr = np.empty(rounds, dtype=np.float64)
    maxu_arr = np.empty(rounds, dtype=np.float64)
    clipc_arr = np.zeros(rounds, dtype=np.int64)
    cdef double[::1] psi_v = psi_arr
    cdef double[::1] loss_v = loss_arr
    cdef double[::1] dist_v = dist_arr
    cdef double[::1] maxu_v = maxu_arr
    cdef long long[::1] clipc_v = clipc_arr

    xhat_arr = np.empty((n, d), dtype=np.float64)
    u_arr = np.empty(d, dtype=np.float64)
    acc_arr = np.empty(d, dtype=np.float64)
    xnew_arr = np.empty(d, dtype=np.float64)
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] u = u_arr
    cdef double[::1] acc = acc_arr
    cdef double[::1] xnew = xnew_arr

    cdef double inv_n = 1.0 / n
    cdef double c2 = eta / p
    cdef double s_ph = p / eta
    cdef double r_psi = eta / p
    cdef double w_psi = r_psi * r_psi
    cdef double nan = _PY_NAN

    cdef Py_ssize_t t, j
    cdef double s, g, gh, t1, ss, norm, scale, wv, diff, acc1, acc2, accl, max_u
    cdef double cxd, u1
    cdef bint comm
    cdef Py_ssize_t clipc
    cdef Py_ssize_t completed = 0
    cdef Py_ssize_t comm_total = 0
    cdef bint diverged = False

    for t in range(rounds):
        comm = coins[t] != 0
        if comm:
            for k in range(d):
                acc[k] = 0.0
            max_u = 0.0
            clipc = 0
            for i in range(n):
                for k in range(d):
                    s = 0.0
                    for j in range(d):
                        s = s + a_mats[i, k, j] * cx[i, j]
                    g = s - b_vecs[i, k]
                    gh = g - ch[i, k]
                    t1 = eta * gh
                    xhat[i, k] = cx[i, k] - t1
                    # (client_x - x) - eta*(g - h) - (eta/p)*h, the expanded
                    # form of (xhat - (eta/p) h - x); when clients are in
                    # sync the leading difference is an exact zero, which
                    # keeps the single-client always-communicate reduction
                    # bit-equal to plain gradient descent.
                    cxd = cx[i, k] - x[k]
                    u1 = cxd - t1
                    u[k] = u1 - c2 * ch[i, k]
                ss = 0.0
                for k in range(d):
                    ss = ss + u[k] * u[k]
                norm = sqrt(ss)
                if norm > max_u:
                    max_u = norm
                if norm > clip_c:
                    clipc = clipc + 1
                    scale = clip_c / norm
                    for k in range(d):
                        wv = u[k] * scale
                        wv = wv + noise[t, i, k]
                        acc[k] = acc[k] + wv
                else:
                    for k in range(d):
                        wv = u[k] + noise[t, i, k]
                        acc[k] = acc[k] + wv
            for k in range(d):
                xnew[k] = x[k] + acc[k] * inv_n
            for i in range(n):
                for k in range(d):
                    diff = xnew[k] - xhat[i, k]
                    ch[i, k] = ch[i, k] + s_ph * diff
                    cx[i, k] = xnew[k]
            for k in range(d):
                x[k] = xnew[k]
            comm_total = comm_total + 1
            maxu_v[t] = max_u
            clipc_v[t] = clipc
        else:
            for i in range(n):
                for k in range(d):
                    s = 0.0
                    for j in range(d):
                        s = s + a_mats[i, k, j] * cx[i, j]
                    g = s - b_vecs[i, k]
                    gh = g - ch[i, k]
                    t1 = eta * gh
                    xhat[i, k] = cx[i, k] - t1
            for i in range(n):
                for k in range(d):
                    cx[i, k] = xhat[i, k]
            maxu_v[t] = nan
            clipc_v[t] = 0

        if has_opt:
            acc1 = 0.0
            for i in range(n):
                acc1 = acc1 + _client_sq_dist(cx, i, x_star, d)
            acc2 = 0.0
            for i in range(n):
                ss = 0.0
                for k in range(d):
                    diff = ch[i, k] - h_star[i, k]
                    ss = ss + diff * diff
                acc2 = acc2 + ss
            psi_v[t] = acc1 + w_psi * acc2
            ss = 0.0
            for k in range(d):
                diff = x[k] - x_star[k]
                ss = ss + diff * diff
            dist_v[t] = sqrt(ss)
        else:
            psi_v[t] = nan
            dist_v[t] = nan

        accl = 0.0
        for i in range(n):
            s = 0.0
            ss = 0.0
            for k in range(d):
                g = 0.0
                for j in range(d):
                    g = g + a_mats[i, k, j] * x[j]
                s = s + x[k] * g
                ss = ss + b_vecs[i, k] * x[k]
            accl = accl + (0.5 * s - ss + offsets[i])
        loss_v[t] = accl * inv_n

        completed = t + 1
        if _state_bad(cx, n, d, guard):
            diverged = True
            break

    return (
        x_arr,
        cx_arr,
        ch_arr,
        psi_arr[:completed],
        loss_arr[:completed],
        dist_arr[:completed],
        maxu_arr[:completed],
        clipc_arr[:completed],
        np.asarray(coins[:completed], dtype=np.uint8).copy(),
        completed,
        diverged,
        comm_total,
    )


def run_fedavg_quad(const double[:, :, ::1] a_mats,
                    const double[:, ::1] b_vecs,
                    const double[::1] offsets,
                    const double[::1] x0,
                    double eta, Py_ssize_t tau, Py_ssize_t rounds,
                    double clip_c,
                    const double[:, :, ::1] noise,
                    bint has_opt,
                    const double[::1] x_star,
                    const double[:, ::1] h_star,
                    double guard):
    """Private local-step rounds, communicating every round.

    Returns (x, client_x, psi, loss, dist, max_update, clip_count,
    completed_rounds, diverged).
    """
    cdef Py_ssize_t n = a_mats.shape[0]
    cdef Py_ssize_t d = a_mats.shape[1]

    x_arr = np.array(x0, dtype=np.float64, copy=True)
    cdef double[::1] x = x_arr

    psi_arr = np.empty(rounds, dtype=np.float64)
    loss_arr = np.empty(rounds, dtype=np.float64)
    dist_arr = np.empty(rounds, dtype=np.float64)
    maxu_arr = np.empty(rounds, dtype=np.float64)
    clipc_arr = np.zeros(rounds, dtype=np.int64)
    cdef double[::1] psi_v = psi_arr
    cdef double[::1] loss_v = loss_arr
    cdef double[::1] dist_v = dist_arr
    cdef double[::1] maxu_v = maxu_arr
    cdef long long[::1] clipc_v = clipc_arr

    xloc_arr = np.empty(d, dtype=np.float64)
    gbuf_arr = np.empty(d, dtype=np.float64)
    u_arr = np.empty(d, dtype=np.float64)
    acc_arr = np.empty(d, dtype=np.float64)
    xnew_arr = np.empty(d, dtype=np.float64)
    cdef double[::1] xloc = xloc_arr
    cdef double[::1] gbuf = gbuf_arr
    cdef double[::1] u = u_arr
    cdef double[::1] acc = acc_arr
    cdef double[::1] xnew = xnew_arr

    cdef double inv_n = 1.0 / n
    cdef double r_psi = eta * (<double> tau)
    cdef double w_psi = r_psi * r_psi
    cdef double nan = _PY_NAN

    cdef Py_ssize_t t, i, j, k, step
    cdef double s, t1, ss, norm, scale, wv, diff, acc1, acc2, accl, max_u, cdist
    cdef Py_ssize_t clipc
    cdef Py_ssize_t completed = 0
    cdef bint diverged = False
    cdef bint bad

    for t in range(rounds):
        for k in range(d):
            acc[k] = 0.0
        max_u = 0.0
        clipc = 0
        for i in range(n):
            for k in range(d):
                xloc[k] = x[k]
            for step in range(tau):
                for k in range(d):
                    s = 0.0
                    for j in range(d):
                        s = s + a_mats[i, k, j] * xloc[j]
                    gbuf[k] = s - b_vecs[i, k]
                for k in range(d):
                    t1 = eta * gbuf[k]
                    xloc[k] = xloc[k] - t1
            for k in range(d):
                u[k] = xloc[k] - x[k]
            ss = 0.0
            for k in range(d):
                ss = ss + u[k] * u[k]
            norm = sqrt(ss)
            if norm > max_u:
                max_u = norm
            if norm > clip_c:
                clipc = clipc + 1
                scale = clip_c / norm
                for k in range(d):
                    wv = u[k] * scale
                    wv = wv + noise[t, i, k]
                    acc[k] = acc[k] + wv
            else:
                for k in range(d):
                    wv = u[k] + noise[t, i, k]
                    acc[k] = acc[k] + wv
        for k in range(d):
            xnew[k] = x[k] + acc[k] * inv_n
        for k in range(d):
            x[k] = xnew[k]
        maxu_v[t] = max_u
        clipc_v[t] = clipc

        if has_opt:
            ss = 0.0
            for k in range(d):
                diff = x[k] - x_star[k]
                ss = ss + diff * diff
            cdist = ss
            acc1 = 0.0
            for i in range(n):
                acc1 = acc1 + cdist
            acc2 = 0.0
            for i in range(n):
                ss = 0.0
                for k in range(d):
                    diff = h_star[i, k]
                    ss = ss + diff * diff
                acc2 = acc2 + ss
            psi_v[t] = acc1 + w_psi * acc2
            dist_v[t] = sqrt(cdist)
        else:
            psi_v[t] = nan
            dist_v[t] = nan

        accl = 0.0
        for i in range(n):
            s = 0.0
            ss = 0.0
            for k in range(d):
                t1 = 0.0
                for j in range(d):
                    t1 = t1 + a_mats[i, k, j] * x[j]
                s = s + x[k] * t1
                ss = ss + b_vecs[i, k] * x[k]
            accl = accl + (0.5 * s - ss + offsets[i])
        loss_v[t] = accl * inv_n

        completed = t + 1
        bad = False
        for k in range(d):
            wv = x[k]
            if wv != wv or fabs(wv) > guard:
                bad = True
                break
        if bad:
            diverged = True
            break

    cx_arr = np.repeat(x_arr[None, :], n, axis=0)
    return (
        x_arr,
        cx_arr,
        psi_arr[:completed],
        loss_arr[:completed],
        dist_arr[:completed],
        maxu_arr[:completed],
        clipc_arr[:completed],
        completed,
        diverged,
    )

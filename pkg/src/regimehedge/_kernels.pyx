# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled path kernel; same algorithm and raw-word layout as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, cos, M_PI, INFINITY, fmin

cnp.import_array()

cdef double TWO_M53 = 2.0 ** -53


cdef inline double uniform_open(cnp.uint64_t w) noexcept nogil:
    # the top word would round up to 1.0
    return fmin((<double>(w >> 11) + 0.5) * TWO_M53, 1.0 - TWO_M53)


cdef inline double box_muller(cnp.uint64_t w1, cnp.uint64_t w2) noexcept nogil:
    return sqrt(-2.0 * log(uniform_open(w1))) * cos(2.0 * M_PI * uniform_open(w2))


def simulate_chunk(const cnp.uint64_t[:, ::1] raw, const double[::1] times, double s0, long j0,
                   const double[::1] r, const double[::1] mu, const double[::1] sigma,
                   const double[:, ::1] gamma, const double[:, ::1] lam_a,
                   const double[:, ::1] lam_b, const double[:, ::1] lam_cap, long width,
                   double[:, ::1] s_out, cnp.int64_t[:, ::1] regime_out, double[:, ::1] dW_out,
                   double[:, :, ::1] dN_out, double[:, :, ::1] comp_out, double[:, ::1] int_r_out,
                   cnp.int64_t[::1] used_out):
    cdef Py_ssize_t n_paths = raw.shape[0]
    cdef Py_ssize_t n_steps = times.shape[0] - 1
    cdef Py_ssize_t n_states = r.shape[0]
    cdef Py_ssize_t base = 2 * n_steps
    cdef Py_ssize_t p, k, a, b
    cdef long j, q, target
    cdef int st
    cdef double s, clock, h, w_rem, rem, bound, wait, dt, z, inc, drift, u, cum, lam
    cdef bint event, feedback = False
    cdef double[::1] rate_bound = np.asarray(lam_cap).sum(axis=0)
    cdef double[::1] lam_buf = np.empty(n_states)
    cdef cnp.int8_t[::1] status = np.zeros(n_paths, dtype=np.int8)

    for a in range(n_states):
        for b in range(n_states):
            if lam_b[a, b] != 0.0:
                feedback = True

    with nogil:
        for p in range(n_paths):
            s = s0
            j = j0
            q = 0
            st = 0
            clock = -log(uniform_open(raw[p, base]))
            s_out[p, 0] = s
            regime_out[p, 0] = j
            for k in range(n_steps):
                for a in range(n_states):
                    dN_out[p, k, a] = 0.0
                    comp_out[p, k, a] = 0.0
                int_r_out[p, k] = 0.0
            for k in range(n_steps):
                h = times[k + 1] - times[k]
                w_rem = sqrt(h) * box_muller(raw[p, 2 * k], raw[p, 2 * k + 1])
                dW_out[p, k] = w_rem
                rem = h
                while st == 0:
                    for a in range(n_states):
                        lam = lam_a[a, j] + lam_b[a, j] * s if feedback else lam_a[a, j]
                        lam_buf[a] = lam if lam > 0.0 else 0.0
                    bound = rate_bound[j]
                    wait = clock / bound if bound > 0.0 else INFINITY
                    event = wait < rem
                    dt = wait if event else rem
                    if event:
                        z = box_muller(raw[p, base + 4 * q + 2], raw[p, base + 4 * q + 3])
                        inc = dt / rem * w_rem + sqrt(max(dt * (rem - dt) / rem, 0.0)) * z
                    else:
                        inc = w_rem
                    drift = 0.0
                    for a in range(n_states):
                        drift += gamma[a, j] * lam_buf[a]
                    drift = mu[j] - drift
                    s = s * exp((drift - 0.5 * sigma[j] * sigma[j]) * dt + sigma[j] * inc)
                    # trapezoid in time: the intensity moves with s under feedback
                    for a in range(n_states):
                        if feedback:
                            lam = lam_a[a, j] + lam_b[a, j] * s
                            lam = lam if lam > 0.0 else 0.0
                            comp_out[p, k, a] += 0.5 * (lam_buf[a] + lam) * dt
                        else:
                            comp_out[p, k, a] += lam_buf[a] * dt
                    int_r_out[p, k] += r[j] * dt
                    w_rem -= inc
                    rem = rem - dt
                    if not event:
                        clock = clock - dt * bound
                        break
                    # proposal q at the current time
                    cum = 0.0
                    for a in range(n_states):
                        lam = lam_a[a, j] + lam_b[a, j] * s if feedback else lam_a[a, j]
                        lam = lam if lam > 0.0 else 0.0
                        if lam > lam_cap[a, j] * (1 + 1e-12):
                            st = 2
                        lam_buf[a] = lam
                    u = uniform_open(raw[p, base + 4 * q + 1]) * rate_bound[j]
                    target = -1
                    for a in range(n_states):
                        cum += lam_buf[a]
                        if u < cum:
                            target = a
                            break
                    if target >= 0:
                        s = s * (1.0 + gamma[target, j])
                        j = target
                        dN_out[p, k, target] += 1.0
                    q += 1
                    if q >= width:
                        if st == 0:
                            st = 1
                        break
                    if st != 0:
                        break
                    clock = -log(uniform_open(raw[p, base + 4 * q]))
                if st != 0:
                    break
                s_out[p, k + 1] = s
                regime_out[p, k + 1] = j
            used_out[p] = q
            status[p] = st
    return np.asarray(status)

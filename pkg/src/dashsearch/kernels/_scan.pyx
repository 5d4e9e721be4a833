# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gated delta scan. Mirrors scan_ref step for step."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def scan_fwd(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v,
             double[::1] g, double[::1] b):
    cdef Py_ssize_t seq = q.shape[0]
    cdef Py_ssize_t d_k = q.shape[1]
    cdef Py_ssize_t d_v = v.shape[1]
    y_arr = np.zeros((seq, d_v))
    states_arr = np.zeros((seq + 1, d_k, d_v))
    delta_arr = np.zeros((seq, d_v))
    cdef double[:, ::1] y = y_arr
    cdef double[:, :, ::1] states = states_arr
    cdef double[:, ::1] delta = delta_arr
    cdef Py_ssize_t t, i, j
    cdef double acc, gt, bt, ki
    for t in range(seq):
        for j in range(d_v):
            acc = 0.0
            for i in range(d_k):
                acc += states[t, i, j] * k[t, i]
            delta[t, j] = v[t, j] - acc
        gt = g[t]
        bt = b[t]
        for i in range(d_k):
            ki = bt * k[t, i]
            for j in range(d_v):
                states[t + 1, i, j] = gt * states[t, i, j] + ki * delta[t, j]
        for j in range(d_v):
            acc = 0.0
            for i in range(d_k):
                acc += states[t + 1, i, j] * q[t, i]
            y[t, j] = acc
    return y_arr, states_arr, delta_arr


def scan_bwd(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v,
             double[::1] g, double[::1] b,
             double[:, :, ::1] states, double[:, ::1] delta,
             double[:, ::1] dy):
    cdef Py_ssize_t seq = q.shape[0]
    cdef Py_ssize_t d_k = q.shape[1]
    cdef Py_ssize_t d_v = v.shape[1]
    dq_arr = np.zeros((seq, d_k))
    dk_arr = np.zeros((seq, d_k))
    dv_arr = np.zeros((seq, d_v))
    dg_arr = np.zeros(seq)
    db_arr = np.zeros(seq)
    sbar_arr = np.zeros((d_k, d_v))
    dd_arr = np.zeros(d_v)
    sd_arr = np.zeros(d_k)
    cdef double[:, ::1] dq = dq_arr
    cdef double[:, ::1] dk = dk_arr
    cdef double[:, ::1] dv = dv_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] s_bar = sbar_arr
    cdef double[::1] d_delta = dd_arr
    cdef double[::1] sdelta = sd_arr
    cdef Py_ssize_t t, i, j
    cdef double acc, gt, bt, qi, ki
    for t in range(seq - 1, -1, -1):
        gt = g[t]
        bt = b[t]
        # y_t = S_t^T q_t
        for i in range(d_k):
            acc = 0.0
            for j in range(d_v):
                acc += states[t + 1, i, j] * dy[t, j]
            dq[t, i] = acc
        for i in range(d_k):
            qi = q[t, i]
            for j in range(d_v):
                s_bar[i, j] += qi * dy[t, j]
        # S_t = g_t S_{t-1} + b_t outer(k_t, delta_t)
        acc = 0.0
        for i in range(d_k):
            for j in range(d_v):
                acc += s_bar[i, j] * states[t, i, j]
        dg[t] = acc
        for i in range(d_k):
            acc = 0.0
            for j in range(d_v):
                acc += s_bar[i, j] * delta[t, j]
            sdelta[i] = acc
        acc = 0.0
        for i in range(d_k):
            acc += k[t, i] * sdelta[i]
        db[t] = acc
        for j in range(d_v):
            acc = 0.0
            for i in range(d_k):
                acc += s_bar[i, j] * k[t, i]
            d_delta[j] = bt * acc
        # delta_t = v_t - S_{t-1}^T k_t
        for i in range(d_k):
            acc = 0.0
            for j in range(d_v):
                acc += states[t, i, j] * d_delta[j]
            dk[t, i] = bt * sdelta[i] - acc
        for j in range(d_v):
            dv[t, j] = d_delta[j]
        for i in range(d_k):
            ki = k[t, i]
            for j in range(d_v):
                s_bar[i, j] = gt * s_bar[i, j] - ki * d_delta[j]
    return dq_arr, dk_arr, dv_arr, dg_arr, db_arr

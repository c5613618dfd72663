# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-bag forward/backward kernels.

Same recurrences as numpy_backend, written as flat loops so the per-bag
Python and allocation overhead of the reference path disappears. Sums run
sequentially in index order; results match the numpy backend to rounding.
Plain loops keep results independent of BLAS threading, which large-D users
may prefer to trade back by selecting the numpy backend.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double EPS_NORM = 1e-12

ATT_MLP = 0
ATT_LINEAR = 1
ATT_UNIFORM = 2


cdef void _bag_forward(
    double[:, ::1] w_c, double[:, ::1] att_hidden, double[::1] att_score,
    double[:, ::1] w_cls, double[::1] b_cls, double temperature,
    int att_kind, bint agg_norm,
    double[:, ::1] H_all, Py_ssize_t lo, Py_ssize_t n,
    double[:, ::1] z, double[:, ::1] zhat, double[::1] norms,
    double[:, ::1] t, double[::1] alpha,
    double[::1] c_agg, double[::1] logits,
) noexcept nogil:
    cdef Py_ssize_t C = w_c.shape[0]
    cdef Py_ssize_t D = w_c.shape[1]
    cdef Py_ssize_t A = att_hidden.shape[0]
    cdef Py_ssize_t K = w_cls.shape[0]
    cdef Py_ssize_t i, c, d, a, k
    cdef double s, mx, total

    for i in range(n):
        for c in range(C):
            s = 0.0
            for d in range(D):
                s += H_all[lo + i, d] * w_c[c, d]
            z[i, c] = s
        s = 0.0
        for c in range(C):
            s += z[i, c] * z[i, c]
        norms[i] = sqrt(s)
        if norms[i] < EPS_NORM:
            for c in range(C):
                zhat[i, c] = 0.0
        else:
            for c in range(C):
                zhat[i, c] = z[i, c] / norms[i]

    if att_kind == 0:
        for i in range(n):
            s = 0.0
            for a in range(A):
                total = 0.0
                for d in range(D):
                    total += att_hidden[a, d] * H_all[lo + i, d]
                t[i, a] = tanh(total)
                s += att_score[a] * t[i, a]
            alpha[i] = s
    elif att_kind == 1:
        for i in range(n):
            s = 0.0
            for d in range(D):
                s += att_score[d] * H_all[lo + i, d]
            alpha[i] = s
    else:
        for i in range(n):
            alpha[i] = 0.0

    mx = alpha[0] / temperature
    for i in range(n):
        alpha[i] = alpha[i] / temperature
        if alpha[i] > mx:
            mx = alpha[i]
    total = 0.0
    for i in range(n):
        alpha[i] = exp(alpha[i] - mx)
        total += alpha[i]
    for i in range(n):
        alpha[i] /= total

    for c in range(C):
        s = 0.0
        if agg_norm:
            for i in range(n):
                s += alpha[i] * zhat[i, c]
        else:
            for i in range(n):
                s += alpha[i] * z[i, c]
        c_agg[c] = s

    for k in range(K):
        s = b_cls[k]
        for c in range(C):
            s += w_cls[k, c] * c_agg[c]
        logits[k] = s


def forward_many(
    double[:, ::1] w_c, double[:, ::1] att_hidden, double[::1] att_score,
    double[:, ::1] w_cls, double[::1] b_cls, double temperature,
    int att_kind, bint agg_norm,
    double[:, ::1] H_all, cnp.int64_t[::1] offsets,
):
    cdef Py_ssize_t M = offsets.shape[0] - 1
    cdef Py_ssize_t C = w_c.shape[0]
    cdef Py_ssize_t A = att_hidden.shape[0]
    cdef Py_ssize_t K = w_cls.shape[0]
    cdef Py_ssize_t j, k, max_n = 1
    for j in range(M):
        if offsets[j + 1] - offsets[j] > max_n:
            max_n = offsets[j + 1] - offsets[j]

    out_arr = np.empty((M, K), dtype=np.float64)
    z_arr = np.empty((max_n, C), dtype=np.float64)
    zhat_arr = np.empty((max_n, C), dtype=np.float64)
    t_arr = np.empty((max_n, A if A > 0 else 1), dtype=np.float64)
    norms_arr = np.empty(max_n, dtype=np.float64)
    alpha_arr = np.empty(max_n, dtype=np.float64)
    c_agg_arr = np.empty(C, dtype=np.float64)
    logits_arr = np.empty(K, dtype=np.float64)

    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] zhat = zhat_arr
    cdef double[:, ::1] t = t_arr
    cdef double[::1] norms = norms_arr
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] c_agg = c_agg_arr
    cdef double[::1] logits = logits_arr

    with nogil:
        for j in range(M):
            _bag_forward(
                w_c, att_hidden, att_score, w_cls, b_cls, temperature,
                att_kind, agg_norm, H_all, offsets[j], offsets[j + 1] - offsets[j],
                z, zhat, norms, t, alpha, c_agg, logits,
            )
            for k in range(K):
                out[j, k] = logits[k]
    return out_arr


def batch_backward(
    double[:, ::1] w_c, double[:, ::1] att_hidden, double[::1] att_score,
    double[:, ::1] w_cls, double[::1] b_cls, double temperature,
    int att_kind, bint agg_norm,
    double[:, ::1] H_all, cnp.int64_t[::1] offsets,
    double[:, ::1] clip_all, cnp.int64_t[::1] labels,
    double lambda_concept,
    double[:, ::1] g_w_c, double[:, ::1] g_att_hidden, double[::1] g_att_score,
    double[:, ::1] g_w_cls, double[::1] g_b_cls,
):
    cdef Py_ssize_t M = offsets.shape[0] - 1
    cdef Py_ssize_t B = offsets[M]
    cdef Py_ssize_t C = w_c.shape[0]
    cdef Py_ssize_t D = w_c.shape[1]
    cdef Py_ssize_t A = att_hidden.shape[0]
    cdef Py_ssize_t K = w_cls.shape[0]
    cdef double cls_w = 1.0 / M
    cdef double con_w = -lambda_concept / B
    cdef bint use_concept = lambda_concept != 0.0
    cdef Py_ssize_t j, i, c, d, a, k, lo, n, best
    cdef double ce_sum = 0.0, cos_sum = 0.0
    cdef long correct = 0
    cdef double s, mx, total, lse, inner, dpre

    cdef Py_ssize_t max_n = 1
    for j in range(M):
        if offsets[j + 1] - offsets[j] > max_n:
            max_n = offsets[j + 1] - offsets[j]

    z_arr = np.empty((max_n, C), dtype=np.float64)
    zhat_arr = np.empty((max_n, C), dtype=np.float64)
    t_arr = np.empty((max_n, A if A > 0 else 1), dtype=np.float64)
    norms_arr = np.empty(max_n, dtype=np.float64)
    alpha_arr = np.empty(max_n, dtype=np.float64)
    c_agg_arr = np.empty(C, dtype=np.float64)
    logits_arr = np.empty(K, dtype=np.float64)
    p_arr = np.empty(K, dtype=np.float64)
    dc_arr = np.empty(C, dtype=np.float64)
    dalpha_arr = np.empty(max_n, dtype=np.float64)
    de_arr = np.empty(max_n, dtype=np.float64)
    dz_arr = np.empty((max_n, C), dtype=np.float64)
    dzhat_arr = np.empty((max_n, C), dtype=np.float64)

    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] zhat = zhat_arr
    cdef double[:, ::1] t = t_arr
    cdef double[::1] norms = norms_arr
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] c_agg = c_agg_arr
    cdef double[::1] logits = logits_arr
    cdef double[::1] p = p_arr
    cdef double[::1] dc = dc_arr
    cdef double[::1] dalpha = dalpha_arr
    cdef double[::1] de = de_arr
    cdef double[:, ::1] dz = dz_arr
    cdef double[:, ::1] dzhat = dzhat_arr

    with nogil:
        for j in range(M):
            lo = offsets[j]
            n = offsets[j + 1] - offsets[j]
            _bag_forward(
                w_c, att_hidden, att_score, w_cls, b_cls, temperature,
                att_kind, agg_norm, H_all, lo, n,
                z, zhat, norms, t, alpha, c_agg, logits,
            )

            mx = logits[0]
            best = 0
            for k in range(1, K):
                if logits[k] > mx:
                    mx = logits[k]
                    best = k
            total = 0.0
            for k in range(K):
                total += exp(logits[k] - mx)
            lse = log(total) + mx
            for k in range(K):
                p[k] = exp(logits[k] - lse)
            ce_sum += lse - logits[labels[j]]
            if best == labels[j]:
                correct += 1

            # classifier gradients; p becomes du in place
            p[labels[j]] -= 1.0
            for k in range(K):
                g_b_cls[k] += cls_w * p[k]
                for c in range(C):
                    g_w_cls[k, c] += cls_w * p[k] * c_agg[c]
            for c in range(C):
                s = 0.0
                for k in range(K):
                    s += w_cls[k, c] * p[k]
                dc[c] = cls_w * s

            # softmax backward: de = alpha * (dalpha - sum alpha*dalpha) / T
            total = 0.0
            for i in range(n):
                s = 0.0
                if agg_norm:
                    for c in range(C):
                        s += zhat[i, c] * dc[c]
                else:
                    for c in range(C):
                        s += z[i, c] * dc[c]
                dalpha[i] = s
                total += alpha[i] * s
            for i in range(n):
                de[i] = alpha[i] * (dalpha[i] - total) / temperature

            if att_kind == 0:
                for i in range(n):
                    for a in range(A):
                        g_att_score[a] += de[i] * t[i, a]
                        dpre = de[i] * (1.0 - t[i, a] * t[i, a]) * att_score[a]
                        for d in range(D):
                            g_att_hidden[a, d] += dpre * H_all[lo + i, d]
            elif att_kind == 1:
                for i in range(n):
                    for d in range(D):
                        g_att_score[d] += de[i] * H_all[lo + i, d]

            for i in range(n):
                for c in range(C):
                    if agg_norm:
                        dz[i, c] = 0.0
                        dzhat[i, c] = alpha[i] * dc[c]
                    else:
                        dz[i, c] = alpha[i] * dc[c]
                        dzhat[i, c] = 0.0
            if use_concept:
                for i in range(n):
                    for c in range(C):
                        cos_sum += zhat[i, c] * clip_all[lo + i, c]
                        dzhat[i, c] += con_w * clip_all[lo + i, c]
            for i in range(n):
                if norms[i] >= EPS_NORM:
                    inner = 0.0
                    for c in range(C):
                        inner += zhat[i, c] * dzhat[i, c]
                    for c in range(C):
                        dz[i, c] += (dzhat[i, c] - zhat[i, c] * inner) / norms[i]
            for c in range(C):
                for d in range(D):
                    s = 0.0
                    for i in range(n):
                        s += dz[i, c] * H_all[lo + i, d]
                    g_w_c[c, d] += s

    return ce_sum, cos_sum, correct

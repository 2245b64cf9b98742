# Compiled batched masked linear attention: out = P (Z M Z^T) Q Z.
#
# Mirrors memformer.kernels._attention_py exactly in what it computes; the
# summation order differs, so results agree to rounding, not bitwise.
import numpy as np

from libc.stdlib cimport malloc, free


cdef inline void _matmul(const double* a, const double* b, double* c, Py_ssize_t D) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double aik
    for i in range(D * D):
        c[i] = 0.0
    for i in range(D):
        for k in range(D):
            aik = a[i * D + k]
            for j in range(D):
                c[i * D + j] += aik * b[k * D + j]


def attention_forward(double[:, :, ::1] Z, double[:, ::1] P, double[:, ::1] Q, Py_ssize_t n_ctx):
    cdef Py_ssize_t B = Z.shape[0], D = Z.shape[1], N = Z.shape[2]
    if P.shape[0] != D or P.shape[1] != D or Q.shape[0] != D or Q.shape[1] != D:
        raise ValueError("attention_forward: P and Q must be (%d, %d)" % (D, D))
    if n_ctx < 0 or n_ctx > N:
        raise ValueError("attention_forward: n_ctx out of range")
    out = np.zeros((B, D, N))
    S_all = np.empty((B, D, D))
    T_all = np.empty((B, D, D))
    if B == 0:
        return out, S_all, T_all
    cdef double[:, :, ::1] o_v = out, s_v = S_all, t_v = T_all
    cdef const double* zp = &Z[0, 0, 0]
    cdef const double* pp = &P[0, 0]
    cdef const double* qp = &Q[0, 0]
    cdef double* op = &o_v[0, 0, 0]
    cdef double* sp = &s_v[0, 0, 0]
    cdef double* tp = &t_v[0, 0, 0]
    cdef double* ps = <double*> malloc(D * D * sizeof(double))
    if ps == NULL:
        raise MemoryError()
    cdef Py_ssize_t b, i, j, k
    cdef const double* z
    cdef double* o
    cdef double* S
    cdef double* T
    cdef double acc, tik
    with nogil:
        for b in range(B):
            z = zp + b * D * N
            o = op + b * D * N
            S = sp + b * D * D
            T = tp + b * D * D
            for i in range(D):
                for j in range(i, D):
                    acc = 0.0
                    for k in range(n_ctx):
                        acc = acc + z[i * N + k] * z[j * N + k]
                    S[i * D + j] = acc
                    S[j * D + i] = acc
            _matmul(pp, S, ps, D)
            _matmul(ps, qp, T, D)
            for i in range(D):
                for k in range(D):
                    tik = T[i * D + k]
                    if tik == 0.0:
                        continue  # P has zero rows unless the B block is on
                    for j in range(N):
                        o[i * N + j] += tik * z[k * N + j]
    free(ps)
    return out, S_all, T_all


def attention_backward(double[:, :, ::1] Z, double[:, ::1] P, double[:, ::1] Q,
                       double[:, :, ::1] S_all, double[:, :, ::1] T_all,
                       double[:, :, ::1] G, Py_ssize_t n_ctx):
    cdef Py_ssize_t B = Z.shape[0], D = Z.shape[1], N = Z.shape[2]
    dZ = np.zeros((B, D, N))
    dP = np.zeros((D, D))
    dQ = np.zeros((D, D))
    if B == 0:
        return dZ, dP, dQ
    cdef double[:, :, ::1] dz_v = dZ
    cdef double[:, ::1] dp_v = dP, dq_v = dQ
    cdef const double* zp = &Z[0, 0, 0]
    cdef const double* gp = &G[0, 0, 0]
    cdef const double* pp = &P[0, 0]
    cdef const double* qp = &Q[0, 0]
    cdef const double* sp = &S_all[0, 0, 0]
    cdef const double* tp = &T_all[0, 0, 0]
    cdef double* dzp = &dz_v[0, 0, 0]
    cdef double* dpp = &dp_v[0, 0]
    cdef double* dqp = &dq_v[0, 0]
    cdef double* buf = <double*> malloc(5 * D * D * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* dT = buf
    cdef double* SQ = buf + D * D
    cdef double* PS = buf + 2 * D * D
    cdef double* tmp = buf + 3 * D * D
    cdef double* dS = buf + 4 * D * D
    cdef Py_ssize_t b, i, j, k
    cdef const double* z
    cdef const double* g
    cdef const double* S
    cdef const double* T
    cdef double* dz
    cdef double acc, c
    with nogil:
        for b in range(B):
            z = zp + b * D * N
            g = gp + b * D * N
            S = sp + b * D * D
            T = tp + b * D * D
            dz = dzp + b * D * N
            # dT = G Z^T
            for i in range(D):
                for j in range(D):
                    acc = 0.0
                    for k in range(N):
                        acc = acc + g[i * N + k] * z[j * N + k]
                    dT[i * D + j] = acc
            # dZ = T^T G
            for k in range(D):
                for i in range(D):
                    c = T[k * D + i]
                    if c == 0.0:
                        continue
                    for j in range(N):
                        dz[i * N + j] += c * g[k * N + j]
            _matmul(S, qp, SQ, D)
            _matmul(pp, S, PS, D)
            # dP += dT SQ^T ; dQ += PS^T dT
            for i in range(D):
                for j in range(D):
                    acc = 0.0
                    for k in range(D):
                        acc = acc + dT[i * D + k] * SQ[j * D + k]
                    dpp[i * D + j] += acc
                    acc = 0.0
                    for k in range(D):
                        acc = acc + PS[k * D + i] * dT[k * D + j]
                    dqp[i * D + j] += acc
            # dS = P^T dT Q^T
            for i in range(D):
                for j in range(D):
                    acc = 0.0
                    for k in range(D):
                        acc = acc + pp[k * D + i] * dT[k * D + j]
                    tmp[i * D + j] = acc
            for i in range(D):
                for j in range(D):
                    acc = 0.0
                    for k in range(D):
                        acc = acc + tmp[i * D + k] * qp[j * D + k]
                    dS[i * D + j] = acc
            # S = Z M Z^T  =>  dZ[:, :n_ctx] += (dS + dS^T) Z[:, :n_ctx]
            for i in range(D):
                for k in range(D):
                    c = dS[i * D + k] + dS[k * D + i]
                    if c == 0.0:
                        continue
                    for j in range(n_ctx):
                        dz[i * N + j] += c * z[k * N + j]
    free(buf)
    return dZ, dP, dQ

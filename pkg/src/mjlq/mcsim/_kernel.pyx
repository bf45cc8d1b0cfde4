# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled path kernel (OpenMP over paths).

Mirrors ``_fallback.run_batch`` operation for operation; normals come from
each path's own numpy bit generator through the numpy random C API.
"""
from cpython.pycapsule cimport PyCapsule_GetPointer
from cython.parallel cimport prange
from libc.math cimport exp, sqrt, INFINITY, NAN
from libc.stdint cimport int64_t, uint8_t
from libc.stdlib cimport malloc, free
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_normal


cdef bitgen_t* _bitgen(object gen) except NULL:
    return <bitgen_t*> PyCapsule_GetPointer(gen.bit_generator.capsule, "BitGenerator")


cdef int _path(bitgen_t* ga, bitgen_t* gb, int64_t jidx, int64_t jend,
               const double* jt, const int64_t* js, int64_t reg, const double* x0, Py_ssize_t n,
               const double* Ab, const double* Cb, const double* beta, const double* gamma,
               const double* Qb, const double* ell, const double* c0,
               int64_t n_cells, int64_t k, double hc, double r, const int64_t* ck, Py_ssize_t K,
               double thr, double* cost_out, double* xck, int64_t* rck,
               double* x, double* xn) noexcept nogil:
    cdef Py_ssize_t u, v, kc = 0
    cdef Py_ssize_t nn = n * n
    cdef int64_t c, j
    cdef double a, e, tp, Wp, Ws, sg, s, dWc, num, den, dt, dw, f, acc, dr, df, xx, tj
    cdef double h = hc / k
    cdef double sq = sqrt(hc)
    cdef double cost = 0.0
    cdef int jump
    # coefficients of the current regime
    cdef const double* pA = Ab + reg * nn
    cdef const double* pC = Cb + reg * nn
    cdef const double* pQ = Qb + reg * nn
    cdef const double* pb = beta + reg * n
    cdef const double* pg = gamma + reg * n
    cdef const double* pl = ell + reg * n
    tj = jt[jidx] if jidx < jend else INFINITY
    for u in range(n):
        x[u] = x0[u]
    for c in range(n_cells):
        a = c * hc
        e = (c + 1) * hc
        dWc = sq * random_standard_normal(ga)
        tp = a
        Wp = 0.0
        j = 1
        while True:
            if j < k:
                sg = a + j * h
            else:
                sg = e
            if tj < sg:
                s = tj
                jump = 1
            else:
                s = sg
                jump = 0
            if jump == 0 and j == k:
                Ws = dWc
            else:
                num = s - tp
                den = e - tp
                Ws = (Wp + (num / den) * (dWc - Wp)) + sqrt((num * (e - s)) / den) * random_standard_normal(gb)
            dt = s - tp
            dw = Ws - Wp
            f = c0[reg]
            for u in range(n):
                acc = 2.0 * pl[u]
                for v in range(n):
                    acc = acc + pQ[u * n + v] * x[v]
                f = f + x[u] * acc
            if r != 0.0:
                f = exp(-r * tp) * f
            cost = cost + f * dt
            for u in range(n):
                dr = pb[u]
                df = pg[u]
                for v in range(n):
                    dr = dr + pA[u * n + v] * x[v]
                    df = df + pC[u * n + v] * x[v]
                xn[u] = (x[u] + dr * dt) + df * dw
            xx = 0.0
            for u in range(n):
                x[u] = xn[u]
                xx = xx + xn[u] * xn[u]
            if not xx <= thr:
                cost_out[0] = NAN
                return 1
            tp = s
            Wp = Ws
            if jump:
                reg = js[jidx]
                jidx += 1
                tj = jt[jidx] if jidx < jend else INFINITY
                pA = Ab + reg * nn
                pC = Cb + reg * nn
                pQ = Qb + reg * nn
                pb = beta + reg * n
                pg = gamma + reg * n
                pl = ell + reg * n
            else:
                j += 1
                if j > k:
                    break
        if kc < K and ck[kc] == c:
            for u in range(n):
                xck[kc * n + u] = x[u]
            rck[kc] = reg
            kc += 1
    cost_out[0] = cost
    return 0


cdef int _path1(bitgen_t* ga, bitgen_t* gb, int64_t jidx, int64_t jend,
                const double* jt, const int64_t* js, int64_t reg, double x,
                const double* Ab, const double* Cb, const double* beta, const double* gamma,
                const double* Qb, const double* ell, const double* c0,
                int64_t n_cells, int64_t k, double hc, double r, const int64_t* ck, Py_ssize_t K,
                double thr, double* cost_out, double* xck, int64_t* rck) noexcept nogil:
    # n == 1 specialization of _path; same operations in the same order
    cdef Py_ssize_t kc = 0
    cdef int64_t c, j
    cdef double a, e, tp, Wp, Ws, sg, s, dWc, num, den, dt, dw, f, acc, xn, tj
    cdef double h = hc / k
    cdef double sq = sqrt(hc)
    cdef double cost = 0.0
    cdef int jump
    cdef double A = Ab[reg], C = Cb[reg], Q = Qb[reg], bb = beta[reg], g = gamma[reg]
    cdef double l2 = 2.0 * ell[reg], cc = c0[reg]
    tj = jt[jidx] if jidx < jend else INFINITY
    for c in range(n_cells):
        a = c * hc
        e = (c + 1) * hc
        dWc = sq * random_standard_normal(ga)
        tp = a
        Wp = 0.0
        j = 1
        while True:
            if j < k:
                sg = a + j * h
            else:
                sg = e
            if tj < sg:
                s = tj
                jump = 1
            else:
                s = sg
                jump = 0
            if jump == 0 and j == k:
                Ws = dWc
            else:
                num = s - tp
                den = e - tp
                Ws = (Wp + (num / den) * (dWc - Wp)) + sqrt((num * (e - s)) / den) * random_standard_normal(gb)
            dt = s - tp
            dw = Ws - Wp
            acc = l2 + Q * x
            f = cc + x * acc
            if r != 0.0:
                f = exp(-r * tp) * f
            cost = cost + f * dt
            xn = (x + (bb + A * x) * dt) + (g + C * x) * dw
            x = xn
            if not 0.0 + xn * xn <= thr:
                cost_out[0] = NAN
                return 1
            tp = s
            Wp = Ws
            if jump:
                reg = js[jidx]
                jidx += 1
                tj = jt[jidx] if jidx < jend else INFINITY
                A = Ab[reg]
                C = Cb[reg]
                Q = Qb[reg]
                bb = beta[reg]
                g = gamma[reg]
                l2 = 2.0 * ell[reg]
                cc = c0[reg]
            else:
                j += 1
                if j > k:
                    break
        if kc < K and ck[kc] == c:
            xck[kc] = x
            rck[kc] = reg
            kc += 1
    cost_out[0] = cost
    return 0


def run_batch(list gens_a, list gens_b, const int64_t[::1] jptr, const double[::1] jt,
              const int64_t[::1] js, const int64_t[::1] i0, const double[::1] x0,
              const double[:, :, ::1] Ab, const double[:, :, ::1] Cb,
              const double[:, ::1] beta, const double[:, ::1] gamma,
              const double[:, :, ::1] Qb, const double[:, ::1] ell, const double[::1] c0,
              int64_t n_cells, int64_t k, double hc, double r, const int64_t[::1] ck,
              double thr, double[::1] cost_out, double[:, :, ::1] xck_out,
              int64_t[:, ::1] rck_out, uint8_t[::1] ovf_out, int workers=1):
    """Simulate one batch of paths; outputs are written in place."""
    cdef Py_ssize_t B = len(gens_a)
    cdef Py_ssize_t n = x0.shape[0]
    cdef Py_ssize_t K = ck.shape[0]
    cdef Py_ssize_t p
    cdef const double* pjt = &jt[0] if jt.shape[0] else NULL
    cdef const int64_t* pjs = &js[0] if js.shape[0] else NULL
    cdef bitgen_t** ga = <bitgen_t**> malloc(B * sizeof(bitgen_t*))
    cdef bitgen_t** gb = <bitgen_t**> malloc(B * sizeof(bitgen_t*))
    cdef double* scratch
    if ga == NULL or gb == NULL:
        free(ga)
        free(gb)
        raise MemoryError()
    try:
        for p in range(B):
            ga[p] = _bitgen(gens_a[p])
            gb[p] = _bitgen(gens_b[p])
        for p in prange(B, nogil=True, schedule="dynamic", chunksize=16, num_threads=workers):
            if n == 1:
                ovf_out[p] = <uint8_t> _path1(
                    ga[p], gb[p], jptr[p], jptr[p + 1], pjt, pjs, i0[p], x0[0],
                    &Ab[0, 0, 0], &Cb[0, 0, 0], &beta[0, 0], &gamma[0, 0], &Qb[0, 0, 0],
                    &ell[0, 0], &c0[0], n_cells, k, hc, r, &ck[0], K, thr, &cost_out[p],
                    &xck_out[p, 0, 0], &rck_out[p, 0])
                continue
            scratch = <double*> malloc(2 * n * sizeof(double))
            ovf_out[p] = <uint8_t> _path(
                ga[p], gb[p], jptr[p], jptr[p + 1], pjt, pjs, i0[p], &x0[0], n,
                &Ab[0, 0, 0], &Cb[0, 0, 0], &beta[0, 0], &gamma[0, 0], &Qb[0, 0, 0], &ell[0, 0],
                &c0[0], n_cells, k, hc, r, &ck[0], K, thr, &cost_out[p], &xck_out[p, 0, 0],
                &rck_out[p, 0], scratch, scratch + n)
            free(scratch)
    finally:
        free(ga)
        free(gb)

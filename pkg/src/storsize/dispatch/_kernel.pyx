# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled dispatch kernel: structured QP active-set solve plus year loop.

Twin of ``_pykernel.py``; the floating-point statement order is kept
identical so both kernels produce the same results. See the pure-Python
module for the algorithm description.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memset

cdef enum:
    FREE = 0
    AT_LO = 1
    AT_HI = 2
    FIXED = 3

cdef enum:
    OK = 0
    ITER_LIMIT = 1
    FACTOR_FAIL = 2
    STATE_FAIL = 3


cdef int _solve(
    int n, int nv, double* S, double* h, double* g, double* lo, double* hi,
    double* rowv, int max_iter, double* x, int* vstate, unsigned char* bactive,
    double* mu, int* blist, double* M, double* rhs, double* xt, double* d,
) noexcept nogil:
    cdef int i, j, a, b, t, nb, iters, status
    cdef int drop_row, drop_var, block_var, block_side, block_row, st
    cdef double acc, m, c, ca, cb, dj, v, dmax, xref
    cdef double lam_min, lam_ref, etaj, lam, step, tt, rdot, slack
    cdef double* ra
    cdef double* rb
    cdef double* ri

    for j in range(nv):
        x[j] = 0.0
        vstate[j] = FREE
    for i in range(n):
        bactive[i] = 0
        if S[i] > 0.0:
            x[i] = S[i]
            bactive[i] = 1
        else:
            vstate[i] = AT_LO
    for j in range(n, nv):
        if hi[j] - lo[j] <= 1e-12:
            x[j] = lo[j]
            vstate[j] = FIXED
        elif hi[j] <= 1e-15:
            x[j] = hi[j]
            vstate[j] = AT_HI
        elif lo[j] >= -1e-15:
            x[j] = lo[j]
            vstate[j] = AT_LO

    status = ITER_LIMIT
    iters = 0
    while iters < max_iter:
        iters += 1

        nb = 0
        for i in range(n):
            if bactive[i]:
                blist[nb] = i
                nb += 1
        for a in range(nb):
            ra = rowv + blist[a] * nv
            acc = S[blist[a]]
            for j in range(nv):
                c = ra[j]
                if c != 0.0:
                    if vstate[j] == FREE:
                        acc += c * g[j] / h[j]
                    else:
                        acc -= c * x[j]
            rhs[a] = acc
            for b in range(a + 1):
                rb = rowv + blist[b] * nv
                m = 0.0
                for j in range(nv):
                    if vstate[j] == FREE:
                        ca = ra[j]
                        if ca != 0.0:
                            cb = rb[j]
                            if cb != 0.0:
                                m += ca * cb / h[j]
                M[a * n + b] = m
                M[b * n + a] = m

        for a in range(nb):
            for b in range(a):
                acc = M[a * n + b]
                for t in range(b):
                    acc -= M[a * n + t] * M[b * n + t]
                M[a * n + b] = acc / M[b * n + b]
            acc = M[a * n + a]
            for t in range(a):
                acc -= M[a * n + t] * M[a * n + t]
            if acc <= 0.0:
                return FACTOR_FAIL
            M[a * n + a] = sqrt(acc)
        for a in range(nb):
            acc = rhs[a]
            for t in range(a):
                acc -= M[a * n + t] * mu[t]
            mu[a] = acc / M[a * n + a]
        for a in range(nb - 1, -1, -1):
            acc = mu[a]
            for t in range(a + 1, nb):
                acc -= M[t * n + a] * mu[t]
            mu[a] = acc / M[a * n + a]

        dmax = 0.0
        xref = 1.0
        for j in range(nv):
            if vstate[j] == FREE:
                acc = -g[j]
                for a in range(nb):
                    c = rowv[blist[a] * nv + j]
                    if c != 0.0:
                        acc += mu[a] * c
                acc /= h[j]
                xt[j] = acc
                dj = acc - x[j]
                d[j] = dj
                v = x[j]
                if v < 0.0:
                    v = -v
                if v > xref:
                    xref = v
                if dj < 0.0:
                    dj = -dj
                if dj > dmax:
                    dmax = dj
            else:
                d[j] = 0.0

        if dmax <= 1e-11 * xref:
            lam_min = 0.0
            lam_ref = 1.0
            drop_row = -1
            drop_var = -1
            for a in range(nb):
                v = mu[a]
                if v < 0.0:
                    v = -v
                if v > lam_ref:
                    lam_ref = v
            for a in range(nb):
                if mu[a] < lam_min:
                    lam_min = mu[a]
                    drop_row = blist[a]
                    drop_var = -1
            for j in range(nv):
                st = vstate[j]
                if st == AT_LO or st == AT_HI:
                    etaj = h[j] * x[j] + g[j]
                    for a in range(nb):
                        c = rowv[blist[a] * nv + j]
                        if c != 0.0:
                            etaj -= mu[a] * c
                    if st == AT_LO:
                        lam = etaj
                    else:
                        lam = -etaj
                    if lam < lam_min:
                        lam_min = lam
                        drop_row = -1
                        drop_var = j
            if lam_min >= -1e-7 * lam_ref:
                status = OK
                break
            if drop_var >= 0:
                vstate[drop_var] = FREE
            else:
                bactive[drop_row] = 0
            continue

        step = 1.0
        block_var = -1
        block_side = 0
        block_row = -1
        for j in range(nv):
            if vstate[j] == FREE:
                dj = d[j]
                if dj > 0.0:
                    if hi[j] < INFINITY:
                        tt = (hi[j] - x[j]) / dj
                        if tt < 0.0:
                            tt = 0.0
                        if tt < step:
                            step = tt
                            block_var = j
                            block_side = AT_HI
                            block_row = -1
                elif dj < 0.0:
                    tt = (lo[j] - x[j]) / dj
                    if tt < 0.0:
                        tt = 0.0
                    if tt < step:
                        step = tt
                        block_var = j
                        block_side = AT_LO
                        block_row = -1
        for i in range(n):
            if not bactive[i]:
                ri = rowv + i * nv
                rdot = 0.0
                for j in range(nv):
                    c = ri[j]
                    if c != 0.0 and vstate[j] == FREE:
                        rdot += c * d[j]
                if rdot < -1e-15:
                    slack = -S[i]
                    for j in range(nv):
                        c = ri[j]
                        if c != 0.0:
                            slack += c * x[j]
                    tt = -slack / rdot
                    if tt < 0.0:
                        tt = 0.0
                    if tt < step:
                        step = tt
                        block_var = -1
                        block_row = i

        if block_var < 0 and block_row < 0:
            for j in range(nv):
                if vstate[j] == FREE:
                    x[j] = xt[j]
        else:
            for j in range(nv):
                if vstate[j] == FREE:
                    x[j] += step * d[j]
            if block_var >= 0:
                vstate[block_var] = block_side
                if block_side == AT_HI:
                    x[block_var] = hi[block_var]
                else:
                    x[block_var] = lo[block_var]
            else:
                bactive[block_row] = 1

    return status


def solve_structured(n, U, E, S, h, g, lo, hi, rowv, max_iter=0):
    """Entry point mirroring ``_pykernel.solve_structured`` (for parity tests)."""
    cdef int cn = n, cU = U, cE = E
    cdef int nv = cn + cU + cE
    cdef int mi = max_iter if max_iter > 0 else 60 + 12 * (nv + cn)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] S_a = np.ascontiguousarray(S, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] h_a = np.ascontiguousarray(h, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g_a = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] lo_a = np.ascontiguousarray(lo, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] hi_a = np.ascontiguousarray(hi, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] rowv_a = np.ascontiguousarray(rowv, dtype=np.float64)

    cdef int nmax = cn if cn > 0 else 1
    # one block each for doubles and ints, carved into the work arrays
    cdef int ndbl = 3 * nv + 2 * nmax + nmax * nmax
    cdef double* dbl = <double*> malloc(ndbl * sizeof(double))
    cdef int* ints = <int*> malloc((nv + nmax) * sizeof(int))
    cdef unsigned char* bactive = <unsigned char*> malloc(nmax)
    if dbl == NULL or ints == NULL or bactive == NULL:
        if dbl != NULL: free(dbl)
        if ints != NULL: free(ints)
        if bactive != NULL: free(bactive)
        raise MemoryError()
    cdef double* x = dbl
    cdef double* xt = dbl + nv
    cdef double* d = dbl + 2 * nv
    cdef double* mu = dbl + 3 * nv
    cdef double* rhs = dbl + 3 * nv + nmax
    cdef double* M = dbl + 3 * nv + 2 * nmax
    cdef int* vstate = ints
    cdef int* blist = ints + nv

    cdef int status, i, nb
    try:
        status = _solve(
            cn, nv, &S_a[0], &h_a[0], &g_a[0], &lo_a[0], &hi_a[0],
            &rowv_a[0, 0], mi, x, vstate, bactive, mu, blist, M, rhs, xt, d,
        )
        x_out = [x[i] for i in range(nv)]
        mu_by_node = [0.0] * cn
        if status == OK:
            nb = 0
            for i in range(cn):
                if bactive[i]:
                    mu_by_node[i] = mu[nb]
                    nb += 1
        return x_out, mu_by_node, status, -1
    finally:
        free(dbl)
        free(ints)
        free(bactive)


def run_year(
    shortfall,
    demand,
    unit_node,
    p_max,
    e_max,
    e0,
    eta,
    edge_a,
    edge_b,
    cap,
    double alpha,
    double beta,
    double gamma,
    double delta,
    double floor_gw,
    double dt,
    double flow_reg,
    bint collect_logs,
):
    """Compiled twin of ``_pykernel.run_year``; same signature and returns."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] S2 = np.ascontiguousarray(shortfall, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] D2 = np.ascontiguousarray(demand, dtype=np.float64)
    cdef int n = S2.shape[0]
    cdef int K = S2.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] un = np.ascontiguousarray(unit_node, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pmax_a = np.ascontiguousarray(p_max, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] emax_a = np.ascontiguousarray(e_max, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] e0_a = np.ascontiguousarray(e0, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] eta_a = np.ascontiguousarray(eta, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] ea = np.ascontiguousarray(edge_a, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] eb = np.ascontiguousarray(edge_b, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cap_a = np.ascontiguousarray(cap, dtype=np.float64)
    cdef int U = un.shape[0]
    cdef int E = ea.shape[0]
    cdef int nv = n + U + E

    resultant = np.zeros((n, K))
    p_log = np.zeros((U, K)) if collect_logs else None
    f_log = np.zeros((E, K)) if collect_logs else None
    e_log = np.zeros((U, K)) if collect_logs else None
    e_final = np.zeros(U)

    cdef int nmax = n if n > 0 else 1
    cdef int umax = U if U > 0 else 1
    cdef int ndbl = n * nv + 7 * nv + 3 * nmax + nmax * nmax + umax
    cdef double* dbl = <double*> malloc(ndbl * sizeof(double))
    cdef int* ints = <int*> malloc((nv + nmax) * sizeof(int))
    cdef unsigned char* bactive = <unsigned char*> malloc(nmax)
    if dbl == NULL or ints == NULL or bactive == NULL:
        if dbl != NULL: free(dbl)
        if ints != NULL: free(ints)
        if bactive != NULL: free(bactive)
        raise MemoryError()
    cdef double* rowv = dbl
    cdef double* h = dbl + n * nv
    cdef double* g = h + nv
    cdef double* lo = g + nv
    cdef double* hi = lo + nv
    cdef double* x = hi + nv
    cdef double* xt = x + nv
    cdef double* d = xt + nv
    cdef double* mu = d + nv
    cdef double* rhs = mu + nmax
    cdef double* Sk = rhs + nmax
    cdef double* M = Sk + nmax
    cdef double* e_cur = M + nmax * nmax
    cdef int* vstate = ints
    cdef int* blist = ints + nv

    cdef double[:, ::1] Sv = S2
    cdef double[:, ::1] Dv = D2
    cdef double[:, ::1] res_v = resultant
    cdef double[:, ::1] plog_v = p_log if collect_logs else np.zeros((1, 1))
    cdef double[:, ::1] flog_v = f_log if collect_logs else np.zeros((1, 1))
    cdef double[:, ::1] elog_v = e_log if collect_logs else np.zeros((1, 1))
    cdef double[::1] efin_v = e_final if U else np.zeros(1)
    cdef cnp.int32_t[::1] un_v = un
    cdef cnp.int32_t[::1] ea_v = ea
    cdef cnp.int32_t[::1] eb_v = eb
    cdef double[::1] pmax_v = pmax_a
    cdef double[::1] emax_v = emax_a
    cdef double[::1] e0_v = e0_a
    cdef double[::1] eta_v = eta_a
    cdef double[::1] cap_v = cap_a

    cdef int status = OK
    cdef int fail_step = -1
    cdef int max_iter = 60 + 12 * (nv + n)
    cdef int i, j, u, e, k
    cdef double v, smax, Dk, hi_p, lo_p, p, en
    cdef double alpha_dt = alpha * dt
    cdef bint full

    with nogil:
        memset(rowv, 0, n * nv * sizeof(double))
        for i in range(n):
            rowv[i * nv + i] = 1.0
        for u in range(U):
            rowv[un_v[u] * nv + (n + u)] = 1.0
        for e in range(E):
            rowv[eb_v[e] * nv + (n + U + e)] += 1.0
            rowv[ea_v[e] * nv + (n + U + e)] -= 1.0

        for i in range(n):
            lo[i] = 0.0
            hi[i] = INFINITY
        for u in range(U):
            h[n + u] = delta * dt * dt / pmax_v[u]
        for e in range(E):
            j = n + U + e
            h[j] = 2.0 * flow_reg
            g[j] = 0.0
            lo[j] = -cap_v[e]
            hi[j] = cap_v[e]

        for u in range(U):
            e_cur[u] = e0_v[u]

        for k in range(K):
            smax = -INFINITY
            for i in range(n):
                v = Sv[i, k]
                Sk[i] = v
                if v > smax:
                    smax = v
            full = True
            for u in range(U):
                if e_cur[u] < emax_v[u] - 1e-12:
                    full = False
                    break
            if smax <= 0.0 and full:
                # provably optimal no-op: nothing to serve, nothing can charge
                if collect_logs:
                    for u in range(U):
                        elog_v[u, k] = e_cur[u]
                continue

            for i in range(n):
                Dk = Dv[i, k]
                if Dk < floor_gw:
                    Dk = floor_gw
                h[i] = beta * dt / Dk
                g[i] = alpha_dt
            for u in range(U):
                j = n + u
                g[j] = (gamma - delta * e_cur[u] / pmax_v[u]) * dt
                hi_p = e_cur[u] / dt
                if hi_p > pmax_v[u]:
                    hi_p = pmax_v[u]
                lo_p = (e_cur[u] - emax_v[u]) / dt
                if lo_p < -pmax_v[u]:
                    lo_p = -pmax_v[u]
                hi[j] = hi_p
                lo[j] = lo_p

            status = _solve(
                n, nv, Sk, h, g, lo, hi, rowv, max_iter,
                x, vstate, bactive, mu, blist, M, rhs, xt, d,
            )
            if status != OK:
                fail_step = k
                break

            for u in range(U):
                j = n + u
                p = x[j]
                if p < lo[j] - 1e-9 or p > hi[j] + 1e-9:
                    status = STATE_FAIL
                    fail_step = k
                    break
                if p < lo[j]:
                    p = lo[j]
                elif p > hi[j]:
                    p = hi[j]
                if p >= 0.0:
                    en = e_cur[u] - p * dt
                else:
                    en = e_cur[u] - eta_v[u] * p * dt
                if en < -1e-9 or en > emax_v[u] + 1e-9:
                    status = STATE_FAIL
                    fail_step = k
                    break
                if en < 0.0:
                    en = 0.0
                elif en > emax_v[u]:
                    en = emax_v[u]
                e_cur[u] = en
                if collect_logs:
                    plog_v[u, k] = p
                    elog_v[u, k] = en
            if status != OK:
                break
            for i in range(n):
                v = x[i]
                if v < 0.0:
                    v = 0.0
                res_v[i, k] = v
            if collect_logs:
                for e in range(E):
                    j = n + U + e
                    v = x[j]
                    if v < -cap_v[e]:
                        v = -cap_v[e]
                    elif v > cap_v[e]:
                        v = cap_v[e]
                    flog_v[e, k] = v

        for u in range(U):
            efin_v[u] = e_cur[u]

    free(dbl)
    free(ints)
    free(bactive)

    return resultant, e_final, p_log, f_log, e_log, status, fail_step

"""Pure-Python dispatch kernel: structured QP active-set solve plus year loop.

Twin of the compiled kernel in ``_kernel.pyx``. The statement order of all
floating-point arithmetic is kept identical between the two so results
agree bit-for-bit; any change here must be mirrored there.

Problem shape per time step (node count n, unit count U, edge count E,
variable layout x = [s_0..s_{n-1}, p_0..p_{U-1}, f_0..f_{E-1}]):

    min  sum_j h_j x_j^2 / 2 + g_j x_j
    s.t. lo_j <= x_j <= hi_j
         row_i . x >= S_i          (node balance, one row per node)

with h diagonal and strictly positive, so the program is strictly convex
and the primal active-set iteration terminates at the unique optimum.
"""

from __future__ import annotations

import math

import numpy as np

INF = math.inf

FREE = 0
AT_LO = 1
AT_HI = 2
FIXED = 3

OK = 0
ITER_LIMIT = 1
FACTOR_FAIL = 2
STATE_FAIL = 3


def solve_structured(n, U, E, S, h, g, lo, hi, rowv, max_iter=0):
    """Active-set solve; returns (x, mu_by_node, status, iterations).

    ``rowv`` is the dense n x nv balance-row matrix. Constraint scan order
    (variables ascending, then rows ascending) fixes all tie-breaks, so the
    solve is deterministic.
    """
    nv = n + U + E
    if max_iter <= 0:
        max_iter = 60 + 12 * (nv + n)

    x = [0.0] * nv
    vstate = [FREE] * nv
    bactive = [False] * n
    # warm start: shortfall nodes enter with their balance row active,
    # surplus nodes with s pinned at zero
    for i in range(n):
        if S[i] > 0.0:
            x[i] = S[i]
            bactive[i] = True
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

    mu = [0.0] * (n if n else 1)
    blist = [0] * (n if n else 1)
    M = [[0.0] * (n if n else 1) for _ in range(n if n else 1)]
    rhs = [0.0] * (n if n else 1)
    xt = [0.0] * nv
    d = [0.0] * nv

    status = ITER_LIMIT
    iters = 0
    while iters < max_iter:
        iters += 1

        # ---- equality-constrained subproblem on the working set
        nb = 0
        for i in range(n):
            if bactive[i]:
                blist[nb] = i
                nb += 1
        for a in range(nb):
            ra = rowv[blist[a]]
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
                rb = rowv[blist[b]]
                m = 0.0
                for j in range(nv):
                    if vstate[j] == FREE:
                        ca = ra[j]
                        if ca != 0.0:
                            cb = rb[j]
                            if cb != 0.0:
                                m += ca * cb / h[j]
                M[a][b] = m
                M[b][a] = m

        # Cholesky of the (SPD) Schur complement, factor stored in M
        failed = False
        for a in range(nb):
            for b in range(a):
                acc = M[a][b]
                for t in range(b):
                    acc -= M[a][t] * M[b][t]
                M[a][b] = acc / M[b][b]
            acc = M[a][a]
            for t in range(a):
                acc -= M[a][t] * M[a][t]
            if acc <= 0.0:
                failed = True
                break
            M[a][a] = math.sqrt(acc)
        if failed:
            status = FACTOR_FAIL
            break
        for a in range(nb):
            acc = rhs[a]
            for t in range(a):
                acc -= M[a][t] * mu[t]
            mu[a] = acc / M[a][a]
        for a in range(nb - 1, -1, -1):
            acc = mu[a]
            for t in range(a + 1, nb):
                acc -= M[t][a] * mu[t]
            mu[a] = acc / M[a][a]

        # ---- targets for the free variables
        dmax = 0.0
        xref = 1.0
        for j in range(nv):
            if vstate[j] == FREE:
                acc = -g[j]
                for a in range(nb):
                    c = rowv[blist[a]][j]
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
            # at the EQP optimum: check multiplier signs
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
                        c = rowv[blist[a]][j]
                        if c != 0.0:
                            etaj -= mu[a] * c
                    lam = etaj if st == AT_LO else -etaj
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
                bactive[drop_row] = False
            continue

        # ---- ratio test: variables first (index order), then balance rows
        step = 1.0
        block_var = -1
        block_side = 0
        block_row = -1
        for j in range(nv):
            if vstate[j] == FREE:
                dj = d[j]
                if dj > 0.0:
                    if hi[j] < INF:
                        t = (hi[j] - x[j]) / dj
                        if t < 0.0:
                            t = 0.0
                        if t < step:
                            step = t
                            block_var = j
                            block_side = AT_HI
                            block_row = -1
                elif dj < 0.0:
                    t = (lo[j] - x[j]) / dj
                    if t < 0.0:
                        t = 0.0
                    if t < step:
                        step = t
                        block_var = j
                        block_side = AT_LO
                        block_row = -1
        for i in range(n):
            if not bactive[i]:
                ri = rowv[i]
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
                    t = -slack / rdot
                    if t < 0.0:
                        t = 0.0
                    if t < step:
                        step = t
                        block_var = -1
                        block_row = i

        if block_var < 0 and block_row < 0:
            # unobstructed: land exactly on the EQP optimum
            for j in range(nv):
                if vstate[j] == FREE:
                    x[j] = xt[j]
        else:
            for j in range(nv):
                if vstate[j] == FREE:
                    x[j] += step * d[j]
            if block_var >= 0:
                vstate[block_var] = block_side
                x[block_var] = hi[block_var] if block_side == AT_HI else lo[block_var]
            else:
                bactive[block_row] = True

    mu_by_node = [0.0] * n
    if status == OK:
        nb = 0
        for i in range(n):
            if bactive[i]:
                mu_by_node[i] = mu[nb]
                nb += 1
    return x, mu_by_node, status, iters


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
    alpha,
    beta,
    gamma,
    delta,
    floor_gw,
    dt,
    flow_reg,
    collect_logs,
):
    """Run the per-step QP policy over aligned (n, K) shortfall/demand arrays.

    Returns (resultant (n,K), e_final (U,), p_log, f_log, e_log, status, step);
    the log arrays are None unless ``collect_logs``. ``status`` is nonzero if
    the solver or the energy update failed at step ``step``.
    """
    S2 = np.ascontiguousarray(shortfall, dtype=np.float64)
    D2 = np.ascontiguousarray(demand, dtype=np.float64)
    n, K = S2.shape
    U = len(unit_node)
    E = len(edge_a)
    nv = n + U + E

    rowv = [[0.0] * nv for _ in range(n)]
    for i in range(n):
        rowv[i][i] = 1.0
    for u in range(U):
        rowv[unit_node[u]][n + u] = 1.0
    for e in range(E):
        rowv[edge_b[e]][n + U + e] += 1.0
        rowv[edge_a[e]][n + U + e] -= 1.0

    h = [0.0] * nv
    g = [0.0] * nv
    lo = [0.0] * nv
    hi = [0.0] * nv
    for i in range(n):
        lo[i] = 0.0
        hi[i] = INF
    for u in range(U):
        j = n + u
        h[j] = delta * dt * dt / p_max[u]
    for e in range(E):
        j = n + U + e
        h[j] = 2.0 * flow_reg
        g[j] = 0.0
        lo[j] = -cap[e]
        hi[j] = cap[e]

    e_cur = [float(v) for v in e0]
    pmax_l = [float(v) for v in p_max]
    emax_l = [float(v) for v in e_max]
    eta_l = [float(v) for v in eta]
    cap_l = [float(v) for v in cap]
    Slist = S2.tolist()
    Dlist = D2.tolist()

    resultant = np.zeros((n, K))
    p_log = np.zeros((U, K)) if collect_logs else None
    f_log = np.zeros((E, K)) if collect_logs else None
    e_log = np.zeros((U, K)) if collect_logs else None

    Sk = [0.0] * n
    alpha_dt = alpha * dt

    for k in range(K):
        smax = -INF
        for i in range(n):
            v = Slist[i][k]
            Sk[i] = v
            if v > smax:
                smax = v
        full = True
        for u in range(U):
            if e_cur[u] < emax_l[u] - 1e-12:
                full = False
                break
        if smax <= 0.0 and full:
            # provably optimal no-op: nothing to serve, nothing can charge
            if collect_logs:
                for u in range(U):
                    e_log[u, k] = e_cur[u]
            continue

        for i in range(n):
            Dk = Dlist[i][k]
            if Dk < floor_gw:
                Dk = floor_gw
            h[i] = beta * dt / Dk
            g[i] = alpha_dt
        for u in range(U):
            j = n + u
            g[j] = (gamma - delta * e_cur[u] / pmax_l[u]) * dt
            hi_p = e_cur[u] / dt
            if hi_p > pmax_l[u]:
                hi_p = pmax_l[u]
            lo_p = (e_cur[u] - emax_l[u]) / dt
            if lo_p < -pmax_l[u]:
                lo_p = -pmax_l[u]
            hi[j] = hi_p
            lo[j] = lo_p

        x, _, status, _ = solve_structured(n, U, E, Sk, h, g, lo, hi, rowv)
        if status != OK:
            return resultant, np.asarray(e_cur), p_log, f_log, e_log, status, k

        for u in range(U):
            j = n + u
            p = x[j]
            if p < lo[j] - 1e-9 or p > hi[j] + 1e-9:
                return resultant, np.asarray(e_cur), p_log, f_log, e_log, STATE_FAIL, k
            if p < lo[j]:
                p = lo[j]
            elif p > hi[j]:
                p = hi[j]
            if p >= 0.0:
                en = e_cur[u] - p * dt
            else:
                en = e_cur[u] - eta_l[u] * p * dt
            if en < -1e-9 or en > emax_l[u] + 1e-9:
                return resultant, np.asarray(e_cur), p_log, f_log, e_log, STATE_FAIL, k
            if en < 0.0:
                en = 0.0
            elif en > emax_l[u]:
                en = emax_l[u]
            e_cur[u] = en
            if collect_logs:
                p_log[u, k] = p
                e_log[u, k] = en
        for i in range(n):
            s = x[i]
            if s < 0.0:
                s = 0.0
            resultant[i, k] = s
        if collect_logs:
            for e in range(E):
                j = n + U + e
                f = x[j]
                if f < -cap_l[e]:
                    f = -cap_l[e]
                elif f > cap_l[e]:
                    f = cap_l[e]
                f_log[e, k] = f

    return resultant, np.asarray(e_cur), p_log, f_log, e_log, OK, -1

"""Pure numpy path kernel, used when the compiled extension is unavailable.

Vectorized across the paths of a batch. Cells containing a chain jump are
handled path by path. Every floating-point operation is performed in the same
order as in ``_kernel.pyx`` so both backends agree bit for bit (up to the
last ulp of ``exp`` when discounting).
"""
import math

import numpy as np

CHUNK = 1024


def _jump_cells(jt: np.ndarray, hc: float) -> np.ndarray:
    """Cell in which each jump is processed: the first c with t < (c + 1) hc."""
    c = np.floor(jt / hc).astype(np.int64)
    c += jt >= (c + 1) * hc
    c -= (c > 0) & (jt < c * hc)
    return c


def _scalar_cell(c, hc, h, k, dWc, x, reg, cost, jt, js, jidx, zb, bptr,
                 Ab, Cb, beta, gamma, Qb, ell, c0, r, thr):
    """One cell of one path containing at least one jump.

    Returns (cost, reg, jidx, bptr, overflowed); ``x`` is updated in place.
    """
    n = len(x)
    a = c * hc
    e = (c + 1) * hc
    tp = a
    Wp = 0.0
    j = 1
    xn = [0.0] * n
    while True:
        sg = a + j * h if j < k else e
        if jt[jidx] < sg:
            s = jt[jidx]
            jump = True
        else:
            s = sg
            jump = False
        if not jump and j == k:
            Ws = dWc
        else:
            z = zb[bptr]
            bptr += 1
            num = s - tp
            den = e - tp
            Ws = (Wp + (num / den) * (dWc - Wp)) + math.sqrt((num * (e - s)) / den) * z
        dt = s - tp
        dw = Ws - Wp
        f = c0[reg]
        for u in range(n):
            acc = 2.0 * ell[reg, u]
            for v in range(n):
                acc = acc + Qb[reg, u, v] * x[v]
            f = f + x[u] * acc
        if r != 0.0:
            f = np.exp(-r * tp) * f
        cost = cost + f * dt
        for u in range(n):
            dr = beta[reg, u]
            df = gamma[reg, u]
            for v in range(n):
                dr = dr + Ab[reg, u, v] * x[v]
                df = df + Cb[reg, u, v] * x[v]
            xn[u] = (x[u] + dr * dt) + df * dw
        xx = 0.0
        for u in range(n):
            x[u] = xn[u]
            xx = xx + xn[u] * xn[u]
        if not xx <= thr:
            return cost, reg, jidx, bptr, True
        tp = s
        Wp = Ws
        if jump:
            reg = int(js[jidx])
            jidx += 1
        else:
            j += 1
            if j > k:
                return cost, reg, jidx, bptr, False


def run_batch(gens_a, gens_b, jptr, jt, js, i0, x0, Ab, Cb, beta, gamma, Qb, ell, c0,
              n_cells, k, hc, r, ck, thr, cost_out, xck_out, rck_out, ovf_out):
    B = len(gens_a)
    n = x0.shape[0]
    K = ck.shape[0]
    # per-path jump lists with an infinite sentinel appended
    starts = jptr[:-1] + np.arange(B)
    jt_s = np.insert(jt, jptr[1:], np.inf)
    js_s = np.insert(js, jptr[1:], -1)
    jc = _jump_cells(jt, hc)
    h = hc / k
    sq = math.sqrt(hc)

    x = np.tile(x0, (B, 1))
    reg = i0.astype(np.int64).copy()
    cost = np.zeros(B)
    jidx = starts.copy()
    ov = np.zeros(B, bool)
    ov_cell = np.full(B, n_cells, np.int64)
    rows = np.arange(B)
    kc = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for c_lo in range(0, n_cells, CHUNK):
            c_hi = min(n_cells, c_lo + CHUNK)
            nc = c_hi - c_lo
            ZA = np.empty((B, nc))
            for p in range(B):
                ZA[p] = gens_a[p].standard_normal(nc)
            pj = jc[jptr[0]:jptr[-1]]
            in_chunk = (pj >= c_lo) & (pj < c_hi)
            owner = np.repeat(np.arange(B), np.diff(jptr))
            nbr = (k - 1) * nc + np.bincount(owner[in_chunk], minlength=B)
            ZB = np.zeros((B, int(nbr.max()) + 1))
            for p in range(B):
                if nbr[p]:
                    ZB[p, :nbr[p]] = gens_b[p].standard_normal(int(nbr[p]))
            bptr = np.zeros(B, np.int64)

            for c in range(c_lo, c_hi):
                a = c * hc
                e = (c + 1) * hc
                dWc = sq * ZA[:, c - c_lo]
                jm = (jt_s[jidx] < e) & ~ov
                jm_idx = np.nonzero(jm)[0]
                if jm_idx.size:
                    saved = (x[jm_idx].copy(), cost[jm_idx].copy(), bptr[jm_idx].copy())
                # vectorized cell without jumps
                Ar, Cr, br, gr = Ab[reg], Cb[reg], beta[reg], gamma[reg]
                Qr, lr, cr = Qb[reg], ell[reg], c0[reg]
                tp = a
                Wp = 0.0
                for j in range(1, k + 1):
                    s = a + j * h if j < k else e
                    if j == k:
                        Ws = dWc
                    else:
                        z = ZB[rows, bptr]
                        bptr += 1
                        num = s - tp
                        den = e - tp
                        Ws = (Wp + (num / den) * (dWc - Wp)) + math.sqrt((num * (e - s)) / den) * z
                    dt = s - tp
                    dw = Ws - Wp
                    f = cr
                    for u in range(n):
                        acc = 2.0 * lr[:, u]
                        for v in range(n):
                            acc = acc + Qr[:, u, v] * x[:, v]
                        f = f + x[:, u] * acc
                    if r != 0.0:
                        f = np.exp(-r * tp) * f
                    cost = cost + f * dt
                    xn = np.empty_like(x)
                    for u in range(n):
                        dr = br[:, u]
                        df = gr[:, u]
                        for v in range(n):
                            dr = dr + Ar[:, u, v] * x[:, v]
                            df = df + Cr[:, u, v] * x[:, v]
                        xn[:, u] = (x[:, u] + dr * dt) + df * dw
                    xx = 0.0
                    for u in range(n):
                        xx = xx + xn[:, u] * xn[:, u]
                    x = xn
                    bad = ~(xx <= thr) & ~ov
                    if bad.any():
                        ov_cell[bad & ~jm] = c
                        ov |= bad & ~jm
                    tp = s
                    Wp = Ws
                # cells with jumps, path by path
                if jm_idx.size:
                    x[jm_idx], cost[jm_idx], bptr[jm_idx] = saved
                    for p in jm_idx:
                        xp = x[p].tolist()
                        cp, rp, jp, bp, bad = _scalar_cell(
                            c, hc, h, k, float(dWc[p]), xp, int(reg[p]), float(cost[p]),
                            jt_s, js_s, int(jidx[p]), ZB[p], int(bptr[p]),
                            Ab, Cb, beta, gamma, Qb, ell, c0, r, thr)
                        x[p] = xp
                        cost[p], reg[p], jidx[p], bptr[p] = cp, rp, jp, bp
                        if bad:
                            ov[p] = True
                            ov_cell[p] = c
                if kc < K and ck[kc] == c:
                    xck_out[:, kc] = x
                    rck_out[:, kc] = reg
                    kc += 1
    # overflowed paths stop at the overflow: later checkpoints are undefined
    late = ck[None, :] >= ov_cell[:, None]
    xck_out[late] = np.nan
    rck_out[late] = -1
    cost_out[:] = np.where(ov, np.nan, cost)
    ovf_out[:] = ov

"""Compiled inner loops: right-hand side, steppers, relay checks, event loop.

Everything here works on flat arrays.  State vector layout is
``[delta (n), delta_dot (n), E (n), rho (N)]``.
"""

import numpy as np
from numba import njit

RIGS = 0
OFGS = 1
UFLS = 2
UVLS = 3
LINE = 4

STATUS_OK = 0
STATUS_BLOWUP = 1
STATUS_TRUNCATED = 2
STATUS_COLLAPSE = 3

RK4 = 0
RK45 = 1


@njit(cache=True, error_model="numpy")
def rhs(y, out, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws):
    """Time derivative of ``y`` into ``out``; returns the system inertia used."""
    M = 0.0
    for g in range(N):
        M += psi[g] * Mgen[g]
    for i in range(n):
        d = y[i]
        e = y[2 * n + i]
        wc[i] = e * np.cos(d)
        ws[i] = e * np.sin(d)
    for i in range(n):
        a = 0.0
        b = 0.0
        for j in range(n):
            bij = B[i, j]
            if bij != 0.0:
                a += bij * wc[j]
                b += bij * ws[j]
        e = y[2 * n + i]
        if e != 0.0:
            c = wc[i] / e
            s = ws[i] / e
        else:
            c = np.cos(y[i])
            s = np.sin(y[i])
        flow = e * (s * a - c * b)
        vsum = c * a + s * b
        w = y[n + i]
        if i < N:
            pg = Pe[i] + y[3 * n + i]
            if pg > Pmax[i]:
                pg = Pmax[i]
            inj = psi[i] * pg
            field = psi[i] * (Ef[i] - Kv * (e - E0[i]))
        else:
            inj = 0.0
            field = Ef[i]
        out[i] = w
        out[n + i] = (inj - pnode[i] - flow - D * w) / M
        out[2 * n + i] = (field - e + X[i] * vsum) / S[i]
    for g in range(N):
        w = y[n + g]
        if w >= -band and w <= band:
            out[3 * n + g] = 0.0
        else:
            out[3 * n + g] = -A[g] * w
    return M


@njit(cache=True, error_model="numpy")
def line_flow(y, n, B0, i, j):
    return B0[i, j] * y[2 * n + i] * y[2 * n + j] * np.sin(y[i] - y[j])


@njit(cache=True, error_model="numpy")
def pending(y, f, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0,
            rocof_thr, of_thr, FU, pphi):
    """True if any RIGS/OFGS/UFLS/LINE criterion holds at ``(y, f)``."""
    for g in range(N):
        if psi[g] > 0.5:
            if abs(f[n + g]) > rocof_thr or y[n + g] > of_thr:
                return True
    for l in range(load_nodes.shape[0]):
        if F[l] < 4:
            if y[n + load_nodes[l]] < FU[F[l]]:
                return True
    for k in range(ic_i.shape[0]):
        if Om[k] > 0.5:
            if abs(line_flow(y, n, B0, ic_i[k], ic_j[k])) > pphi:
                return True
    return False


@njit(cache=True, error_model="numpy")
def fire(t, y, f, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0, Beff,
         Pe, Pmax, phat_now, rocof_thr, of_thr, FU, ufls_frac, pphi,
         ev_t, ev_kind, ev_target, ev_mag, ev_val, ev_pre, ev_post, n_ev, max_ev):
    """Apply every criterion holding at ``(y, f)``; one UFLS stage per load.

    Returns the updated event count.  Indicator arrays and ``Beff`` are
    modified in place.
    """
    for g in range(N):
        if psi[g] > 0.5:
            kind = -1
            val = 0.0
            if abs(f[n + g]) > rocof_thr:
                kind = RIGS
                val = f[n + g]
            elif y[n + g] > of_thr:
                kind = OFGS
                val = y[n + g]
            if kind >= 0:
                pg = Pe[g] + y[3 * n + g]
                if pg > Pmax[g]:
                    pg = Pmax[g]
                psi[g] = 0.0
                if n_ev < max_ev:
                    ev_t[n_ev] = t
                    ev_kind[n_ev] = kind
                    ev_target[n_ev] = g
                    ev_mag[n_ev] = max(pg, 0.0)
                    ev_val[n_ev] = val
                    ev_pre[n_ev] = 1.0
                    ev_post[n_ev] = 0.0
                n_ev += 1
    for l in range(load_nodes.shape[0]):
        if F[l] < 4:
            node = load_nodes[l]
            if y[n + node] < FU[F[l]]:
                if n_ev < max_ev:
                    ev_t[n_ev] = t
                    ev_kind[n_ev] = UFLS
                    ev_target[n_ev] = node
                    ev_mag[n_ev] = ufls_frac * phat_now[l]
                    ev_val[n_ev] = y[n + node]
                    ev_pre[n_ev] = F[l]
                    ev_post[n_ev] = F[l] + 1
                n_ev += 1
                F[l] += 1
    for k in range(ic_i.shape[0]):
        if Om[k] > 0.5:
            i = ic_i[k]
            j = ic_j[k]
            phi = line_flow(y, n, B0, i, j)
            if abs(phi) > pphi:
                Om[k] = 0.0
                bij = B0[i, j]
                Beff[i, j] = 0.0
                Beff[j, i] = 0.0
                Beff[i, i] += bij
                Beff[j, j] += bij
                if n_ev < max_ev:
                    ev_t[n_ev] = t
                    ev_kind[n_ev] = LINE
                    ev_target[n_ev] = k
                    ev_mag[n_ev] = abs(phi)
                    ev_val[n_ev] = phi
                    ev_pre[n_ev] = 1.0
                    ev_post[n_ev] = 0.0
                n_ev += 1
    return n_ev


@njit(cache=True, error_model="numpy")
def node_loads(pnode, load_nodes, phat_now, F, V, ufls_frac, uv_frac):
    pnode[:] = 0.0
    for l in range(load_nodes.shape[0]):
        iota = 1.0 - ufls_frac * F[l] - uv_frac * V[l]
        pnode[load_nodes[l]] += iota * phat_now[l]


# Dormand-Prince 5(4) coefficients
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200,
                                22 / 525, -1 / 40)


@njit(cache=True, error_model="numpy")
def simulate(y0, t0, t_max, dt, method, rtol, atol, ev_tol,
             B0, D, Mgen, A, Pmax, Pe, S, X, Ef, Kv, E0, band,
             load_nodes, phat, seg_times, ic_i, ic_j,
             psi0, om0, F0, V0,
             rocof_thr, of_thr, FU, ufls_frac, uv_v, uv_hold, uv_frac, pphi,
             max_ev, stop_first, rec_every, rec_cap):
    n = B0.shape[0]
    N = Mgen.shape[0]
    nl = load_nodes.shape[0]
    m = ic_i.shape[0]
    nseg = seg_times.shape[0]
    ny = y0.shape[0]

    psi = psi0.copy()
    Om = om0.copy()
    F = F0.copy()
    V = V0.copy()
    Beff = B0.copy()
    for k in range(m):
        if Om[k] < 0.5:
            i = ic_i[k]
            j = ic_j[k]
            bij = B0[i, j]
            Beff[i, j] = 0.0
            Beff[j, i] = 0.0
            Beff[i, i] += bij
            Beff[j, j] += bij

    ev_t = np.zeros(max_ev)
    ev_kind = np.zeros(max_ev, dtype=np.int64)
    ev_target = np.zeros(max_ev, dtype=np.int64)
    ev_mag = np.zeros(max_ev)
    ev_val = np.zeros(max_ev)
    ev_pre = np.zeros(max_ev)
    ev_post = np.zeros(max_ev)
    n_ev = 0

    om_changes = np.full((nseg, n), np.nan)
    rec_t = np.zeros(rec_cap)
    rec_y = np.zeros((rec_cap, ny))
    n_rec = 0

    mon_rocof = np.zeros(N)
    mon_wmax = np.full(N, -np.inf)
    mon_wmin = np.full(nl, np.inf)
    mon_flow = np.zeros(m)
    mon_below = np.zeros(nl)
    mon_emin = np.full(nl, np.inf)
    mon_absw = 0.0

    wc = np.zeros(n)
    ws = np.zeros(n)
    k1 = np.zeros(ny)
    k2 = np.zeros(ny)
    k3 = np.zeros(ny)
    k4 = np.zeros(ny)
    k5 = np.zeros(ny)
    k6 = np.zeros(ny)
    k7 = np.zeros(ny)
    tmp = np.zeros(ny)
    y = y0.copy()
    ynew = np.zeros(ny)
    fnew = np.zeros(ny)
    yprev_E = np.zeros(nl)
    pnode = np.zeros(n)
    below_since = np.full(nl, -1.0)

    seg = 0
    while seg + 1 < nseg and seg_times[seg + 1] <= t0 + 1e-12:
        seg += 1
    node_loads(pnode, load_nodes, phat[:, seg], F, V, ufls_frac, uv_frac)
    t = t0
    status = STATUS_OK
    blow_t = -1.0
    blow_node = -1

    Msys = rhs(y, k1, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
    pend_start = pending(y, k1, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0,
                         rocof_thr, of_thr, FU, pphi)
    for i in range(n):
        om_changes[seg, i] = y[n + i]
    for l in range(nl):
        e = y[2 * n + load_nodes[l]]
        if e < uv_v and V[l] < 0.5:
            below_since[l] = t
    if rec_every > 0 and n_rec < rec_cap:
        rec_t[n_rec] = t
        rec_y[n_rec, :] = y
        n_rec += 1

    h_ad = dt
    step_count = 0
    if Msys <= 0.0:
        status = STATUS_COLLAPSE
    while t < t_max - 1e-12 and status == STATUS_OK:
        t_next = t + (dt if method == RK4 else h_ad)
        if t_next > t_max:
            t_next = t_max
        if seg + 1 < nseg and seg_times[seg + 1] < t_next:
            t_next = seg_times[seg + 1]
        for l in range(nl):
            if V[l] < 0.5 and below_since[l] >= 0.0:
                tf = below_since[l] + uv_hold
                if tf > t + 1e-12 and tf < t_next:
                    t_next = tf
        h = t_next - t

        # one trial step (adaptive method may shrink h)
        while True:
            if method == RK4:
                for q in range(ny):
                    tmp[q] = y[q] + 0.5 * h * k1[q]
                rhs(tmp, k2, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                for q in range(ny):
                    tmp[q] = y[q] + 0.5 * h * k2[q]
                rhs(tmp, k3, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                for q in range(ny):
                    tmp[q] = y[q] + h * k3[q]
                rhs(tmp, k4, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                for q in range(ny):
                    ynew[q] = y[q] + h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
                break
            else:
                _dp_step(y, h, k1, k2, k3, k4, k5, k6, k7, tmp, ynew,
                         n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                err = 0.0
                for q in range(ny):
                    sc = atol + rtol * max(abs(y[q]), abs(ynew[q]))
                    e_q = h * (_E1 * k1[q] + _E3 * k3[q] + _E4 * k4[q] + _E5 * k5[q]
                               + _E6 * k6[q] + _E7 * k7[q]) / sc
                    err += e_q * e_q
                err = np.sqrt(err / ny)
                if err <= 1.0 or h <= 1e-9:
                    fac = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** -0.2)
                    h_ad = min(dt, max(h * fac, 1e-6))
                    break
                h = h * max(0.2, 0.9 * err ** -0.2)
                t_next = t + h

        finite = True
        for q in range(ny):
            if not np.isfinite(ynew[q]):
                finite = False
                blow_node = q % n if q < 3 * n else q - 3 * n
                break
        if not finite:
            status = STATUS_BLOWUP
            blow_t = t_next
            break

        Msys = rhs(ynew, fnew, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
        pend_new = pending(ynew, fnew, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0,
                           rocof_thr, of_thr, FU, pphi)
        if pend_new and not pend_start:
            lo = 0.0
            hi = h
            while hi - lo > ev_tol:
                mid = 0.5 * (lo + hi)
                _sub_step(y, mid, method, k1, k2, k3, k4, k5, k6, k7, tmp, ynew,
                          n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                rhs(ynew, fnew, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                if pending(ynew, fnew, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0,
                           rocof_thr, of_thr, FU, pphi):
                    hi = mid
                else:
                    lo = mid
            if hi < h:
                _sub_step(y, hi, method, k1, k2, k3, k4, k5, k6, k7, tmp, ynew,
                          n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                rhs(ynew, fnew, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
                h = hi
                t_next = t + hi

        for l in range(nl):
            yprev_E[l] = y[2 * n + load_nodes[l]]
        t = t_next
        for q in range(ny):
            y[q] = ynew[q]
            k1[q] = fnew[q]
        step_count += 1

        # monitors (relay-free extremes are what N-1 calibration reads)
        for g in range(N):
            if psi[g] > 0.5:
                r = abs(k1[n + g])
                if r > mon_rocof[g]:
                    mon_rocof[g] = r
                if y[n + g] > mon_wmax[g]:
                    mon_wmax[g] = y[n + g]
        for i in range(n):
            if abs(y[n + i]) > mon_absw:
                mon_absw = abs(y[n + i])
        for l in range(nl):
            node = load_nodes[l]
            if y[n + node] < mon_wmin[l]:
                mon_wmin[l] = y[n + node]
            if y[2 * n + node] < mon_emin[l]:
                mon_emin[l] = y[2 * n + node]
        for k in range(m):
            if Om[k] > 0.5:
                fl = abs(line_flow(y, n, B0, ic_i[k], ic_j[k]))
                if fl > mon_flow[k]:
                    mon_flow[k] = fl

        n_before = n_ev
        # under-voltage timers
        for l in range(nl):
            if V[l] > 0.5:
                continue
            e = y[2 * n + load_nodes[l]]
            if e < uv_v:
                if below_since[l] < 0.0:
                    e0 = yprev_E[l]
                    frac = 1.0
                    if e0 > e:
                        frac = (e0 - uv_v) / (e0 - e)
                    below_since[l] = t - h + frac * h
                dur = t - below_since[l]
                if dur > mon_below[l]:
                    mon_below[l] = dur
                if dur >= uv_hold - 1e-9:
                    if n_ev < max_ev:
                        ev_t[n_ev] = t
                        ev_kind[n_ev] = UVLS
                        ev_target[n_ev] = load_nodes[l]
                        ev_mag[n_ev] = uv_frac * phat[l, seg]
                        ev_val[n_ev] = e
                        ev_pre[n_ev] = 0.0
                        ev_post[n_ev] = 1.0
                    n_ev += 1
                    V[l] = 1.0
            else:
                below_since[l] = -1.0

        if pend_new or pend_start:
            if pending(y, k1, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0,
                       rocof_thr, of_thr, FU, pphi):
                n_ev = fire(t, y, k1, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0, Beff,
                            Pe, Pmax, phat[:, seg], rocof_thr, of_thr, FU, ufls_frac, pphi,
                            ev_t, ev_kind, ev_target, ev_mag, ev_val, ev_pre, ev_post,
                            n_ev, max_ev)

        changed = n_ev > n_before
        if seg + 1 < nseg and t >= seg_times[seg + 1] - 1e-12:
            seg += 1
            for i in range(n):
                om_changes[seg, i] = y[n + i]
            changed = True
        if changed:
            node_loads(pnode, load_nodes, phat[:, seg], F, V, ufls_frac, uv_frac)
            Msys = rhs(y, k1, n, N, Beff, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
            if Msys <= 0.0:
                status = STATUS_COLLAPSE
            pend_start = pending(y, k1, n, N, psi, F, V, Om, load_nodes, ic_i, ic_j, B0,
                                 rocof_thr, of_thr, FU, pphi)
        else:
            pend_start = False

        if rec_every > 0 and (step_count % rec_every == 0 or n_ev > n_before) and n_rec < rec_cap:
            rec_t[n_rec] = t
            rec_y[n_rec, :] = y
            n_rec += 1
        if n_ev >= max_ev:
            status = STATUS_TRUNCATED
        if stop_first and n_ev > 0:
            break

    if rec_every > 0 and n_rec < rec_cap and (n_rec == 0 or rec_t[n_rec - 1] < t):
        rec_t[n_rec] = t
        rec_y[n_rec, :] = y
        n_rec += 1
    n_store = min(n_ev, max_ev)
    mon = (mon_rocof, mon_wmax, mon_wmin, mon_flow, mon_below, mon_emin, mon_absw)
    events = (ev_t[:n_store], ev_kind[:n_store], ev_target[:n_store], ev_mag[:n_store],
              ev_val[:n_store], ev_pre[:n_store], ev_post[:n_store])
    indicators = (psi, Om, F, V, below_since)
    return (status, t, y, events, indicators, om_changes, rec_t[:n_rec], rec_y[:n_rec],
            mon, blow_t, blow_node, step_count)


@njit(cache=True, error_model="numpy")
def _dp_step(y, h, k1, k2, k3, k4, k5, k6, k7, tmp, ynew,
             n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws):
    ny = y.shape[0]
    for q in range(ny):
        tmp[q] = y[q] + h * _A21 * k1[q]
    rhs(tmp, k2, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
    for q in range(ny):
        tmp[q] = y[q] + h * (_A31 * k1[q] + _A32 * k2[q])
    rhs(tmp, k3, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
    for q in range(ny):
        tmp[q] = y[q] + h * (_A41 * k1[q] + _A42 * k2[q] + _A43 * k3[q])
    rhs(tmp, k4, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
    for q in range(ny):
        tmp[q] = y[q] + h * (_A51 * k1[q] + _A52 * k2[q] + _A53 * k3[q] + _A54 * k4[q])
    rhs(tmp, k5, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
    for q in range(ny):
        tmp[q] = y[q] + h * (_A61 * k1[q] + _A62 * k2[q] + _A63 * k3[q] + _A64 * k4[q]
                             + _A65 * k5[q])
    rhs(tmp, k6, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
    for q in range(ny):
        ynew[q] = y[q] + h * (_B1 * k1[q] + _B3 * k3[q] + _B4 * k4[q] + _B5 * k5[q]
                              + _B6 * k6[q])
    rhs(ynew, k7, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)


@njit(cache=True, error_model="numpy")
def _sub_step(y, h, method, k1, k2, k3, k4, k5, k6, k7, tmp, ynew,
              n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws):
    """Single step of length ``h`` from ``y`` with ``k1 = f(y)`` already set."""
    ny = y.shape[0]
    if method == RK4:
        for q in range(ny):
            tmp[q] = y[q] + 0.5 * h * k1[q]
        rhs(tmp, k2, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
        for q in range(ny):
            tmp[q] = y[q] + 0.5 * h * k2[q]
        rhs(tmp, k3, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
        for q in range(ny):
            tmp[q] = y[q] + h * k3[q]
        rhs(tmp, k4, n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)
        for q in range(ny):
            ynew[q] = y[q] + h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
    else:
        _dp_step(y, h, k1, k2, k3, k4, k5, k6, k7, tmp, ynew,
                 n, N, B, D, Mgen, psi, Pmax, Pe, A, S, X, Ef, Kv, E0, pnode, band, wc, ws)

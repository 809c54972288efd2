"""Compiled event loop for the reflected fluid network.

Between events every rate is constant, so the path is piecewise linear and
all time integrals (tail occupation, exponential moments) are exact per
segment.  Cumulative sums that grow with time (V, Y) use Neumaier
compensation so the reflection identity can be checked at 1e-9 relative
accuracy over long horizons.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# status codes returned by run_path
DONE = 0
RECORD_FULL = 1
LIVELOCK = 2
RATE_FAILURE = 3
EVENT_LIMIT = 4

# counters
C_EVENTS = 0
C_CONSERVATION = 1
C_COMPLEMENTARITY = 2
C_MONOTONE = 3
C_RATE_SIGN = 4
C_NEGATIVE = 5
C_ZERO_RUN = 6
N_COUNTERS = 7

SNAP = 1e-12
HIT_WINDOW = 1e-15
CONSERVATION_TOL = 1e-9
RATE_TOL = 1e-12
PICARD_CAP = 100000


@njit(cache=True, nogil=True)
def _nadd(s, c, k, x):
    t = s[k] + x
    if abs(s[k]) >= abs(x):
        c[k] += (s[k] - t) + x
    else:
        c[k] += (x - t) + s[k]
    s[k] = t


@njit(cache=True, nogil=True)
def _exprel(x):
    if abs(x) < 1e-8:
        return 1.0 + 0.5 * x
    return np.expm1(x) / x


@njit(cache=True, nogil=True)
def _release(lam_i, mu_i, Pt, empty, scale):
    """Fixed point of b = min(mu, lam + P^T b) on empty coordinates, b = mu elsewhere.

    Monotone Picard descent from mu, then an exact solve on the binding
    pattern.  Returns (b, ok).
    """
    d = lam_i.shape[0]
    b = mu_i.copy()
    any_empty = False
    for k in range(d):
        if empty[k]:
            any_empty = True
    if not any_empty:
        return b, True
    a = np.empty(d)
    for it in range(PICARD_CAP):
        change = 0.0
        for k in range(d):
            s = lam_i[k]
            for l in range(d):
                s += Pt[k, l] * b[l]
            a[k] = s
        for k in range(d):
            if empty[k]:
                nb = min(mu_i[k], a[k])
                change = max(change, abs(nb - b[k]))
                b[k] = nb
        if change <= RATE_TOL * scale:
            break
        if it % 8 == 7:
            # exact solve with the current free set {empty and a < mu}
            M = np.eye(d)
            rhs = mu_i.copy()
            for k in range(d):
                if empty[k] and a[k] < mu_i[k]:
                    rhs[k] = lam_i[k]
                    for l in range(d):
                        M[k, l] -= Pt[k, l]
            cand = np.linalg.solve(M, rhs)
            good = True
            for k in range(d):
                s = lam_i[k]
                for l in range(d):
                    s += Pt[k, l] * cand[l]
                f = min(mu_i[k], s) if empty[k] else mu_i[k]
                if abs(f - cand[k]) > RATE_TOL * scale:
                    good = False
            if good:
                return cand, True
    else:
        return b, False
    return b, True


@njit(cache=True, nogil=True)
def _pattern(empty):
    key = 0
    for k in range(empty.shape[0]):
        if empty[k]:
            key |= 1 << k
    return key


@njit(cache=True, nogil=True)
def run_path(lam, mu, Pt, Q, v, R, regulated, rng,
             tstate, J, Z, Y, Yc, V, Vc, Zmax, Z0,
             t_end, burn, max_events,
             C, X, occ, TH, H, psi, psik, empty_time,
             counters, fstats, cache_b, cache_ok,
             rec_f, rec_j, rec_n, record):
    """Advance one path until ``t_end`` (or ``max_events`` segments).

    ``tstate = [t, t_next_jump]``; a negative jump time means none has been
    drawn yet.  All state arrays are updated in place, so the call can be
    resumed and gives the same path as one uninterrupted call.
    """
    d = lam.shape[0]
    m = Q.shape[0]
    nc = C.shape[0]
    nx = X.shape[1]
    nt = TH.shape[0]
    use_cache = cache_ok.shape[0] > 0
    scale = 0.0
    for k in range(d):
        for i in range(m):
            scale = max(scale, abs(lam[k, i]), abs(mu[k, i]), abs(v[k, i]))
    empty = np.zeros(d, dtype=np.bool_)
    zslope = np.empty(d)
    yslope = np.empty(d)
    a = np.empty(d)
    n_seg = 0
    while True:
        t = tstate[0]
        if t >= t_end:
            return DONE
        if n_seg >= max_events:
            return EVENT_LIMIT
        if tstate[1] < 0.0:
            rate = -Q[J[0], J[0]]
            tstate[1] = t - np.log1p(-rng.random()) / rate
        j = J[0]
        # classification and release rates
        for k in range(d):
            empty[k] = regulated[k] and Z[k] == 0.0
        if use_cache:
            key = _pattern(empty)
            if cache_ok[j, key]:
                b = cache_b[j, key].copy()
            else:
                b, ok = _release(lam[:, j], mu[:, j], Pt, empty, scale)
                if not ok:
                    return RATE_FAILURE
                cache_b[j, key] = b
                cache_ok[j, key] = True
        else:
            b, ok = _release(lam[:, j], mu[:, j], Pt, empty, scale)
            if not ok:
                return RATE_FAILURE
        for k in range(d):
            s = lam[k, j]
            for l in range(d):
                s += Pt[k, l] * b[l]
            a[k] = s
            if b[k] < -RATE_TOL * scale:
                counters[C_RATE_SIGN] += 1
        # an empty buffer whose inflow exceeds its capacity starts filling
        for k in range(d):
            if empty[k] and a[k] - mu[k, j] > RATE_TOL * scale:
                empty[k] = False
        for k in range(d):
            if empty[k]:
                zslope[k] = 0.0
                yslope[k] = max(mu[k, j] - a[k], 0.0)
                if mu[k, j] - b[k] < -RATE_TOL * scale:
                    counters[C_MONOTONE] += 1
            else:
                zslope[k] = a[k] - b[k]
                yslope[k] = 0.0
        # next event
        dt = min(tstate[1], t_end) - t
        is_jump = tstate[1] <= t_end
        hit_dt = np.inf
        for k in range(d):
            if regulated[k] and not empty[k] and zslope[k] < 0.0:
                h = Z[k] / (-zslope[k])
                if h < hit_dt:
                    hit_dt = h
        if hit_dt < dt:
            dt = hit_dt
            is_jump = False
        if dt < 0.0:
            dt = 0.0
        if dt == 0.0:
            counters[C_ZERO_RUN] += 1
            if counters[C_ZERO_RUN] > 10 * d:
                return LIVELOCK
        else:
            counters[C_ZERO_RUN] = 0
        # record the segment
        if record:
            n = rec_n[0]
            if n >= rec_f.shape[0]:
                return RECORD_FULL
            rec_f[n, 0] = t
            rec_f[n, 1] = t + dt
            for k in range(d):
                rec_f[n, 2 + k] = Z[k]
                rec_f[n, 2 + d + k] = zslope[k]
                rec_f[n, 2 + 2 * d + k] = yslope[k]
            rec_j[n] = j
            rec_n[0] = n + 1
        # exact integrals over the part of the segment after burn-in
        tau0 = burn - t
        if tau0 < 0.0:
            tau0 = 0.0
        if tau0 < dt:
            ln = dt - tau0
            for ci in range(nc):
                s0 = 0.0
                s1 = 0.0
                for k in range(d):
                    s0 += C[ci, k] * (Z[k] + zslope[k] * tau0)
                    s1 += C[ci, k] * zslope[k]
                for xi in range(nx):
                    x = X[ci, xi]
                    if s1 == 0.0:
                        if s0 > x:
                            occ[ci, xi] += ln
                    else:
                        tc = (x - s0) / s1
                        if tc < 0.0:
                            tc = 0.0
                        elif tc > ln:
                            tc = ln
                        occ[ci, xi] += (ln - tc) if s1 > 0.0 else tc
            for ti in range(nt):
                e0 = 0.0
                e1 = 0.0
                for k in range(d):
                    e0 += TH[ti, k] * (Z[k] + zslope[k] * tau0)
                    e1 += TH[ti, k] * zslope[k]
                integral = np.exp(e0) * ln * _exprel(e1 * ln) * H[ti, j]
                psi[ti] += integral
                for k in range(d):
                    if yslope[k] > 0.0:
                        psik[ti, k] += integral * yslope[k]
            for k in range(d):
                if empty[k]:
                    empty_time[k] += ln
        # advance
        for k in range(d):
            if regulated[k] and Z[k] > SNAP * (1.0 + Zmax[k]) and yslope[k] > 0.0:
                counters[C_COMPLEMENTARITY] += 1
            _nadd(V, Vc, k, v[k, j] * dt)
            _nadd(Y, Yc, k, yslope[k] * dt)
            if not empty[k]:
                Z[k] = Z[k] + zslope[k] * dt
            if regulated[k] and not empty[k] and zslope[k] < 0.0:
                h = Z[k] / (-zslope[k]) if Z[k] > 0.0 else 0.0
                if Z[k] <= SNAP * (1.0 + Zmax[k]) or h <= HIT_WINDOW * (1.0 + t):
                    Z[k] = 0.0
            if Z[k] > Zmax[k]:
                Zmax[k] = Z[k]
            if regulated[k] and Z[k] < -SNAP:
                counters[C_NEGATIVE] += 1
        tstate[0] = t + dt
        if is_jump:
            rate = -Q[j, j]
            u = rng.random() * rate
            acc = 0.0
            nxt = j
            for i in range(m):
                if i != j:
                    acc += Q[j, i]
                    nxt = i
                    if u < acc:
                        break
            J[0] = nxt
            tstate[1] = -1.0
        # reflection identity Z = Z(0) + V + R Y
        zn = 0.0
        for k in range(d):
            zn = max(zn, abs(Z[k]))
        err = 0.0
        for k in range(d):
            s = Z0[k] + (V[k] + Vc[k])
            for l in range(d):
                s += R[k, l] * (Y[l] + Yc[l])
            err = max(err, abs(Z[k] - s))
        rel = err / (1.0 + zn)
        if rel > fstats[0]:
            fstats[0] = rel
        if rel > CONSERVATION_TOL:
            counters[C_CONSERVATION] += 1
        if dt > 0.0:
            counters[C_EVENTS] += 1
        n_seg += 1

"""Pure-Python/numpy versions of the compiled kernels.

Same signatures and semantics as ``_kernels``. The distance transform uses a
vectorized O(n^2) per-line minimum instead of the lower-envelope sweep; both
are exact on the integer lattice so results agree bit for bit.
"""
import math

import numpy as np

BIG = 1e30


def _min_plus_axis(f, axis):
    f = np.ascontiguousarray(np.moveaxis(f, axis, -1))
    n = f.shape[-1]
    idx = np.arange(n, dtype=np.float64)
    d2 = (idx[:, None] - idx[None, :]) ** 2
    out = np.empty(f.shape, dtype=np.float64)
    flat = f.reshape(-1, n)
    oflat = out.reshape(-1, n)
    # chunk rows to keep the (rows, n, n) temporary small
    chunk = max(1, 2_000_000 // max(1, n * n))
    for s in range(0, flat.shape[0], chunk):
        block = flat[s:s + chunk]
        oflat[s:s + chunk] = (block[:, None, :] + d2[None, :, :]).min(axis=2)
    return np.moveaxis(out, -1, axis)


def squared_edt(sources):
    f = np.where(np.asarray(sources, dtype=bool), 0.0, BIG)
    if f.size == 0:
        return f
    for axis in (2, 1, 0):
        f = np.ascontiguousarray(_min_plus_axis(f, axis))
    return f


def _mark(flags, i, j, k):
    if i < 0 or j < 0 or k < 0:
        return
    if i >= flags.shape[0] or j >= flags.shape[1] or k >= flags.shape[2]:
        return
    flags[i, j, k] = 1


def raycast_mark(hit, miss, start, ends):
    start = [float(v) for v in start]
    for end in np.asarray(ends, dtype=np.float64):
        cur = [0, 0, 0]
        last = [0, 0, 0]
        step = [0, 0, 0]
        tmax = [0.0, 0.0, 0.0]
        tdelta = [0.0, 0.0, 0.0]
        remaining = 0
        for a in range(3):
            cur[a] = math.floor(start[a])
            last[a] = math.floor(end[a])
            dirv = float(end[a]) - start[a]
            if dirv > 0:
                step[a] = 1
                tmax[a] = (cur[a] + 1 - start[a]) / dirv
                tdelta[a] = 1.0 / dirv
            elif dirv < 0:
                step[a] = -1
                tmax[a] = (cur[a] - start[a]) / dirv
                tdelta[a] = -1.0 / dirv
            else:
                tmax[a] = BIG
                tdelta[a] = BIG
            remaining += abs(cur[a] - last[a])
        while remaining > 0:
            _mark(miss, cur[0], cur[1], cur[2])
            best = -1
            for a in range(3):
                if cur[a] != last[a] and (best < 0 or tmax[a] < tmax[best]):
                    best = a
            cur[best] += step[best]
            tmax[best] += tdelta[best]
            remaining -= 1
        _mark(hit, last[0], last[1], last[2])


def _wrap(a):
    r = a - 2.0 * math.pi * math.floor((a + math.pi) / (2.0 * math.pi))
    if r == -math.pi:
        r = math.pi
    return r


def rollout_diffdrive(x0, u_ff, K, x_nom, lower, upper, dt, X, U):
    N = u_ff.shape[0]
    X[0] = x0
    h2 = 0.5 * dt
    for k in range(N):
        dx = X[k] - x_nom[k]
        dx[2] = _wrap(dx[2])
        u = np.clip(u_ff[k] + K[k] @ dx, lower, upper)
        U[k] = u
        th = X[k, 2]
        v, w = u[0], u[1]
        k1x, k1y = v * math.cos(th), v * math.sin(th)
        k2x, k2y = v * math.cos(th + h2 * w), v * math.sin(th + h2 * w)
        k4x, k4y = v * math.cos(th + dt * w), v * math.sin(th + dt * w)
        X[k + 1, 0] = X[k, 0] + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k2x + k4x)
        X[k + 1, 1] = X[k, 1] + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k2y + k4y)
        X[k + 1, 2] = _wrap(th + dt / 6.0 * (w + 2.0 * w + 2.0 * w + w))
        qd = u[2:]
        X[k + 1, 3:] = X[k, 3:] + dt / 6.0 * (qd + 2.0 * qd + 2.0 * qd + qd)
        if not np.all(np.isfinite(X[k + 1])):
            return False
    return True


def riccati_backward(A, B, qx, qu, Qxx, Quu, Qux, reg0, reg_factor, reg_max, K, kff):
    N = A.shape[0]
    nu = B.shape[2]
    Vx = np.array(qx[N], dtype=np.float64)
    Vxx = np.array(Qxx[N], dtype=np.float64)
    used = 0.0
    eye = np.eye(nu)
    for t in range(N - 1, -1, -1):
        At, Bt = A[t], B[t]
        Qx = qx[t] + At.T @ Vx
        Qu = qu[t] + Bt.T @ Vx
        Hxx = Qxx[t] + At.T @ Vxx @ At
        Huu = Quu[t] + Bt.T @ Vxx @ Bt
        Hux = Qux[t] + Bt.T @ Vxx @ At
        Huu = 0.5 * (Huu + Huu.T)
        reg = 0.0
        while True:
            try:
                L = np.linalg.cholesky(Huu + reg * eye)
                break
            except np.linalg.LinAlgError:
                reg = reg0 if reg == 0.0 else reg * reg_factor
                if reg > reg_max:
                    return False, used
        used = max(used, reg)
        rhs = np.column_stack([Qu, Hux])
        y = np.linalg.solve(L, rhs)
        sol = np.linalg.solve(L.T, y)
        kff[t] = -sol[:, 0]
        K[t] = -sol[:, 1:]
        Kt, kt = K[t], kff[t]
        Vx = Qx + Kt.T @ (Huu @ kt) + Kt.T @ Qu + Hux.T @ kt
        Vxx = Hxx + Kt.T @ Huu @ Kt + Kt.T @ Hux + Hux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return True, used


def ray_boxes(origin, dirs, centers, halves, rots, t_out, idx_out):
    o = np.einsum("bji,bj->bi", rots, origin - centers)
    d = np.einsum("bji,rj->bri", rots, dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-halves - o)[:, None, :] * inv
        t2 = (halves - o)[:, None, :] * inv
    # zero direction components give +-inf slabs; 0 * inf is nan and
    # fmin/fmax skip it
    tn = np.fmax.reduce(np.fmin(t1, t2), axis=2)
    tf = np.fmin.reduce(np.fmax(t1, t2), axis=2)
    hit = (tf >= tn) & (tf > 0)
    t = np.where(hit, np.where(tn > 0, tn, tf), np.inf)
    idx = np.argmin(t, axis=0)
    best = t[idx, np.arange(len(dirs))]
    t_out[:] = best
    idx_out[:] = np.where(np.isfinite(best), idx, -1)

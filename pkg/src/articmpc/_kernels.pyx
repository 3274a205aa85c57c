# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.

Every function here has a twin with the same signature in ``_fallback``;
``articmpc.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, sin, cos, fabs, fmin, fmax, isfinite, M_PI, INFINITY

cnp.import_array()

cdef double BIG = 1e30


cdef void _edt_line(double* f, Py_ssize_t stride, Py_ssize_t n,
                    double* d, Py_ssize_t* v, double* z) noexcept nogil:
    # Felzenszwalb-Huttenlocher lower envelope of parabolas along one line.
    # Finite values are integers, so intersections never tie spuriously.
    cdef Py_ssize_t q, k = 0
    cdef double s
    v[0] = 0
    z[0] = -BIG * 10.0
    z[1] = BIG * 10.0
    for q in range(1, n):
        s = ((f[q * stride] + <double>(q * q)) - (f[v[k] * stride] + <double>(v[k] * v[k]))) \
            / <double>(2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q * stride] + <double>(q * q)) - (f[v[k] * stride] + <double>(v[k] * v[k]))) \
                / <double>(2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = BIG * 10.0
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = <double>((q - v[k]) * (q - v[k])) + f[v[k] * stride]
    for q in range(n):
        f[q * stride] = d[q]


def squared_edt(cnp.uint8_t[:, :, ::1] sources):
    """Exact squared Euclidean distance (voxel units) to the nearest source voxel.

    Voxels with no source anywhere in the array get a value >= 1e29.
    """
    cdef Py_ssize_t nx = sources.shape[0], ny = sources.shape[1], nz = sources.shape[2]
    out_arr = np.empty((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] f = out_arr
    cdef Py_ssize_t i, j, k, n = max(nx, max(ny, nz))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                f[i, j, k] = 0.0 if sources[i, j, k] else BIG
    if nx == 0 or ny == 0 or nz == 0:
        return out_arr
    d_arr = np.empty(n, dtype=np.float64)
    z_arr = np.empty(n + 1, dtype=np.float64)
    v_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] d = d_arr
    cdef double[::1] z = z_arr
    cdef Py_ssize_t[::1] v = v_arr
    with nogil:
        for i in range(nx):
            for j in range(ny):
                _edt_line(&f[i, j, 0], 1, nz, &d[0], &v[0], &z[0])
        for i in range(nx):
            for k in range(nz):
                _edt_line(&f[i, 0, k], nz, ny, &d[0], &v[0], &z[0])
        for j in range(ny):
            for k in range(nz):
                _edt_line(&f[0, j, k], ny * nz, nx, &d[0], &v[0], &z[0])
    return out_arr


cdef inline void _mark(cnp.uint8_t[:, :, ::1] flags, Py_ssize_t i, Py_ssize_t j, Py_ssize_t k) noexcept nogil:
    if i < 0 or j < 0 or k < 0:
        return
    if i >= flags.shape[0] or j >= flags.shape[1] or k >= flags.shape[2]:
        return
    flags[i, j, k] = 1


def raycast_mark(cnp.uint8_t[:, :, ::1] hit, cnp.uint8_t[:, :, ::1] miss,
                 double[::1] start, double[:, ::1] ends):
    """Voxel-stepping ray traversal in grid units (voxel i spans [i, i+1)).

    Flags every voxel strictly before the endpoint voxel in ``miss`` and the
    endpoint voxel in ``hit``. Voxels outside the arrays are skipped.
    """
    cdef Py_ssize_t r, a, best
    cdef Py_ssize_t cur[3]
    cdef Py_ssize_t last[3]
    cdef Py_ssize_t step[3]
    cdef double tmax[3]
    cdef double tdelta[3]
    cdef double dirv
    cdef Py_ssize_t remaining
    with nogil:
        for r in range(ends.shape[0]):
            remaining = 0
            for a in range(3):
                cur[a] = <Py_ssize_t>floor(start[a])
                last[a] = <Py_ssize_t>floor(ends[r, a])
                dirv = ends[r, a] - start[a]
                if dirv > 0:
                    step[a] = 1
                    tmax[a] = (cur[a] + 1 - start[a]) / dirv
                    tdelta[a] = 1.0 / dirv
                elif dirv < 0:
                    step[a] = -1
                    tmax[a] = (cur[a] - start[a]) / dirv
                    tdelta[a] = -1.0 / dirv
                else:
                    step[a] = 0
                    tmax[a] = BIG
                    tdelta[a] = BIG
                remaining += cur[a] - last[a] if cur[a] > last[a] else last[a] - cur[a]
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


cdef inline double _wrap(double a) noexcept nogil:
    cdef double r = a - 2.0 * M_PI * floor((a + M_PI) / (2.0 * M_PI))
    if r == -M_PI:
        r = M_PI
    return r


def rollout_diffdrive(double[::1] x0, double[:, ::1] u_ff, double[:, :, ::1] K,
                      double[:, ::1] x_nom, double[::1] lower, double[::1] upper,
                      double dt, double[:, ::1] X, double[:, ::1] U):
    """RK4 rollout of the differential-drive + velocity-controlled arm flow.

    u_k = clamp(u_ff[k] + K[k] (x_k - x_nom[k])), angle difference wrapped.
    Returns False as soon as a non-finite state appears.
    """
    cdef Py_ssize_t N = u_ff.shape[0], nu = u_ff.shape[1], nx = x0.shape[0]
    cdef Py_ssize_t k, i, j
    cdef double acc, th, v, w, h2, k1x, k1y, k2x, k2y, k4x, k4y
    cdef double[64] dx
    cdef bint finite = True
    if nx > 64:
        raise ValueError("state dimension too large for the compiled rollout")
    with nogil:
        for i in range(nx):
            X[0, i] = x0[i]
        for k in range(N):
            for i in range(nx):
                dx[i] = X[k, i] - x_nom[k, i]
            dx[2] = _wrap(dx[2])
            for j in range(nu):
                acc = u_ff[k, j]
                for i in range(nx):
                    acc = acc + K[k, j, i] * dx[i]
                if acc < lower[j]:
                    acc = lower[j]
                elif acc > upper[j]:
                    acc = upper[j]
                U[k, j] = acc
            th = X[k, 2]
            v = U[k, 0]
            w = U[k, 1]
            h2 = 0.5 * dt
            k1x = v * cos(th)
            k1y = v * sin(th)
            k2x = v * cos(th + h2 * w)
            k2y = v * sin(th + h2 * w)
            k4x = v * cos(th + dt * w)
            k4y = v * sin(th + dt * w)
            X[k + 1, 0] = X[k, 0] + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k2x + k4x)
            X[k + 1, 1] = X[k, 1] + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k2y + k4y)
            X[k + 1, 2] = _wrap(th + dt / 6.0 * (w + 2.0 * w + 2.0 * w + w))
            for i in range(3, nx):
                acc = U[k, i - 1]
                X[k + 1, i] = X[k, i] + dt / 6.0 * (acc + 2.0 * acc + 2.0 * acc + acc)
            for i in range(nx):
                if not isfinite(X[k + 1, i]):
                    finite = False
            if not finite:
                break
    return bool(finite)


cdef int _cholesky(double* A, Py_ssize_t n, double* L) noexcept nogil:
    cdef Py_ssize_t i, j, p
    cdef double s
    for i in range(n):
        for j in range(i + 1):
            s = A[i * n + j]
            for p in range(j):
                s -= L[i * n + p] * L[j * n + p]
            if i == j:
                if s <= 0.0 or not isfinite(s):
                    return 0
                L[i * n + i] = sqrt(s)
            else:
                L[i * n + j] = s / L[j * n + j]
        for j in range(i + 1, n):
            L[i * n + j] = 0.0
    return 1


cdef void _chol_solve(double* L, Py_ssize_t n, double* b) noexcept nogil:
    # in-place solve (L L^T) x = b
    cdef Py_ssize_t i, p
    cdef double s
    for i in range(n):
        s = b[i]
        for p in range(i):
            s -= L[i * n + p] * b[p]
        b[i] = s / L[i * n + i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for p in range(i + 1, n):
            s -= L[p * n + i] * b[p]
        b[i] = s / L[i * n + i]


def riccati_backward(double[:, :, ::1] A, double[:, :, ::1] B,
                     double[:, ::1] qx, double[:, ::1] qu,
                     double[:, :, ::1] Qxx, double[:, :, ::1] Quu, double[:, :, ::1] Qux,
                     double reg0, double reg_factor, double reg_max,
                     double[:, :, ::1] K, double[:, ::1] kff):
    """Discrete Riccati sweep with per-node Levenberg retries.

    Returns (ok, largest regularization used).
    """
    cdef Py_ssize_t N = A.shape[0], nx = A.shape[1], nu = B.shape[2]
    cdef Py_ssize_t t, i, j, p
    cdef double reg, used = 0.0, s
    vx_a = np.array(qx[N], dtype=np.float64)
    vxx_a = np.array(Qxx[N], dtype=np.float64)
    cdef double[::1] Vx = vx_a
    cdef double[:, ::1] Vxx = vxx_a
    cdef double[::1] Qx = np.empty(nx)
    cdef double[::1] Qu = np.empty(nu)
    cdef double[:, ::1] Hxx = np.empty((nx, nx))
    cdef double[:, ::1] Huu = np.empty((nu, nu))
    cdef double[:, ::1] Hux = np.empty((nu, nx))
    cdef double[:, ::1] VA = np.empty((nx, nx))
    cdef double[:, ::1] VB = np.empty((nx, nu))
    cdef double[:, ::1] Mreg = np.empty((nu, nu))
    cdef double[:, ::1] L = np.empty((nu, nu))
    cdef double[::1] col = np.empty(nu)
    cdef double[::1] Hk = np.empty(nu)
    cdef double[:, ::1] HK = np.empty((nu, nx))
    cdef bint ok = True
    with nogil:
        for t in range(N - 1, -1, -1):
            # VA = Vxx A, VB = Vxx B
            for i in range(nx):
                for j in range(nx):
                    s = 0.0
                    for p in range(nx):
                        s += Vxx[i, p] * A[t, p, j]
                    VA[i, j] = s
                for j in range(nu):
                    s = 0.0
                    for p in range(nx):
                        s += Vxx[i, p] * B[t, p, j]
                    VB[i, j] = s
            for i in range(nx):
                s = qx[t, i]
                for p in range(nx):
                    s += A[t, p, i] * Vx[p]
                Qx[i] = s
                for j in range(nx):
                    s = Qxx[t, i, j]
                    for p in range(nx):
                        s += A[t, p, i] * VA[p, j]
                    Hxx[i, j] = s
            for i in range(nu):
                s = qu[t, i]
                for p in range(nx):
                    s += B[t, p, i] * Vx[p]
                Qu[i] = s
                for j in range(nu):
                    s = Quu[t, i, j]
                    for p in range(nx):
                        s += B[t, p, i] * VB[p, j]
                    Huu[i, j] = s
                for j in range(nx):
                    s = Qux[t, i, j]
                    for p in range(nx):
                        s += B[t, p, i] * VA[p, j]
                    Hux[i, j] = s
            # symmetrize the input Hessian before factorizing
            for i in range(nu):
                for j in range(i):
                    s = 0.5 * (Huu[i, j] + Huu[j, i])
                    Huu[i, j] = s
                    Huu[j, i] = s
            reg = 0.0
            while True:
                for i in range(nu):
                    for j in range(nu):
                        Mreg[i, j] = Huu[i, j]
                    Mreg[i, i] += reg
                if _cholesky(&Mreg[0, 0], nu, &L[0, 0]):
                    break
                if reg == 0.0:
                    reg = reg0
                else:
                    reg = reg * reg_factor
                if reg > reg_max:
                    ok = False
                    break
            if not ok:
                break
            if reg > used:
                used = reg
            for i in range(nu):
                col[i] = Qu[i]
            _chol_solve(&L[0, 0], nu, &col[0])
            for i in range(nu):
                kff[t, i] = -col[i]
            for j in range(nx):
                for i in range(nu):
                    col[i] = Hux[i, j]
                _chol_solve(&L[0, 0], nu, &col[0])
                for i in range(nu):
                    K[t, i, j] = -col[i]
            # value function update
            for i in range(nu):
                s = 0.0
                for p in range(nu):
                    s += Huu[i, p] * kff[t, p]
                Hk[i] = s
                for j in range(nx):
                    s = 0.0
                    for p in range(nu):
                        s += Huu[i, p] * K[t, p, j]
                    HK[i, j] = s
            for i in range(nx):
                s = Qx[i]
                for p in range(nu):
                    s += K[t, p, i] * Hk[p] + K[t, p, i] * Qu[p] + Hux[p, i] * kff[t, p]
                Vx[i] = s
                for j in range(nx):
                    s = Hxx[i, j]
                    for p in range(nu):
                        s += K[t, p, i] * HK[p, j] + K[t, p, i] * Hux[p, j] + Hux[p, i] * K[t, p, j]
                    Vxx[i, j] = s
            for i in range(nx):
                for j in range(i):
                    s = 0.5 * (Vxx[i, j] + Vxx[j, i])
                    Vxx[i, j] = s
                    Vxx[j, i] = s
    return bool(ok), used


def ray_boxes(double[::1] origin, double[:, ::1] dirs, double[:, ::1] centers, double[:, ::1] halves,
              double[:, :, ::1] rots, double[::1] t_out, long[::1] idx_out):
    """Nearest positive hit per ray against oriented boxes (slab test)."""
    cdef Py_ssize_t nr = dirs.shape[0], nb = centers.shape[0]
    cdef Py_ssize_t r, b, a, i
    cdef double o[3]
    cdef double d, inv, t1, t2, tn, tf, t, best
    cdef long bi
    cdef double[:, ::1] O = np.empty((nb, 3))
    for b in range(nb):
        for a in range(3):
            O[b, a] = 0.0
            for i in range(3):
                O[b, a] += rots[b, i, a] * (origin[i] - centers[b, i])
    with nogil:
        for r in range(nr):
            best = INFINITY
            bi = -1
            for b in range(nb):
                tn = -INFINITY
                tf = INFINITY
                for a in range(3):
                    d = rots[b, 0, a] * dirs[r, 0] + rots[b, 1, a] * dirs[r, 1] + rots[b, 2, a] * dirs[r, 2]
                    inv = 1.0 / d
                    t1 = (-halves[b, a] - O[b, a]) * inv
                    t2 = (halves[b, a] - O[b, a]) * inv
                    tn = fmax(tn, fmin(t1, t2))
                    tf = fmin(tf, fmax(t1, t2))
                if tf >= tn and tf > 0:
                    t = tn if tn > 0 else tf
                    if t < best:
                        best = t
                        bi = b
            t_out[r] = best
            idx_out[r] = bi

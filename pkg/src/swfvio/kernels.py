"""Hot numerical kernels, JIT-compiled with numba when available.

Everything here is called inside the per-frame loop, so the bodies avoid
Python objects entirely: plain float64 arrays in, arrays out. When numba
is installed (the default) the functions are compiled with ``@njit``;
setting ``SWFVIO_PURE_NUMPY=1`` in the environment keeps the exact same
bodies as plain-numpy functions. ``swfvio bench`` reports the speed gap
between the two paths.

The compiled path does not use fastmath, so results on either path are
deterministic for a given input.
"""

from __future__ import annotations

import os

import numpy as np

JIT_ENABLED = os.environ.get("SWFVIO_PURE_NUMPY", "0") != "1"

if JIT_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        JIT_ENABLED = False

if not JIT_ENABLED:
    def njit(*args, **kwargs):
        """No-op decorator standing in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


def py_func(kernel):
    """Return the interpreted body of a kernel on either path."""
    return getattr(kernel, "py_func", kernel)


@njit(cache=True)
def _skew3(v):
    out = np.empty((3, 3))
    out[0, 0] = 0.0
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 1] = 0.0
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    out[2, 2] = 0.0
    return out


@njit(cache=True)
def _log_so3(rot):
    tr = rot[0, 0] + rot[1, 1] + rot[2, 2]
    c = 0.5 * (tr - 1.0)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    angle = np.arccos(c)
    w = np.empty(3)
    w[0] = 0.5 * (rot[2, 1] - rot[1, 2])
    w[1] = 0.5 * (rot[0, 2] - rot[2, 0])
    w[2] = 0.5 * (rot[1, 0] - rot[0, 1])
    if angle < 1e-8:
        return w * (1.0 + angle * angle / 6.0)
    if np.pi - angle < 1e-6:
        # axis from the dominant diagonal entry; rare inside the filter
        best = 0
        if rot[1, 1] > rot[best, best]:
            best = 1
        if rot[2, 2] > rot[best, best]:
            best = 2
        axis = np.zeros(3)
        axis[best] = np.sqrt(max(0.25 * (rot[best, best] + 1.0) * 2.0, 0.0))
        for j in range(3):
            if j != best:
                axis[j] = (rot[best, j] + rot[j, best]) * 0.25 / axis[best]
        nrm = np.sqrt(axis[0] ** 2 + axis[1] ** 2 + axis[2] ** 2)
        axis = axis / nrm
        if axis[0] * w[0] + axis[1] * w[1] + axis[2] * w[2] < 0.0:
            axis = -axis
        return angle * axis
    return (angle / np.sin(angle)) * w


@njit(cache=True)
def _renormalize(rot):
    # two Newton steps of the polar projection: X <- X(3I - X^T X)/2
    for _ in range(2):
        g = rot.T @ rot
        corr = -0.5 * g
        corr[0, 0] += 1.5
        corr[1, 1] += 1.5
        corr[2, 2] += 1.5
        rot = rot @ corr
    return rot


@njit(cache=True)
def _rk4_step(rot, pos, vel, w0, w1, a0, a1, dt, grav):
    """One RK4 step of Rdot = R[w]x, pdot = v, vdot = R a + g.

    Measurements are interpolated linearly inside the step.
    """
    wm = 0.5 * (w0 + w1)
    am = 0.5 * (a0 + a1)

    k1r = rot @ _skew3(w0)
    k1v = rot @ a0 + grav
    k1p = vel

    r2 = rot + 0.5 * dt * k1r
    v2 = vel + 0.5 * dt * k1v
    k2r = r2 @ _skew3(wm)
    k2v = r2 @ am + grav
    k2p = v2

    r3 = rot + 0.5 * dt * k2r
    v3 = vel + 0.5 * dt * k2v
    k3r = r3 @ _skew3(wm)
    k3v = r3 @ am + grav
    k3p = v3

    r4 = rot + dt * k3r
    v4 = vel + dt * k3v
    k4r = r4 @ _skew3(w1)
    k4v = r4 @ a1 + grav
    k4p = v4

    sixth = dt / 6.0
    rot = rot + sixth * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
    pos = pos + sixth * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    vel = vel + sixth * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return _renormalize(rot), pos, vel


@njit(cache=True)
def integrate_frame(rot0, pos0, vel0, bg, ba, gyr, acc, dts, grav):
    """Integrate the IMU mean over one frame interval.

    gyr/acc hold len(dts)+1 samples (interval endpoints shared).
    """
    rot = rot0.copy()
    pos = pos0.copy()
    vel = vel0.copy()
    for i in range(dts.shape[0]):
        rot, pos, vel = _rk4_step(
            rot, pos, vel,
            gyr[i] - bg, gyr[i + 1] - bg,
            acc[i] - ba, acc[i + 1] - ba,
            dts[i], grav,
        )
    return rot, pos, vel


@njit(cache=True)
def integrate_with_qd(rot0, pos0, vel0, bg, ba, gyr, acc, dts, grav,
                      sg2, sa2, swg2, swa2):
    """Mean integration plus the frame transition and discrete noise.

    Per step, Phi <- Phi_s Phi and Q <- Phi_s Q Phi_s^T + Q_d(dt) with the
    analytic 9x9 step transition and first-order bias columns; the chain
    of step factors recovers the cross couplings at frame level.
    Returns (rot, pos, vel, phi, q).
    """
    rot = rot0.copy()
    pos = pos0.copy()
    vel = vel0.copy()
    phi = np.eye(15)
    q = np.zeros((15, 15))
    for i in range(dts.shape[0]):
        dt = dts[i]
        rot_p = rot
        pos_p = pos
        vel_p = vel
        rot, pos, vel = _rk4_step(
            rot, pos, vel,
            gyr[i] - bg, gyr[i + 1] - bg,
            acc[i] - ba, acc[i + 1] - ba,
            dt, grav,
        )
        phis = np.eye(15)
        dp = rot_p.T @ (pos - pos_p - vel_p * dt - 0.5 * grav * dt * dt)
        dv = rot_p.T @ (vel - vel_p - grav * dt)
        phis[0:3, 0:3] = rot.T @ rot_p
        phis[3:6, 0:3] = -rot_p @ _skew3(dp)
        phis[6:9, 0:3] = -rot_p @ _skew3(dv)
        for c in range(3):
            phis[3 + c, 6 + c] = dt
            phis[c, 9 + c] = -dt
            for r in range(3):
                phis[3 + r, 12 + c] = -0.5 * dt * dt * rot_p[r, c]
                phis[6 + r, 12 + c] = -dt * rot_p[r, c]
        phi = phis @ phi
        q = phis @ q @ phis.T
        for c in range(3):
            q[c, c] += sg2 * dt
            q[6 + c, 6 + c] += sa2 * dt
            q[9 + c, 9 + c] += swg2 * dt
            q[12 + c, 12 + c] += swa2 * dt
    return rot, pos, vel, phi, q


@njit(cache=True)
def bias_fd_columns(rot0, pos0, vel0, bg, ba, gyr, acc, dts, grav, eps):
    """theta/p/v sensitivity of the frame integration map to the biases.

    Central differences: column j of the returned 9x6 block is
    (f(b + eps e_j) [-] f(b - eps e_j)) / (2 eps) measured in the local
    error coordinates of the nominal endpoint.
    """
    rot_n, _, _ = integrate_frame(rot0, pos0, vel0, bg, ba, gyr, acc, dts, grav)
    cols = np.zeros((9, 6))
    for j in range(6):
        bg_p = bg.copy()
        ba_p = ba.copy()
        bg_m = bg.copy()
        ba_m = ba.copy()
        if j < 3:
            bg_p[j] += eps
            bg_m[j] -= eps
        else:
            ba_p[j - 3] += eps
            ba_m[j - 3] -= eps
        rp, pp, vp = integrate_frame(rot0, pos0, vel0, bg_p, ba_p, gyr, acc, dts, grav)
        rm, pm, vm = integrate_frame(rot0, pos0, vel0, bg_m, ba_m, gyr, acc, dts, grav)
        dth = _log_so3(rot_n.T @ rp) - _log_so3(rot_n.T @ rm)
        scale = 0.5 / eps
        for c in range(3):
            cols[c, j] = dth[c] * scale
            cols[3 + c, j] = (pp[c] - pm[c]) * scale
            cols[6 + c, j] = (vp[c] - vm[c]) * scale
    return cols


@njit(cache=True)
def joseph_update(P, H, r, rvar):
    """EKF update with Joseph-form covariance, R = rvar * I.

    Returns (dx, P_new). Evaluated as
    (I - KH) P (I - KH)^T + rvar K K^T without forming I - KH densely.
    """
    pht = P @ H.T
    s = H @ pht
    for i in range(s.shape[0]):
        s[i, i] += rvar
    kt = np.linalg.solve(s, pht.T)          # K^T, rows x N
    dx = kt.T @ r
    p1 = P - kt.T @ (H @ P)                 # (I - KH) P
    p2 = p1 - (p1 @ H.T) @ kt               # ... (I - KH)^T
    p2 = p2 + rvar * (kt.T @ kt)            # + K R K^T
    return dx, 0.5 * (p2 + p2.T)


@njit(cache=True)
def gate_distances(P, H, r, rvar, sizes):
    """Per-block Mahalanobis distances for chi-square gating.

    H stacks candidate blocks row-wise; sizes holds each block's row
    count. Only the block-diagonal of the innovation covariance is used.
    """
    pht = P @ H.T
    out = np.empty(sizes.shape[0])
    row = 0
    for b in range(sizes.shape[0]):
        k = sizes[b]
        block = np.ascontiguousarray(pht[:, row:row + k])
        s = H[row:row + k] @ block
        for i in range(k):
            s[i, i] += rvar
        out[b] = r[row:row + k] @ np.linalg.solve(s, r[row:row + k])
        row += k
    return out


@njit(cache=True)
def apply_rank1(P, alpha_p, beta):
    """In-place congruence P <- (I + a b^T) P (I + a b^T)^T, O(N^2).

    The additive term a w^T + w a^T + c a a^T is symmetric, so only the
    upper triangle is computed and mirrored; incoming asymmetry (rounding
    noise on a covariance) is discarded in the process.
    """
    w = beta @ P
    c = w @ beta
    n = P.shape[0]
    for i in range(n):
        ai = alpha_p[i]
        wi = w[i]
        for j in range(i, n):
            v = P[i, j] + ai * w[j] + wi * alpha_p[j] + c * ai * alpha_p[j]
            P[i, j] = v
            P[j, i] = v


@njit(cache=True)
def align_direct(P, c3m, c3p, n_clones, n_feats, singular_tol):
    """Fused rank-1 alignment: build the transform from the two yaw
    columns and apply it to P in place, returning 1 + beta^T alpha.

    The basis gram is assembled from the layout structure (translation
    columns are disjoint identity stacks), so only the yaw columns are
    needed. When the returned scale is below singular_tol, P is left
    untouched and the caller skips the step. Matches the object route
    (make_direct + apply_direct) to rounding.
    """
    base = 15 + 6 * n_clones
    s0 = c3p[3]
    s1 = c3p[4]
    s2 = c3p[5]
    for i in range(n_clones):
        a = 18 + 6 * i
        s0 += c3p[a]
        s1 += c3p[a + 1]
        s2 += c3p[a + 2]
    for f in range(n_feats):
        b = base + 3 * f
        s0 += c3p[b]
        s1 += c3p[b + 1]
        s2 += c3p[b + 2]
    g = np.zeros((4, 4))
    k = 1.0 + n_clones + n_feats
    g[0, 0] = k
    g[1, 1] = k
    g[2, 2] = k
    g[0, 3] = s0
    g[1, 3] = s1
    g[2, 3] = s2
    g[3, 0] = s0
    g[3, 1] = s1
    g[3, 2] = s2
    g[3, 3] = c3p @ c3p
    e3 = np.zeros(4)
    e3[3] = 1.0
    y = np.linalg.solve(g, e3)
    beta = y[3] * c3p
    beta[3] += y[0]
    beta[4] += y[1]
    beta[5] += y[2]
    for i in range(n_clones):
        a = 18 + 6 * i
        beta[a] += y[0]
        beta[a + 1] += y[1]
        beta[a + 2] += y[2]
    for f in range(n_feats):
        b = base + 3 * f
        beta[b] += y[0]
        beta[b + 1] += y[1]
        beta[b + 2] += y[2]
    alpha = c3m - c3p
    scale = 1.0 + beta @ alpha
    if np.abs(scale) < singular_tol:
        return scale
    apply_rank1(P, -alpha / scale, beta)
    return scale


@njit(cache=True)
def symmetrize(M):
    """Average M with its transpose in place."""
    n = M.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            m = 0.5 * (M[i, j] + M[j, i])
            M[i, j] = m
            M[j, i] = m


@njit(cache=True)
def indirect_rows(M, rr, ap, av, clone_m, clone_c, feat_d):
    """Apply the factored alignment transform to the rows of M in place.

    Factors act innermost-first: attitude rotation, IMU shears against
    the rotated theta rows, per-clone blocks (shear first, against the
    unrotated clone-theta rows), then the per-feature shears against the
    rotated theta rows. Written as explicit column loops: the 3-row
    slice matmuls this replaces allocated a temporary per block and
    bypassed BLAS.
    """
    w = M.shape[1]
    n_clones = clone_m.shape[0]
    n_feats = feat_d.shape[0]
    base = 15 + 6 * n_clones
    for j in range(w):
        a0 = M[0, j]
        a1 = M[1, j]
        a2 = M[2, j]
        t0 = rr[0, 0] * a0 + rr[0, 1] * a1 + rr[0, 2] * a2
        t1 = rr[1, 0] * a0 + rr[1, 1] * a1 + rr[1, 2] * a2
        t2 = rr[2, 0] * a0 + rr[2, 1] * a1 + rr[2, 2] * a2
        M[0, j] = t0
        M[1, j] = t1
        M[2, j] = t2
        for r in range(3):
            M[3 + r, j] += ap[r, 0] * t0 + ap[r, 1] * t1 + ap[r, 2] * t2
            M[6 + r, j] += av[r, 0] * t0 + av[r, 1] * t1 + av[r, 2] * t2
        for f in range(n_feats):
            b = base + 3 * f
            for r in range(3):
                M[b + r, j] += (feat_d[f, r, 0] * t0 + feat_d[f, r, 1] * t1
                                + feat_d[f, r, 2] * t2)
    for i in range(n_clones):
        a = 15 + 6 * i
        cm = clone_m[i]
        cc = clone_c[i]
        for j in range(w):
            a0 = M[a, j]
            a1 = M[a + 1, j]
            a2 = M[a + 2, j]
            for r in range(3):
                M[a + 3 + r, j] += cc[r, 0] * a0 + cc[r, 1] * a1 + cc[r, 2] * a2
            M[a, j] = cm[0, 0] * a0 + cm[0, 1] * a1 + cm[0, 2] * a2
            M[a + 1, j] = cm[1, 0] * a0 + cm[1, 1] * a1 + cm[1, 2] * a2
            M[a + 2, j] = cm[2, 0] * a0 + cm[2, 1] * a1 + cm[2, 2] * a2


@njit(cache=True)
def indirect_congruence(M, rr, ap, av, clone_m, clone_c, feat_d):
    """T^{-1} M T^{-T} in place for the factored transform: the rows
    pass, the same factors acting on the columns (walked row-major, so
    no transposed copy is needed), and the symmetrizing average."""
    indirect_rows(M, rr, ap, av, clone_m, clone_c, feat_d)
    h = M.shape[0]
    n_clones = clone_m.shape[0]
    n_feats = feat_d.shape[0]
    base = 15 + 6 * n_clones
    for j in range(h):
        a0 = M[j, 0]
        a1 = M[j, 1]
        a2 = M[j, 2]
        t0 = rr[0, 0] * a0 + rr[0, 1] * a1 + rr[0, 2] * a2
        t1 = rr[1, 0] * a0 + rr[1, 1] * a1 + rr[1, 2] * a2
        t2 = rr[2, 0] * a0 + rr[2, 1] * a1 + rr[2, 2] * a2
        M[j, 0] = t0
        M[j, 1] = t1
        M[j, 2] = t2
        for r in range(3):
            M[j, 3 + r] += ap[r, 0] * t0 + ap[r, 1] * t1 + ap[r, 2] * t2
            M[j, 6 + r] += av[r, 0] * t0 + av[r, 1] * t1 + av[r, 2] * t2
        for f in range(n_feats):
            b = base + 3 * f
            for r in range(3):
                M[j, b + r] += (feat_d[f, r, 0] * t0 + feat_d[f, r, 1] * t1
                                + feat_d[f, r, 2] * t2)
        for i in range(n_clones):
            a = 15 + 6 * i
            a0 = M[j, a]
            a1 = M[j, a + 1]
            a2 = M[j, a + 2]
            cm = clone_m[i]
            cc = clone_c[i]
            for r in range(3):
                M[j, a + 3 + r] += cc[r, 0] * a0 + cc[r, 1] * a1 + cc[r, 2] * a2
            M[j, a] = cm[0, 0] * a0 + cm[0, 1] * a1 + cm[0, 2] * a2
            M[j, a + 1] = cm[1, 0] * a0 + cm[1, 1] * a1 + cm[1, 2] * a2
            M[j, a + 2] = cm[2, 0] * a0 + cm[2, 1] * a1 + cm[2, 2] * a2
    for i in range(h):
        for j in range(i + 1, h):
            m = 0.5 * (M[i, j] + M[j, i])
            M[i, j] = m
            M[j, i] = m


@njit(cache=True)
def givens_reduce(M, ncols):
    """Zero M below the diagonal of its first ncols columns with Givens
    rotations, applied across the full row width (in place)."""
    rows = M.shape[0]
    width = M.shape[1]
    for c in range(ncols):
        for k in range(rows - 1, c, -1):
            b = M[k, c]
            if b == 0.0:
                continue
            a = M[k - 1, c]
            rnorm = np.hypot(a, b)
            co = a / rnorm
            si = -b / rnorm
            for j in range(width):
                t1 = M[k - 1, j]
                t2 = M[k, j]
                M[k - 1, j] = co * t1 - si * t2
                M[k, j] = si * t1 + co * t2


@njit(cache=True)
def triangulate_dlt_gn(rots, trans, uvs, z_min, max_iters, max_cond):
    """DLT intersection of bearing rays plus Gauss-Newton refinement.

    rots/trans map global points into each camera: pc = R p + t.
    Returns (point, ok).
    """
    k = uvs.shape[0]
    A = np.zeros((2 * k, 4))
    for i in range(k):
        R = rots[i]
        t = trans[i]
        u = uvs[i, 0]
        v = uvs[i, 1]
        for c in range(3):
            A[2 * i, c] = u * R[2, c] - R[0, c]
            A[2 * i + 1, c] = v * R[2, c] - R[1, c]
        A[2 * i, 3] = u * t[2] - t[0]
        A[2 * i + 1, 3] = v * t[2] - t[1]
    _, _, vt = np.linalg.svd(A)
    hom = vt[3]
    if np.abs(hom[3]) < 1e-12:
        return np.zeros(3), False
    p = hom[0:3] / hom[3]

    jtj = np.zeros((3, 3))
    for _ in range(max_iters):
        jtj[:, :] = 0.0
        jtr = np.zeros(3)
        for i in range(k):
            pc = rots[i] @ p + trans[i]
            if pc[2] < z_min:
                return p, False
            iz = 1.0 / pc[2]
            ru = pc[0] * iz - uvs[i, 0]
            rv = pc[1] * iz - uvs[i, 1]
            j0 = iz * rots[i, 0] - (pc[0] * iz * iz) * rots[i, 2]
            j1 = iz * rots[i, 1] - (pc[1] * iz * iz) * rots[i, 2]
            for a in range(3):
                jtr[a] += j0[a] * ru + j1[a] * rv
                for b in range(3):
                    jtj[a, b] += j0[a] * j0[b] + j1[a] * j1[b]
        ev = np.linalg.eigvalsh(jtj)
        if ev[0] <= 0.0 or ev[2] / ev[0] > max_cond:
            return p, False
        p = p + np.linalg.solve(jtj, -jtr)

    for i in range(k):
        pc = rots[i] @ p + trans[i]
        if pc[2] < z_min:
            return p, False
    return p, True

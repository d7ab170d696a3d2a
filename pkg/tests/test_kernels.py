"""Kernel checks: every @njit kernel against its pure-python twin, and
the fused alignment kernels against the dense / factored references they
replace on the hot path."""

import numpy as np
from numpy.testing import assert_allclose
from scipy.integrate import solve_ivp

from helpers import congruence, random_cov, random_state
from swfvio import alignment, kernels, observability
from swfvio.geometry import GRAVITY, skew
from swfvio.state import ErrorCov


def _imu_profile(rng, n=41, dt=0.005):
    """Smooth gyro/accel signal sampled on a regular grid."""
    ts = np.arange(n) * dt
    w = np.stack([0.4 * np.sin(3.0 * ts), 0.3 * np.cos(2.0 * ts),
                  0.2 * np.sin(1.5 * ts + 0.3)], axis=1)
    a = np.stack([0.5 * np.cos(2.2 * ts), 9.81 + 0.3 * np.sin(1.1 * ts),
                  0.4 * np.sin(2.7 * ts)], axis=1)
    return ts, w, a, np.full(n - 1, dt)


def _rand_inputs(rng):
    from helpers import random_imu
    imu = random_imu(rng)
    ts, gyr, acc, dts = _imu_profile(rng)
    return imu, gyr, acc, dts


def test_integrate_frame_jit_equals_python():
    rng = np.random.default_rng(20)
    imu, gyr, acc, dts = _rand_inputs(rng)
    args = (imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts, GRAVITY)
    jit = kernels.integrate_frame(*args)
    ref = kernels.py_func(kernels.integrate_frame)(*args)
    for a, b in zip(jit, ref):
        assert_allclose(a, b, rtol=0, atol=1e-14)


def test_integrate_frame_against_ode_solver():
    """RK4 at 200 Hz vs an adaptive solver on the same smooth signals.

    The cubic-spline-free kernel interpolates sample midpoints linearly,
    so agreement is limited by the sampling, not the integrator; 1e-8
    over 0.2 s is far above the observed error but far below any bug.
    """
    rng = np.random.default_rng(21)
    imu, gyr, acc, dts = _rand_inputs(rng)
    imu.bg[:] = 0.0
    imu.ba[:] = 0.0
    ts = np.concatenate([[0.0], np.cumsum(dts)])

    def rhs(t, y):
        rot = y[:9].reshape(3, 3)
        vel = y[12:15]
        w = np.array([np.interp(t, ts, gyr[:, k]) for k in range(3)])
        a = np.array([np.interp(t, ts, acc[:, k]) for k in range(3)])
        return np.concatenate([(rot @ skew(w)).ravel(), vel,
                               rot @ a + GRAVITY])

    y0 = np.concatenate([imu.rot.ravel(), imu.pos, imu.vel])
    sol = solve_ivp(rhs, (0.0, ts[-1]), y0, rtol=1e-12, atol=1e-12,
                    dense_output=False)
    rot, pos, vel = kernels.integrate_frame(
        imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts, GRAVITY)
    yf = sol.y[:, -1]
    assert_allclose(rot, yf[:9].reshape(3, 3), atol=1e-8)
    assert_allclose(pos, yf[9:12], atol=1e-8)
    assert_allclose(vel, yf[12:15], atol=1e-8)


def test_integrate_with_qd_matches_mean_and_chain():
    """The fused kernel must reproduce integrate_frame's mean exactly and
    the per-step transition chain / noise recursion built in python."""
    rng = np.random.default_rng(22)
    imu, gyr, acc, dts = _rand_inputs(rng)
    sg2, sa2, swg2, swa2 = 1.7e-4 ** 2, 2e-3 ** 2, 2e-5 ** 2, 3e-3 ** 2
    rot, pos, vel, phi, q = kernels.integrate_with_qd(
        imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts, GRAVITY,
        sg2, sa2, swg2, swa2)
    rot_m, pos_m, vel_m = kernels.integrate_frame(
        imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts, GRAVITY)
    assert_allclose(rot, rot_m, atol=0)
    assert_allclose(pos, pos_m, atol=0)
    assert_allclose(vel, vel_m, atol=0)

    # slow reference: chain per-step factors exactly as documented
    phi_ref = np.eye(15)
    q_ref = np.zeros((15, 15))
    r, p, v = imu.rot, imu.pos, imu.vel
    for i in range(len(dts)):
        dt = dts[i]
        r2, p2, v2 = kernels.integrate_frame(
            r, p, v, imu.bg, imu.ba, gyr[i:i + 2], acc[i:i + 2],
            dts[i:i + 1], GRAVITY)
        phis = np.eye(15)
        dp = r.T @ (p2 - p - v * dt - 0.5 * GRAVITY * dt * dt)
        dv = r.T @ (v2 - v - GRAVITY * dt)
        phis[0:3, 0:3] = r2.T @ r
        phis[3:6, 0:3] = -r @ skew(dp)
        phis[6:9, 0:3] = -r @ skew(dv)
        phis[3:6, 6:9] = dt * np.eye(3)
        phis[0:3, 9:12] = -dt * np.eye(3)
        phis[3:6, 12:15] = -0.5 * dt * dt * r
        phis[6:9, 12:15] = -dt * r
        phi_ref = phis @ phi_ref
        q_ref = phis @ q_ref @ phis.T
        q_ref += np.diag(np.concatenate([
            np.full(3, sg2 * dt), np.zeros(3), np.full(3, sa2 * dt),
            np.full(3, swg2 * dt), np.full(3, swa2 * dt)]))
        r, p, v = r2, p2, v2
    assert_allclose(phi, phi_ref, atol=1e-12)
    assert_allclose(q, q_ref, atol=1e-18)
    assert_allclose(q, q.T, atol=1e-20)
    assert np.linalg.eigvalsh(q).min() > -1e-20


def test_bias_fd_columns_jit_equals_python():
    rng = np.random.default_rng(23)
    imu, gyr, acc, dts = _rand_inputs(rng)
    args = (imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts,
            GRAVITY, 1e-6)
    assert_allclose(kernels.bias_fd_columns(*args),
                    kernels.py_func(kernels.bias_fd_columns)(*args),
                    rtol=0, atol=1e-13)


def test_joseph_update_matches_dense_formula():
    rng = np.random.default_rng(24)
    n, rows, rvar = 33, 8, 1e-5
    p = random_cov(rng, n).p
    h = rng.standard_normal((rows, n))
    r = 1e-3 * rng.standard_normal(rows)
    dx, pnew = kernels.joseph_update(p, h, r, rvar)
    s = h @ p @ h.T + rvar * np.eye(rows)
    k = p @ h.T @ np.linalg.inv(s)
    ikh = np.eye(n) - k @ h
    assert_allclose(dx, k @ r, atol=1e-14)
    assert_allclose(pnew, ikh @ p @ ikh.T + rvar * (k @ k.T), atol=1e-14)
    assert_allclose(pnew, pnew.T, atol=0)
    jit = kernels.joseph_update(p, h, r, rvar)
    ref = kernels.py_func(kernels.joseph_update)(p, h, r, rvar)
    assert_allclose(jit[0], ref[0], atol=1e-15)
    assert_allclose(jit[1], ref[1], atol=1e-18)


def test_gate_distances_per_block():
    rng = np.random.default_rng(25)
    n, rvar = 27, 2e-5
    p = random_cov(rng, n).p
    sizes = np.array([2, 5, 2], dtype=np.int64)
    rows = int(sizes.sum())
    h = rng.standard_normal((rows, n))
    r = 1e-2 * rng.standard_normal(rows)
    d2 = kernels.gate_distances(p, h, r, rvar, sizes)
    at = 0
    for b, k in enumerate(sizes):
        hb, rb = h[at:at + k], r[at:at + k]
        s = hb @ p @ hb.T + rvar * np.eye(k)
        assert_allclose(d2[b], rb @ np.linalg.solve(s, rb), rtol=1e-12)
        at += k


def test_givens_reduce_is_orthogonal_triangularization():
    rng = np.random.default_rng(26)
    m = rng.standard_normal((12, 7))
    work = m.copy()
    kernels.givens_reduce(work, 3)
    # rotations: the Gram matrix of the full stack is preserved
    assert_allclose(work.T @ work, m.T @ m, atol=1e-12)
    # leading ncols columns upper-triangular, zero below the diagonal
    for j in range(3):
        assert_allclose(work[j + 1:, j], 0.0, atol=1e-14)
    jit = m.copy()
    ref = m.copy()
    kernels.givens_reduce(jit, 3)
    kernels.py_func(kernels.givens_reduce)(ref, 3)
    assert_allclose(jit, ref, atol=1e-14)


def test_triangulate_dlt_gn_recovers_point():
    rng = np.random.default_rng(27)
    pf = np.array([2.0, 0.5, 7.0])
    rots = np.empty((4, 3, 3))
    trans = np.empty((4, 3))
    uvs = np.empty((4, 2))
    for k in range(4):
        from swfvio.geometry import exp_so3
        r = exp_so3(0.1 * rng.standard_normal(3))
        c = np.array([k * 0.5, 0.1 * k, 0.0])
        rots[k] = r
        trans[k] = -r @ c
        pc = r @ pf + trans[k]
        uvs[k] = pc[:2] / pc[2]
    point, ok = kernels.triangulate_dlt_gn(rots, trans, uvs, 1e-3, 5, 1e8)
    assert ok
    assert_allclose(point, pf, atol=1e-9)
    point2, ok2 = kernels.py_func(kernels.triangulate_dlt_gn)(
        rots, trans, uvs, 1e-3, 5, 1e8)
    assert ok2
    assert_allclose(point2, point, atol=1e-12)


def test_triangulate_dlt_gn_rejects_zero_baseline():
    rots = np.stack([np.eye(3)] * 3)
    trans = np.zeros((3, 3))
    uvs = np.full((3, 2), 0.1)
    _, ok = kernels.triangulate_dlt_gn(rots, trans, uvs, 1e-3, 5, 1e8)
    assert not ok


def test_apply_rank1_is_dense_congruence():
    rng = np.random.default_rng(28)
    n = 45
    p = random_cov(rng, n).p
    alpha = rng.standard_normal(n)
    beta = rng.standard_normal(n)
    work = p.copy()
    kernels.apply_rank1(work, alpha, beta)
    t = np.eye(n) + np.outer(alpha, beta)
    assert_allclose(work, congruence(p, t), atol=1e-12)
    assert_allclose(work, work.T, atol=0)  # exact by construction
    ref = p.copy()
    kernels.py_func(kernels.apply_rank1)(ref, alpha, beta)
    assert_allclose(work, ref, atol=1e-13)


def test_symmetrize_kernel():
    rng = np.random.default_rng(29)
    m = rng.standard_normal((17, 17))
    work = m.copy()
    kernels.symmetrize(work)
    assert_allclose(work, 0.5 * (m + m.T), atol=1e-16)


def test_align_direct_equals_transform_objects():
    """The fused kernel (gram solve + rank-1 congruence in one pass) must
    match make_direct + apply_direct built from the full bases, for a
    spread of window shapes, including the returned scale."""
    rng = np.random.default_rng(30)
    for n_clones, n_feats in [(0, 0), (1, 0), (0, 1), (3, 2), (11, 40)]:
        from helpers import perturb_state
        x_plus = random_state(rng, n_clones, n_feats)
        x_minus = perturb_state(x_plus, rng, 1e-3)
        p = random_cov(rng, x_plus.dim)
        t = alignment.make_direct(observability.build_basis(x_minus),
                                  observability.build_basis(x_plus))
        want = alignment.apply_direct(p, t)
        got = p.copy()
        scale = kernels.align_direct(
            got.p, observability.yaw_column(x_minus),
            observability.yaw_column(x_plus), n_clones, n_feats,
            alignment.SINGULAR_TOL)
        assert_allclose(scale, t.scale, rtol=1e-12)
        assert_allclose(got.p, want.p, rtol=0,
                        atol=1e-12 * np.abs(want.p).max())


def test_align_direct_no_touch_when_singular():
    """A vanishing 1 + beta.alpha must leave P untouched and report the
    near-zero scale instead of dividing by it."""
    rng = np.random.default_rng(31)
    x = random_state(rng, 2, 1)
    p = random_cov(rng, x.dim)
    c3p = observability.yaw_column(x)
    basis = observability.build_basis(x).n
    gram = basis.T @ basis
    beta = np.linalg.solve(gram, basis.T)[3]
    # alpha = c3m - c3p with beta.alpha = -1 makes the transform singular
    c3m = c3p - beta / (beta @ beta)
    before = p.p.copy()
    scale = kernels.align_direct(p.p, c3m, c3p, 2, 1, alignment.SINGULAR_TOL)
    assert abs(scale) < alignment.SINGULAR_TOL
    assert_allclose(p.p, before, atol=0)


def test_indirect_rows_matches_block_reference():
    """indirect_rows against a straightforward slice-matmul version of
    the same four factor applications."""
    rng = np.random.default_rng(32)
    n_clones, n_feats = 4, 3
    x_plus = random_state(rng, n_clones, n_feats)
    from helpers import perturb_state
    x_minus = perturb_state(x_plus, rng, 1e-3)
    t = alignment.make_indirect(x_minus, x_plus)
    dim = x_plus.dim
    m = rng.standard_normal((dim, 6))
    want = m.copy()
    # factor algebra, written with dense slices
    want[0:3] = t.rr @ want[0:3]
    want[3:6] += t.ap @ want[0:3]
    want[6:9] += t.av @ want[0:3]
    base = 15 + 6 * n_clones
    for j in range(n_feats):
        want[base + 3 * j:base + 3 * j + 3] += t.feat_d[j] @ want[0:3]
    for i in range(n_clones):
        at = 15 + 6 * i
        want[at + 3:at + 6] += t.clone_c[i] @ want[at:at + 3]
        want[at:at + 3] = t.clone_m[i] @ want[at:at + 3]
    got = m.copy()
    kernels.indirect_rows(got, t.rr, t.ap, t.av, t.clone_m, t.clone_c,
                          t.feat_d)
    assert_allclose(got, want, atol=1e-13)
    ref = m.copy()
    kernels.py_func(kernels.indirect_rows)(ref, t.rr, t.ap, t.av,
                                           t.clone_m, t.clone_c, t.feat_d)
    assert_allclose(got, ref, atol=1e-14)


def test_indirect_congruence_is_dense_congruence():
    rng = np.random.default_rng(33)
    for n_clones, n_feats in [(2, 0), (0, 2), (5, 7)]:
        from helpers import perturb_state
        x_plus = random_state(rng, n_clones, n_feats)
        x_minus = perturb_state(x_plus, rng, 1e-3)
        t = alignment.make_indirect(x_minus, x_plus)
        p = random_cov(rng, x_plus.dim)
        tinv = t.dense_inverse(x_plus.dim)
        want = congruence(p.p, tinv)
        got = p.copy()
        kernels.indirect_congruence(got.p, t.rr, t.ap, t.av, t.clone_m,
                                    t.clone_c, t.feat_d)
        assert_allclose(got.p, want, rtol=0, atol=1e-13 * np.abs(want).max())
        assert_allclose(got.p, got.p.T, atol=0)

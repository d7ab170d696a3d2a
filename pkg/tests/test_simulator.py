import numpy as np
import pytest
from numpy.testing import assert_allclose

from swfvio.geometry import GRAVITY, skew
from swfvio.propagation import NoiseParams
from swfvio.simulator import (FOV_U, FOV_V, GroundTruth, SimConfig, gen_frame,
                              gen_imu, gen_landmarks, simulate, truth_at)
from swfvio.vision import project
from swfvio.state import ClonePose


def test_config_validation():
    SimConfig().validate()
    with pytest.raises(ValueError):
        SimConfig(imu_hz=200, cam_hz=7).validate()
    with pytest.raises(ValueError):
        SimConfig(imu_hz=0).validate()


def test_truth_derivatives_are_consistent():
    """Finite differences of the closed-form trajectory against the
    closed-form derivatives the IMU synthesis uses."""
    cfg = SimConfig()
    gt = GroundTruth(cfg)
    eps = 1e-6
    for t in [0.3, 7.77, 31.9]:
        rot, pos = gt.pose(t)
        rp, pp = gt.pose(t + eps)
        rm, pm = gt.pose(t - eps)
        assert_allclose((pp - pm) / (2 * eps), gt.vel(t), atol=1e-6)
        # R^T Rdot = [omega_body]x
        rdot = (rp - rm) / (2 * eps)
        assert_allclose(rot.T @ rdot, skew(gt.omega_body(t)), atol=1e-6)
        # specific force: R a_body + g = acceleration
        vdot = (gt.vel(t + eps) - gt.vel(t - eps)) / (2 * eps)
        assert_allclose(rot @ gt.accel_body(t) + GRAVITY, vdot, atol=1e-5)


def test_truth_at_bounds():
    cfg = SimConfig(duration=10.0)
    truth_at(cfg, 0.0)
    truth_at(cfg, 10.0)
    with pytest.raises(ValueError):
        truth_at(cfg, 10.5)


def test_gen_imu_noise_statistics():
    """Realized white-noise std within a few percent of the densities,
    and the bias paths random-walk from the configured constants."""
    cfg = SimConfig(duration=30.0)
    gt = GroundTruth(cfg)
    samples, bg_path, ba_path = gen_imu(cfg, 7)
    n = len(samples)
    assert n == 6000
    ts = np.array([s.stamp for s in samples])
    assert_allclose(np.diff(ts), 1.0 / cfg.imu_hz, atol=1e-12)
    omega = np.array([s.omega_m for s in samples])
    accel = np.array([s.accel_m for s in samples])
    w_noise = omega - gt.omega_body(ts) - bg_path
    a_noise = accel - gt.accel_body(ts) - ba_path
    sq = np.sqrt(1.0 / cfg.imu_hz)
    assert abs(w_noise.std() / (cfg.noise.sigma_g / sq) - 1.0) < 0.05
    assert abs(a_noise.std() / (cfg.noise.sigma_a / sq) - 1.0) < 0.05
    assert_allclose(bg_path[0], cfg.bias_g0)
    assert_allclose(ba_path[0], cfg.bias_a0)
    # random-walk increments scale with sqrt(dt)
    inc = np.diff(bg_path, axis=0)
    assert abs(inc.std() / (cfg.noise.sigma_wg * sq) - 1.0) < 0.05


def test_gen_imu_zero_noise_limit():
    quiet = NoiseParams(sigma_g=1e-300, sigma_a=1e-300,
                        sigma_wg=1e-300, sigma_wa=1e-300)
    cfg = SimConfig(duration=1.0, noise=quiet)
    gt = GroundTruth(cfg)
    samples, bg_path, _ = gen_imu(cfg, 3)
    ts = np.array([s.stamp for s in samples])
    omega = np.array([s.omega_m for s in samples])
    assert_allclose(omega, gt.omega_body(ts) + bg_path, atol=1e-12)


def test_landmarks_sit_in_shell():
    cfg = SimConfig(duration=5.0, n_landmarks=100)
    pts = gen_landmarks(cfg, 11)
    assert pts.shape == (100, 3)
    ts = np.linspace(0.0, cfg.duration, 512)
    lo = GroundTruth(cfg).pose(ts)[1].min(axis=0)
    hi = GroundTruth(cfg).pose(ts)[1].max(axis=0)
    gap = np.maximum(np.maximum(lo - pts, pts - hi), 0.0)
    d = np.linalg.norm(gap, axis=1)
    assert (d >= cfg.range_min).all() and (d <= cfg.range_max).all()


def test_gen_frame_matches_scalar_projection():
    """The batched visibility/projection path against vision.project one
    landmark at a time, noise off."""
    cfg = SimConfig(duration=5.0, n_landmarks=60, sigma_uv=0.0)
    landmarks = gen_landmarks(cfg, 12)
    gt = GroundTruth(cfg)
    rng = np.random.default_rng(0)
    t = 1.7
    obs = gen_frame(cfg, t, landmarks, rng)
    rot, pos = gt.pose(t)
    clone = ClonePose(rot, pos, t)
    seen = dict(obs)
    for j, pf in enumerate(landmarks):
        try:
            uv = project(clone, cfg.extrinsics, pf)
        except Exception:
            assert j not in seen
            continue
        visible = abs(uv[0]) <= FOV_U and abs(uv[1]) <= FOV_V
        assert visible == (j in seen)
        if visible:
            assert_allclose(seen[j], uv, atol=1e-12)


def test_simulate_is_deterministic():
    cfg = SimConfig(duration=2.0, n_landmarks=40)
    a = simulate(cfg, 123)
    b = simulate(cfg, 123)
    assert_allclose(a.landmarks, b.landmarks, atol=0)
    assert len(a.frames) == len(b.frames) == 20
    for (ta, oa), (tb, ob) in zip(a.frames, b.frames):
        assert ta == tb and len(oa) == len(ob)
        for (ja, uva), (jb, uvb) in zip(oa, ob):
            assert ja == jb
            assert_allclose(uva, uvb, atol=0)
    sa = np.array([s.omega_m for s in a.samples])
    sb = np.array([s.omega_m for s in b.samples])
    assert_allclose(sa, sb, atol=0)
    c = simulate(cfg, 124)
    assert not np.allclose(a.landmarks, c.landmarks)


def test_frame_samples_span():
    cfg = SimConfig(duration=2.0, n_landmarks=10)
    data = simulate(cfg, 5)
    assert data.step == 20
    assert data.frame_samples(0) == []
    for k in (1, 7):
        chunk = data.frame_samples(k)
        assert len(chunk) == data.step + 1
        assert_allclose(chunk[0].stamp, (k - 1) / cfg.cam_hz, atol=1e-12)
        assert_allclose(chunk[-1].stamp, k / cfg.cam_hz, atol=1e-12)

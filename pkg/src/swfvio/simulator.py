"""Analytic ground truth, IMU synthesis, landmark field, and camera
frames, all deterministic in (config, seed).

The trajectory is a per-axis position sinusoid plus sinusoidal
roll/pitch/yaw, so every derivative the IMU needs exists in closed form.
Data association is perfect by landmark id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GRAVITY
from .propagation import ImuSample, NoiseParams
from .state import ImuState
from .vision import Z_MIN, Extrinsics, default_extrinsics

# field of view implied by a 720x480 image at focal ~458
FOV_U = 360.0 / 459.0
FOV_V = 240.0 / 457.0


@dataclass
class SimConfig:
    pos_amp: np.ndarray = field(default_factory=lambda: np.array([4.0, 3.0, 2.0]))
    pos_freq: np.ndarray = field(default_factory=lambda: np.array([0.11, 0.08, 0.06]))
    pos_phase: np.ndarray = field(default_factory=lambda: np.array([0.0, np.pi / 2, np.pi / 4]))
    eul_amp: np.ndarray = field(default_factory=lambda: np.array([0.30, 0.25, 0.40]))
    eul_freq: np.ndarray = field(default_factory=lambda: np.array([0.13, 0.10, 0.07]))
    eul_phase: np.ndarray = field(default_factory=lambda: np.array([0.0, np.pi / 3, np.pi / 6]))
    duration: float = 60.0
    imu_hz: int = 200
    cam_hz: int = 10
    noise: NoiseParams = field(default_factory=NoiseParams)
    sigma_uv: float = 2.0 / 458.0
    n_landmarks: int = 450
    range_min: float = 1.0
    range_max: float = 10.0
    bias_g0: float = 2.0e-3    # per-axis initial gyro bias, rad/s
    bias_a0: float = 2.0e-2    # per-axis initial accel bias, m/s^2
    extrinsics: Extrinsics = field(default_factory=default_extrinsics)

    def validate(self) -> None:
        if self.imu_hz <= 0 or self.cam_hz <= 0 or self.imu_hz % self.cam_hz:
            raise ValueError("imu_hz must be a positive multiple of cam_hz")


def _sin_set(amp, freq, phase, t):
    w = 2.0 * np.pi * freq
    arg = np.multiply.outer(t, w) + phase
    return (amp * np.sin(arg),
            amp * w * np.cos(arg),
            -amp * w * w * np.sin(arg))


def _rot_zyx(angles: np.ndarray) -> np.ndarray:
    """Rz(yaw) Ry(pitch) Rx(roll) for angles[..., (roll, pitch, yaw)]."""
    cr, sr = np.cos(angles[..., 0]), np.sin(angles[..., 0])
    cp, sp = np.cos(angles[..., 1]), np.sin(angles[..., 1])
    cy, sy = np.cos(angles[..., 2]), np.sin(angles[..., 2])
    rows = [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


@dataclass
class GroundTruth:
    """Closed-form trajectory accessors; t may be a scalar or an array
    (array input stacks the leading axis)."""

    cfg: SimConfig

    def _angles(self, t):
        return _sin_set(self.cfg.eul_amp, self.cfg.eul_freq, self.cfg.eul_phase, t)

    def pose(self, t) -> tuple[np.ndarray, np.ndarray]:
        angles, _, _ = self._angles(t)
        pos, _, _ = _sin_set(self.cfg.pos_amp, self.cfg.pos_freq,
                             self.cfg.pos_phase, t)
        return _rot_zyx(angles), pos

    def vel(self, t) -> np.ndarray:
        _, v, _ = _sin_set(self.cfg.pos_amp, self.cfg.pos_freq,
                           self.cfg.pos_phase, t)
        return v

    def omega_body(self, t) -> np.ndarray:
        """Body rates from the Euler-angle kinematic map (z-y-x order)."""
        angles, dang, _ = self._angles(t)
        roll, pitch = angles[..., 0], angles[..., 1]
        droll, dpitch, dyaw = dang[..., 0], dang[..., 1], dang[..., 2]
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        return np.stack([
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            -dpitch * sr + dyaw * cp * cr,
        ], axis=-1)

    def accel_body(self, t) -> np.ndarray:
        rot, _ = self.pose(t)
        _, _, acc = _sin_set(self.cfg.pos_amp, self.cfg.pos_freq,
                             self.cfg.pos_phase, t)
        return np.einsum("...j,...ji->...i", acc - GRAVITY, rot)

    def imu_state(self, t: float, bg: np.ndarray | None = None,
                  ba: np.ndarray | None = None) -> ImuState:
        rot, pos = self.pose(t)
        cfg = self.cfg
        return ImuState(
            rot, pos, self.vel(t),
            np.full(3, cfg.bias_g0) if bg is None else bg.copy(),
            np.full(3, cfg.bias_a0) if ba is None else ba.copy())


def truth_at(cfg: SimConfig, t: float):
    """(rot, pos, vel, omega_body, accel_body) at one epoch."""
    if not 0.0 <= t <= cfg.duration:
        raise ValueError(f"t={t} outside [0, {cfg.duration}]")
    gt = GroundTruth(cfg)
    rot, pos = gt.pose(t)
    return rot, pos, gt.vel(t), gt.omega_body(t), gt.accel_body(t)


def gen_imu(cfg: SimConfig, seed) -> tuple[list[ImuSample], np.ndarray, np.ndarray]:
    """Measured IMU stream plus the realized bias trajectories.

    White noise scales with 1/sqrt(dt) from the densities; biases random
    walk from their initial constants with sqrt(dt) steps.
    """
    rng = np.random.default_rng(seed)
    gt = GroundTruth(cfg)
    n = int(round(cfg.duration * cfg.imu_hz))
    dt = 1.0 / cfg.imu_hz
    sq = np.sqrt(dt)
    ts = np.arange(n) * dt
    bg_path = np.full(3, cfg.bias_g0) + np.vstack(
        [np.zeros(3), cfg.noise.sigma_wg * sq
         * np.cumsum(rng.standard_normal((n - 1, 3)), axis=0)])
    ba_path = np.full(3, cfg.bias_a0) + np.vstack(
        [np.zeros(3), cfg.noise.sigma_wa * sq
         * np.cumsum(rng.standard_normal((n - 1, 3)), axis=0)])
    omega = (gt.omega_body(ts) + bg_path
             + cfg.noise.sigma_g / sq * rng.standard_normal((n, 3)))
    accel = (gt.accel_body(ts) + ba_path
             + cfg.noise.sigma_a / sq * rng.standard_normal((n, 3)))
    samples = [ImuSample(omega[i], accel[i], ts[i]) for i in range(n)]
    return samples, bg_path, ba_path


def _bbox(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    ts = np.linspace(0.0, cfg.duration, 512)
    pts = GroundTruth(cfg).pose(ts)[1]
    return pts.min(axis=0), pts.max(axis=0)


def gen_landmarks(cfg: SimConfig, seed) -> np.ndarray:
    """Uniform points in a shell around the trajectory envelope."""
    rng = np.random.default_rng(seed)
    lo, hi = _bbox(cfg)
    out = np.empty((cfg.n_landmarks, 3))
    count = 0
    while count < cfg.n_landmarks:
        q = rng.uniform(lo - cfg.range_max, hi + cfg.range_max)
        gap = np.maximum(np.maximum(lo - q, q - hi), 0.0)
        d = float(np.linalg.norm(gap))
        if cfg.range_min <= d <= cfg.range_max:
            out[count] = q
            count += 1
    return out


def gen_frame(cfg: SimConfig, t: float, landmarks: np.ndarray,
              rng: np.random.Generator) -> list[tuple[int, np.ndarray]]:
    """Noisy normalized observations of every visible landmark."""
    gt = GroundTruth(cfg)
    rot, pos = gt.pose(t)
    r_cam, t_cam = cfg.extrinsics.cam_from_global(rot, pos)
    pc = landmarks @ r_cam.T + t_cam
    z = pc[:, 2]
    front = z > Z_MIN
    uv = np.zeros((landmarks.shape[0], 2))
    uv[front] = pc[front, :2] / z[front, None]
    vis = front & (np.abs(uv[:, 0]) <= FOV_U) & (np.abs(uv[:, 1]) <= FOV_V)
    ids = np.nonzero(vis)[0]
    noisy = uv[ids] + cfg.sigma_uv * rng.standard_normal((len(ids), 2))
    return [(int(j), noisy[i]) for i, j in enumerate(ids)]


@dataclass
class SimData:
    """One realization shared by every strategy in a paired comparison."""

    cfg: SimConfig
    truth: GroundTruth
    samples: list[ImuSample]
    frames: list[tuple[float, list[tuple[int, np.ndarray]]]]
    landmarks: np.ndarray
    bg_path: np.ndarray
    ba_path: np.ndarray

    @property
    def step(self) -> int:
        return self.cfg.imu_hz // self.cfg.cam_hz

    def frame_samples(self, k: int) -> list[ImuSample]:
        """IMU samples spanning frame k-1 to frame k (inclusive ends)."""
        if k == 0:
            return []
        return self.samples[self.step * (k - 1):self.step * k + 1]


def simulate(cfg: SimConfig, seed: int) -> SimData:
    cfg.validate()
    samples, bg_path, ba_path = gen_imu(cfg, [seed, 0])
    landmarks = gen_landmarks(cfg, [seed, 1])
    frame_rng = np.random.default_rng([seed, 2])
    n_frames = int(round(cfg.duration * cfg.cam_hz))
    frames = []
    for k in range(n_frames):
        t = k / cfg.cam_hz
        frames.append((t, gen_frame(cfg, t, landmarks, frame_rng)))
    return SimData(cfg, GroundTruth(cfg), samples, frames, landmarks,
                   bg_path, ba_path)

"""IMU mean integration and covariance propagation between frames.

Mean integration is RK4 at the IMU rate. The error-state transition over
a frame interval is chained per IMU step inside the same kernel pass that
integrates the mean and accumulates the discrete noise; the per-step
factor uses the analytic attitude/position/velocity block (which keeps
the unobservable subspace exactly invariant for any endpoint pair) plus
first-order bias columns. ``state_transition`` assembles the same matrix
from the interval endpoints, with finite-difference bias columns, and
serves as the slow reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import GRAVITY, skew
from .state import IMU_DIM, ErrorCov, ImuState

BIAS_FD_EPS = 1e-6


@dataclass
class ImuSample:
    omega_m: np.ndarray
    accel_m: np.ndarray
    stamp: float


@dataclass
class NoiseParams:
    """Continuous-time noise densities (simulator defaults)."""

    sigma_g: float = 1.7e-4    # gyro white noise, rad/s/sqrt(Hz)
    sigma_a: float = 2.0e-3    # accel white noise, m/s^2/sqrt(Hz)
    sigma_wg: float = 2.0e-5   # gyro bias random walk
    sigma_wa: float = 3.0e-3   # accel bias random walk

    def validate(self) -> None:
        if min(self.sigma_g, self.sigma_a, self.sigma_wg, self.sigma_wa) <= 0:
            raise ValueError("noise densities must be positive")


@dataclass
class PropResult:
    imu_next: ImuState
    phi: np.ndarray   # 15x15
    qd: np.ndarray    # 15x15


def samples_to_arrays(samples: Sequence[ImuSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack a sample list into (gyr, acc, dts) arrays for the kernels."""
    gyr = np.array([s.omega_m for s in samples], dtype=float)
    acc = np.array([s.accel_m for s in samples], dtype=float)
    stamps = np.array([s.stamp for s in samples], dtype=float)
    if not (np.isfinite(gyr).all() and np.isfinite(acc).all() and np.isfinite(stamps).all()):
        raise ValueError("non-finite IMU sample, propagation aborted")
    dts = np.diff(stamps)
    if len(samples) > 1 and dts.min() <= 0:
        raise ValueError("IMU stamps must be strictly increasing")
    return gyr, acc, dts


def integrate_mean(imu: ImuState, samples: Sequence[ImuSample],
                   dt: float | None = None) -> ImuState:
    """RK4-integrate the IMU mean through a sample buffer, biases constant.

    With ``dt`` given, a uniform step overrides the sample stamps.
    """
    if not samples:
        raise ValueError("need at least one IMU sample")
    gyr, acc, dts = samples_to_arrays(samples)
    if dt is not None:
        dts = np.full(len(samples) - 1, float(dt))
    if dts.size == 0:
        return imu.copy()
    rot, pos, vel = kernels.integrate_frame(
        imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts, GRAVITY)
    return ImuState(rot, pos, vel, imu.bg.copy(), imu.ba.copy())


def _analytic_phi9(imu_prev: ImuState, imu_next: ImuState, dt: float) -> np.ndarray:
    phi = np.eye(IMU_DIM)
    r_prev = imu_prev.rot
    dp = r_prev.T @ (imu_next.pos - imu_prev.pos - imu_prev.vel * dt
                     - 0.5 * GRAVITY * dt * dt)
    dv = r_prev.T @ (imu_next.vel - imu_prev.vel - GRAVITY * dt)
    phi[0:3, 0:3] = imu_next.rot.T @ r_prev
    phi[3:6, 0:3] = -r_prev @ skew(dp)
    phi[6:9, 0:3] = -r_prev @ skew(dv)
    phi[3:6, 6:9] = np.eye(3) * dt
    return phi


def state_transition(imu_prev: ImuState, imu_next: ImuState, dt: float,
                     samples: Sequence[ImuSample] | None = None) -> np.ndarray:
    """15x15 error-state transition for one frame interval.

    The theta/p/v block is analytic in the endpoint states. Bias-coupling
    columns come from central differences of the integration map when the
    sample buffer is supplied, and fall back to the first-order small-dt
    expressions otherwise. Either fill multiplies only zero rows of the
    unobservable basis, so the nullspace commutation does not depend on it.
    """
    phi = _analytic_phi9(imu_prev, imu_next, dt)
    if samples is not None and len(samples) > 1:
        gyr, acc, dts = samples_to_arrays(samples)
        # a bias error enters the map the same way a shifted bias estimate
        # does, so these sensitivities are the transition columns directly
        phi[0:9, 9:15] = kernels.bias_fd_columns(
            imu_prev.rot, imu_prev.pos, imu_prev.vel, imu_prev.bg, imu_prev.ba,
            gyr, acc, dts, GRAVITY, BIAS_FD_EPS)
    else:
        r_prev = imu_prev.rot
        phi[0:3, 9:12] = -np.eye(3) * dt
        phi[3:6, 12:15] = -0.5 * r_prev * dt * dt
        phi[6:9, 12:15] = -r_prev * dt
    return phi


def discrete_noise(imu_prev: ImuState, noise: NoiseParams, dt: float) -> np.ndarray:
    """First-order discrete noise Q_d = G diag(sigma^2) G^T dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    g_mat = np.zeros((IMU_DIM, 12))
    g_mat[0:3, 0:3] = -np.eye(3)          # gyro white -> theta
    g_mat[6:9, 3:6] = -imu_prev.rot       # accel white -> velocity
    g_mat[9:12, 6:9] = np.eye(3)          # gyro walk -> bg
    g_mat[12:15, 9:12] = np.eye(3)        # accel walk -> ba
    diag = np.concatenate([
        np.full(3, noise.sigma_g ** 2),
        np.full(3, noise.sigma_a ** 2),
        np.full(3, noise.sigma_wg ** 2),
        np.full(3, noise.sigma_wa ** 2),
    ])
    qd = (g_mat * diag) @ g_mat.T * dt
    return 0.5 * (qd + qd.T)


def propagate_cov(p: ErrorCov, phi15: np.ndarray, qd: np.ndarray) -> ErrorCov:
    """P <- Phi_full P Phi_full^T + Q_full, touching only the IMU band.

    Phi_full is identity over clones and features, so only the first 15
    rows/columns of P change.
    """
    mat = p.p.copy()
    band = phi15 @ mat[:IMU_DIM, :]
    mat[:IMU_DIM, :] = band
    mat[:, :IMU_DIM] = band.T
    mat[:IMU_DIM, :IMU_DIM] = phi15 @ p.p[:IMU_DIM, :IMU_DIM] @ phi15.T + qd
    return ErrorCov(0.5 * (mat + mat.T))


def propagate_frame(imu: ImuState, samples: Sequence[ImuSample],
                    noise: NoiseParams,
                    phi_from: ImuState | None = None) -> PropResult:
    """One frame interval in a single kernel pass.

    Integrates the mean, accumulates the per-step discrete noise into a
    frame-level Q, and builds the frame transition. ``phi_from`` replaces
    the left endpoint of the analytic block (first-estimate Jacobians);
    the mean always integrates from the live estimate.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples to span a frame")
    gyr, acc, dts = samples_to_arrays(samples)
    rot, pos, vel, phi, qd = kernels.integrate_with_qd(
        imu.rot, imu.pos, imu.vel, imu.bg, imu.ba, gyr, acc, dts, GRAVITY,
        noise.sigma_g ** 2, noise.sigma_a ** 2,
        noise.sigma_wg ** 2, noise.sigma_wa ** 2)
    imu_next = ImuState(rot, pos, vel, imu.bg.copy(), imu.ba.copy())
    if phi_from is not None:
        # endpoint pair (first-estimate left, freshly predicted right);
        # bias columns keep the live-buffer chain
        dt = float(dts.sum())
        phi[0:9, 0:9] = _analytic_phi9(phi_from, imu_next, dt)[0:9, 0:9]
    return PropResult(imu_next, phi, qd)

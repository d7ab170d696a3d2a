"""Sliding-window state container and the error-state retraction.

The full state stacks the current IMU state, a window of cloned IMU
poses (oldest first), and the mapped landmark positions. All orientation
errors are locally defined, R = Rhat * Exp(theta); the globally defined
error only exists as a metrics view (``global_orientation_error``).

Error vector layout, fixed across the package:

    [ theta  pos  vel  bg  ba | clone_0 (th, p) ... | feat_0 ... ]
      0:3    3:6  6:9  9:12 12:15  15+6i            15+6n+3j

so N = 15 + 6n + 3m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import exp_so3, log_so3

IMU_DIM = 15
CLONE_DIM = 6
FEAT_DIM = 3


@dataclass
class ImuState:
    rot: np.ndarray          # body-to-global orientation, 3x3
    pos: np.ndarray
    vel: np.ndarray
    bg: np.ndarray
    ba: np.ndarray

    def copy(self) -> "ImuState":
        return ImuState(self.rot.copy(), self.pos.copy(), self.vel.copy(),
                        self.bg.copy(), self.ba.copy())


@dataclass
class ClonePose:
    rot: np.ndarray
    pos: np.ndarray
    stamp: float
    # first-estimate anchors; None when the strategy evaluates Jacobians
    # at the live estimate
    first_rot: np.ndarray | None = None
    first_pos: np.ndarray | None = None

    def copy(self) -> "ClonePose":
        return ClonePose(
            self.rot.copy(), self.pos.copy(), self.stamp,
            None if self.first_rot is None else self.first_rot.copy(),
            None if self.first_pos is None else self.first_pos.copy(),
        )


@dataclass
class FeatureState:
    id: int
    pos: np.ndarray
    first_pos: np.ndarray | None = None

    def copy(self) -> "FeatureState":
        return FeatureState(
            self.id, self.pos.copy(),
            None if self.first_pos is None else self.first_pos.copy(),
        )


@dataclass
class ErrorLayout:
    """Index ranges of each error block for a given window shape."""

    n_clones: int
    n_features: int

    theta = slice(0, 3)
    pos = slice(3, 6)
    vel = slice(6, 9)
    bg = slice(9, 12)
    ba = slice(12, 15)

    @property
    def dim(self) -> int:
        return IMU_DIM + CLONE_DIM * self.n_clones + FEAT_DIM * self.n_features

    @property
    def clone_base(self) -> int:
        return IMU_DIM

    @property
    def feature_base(self) -> int:
        return IMU_DIM + CLONE_DIM * self.n_clones

    def clone(self, i: int) -> slice:
        if not 0 <= i < self.n_clones:
            raise IndexError(f"clone index {i} out of range")
        start = IMU_DIM + CLONE_DIM * i
        return slice(start, start + CLONE_DIM)

    def clone_theta(self, i: int) -> slice:
        s = self.clone(i)
        return slice(s.start, s.start + 3)

    def clone_pos(self, i: int) -> slice:
        s = self.clone(i)
        return slice(s.start + 3, s.start + 6)

    def feature(self, j: int) -> slice:
        if not 0 <= j < self.n_features:
            raise IndexError(f"feature index {j} out of range")
        start = self.feature_base + FEAT_DIM * j
        return slice(start, start + FEAT_DIM)


@dataclass
class SwfState:
    imu: ImuState
    clones: list[ClonePose] = field(default_factory=list)
    features: list[FeatureState] = field(default_factory=list)

    def layout(self) -> ErrorLayout:
        return ErrorLayout(len(self.clones), len(self.features))

    @property
    def dim(self) -> int:
        return self.layout().dim

    def copy(self) -> "SwfState":
        return SwfState(self.imu.copy(),
                        [c.copy() for c in self.clones],
                        [f.copy() for f in self.features])

    def feature_index(self, feat_id: int) -> int:
        for j, f in enumerate(self.features):
            if f.id == feat_id:
                return j
        raise KeyError(f"feature id {feat_id} not in state")


@dataclass
class ErrorCov:
    """Dense covariance aligned with an ErrorLayout."""

    p: np.ndarray

    def symmetrize(self) -> None:
        self.p = 0.5 * (self.p + self.p.T)

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.p + self.p.T))[0])

    def copy(self) -> "ErrorCov":
        return ErrorCov(self.p.copy())


def _check_same_layout(x: SwfState, xhat: SwfState) -> None:
    if len(x.clones) != len(xhat.clones) or len(x.features) != len(xhat.features):
        raise ValueError("state layouts differ (window shapes do not match)")
    for f, fh in zip(x.features, xhat.features):
        if f.id != fh.id:
            raise ValueError("state layouts differ (feature ids do not match)")


def boxplus(x: SwfState, delta: np.ndarray) -> SwfState:
    """Retract an error vector onto the state: R <- R Exp(theta), v <- v + dv."""
    delta = np.asarray(delta, dtype=float)
    lay = x.layout()
    if delta.shape != (lay.dim,):
        raise ValueError(f"error vector has shape {delta.shape}, expected ({lay.dim},)")
    out = x.copy()
    out.imu.rot = x.imu.rot @ exp_so3(delta[lay.theta])
    out.imu.pos = x.imu.pos + delta[lay.pos]
    out.imu.vel = x.imu.vel + delta[lay.vel]
    out.imu.bg = x.imu.bg + delta[lay.bg]
    out.imu.ba = x.imu.ba + delta[lay.ba]
    for i, clone in enumerate(x.clones):
        out.clones[i].rot = clone.rot @ exp_so3(delta[lay.clone_theta(i)])
        out.clones[i].pos = clone.pos + delta[lay.clone_pos(i)]
    for j, feat in enumerate(x.features):
        out.features[j].pos = feat.pos + delta[lay.feature(j)]
    return out


def boxminus(x: SwfState, xhat: SwfState) -> np.ndarray:
    """Error vector delta with x = boxplus(xhat, delta)."""
    _check_same_layout(x, xhat)
    lay = x.layout()
    delta = np.zeros(lay.dim)
    delta[lay.theta] = log_so3(xhat.imu.rot.T @ x.imu.rot)
    delta[lay.pos] = x.imu.pos - xhat.imu.pos
    delta[lay.vel] = x.imu.vel - xhat.imu.vel
    delta[lay.bg] = x.imu.bg - xhat.imu.bg
    delta[lay.ba] = x.imu.ba - xhat.imu.ba
    for i in range(len(x.clones)):
        delta[lay.clone_theta(i)] = log_so3(xhat.clones[i].rot.T @ x.clones[i].rot)
        delta[lay.clone_pos(i)] = x.clones[i].pos - xhat.clones[i].pos
    for j in range(len(x.features)):
        delta[lay.feature(j)] = x.features[j].pos - xhat.features[j].pos
    return delta


def global_orientation_error(x: SwfState, xhat: SwfState) -> np.ndarray:
    """Left (global-frame) orientation error of the current IMU state.

    Its third component is the error about gravity, which is what the
    yaw consistency metric looks at.
    """
    return log_so3(x.imu.rot @ xhat.imu.rot.T)

"""Camera measurement model, Jacobians, triangulation, and the
left-nullspace projection used by the MSCKF update.

Measurements are normalized image coordinates (x/z, y/z); the focal
length is folded into the measurement noise instead of carrying an
intrinsics model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import skew
from .state import ClonePose, ErrorLayout

Z_MIN = 1e-3
MIN_BASELINE = 1e-3
TRI_MAX_COND = 1e8
TRI_GN_ITERS = 5

# default rig: camera optical axis along body x, 5 cm ahead of the IMU
CAM_ROT_IMU = np.array([[0.0, -1.0, 0.0],
                        [0.0, 0.0, -1.0],
                        [1.0, 0.0, 0.0]])
IMU_P_CAM = np.array([0.05, 0.0, 0.0])


class BehindCamera(ValueError):
    """Point at or behind the camera plane (z <= z_min)."""


class TriangulationFailed(RuntimeError):
    """Degenerate geometry: insufficient baseline or ill-conditioned."""


class RankDeficient(RuntimeError):
    """Feature Jacobian block lost rank; the track is unusable."""


@dataclass
class Extrinsics:
    rot: np.ndarray   # C_R_I
    pos: np.ndarray   # C_p_I

    def cam_from_global(self, clone_rot: np.ndarray,
                        clone_pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(R, t) with p_cam = R p_global + t for one clone pose."""
        r = self.rot @ clone_rot.T
        return r, self.pos - r @ clone_pos


def default_extrinsics() -> Extrinsics:
    return Extrinsics(CAM_ROT_IMU.copy(), -CAM_ROT_IMU @ IMU_P_CAM)


@dataclass
class Obs:
    clone_index: int
    uv: np.ndarray
    sigma_px: float


@dataclass
class StackedJac:
    hx: np.ndarray      # (rows, N)
    hf: np.ndarray      # (rows, 3)
    resid: np.ndarray   # (rows,)
    rdiag: np.ndarray   # (rows,) noise variances

    @property
    def rows(self) -> int:
        return self.hx.shape[0]


@dataclass
class LinPoint:
    """Linearization states for one observation (Jacobians only; the
    residual is always evaluated at the live estimate)."""

    rot: np.ndarray
    pos: np.ndarray
    pf: np.ndarray


def project(clone: ClonePose, ext: Extrinsics, pf: np.ndarray) -> np.ndarray:
    """Normalized projection of a global point into one clone's camera."""
    pc = ext.rot @ clone.rot.T @ (pf - clone.pos) + ext.pos
    if pc[2] <= Z_MIN:
        raise BehindCamera(f"depth {pc[2]:.3g} below {Z_MIN}")
    return pc[:2] / pc[2]


def jacobians(clone: ClonePose, ext: Extrinsics, pf: np.ndarray,
              layout: ErrorLayout, clone_index: int,
              lin: LinPoint | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Measurement Jacobian rows for one observation.

    Returns (hx, hf): hx is 2xN with the clone theta/pos columns filled,
    hf the 2x3 feature-position block (the caller drops it into the
    feature's columns when the feature lives in the state). ``lin``
    overrides the states the Jacobian chain is evaluated at.
    """
    if lin is None:
        lin = LinPoint(clone.rot, clone.pos, pf)
    pc = ext.rot @ lin.rot.T @ (lin.pf - lin.pos) + ext.pos
    if pc[2] <= Z_MIN:
        raise BehindCamera("evaluation point behind camera, observation dropped")
    iz = 1.0 / pc[2]
    dproj = np.array([[iz, 0.0, -pc[0] * iz * iz],
                      [0.0, iz, -pc[1] * iz * iz]])
    front = dproj @ ext.rot
    hf = front @ lin.rot.T
    htheta = front @ skew(lin.rot.T @ (lin.pf - lin.pos))
    hx = np.zeros((2, layout.dim))
    hx[:, layout.clone_theta(clone_index)] = htheta
    hx[:, layout.clone_pos(clone_index)] = -hf
    return hx, hf


def triangulate(clones: list[ClonePose], ext: Extrinsics,
                obs: list[Obs]) -> np.ndarray:
    """Intersect the observation rays: DLT plus short Gauss-Newton.

    Raises TriangulationFailed on insufficient baseline, bad
    conditioning, or a point that lands behind any camera.
    """
    if len(obs) < 2:
        raise TriangulationFailed("need at least two observations")
    rots = np.empty((len(obs), 3, 3))
    trans = np.empty((len(obs), 3))
    centers = np.empty((len(obs), 3))
    uvs = np.empty((len(obs), 2))
    for k, ob in enumerate(obs):
        clone = clones[ob.clone_index]
        rots[k], trans[k] = ext.cam_from_global(clone.rot, clone.pos)
        centers[k] = -rots[k].T @ trans[k]
        uvs[k] = ob.uv
    baseline = 0.0
    for k in range(1, len(obs)):
        baseline = max(baseline, float(np.linalg.norm(centers[k] - centers[0])))
    if baseline <= MIN_BASELINE:
        raise TriangulationFailed(f"baseline {baseline:.3g} m too small")
    point, ok = kernels.triangulate_dlt_gn(
        rots, trans, uvs, Z_MIN, TRI_GN_ITERS, TRI_MAX_COND)
    if not ok:
        raise TriangulationFailed("degenerate or behind-camera solution")
    return point


def _reduced(j: StackedJac) -> np.ndarray:
    """Givens-reduce the packed [hf | hx | resid] stack of one feature."""
    if j.rows <= 3:
        raise RankDeficient("need more than 3 rows to project out the feature")
    if not np.allclose(j.rdiag, j.rdiag[0]):
        raise ValueError("nullspace projection requires uniform noise per feature")
    n = j.hx.shape[1]
    m = np.empty((j.rows, 3 + n + 1))
    m[:, :3] = j.hf
    m[:, 3:3 + n] = j.hx
    m[:, 3 + n] = j.resid
    kernels.givens_reduce(m, 3)
    scale = max(abs(m[0, 0]), abs(m[1, 1]), abs(m[2, 2]), 1e-300)
    if min(abs(m[0, 0]), abs(m[1, 1]), abs(m[2, 2])) < 1e-10 * scale:
        raise RankDeficient("feature block rank below 3")
    return m


def nullspace_project(j: StackedJac) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate the feature block out of a stacked track system.

    Returns (hx2, resid2, rdiag2) spanning the 2n-3 rows orthogonal to
    the feature columns; the rotation is orthogonal so the isotropic
    noise is unchanged.
    """
    m = _reduced(j)
    n = j.hx.shape[1]
    return m[3:, 3:3 + n].copy(), m[3:, 3 + n].copy(), j.rdiag[3:].copy()


def split_subsystems(j: StackedJac) -> tuple[StackedJac, StackedJac]:
    """Split a track system into the feature-carrying top 3 rows and the
    feature-free remainder, sharing one Givens factorization."""
    m = _reduced(j)
    n = j.hx.shape[1]
    sub1 = StackedJac(hx=m[:3, 3:3 + n].copy(), hf=m[:3, :3].copy(),
                      resid=m[:3, 3 + n].copy(), rdiag=j.rdiag[:3].copy())
    sub2 = StackedJac(hx=m[3:, 3:3 + n].copy(), hf=np.zeros((j.rows - 3, 3)),
                      resid=m[3:, 3 + n].copy(), rdiag=j.rdiag[3:].copy())
    return sub1, sub2

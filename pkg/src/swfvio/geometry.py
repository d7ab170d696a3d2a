"""Minimal SO(3) algebra shared by every module in the package.

Rotations are plain 3x3 numpy arrays (body-to-global, right-handed). The
filter keeps orientations as matrices throughout, so the only manifold
machinery needed is Exp/Log, the skew operator and re-orthonormalization.
"""

from __future__ import annotations

import numpy as np

# Global-frame gravity. z is up, so gravity points down.
GRAVITY = np.array([0.0, 0.0, -9.81])

# Below this angle both Exp and Log switch to their Taylor branches.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of skew for (already) antisymmetric input."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map, Taylor branch below SMALL_ANGLE."""
    theta = np.asarray(theta, dtype=float)
    angle2 = float(theta @ theta)
    k = skew(theta)
    if angle2 < SMALL_ANGLE * SMALL_ANGLE:
        # second-order series in the angle; exact enough at < 1e-8 rad
        a = 1.0 - angle2 / 6.0
        b = 0.5 - angle2 / 24.0
    else:
        angle = np.sqrt(angle2)
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle2
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Principal rotation-vector logarithm, ||result|| <= pi.

    Uses the antisymmetric part away from the branch ends, a series near
    the identity, and the diagonal-based axis extraction near pi where
    the antisymmetric part cancels.
    """
    cos_angle = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    w = vee(rot - rot.T) * 0.5  # = sin(angle) * axis

    if angle < SMALL_ANGLE:
        # Log(R) ~ vee(R - R^T)/2 * (1 + angle^2/6)
        return w * (1.0 + angle * angle / 6.0)

    if np.pi - angle < 1e-6:
        # Near pi: axis from the dominant diagonal of (R + I)/2.
        diag = np.clip((np.diag(rot) + 1.0) * 0.5, 0.0, None)
        i = int(np.argmax(diag))
        axis = np.empty(3)
        axis[i] = np.sqrt(diag[i])
        for j in range(3):
            if j != i:
                axis[j] = (rot[i, j] + rot[j, i]) * 0.25 / axis[i]
        axis /= np.linalg.norm(axis)
        # keep continuity with the sin branch when sin(angle) != 0
        if axis @ w < 0.0:
            axis = -axis
        return angle * axis

    return angle / np.sin(angle) * w


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar projection)."""
    u, _, vt = np.linalg.svd(rot)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def is_rotation(rot: np.ndarray, tol: float = 1e-10) -> bool:
    """Orthonormality and det=+1 check used by the state invariants."""
    return (
        np.allclose(rot.T @ rot, np.eye(3), atol=tol)
        and abs(np.linalg.det(rot) - 1.0) < tol
    )


def rot_z(angle: float) -> np.ndarray:
    """Rotation by `angle` about the global z axis."""
    return exp_so3(np.array([0.0, 0.0, angle]))

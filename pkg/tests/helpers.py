"""Shared builders for the test suite: random window states, SPD
covariances, and dense reference operations the sparse code is checked
against."""

import numpy as np

from swfvio.geometry import exp_so3
from swfvio.state import ClonePose, ErrorCov, FeatureState, ImuState, SwfState


def random_rot(rng):
    return exp_so3(rng.uniform(-0.5 * np.pi, 0.5 * np.pi, 3))


def random_imu(rng):
    return ImuState(random_rot(rng),
                    2.0 * rng.standard_normal(3),
                    rng.standard_normal(3),
                    1e-3 * rng.standard_normal(3),
                    1e-2 * rng.standard_normal(3))


def random_state(rng, n_clones=0, n_features=0):
    clones = [ClonePose(random_rot(rng), 2.0 * rng.standard_normal(3), 0.1 * i)
              for i in range(n_clones)]
    feats = [FeatureState(j, 3.0 * rng.standard_normal(3))
             for j in range(n_features)]
    return SwfState(random_imu(rng), clones, feats)


def random_cov(rng, dim, scale=1e-2):
    a = rng.standard_normal((dim, dim))
    return ErrorCov(scale * (a @ a.T) / dim + 1e-4 * scale * np.eye(dim))


def congruence(p_mat, t_mat):
    return t_mat @ p_mat @ t_mat.T


def perturb_state(x, rng, scale=1e-2):
    """x boxplus a small random error, for before/after state pairs."""
    from swfvio.state import boxplus
    return boxplus(x, scale * rng.standard_normal(x.dim))

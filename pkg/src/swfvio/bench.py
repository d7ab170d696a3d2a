"""Timing harness: JIT vs pure-numpy kernel paths, covariance-transform
scaling, and the end-to-end cost of alignment.

Invoked as `swfvio bench`. The numbers here back two claims: the
alignment transforms cost O(N^2) (doubling N roughly quadruples their
time), and enabling alignment adds a small fraction to a full filter
run at the default window caps.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import alignment, kernels
from .geometry import exp_so3
from .state import ErrorCov

# layout-valid sizes (15 + 6n + 3m) one doubling apart
N_SMALL = 99      # n=10 clones, m=8 features
N_BIG = 198       # n=20 clones, m=21 features
SHAPES = {N_SMALL: (10, 8), N_BIG: (20, 21)}


def _best_of(fn, repeat: int, inner: int = 1) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def _random_spd(n: int, rng) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def kernel_speedups(repeat: int = 5) -> dict[str, float]:
    """Wall-time ratio interpreted/compiled per hot kernel (1.0 when the
    pure-numpy path is active and there is nothing to compare)."""
    rng = np.random.default_rng(7)
    rot = np.eye(3)
    pos = np.zeros(3)
    vel = np.array([0.5, 0.0, 0.0])
    bg = np.full(3, 1e-3)
    ba = np.full(3, 1e-2)
    gyr = 0.01 * rng.standard_normal((21, 3))
    acc = np.tile([0.0, 0.0, 9.81], (21, 1)) + 0.1 * rng.standard_normal((21, 3))
    dts = np.full(20, 0.005)
    grav = np.array([0.0, 0.0, -9.81])
    p = _random_spd(141, rng)
    h = rng.standard_normal((50, 141))
    r = rng.standard_normal(50)

    cases = {
        "integrate_with_qd": lambda f: f(rot, pos, vel, bg, ba, gyr, acc,
                                         dts, grav, 1e-8, 1e-6, 1e-10, 1e-6),
        "joseph_update": lambda f: f(p, h, r, 1e-5),
        "givens_reduce": lambda f: f(rng.standard_normal((22, 80)), 3),
    }
    out = {}
    for name, call in cases.items():
        jit_fn = getattr(kernels, name)
        py_fn = kernels.py_func(jit_fn)
        call(jit_fn)  # warm the compile cache
        t_jit = _best_of(lambda: call(jit_fn), repeat, inner=20)
        if py_fn is jit_fn:
            out[name] = 1.0
            continue
        t_py = _best_of(lambda: call(py_fn), repeat, inner=5)
        out[name] = t_py / t_jit
    return out


def _random_indirect(n_clones: int, n_feats: int,
                     rng) -> alignment.IndirectTransform:
    rot = lambda: exp_so3(1e-3 * rng.standard_normal(3))
    shear = lambda: 1e-3 * rng.standard_normal((3, 3))
    return alignment.IndirectTransform(
        rr=rot(), ap=shear(), av=shear(),
        clone_m=np.stack([rot() for _ in range(n_clones)]),
        clone_c=np.stack([shear() for _ in range(n_clones)]),
        feat_d=np.stack([shear() for _ in range(n_feats)]))


def transform_scaling(repeat: int = 7) -> dict[str, tuple[float, float, float]]:
    """{direct|indirect: (time at N, time at 2N, ratio)} for the
    covariance-transform applies."""
    rng = np.random.default_rng(11)
    out = {}
    for name in ("direct", "indirect"):
        times = []
        for n in (N_SMALL, N_BIG):
            p = ErrorCov(_random_spd(n, rng))
            if name == "direct":
                t = alignment.DirectTransform(rng.standard_normal(n) * 1e-3,
                                              rng.standard_normal(n) * 1e-3)
                apply = lambda: alignment.apply_direct(p, t)
            else:
                t = _random_indirect(*SHAPES[n], rng)
                apply = lambda: alignment.apply_indirect(p, t)
            apply()  # warm
            times.append(_best_of(apply, repeat, inner=50))
        out[name] = (times[0], times[1], times[1] / times[0])
    return out


def alignment_overhead(duration: float = 10.0, seed: int = 5,
                       repeat: int = 7, strategy: str = "usa-dt") -> float:
    """Fractional per-frame wall-time increase of a hybrid run when the
    alignment hook is enabled, at the default window caps.

    `strategy` picks which aligned variant is timed against the plain
    filter. Only the frame-processing loop is timed (one shared
    simulated dataset, no metrics). Runs alternate between the two
    strategies and each takes its best of `repeat`, which is what
    survives scheduler noise on a busy machine.
    """
    from .filter import (FilterConfig, SlidingWindowFilter, Strategy,
                         initial_estimate)
    from .simulator import SimConfig, simulate

    sim_cfg = SimConfig(duration=duration)
    data = simulate(sim_cfg, seed)
    base = FilterConfig(noise=sim_cfg.noise)
    aligned = Strategy(strategy)

    def run_once(strat) -> float:
        cfg = dataclasses.replace(base, strategy=strat)
        est = initial_estimate(data.truth.imu_state(0.0), cfg,
                               np.random.default_rng([seed, 3]))
        swf = SlidingWindowFilter(cfg, est)
        t0 = time.perf_counter()
        for k, (stamp, obs) in enumerate(data.frames):
            swf.process_frame(stamp, obs, data.frame_samples(k))
        return time.perf_counter() - t0

    best = {}
    for strat in (Strategy.STD, aligned):
        run_once(strat)  # warm
        best[strat] = np.inf
    for _ in range(repeat):
        for strat in (Strategy.STD, aligned):
            best[strat] = min(best[strat], run_once(strat))
    return (best[aligned] - best[Strategy.STD]) / best[Strategy.STD]


def add_args(parser) -> None:
    parser.add_argument("--which", default="all",
                        choices=["kernels", "transform", "overhead", "all"])
    parser.add_argument("--repeat", type=int, default=5)


def run(args) -> int:
    which = args.which
    if which in ("kernels", "all"):
        path = "jit" if kernels.JIT_ENABLED else "pure-numpy"
        print(f"kernel path: {path}")
        for name, ratio in kernel_speedups(args.repeat).items():
            print(f"  {name:<18s} interpreted/compiled = {ratio:6.1f}x")
    if which in ("transform", "all"):
        for name, (t1, t2, ratio) in transform_scaling(args.repeat).items():
            print(f"apply_{name}: N={N_SMALL}: {t1 * 1e6:8.1f} us  "
                  f"N={N_BIG}: {t2 * 1e6:8.1f} us  ratio={ratio:.2f}")
    if which in ("overhead", "all"):
        for strat in ("usa-dt", "usa-it"):
            frac = alignment_overhead(strategy=strat)
            print(f"alignment overhead ({strat}, hybrid, default caps): "
                  f"{100 * frac:.1f}%")
    return 0

"""Compare the numba kernels against their pure-numpy bodies.

Two views are reported:

* per-kernel call cost, jitted vs ``py_func`` in the same process;
* a closed-loop run in a child process with ``DOBKIT_JIT=1`` and ``DOBKIT_JIT=0``.

Usage::

    python3 benchmarks/bench_kernels.py [--reps 2000] [--horizon 1000]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dobkit import JIT_ENABLED, dynamics, observers


def _cases():
    rng = np.random.default_rng(0)
    prm = dynamics.TwoLinkParams().packed()
    x = rng.normal(size=6)
    tau = rng.normal(size=2)
    A = rng.normal(size=(3, 3))
    P = A @ A.T + np.eye(3)
    F = np.eye(3) + 0.01 * rng.normal(size=(3, 3))
    Q, R = np.diag([0.25, 1e-6, 1e-6]), np.array([[1e-4]])
    H = np.array([[0.0, 0.0, 1.0]])
    HT = np.ascontiguousarray(H.T)
    xp, y = rng.normal(size=3), rng.normal(size=1)
    sp, sr = np.array([1.5, np.inf, np.inf]), np.array([np.inf])
    X, Ps = rng.normal(size=(2, 3)), np.stack([P, 2 * P])
    mu, T = np.array([0.3, 0.7]), np.array([[0.95, 0.05], [0.3, 0.7]])
    return [
        ("exo_f", dynamics._exo_f, (x, tau, 1e-3, prm)),
        ("exo_jac", dynamics._exo_jac, (x, tau, 1e-3, prm)),
        ("ekf_cycle", observers._ekf_cycle, (xp, F, P, Q, H, HT, R, y)),
        ("mkc_cycle", observers._mkc_cycle, (xp, F, P, Q, H, HT, R, y, sp, sr, 1e-6, 20, 1e-12)),
        ("imm_mix", observers._imm_mix, (X, Ps, mu, T)),
    ]


_LOOP = """
import time
from dataclasses import replace
from dobkit.simlab import preset_scenario, run_closed_loop
for obs in ({{"type": "ekf"}}, {{"type": "imm"}}, {{"type": "mkc"}}):
    scn = replace(preset_scenario("friction-1dof"), horizon={h}).with_observer(obs)
    run_closed_loop(scn, 0)
    t = time.perf_counter()
    run_closed_loop(scn, 1)
    print(obs["type"], time.perf_counter() - t)
"""


def _closed_loop(flag, horizon):
    env = dict(os.environ, DOBKIT_JIT=flag)
    out = subprocess.run([sys.executable, "-c", _LOOP.format(h=horizon)], env=env,
                         capture_output=True, text=True, check=True).stdout
    return {k: float(v) for k, v in (line.split() for line in out.splitlines())}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--horizon", type=int, default=1000)
    a = ap.parse_args(argv)
    if not JIT_ENABLED:
        sys.exit("numba is disabled; unset DOBKIT_JIT to benchmark")

    print(f"{'kernel':<12}{'jit us':>10}{'numpy us':>12}{'speedup':>10}")
    for name, fn, args in _cases():
        fn(*args)  # compile outside the timer
        tj = min(timeit.repeat(lambda: fn(*args), number=a.reps, repeat=3)) / a.reps
        tp = min(timeit.repeat(lambda: fn.py_func(*args), number=a.reps // 10, repeat=3)) / (a.reps // 10)
        print(f"{name:<12}{tj * 1e6:>10.2f}{tp * 1e6:>12.2f}{tp / tj:>10.1f}")

    jit, py = _closed_loop("1", a.horizon), _closed_loop("0", a.horizon)
    print(f"\nclosed loop, friction-1dof, {a.horizon} steps")
    print(f"{'observer':<12}{'jit s':>10}{'numpy s':>12}{'speedup':>10}")
    for k in jit:
        print(f"{k:<12}{jit[k]:>10.3f}{py[k]:>12.3f}{py[k] / jit[k]:>10.1f}")


if __name__ == "__main__":
    main()

"""Plant models: two-link exoskeleton leg, 1-DOF manipulator, joint friction.

State layouts follow the observers that consume them:

* 1-DOF manipulator: ``x = [d, thetadot, theta]``, angle-only measurement.
* two-link leg: ``x = [d1, d2, theta1, theta2, thetadot1, thetadot2]``,
  angle and rate measured.

Both discrete maps are explicit Euler steps with the disturbance block held
constant.  Raw kernels live at module level (``_onedof_f`` and friends) and take
packed ``float64`` parameter vectors so numba can compile them; the public
functions wrap them with validation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from ._jit import kernel
from .errors import ConfigError, NonFinite, SingularMass

MASS_COND_CAP = 1e8


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class TwoLinkParams:
    """Mapped inertial parameters of a two-link leg.

    ``X1, Y1, X2, Y2`` are first moments (kg m), ``J1, J2`` lumped inertias
    (kg m^2), ``l1`` the thigh length (m) and ``g`` gravity (m/s^2).
    """

    X1: float = 3.746
    Y1: float = 0.01
    J1: float = 1.671
    X2: float = 0.592
    Y2: float = 0.01
    J2: float = 0.549
    l1: float = 0.40
    g: float = 9.81

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("TwoLinkParams entries must be finite")
        if self.J1 <= 0 or self.J2 <= 0 or self.l1 <= 0 or self.g <= 0:
            raise ConfigError("TwoLinkParams requires J1, J2, l1, g > 0")

    def packed(self) -> np.ndarray:
        return np.array(
            [self.X1, self.Y1, self.J1, self.X2, self.Y2, self.J2, self.l1, self.g],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class StribeckParams:
    """Coulomb-viscous-Stribeck friction coefficients for one joint."""

    tau_c: float
    tau_s: float
    thetadot_s: float
    eta_v: float

    def __post_init__(self):
        if self.tau_c < 0 or self.tau_s < 0 or self.eta_v < 0:
            raise ConfigError("Stribeck torques and viscous coefficient must be >= 0")
        if not self.thetadot_s > 0:
            raise ConfigError("Stribeck rate thetadot_s must be > 0")


@dataclass(frozen=True)
class OneDofParams:
    """Rigid 1-DOF manipulator with a torsional spring and viscous damper."""

    I: float = 0.1
    m: float = 0.1
    k: float = 0.1
    b: float = 1.0
    l: float = 0.2
    g: float = 9.81

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("OneDofParams entries must be finite")
        if self.I <= 0:
            raise ConfigError("OneDofParams requires I > 0")

    def packed(self) -> np.ndarray:
        return np.array([self.I, self.m, self.k, self.b, self.l, self.g], dtype=np.float64)


# Identified left-leg values; l1 is not part of the identified set.
PRESETS = {
    "exo-left-leg": {
        "two_link": TwoLinkParams(),
        "friction": (
            StribeckParams(tau_c=9.964, tau_s=6.141, thetadot_s=19.311, eta_v=3.967),  # hip
            StribeckParams(tau_c=2.582, tau_s=6.216, thetadot_s=2.886, eta_v=6.495),  # knee
        ),
    },
}


def load_params(source: str | Path | dict) -> dict:
    """Load plant parameters from a preset name, a JSON file, or a mapping.

    A mapping may hold ``preset`` plus overrides under ``two_link``,
    ``one_dof`` and ``friction`` (a list of per-joint dicts).
    """
    if isinstance(source, str) and source in PRESETS:
        return dict(PRESETS[source])
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"parameter file not found: {path}")
        try:
            source = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(source, dict):
        raise ConfigError("parameters must be a preset name, path, or mapping")
    out = dict(PRESETS[source["preset"]]) if "preset" in source else {}
    try:
        if "two_link" in source:
            out["two_link"] = TwoLinkParams(**source["two_link"])
        if "one_dof" in source:
            out["one_dof"] = OneDofParams(**source["one_dof"])
        if "friction" in source:
            out["friction"] = tuple(StribeckParams(**f) for f in source["friction"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return out


def params_to_dict(params: dict) -> dict:
    out = {}
    for key, val in params.items():
        if isinstance(val, tuple):
            out[key] = [asdict(v) for v in val]
        else:
            out[key] = asdict(val)
    return out


# ---------------------------------------------------------------------------
# raw kernels


@kernel
def _two_link_terms(th1, th2, dth1, dth2, prm):
    X1, Y1, J1, X2, Y2, J2, l1, g = prm[0], prm[1], prm[2], prm[3], prm[4], prm[5], prm[6], prm[7]
    s1, c1 = np.sin(th1), np.cos(th1)
    s2, c2 = np.sin(th2), np.cos(th2)
    s12, c12 = np.sin(th1 + th2), np.cos(th1 + th2)
    a = X2 * c2 - Y2 * s2
    h = l1 * (X2 * s2 + Y2 * c2)
    M = np.empty((2, 2))
    M[0, 0] = J1 + 2.0 * l1 * a
    M[0, 1] = J2 + l1 * a
    M[1, 0] = M[0, 1]
    M[1, 1] = J2
    # Christoffel factorization: same C @ thetadot as the expanded Lagrangian,
    # and Mdot - 2C is skew-symmetric.
    C = np.empty((2, 2))
    C[0, 0] = -h * dth2
    C[0, 1] = -h * (dth1 + dth2)
    C[1, 0] = h * dth1
    C[1, 1] = 0.0
    G = np.empty(2)
    G[0] = g * (X1 * s1 + Y1 * c1 + X2 * s12 + Y2 * c12)
    G[1] = g * (X2 * s12 + Y2 * c12)
    return M, C, G


@kernel
def _mass_cond(M):
    # 2x2 SPD condition number from the closed-form eigenvalues
    tr = M[0, 0] + M[1, 1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    disc = np.sqrt(max(0.25 * tr * tr - det, 0.0))
    lmax = 0.5 * tr + disc
    lmin = 0.5 * tr - disc
    if lmin <= 0.0:
        return np.inf
    return lmax / lmin


@kernel
def _two_link_accel(th1, th2, dth1, dth2, t1, t2, prm):
    M, C, G = _two_link_terms(th1, th2, dth1, dth2, prm)
    rhs = np.empty(2)
    rhs[0] = t1 - C[0, 0] * dth1 - C[0, 1] * dth2 - G[0]
    rhs[1] = t2 - C[1, 0] * dth1 - C[1, 1] * dth2 - G[1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    acc = np.empty(2)
    if det == 0.0:
        # callers see cond = inf and raise; keep the kernel free of ZeroDivisionError
        acc[0] = np.nan
        acc[1] = np.nan
        return acc, np.inf
    acc[0] = (M[1, 1] * rhs[0] - M[0, 1] * rhs[1]) / det
    acc[1] = (M[0, 0] * rhs[1] - M[1, 0] * rhs[0]) / det
    return acc, _mass_cond(M)


@kernel
def _exo_f(x, tau, dt, prm):
    acc, _ = _two_link_accel(x[2], x[3], x[4], x[5], tau[0] + x[0], tau[1] + x[1], prm)
    out = x.copy()
    out[2] = x[2] + dt * x[4]
    out[3] = x[3] + dt * x[5]
    out[4] = x[4] + dt * acc[0]
    out[5] = x[5] + dt * acc[1]
    return out


@kernel
def _onedof_f(x, u, dt, prm):
    I, m, k, b, g = prm[0], prm[1], prm[2], prm[3], prm[5]
    out = np.empty(3)
    out[0] = x[0]
    out[1] = (dt / I) * (u + x[0] + ((I - b * dt) / dt) * x[1] - k * x[2] - m * g * np.sin(x[2]))
    out[2] = x[1] * dt + x[2]
    return out


@kernel
def _jac_steps(x):
    h = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        h[i] = 1e-6 * max(1.0, abs(x[i]))
    return h


@kernel
def _onedof_jac(x, u, dt, prm):
    n = x.shape[0]
    h = _jac_steps(x)
    F = np.empty((n, n))
    for j in range(n):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        col = (_onedof_f(xp, u, dt, prm) - _onedof_f(xm, u, dt, prm)) / (2.0 * h[j])
        F[:, j] = col
    return F


@kernel
def _exo_jac(x, tau, dt, prm):
    n = x.shape[0]
    h = _jac_steps(x)
    F = np.empty((n, n))
    for j in range(n):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        F[:, j] = (_exo_f(xp, tau, dt, prm) - _exo_f(xm, tau, dt, prm)) / (2.0 * h[j])
    return F


# ---------------------------------------------------------------------------
# public operations


def _vec2(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(2)


def two_link_terms(theta, thetadot, p: TwoLinkParams):
    """Return ``(M, C, G)`` of the two-link leg at ``(theta, thetadot)``."""
    th = _vec2(theta)
    dth = _vec2(thetadot)
    return _two_link_terms(th[0], th[1], dth[0], dth[1], p.packed())


def coriolis_expanded(theta, thetadot, p: TwoLinkParams) -> np.ndarray:
    """Coriolis matrix as read off the expanded Lagrange equations.

    Gives the same ``C @ thetadot`` as :func:`two_link_terms` but is not the
    Christoffel factorization, so ``Mdot - 2C`` is not skew-symmetric with it.
    """
    th = _vec2(theta)
    dth = _vec2(thetadot)
    h = p.l1 * (p.X2 * math.sin(th[1]) + p.Y2 * math.cos(th[1]))
    return np.array([[-2.0 * h * dth[1], -h * dth[1]], [h * dth[0], 0.0]])


def stribeck_friction(thetadot: float, p: StribeckParams) -> float:
    """Coulomb-viscous-Stribeck friction torque, odd in ``thetadot``."""
    if thetadot == 0.0:
        return 0.0
    sgn = 1.0 if thetadot > 0 else -1.0
    mag = p.tau_c + (p.tau_s - p.tau_c) * math.exp(-abs(thetadot) / p.thetadot_s)
    return mag * sgn + p.eta_v * thetadot


def forward_dynamics(theta, thetadot, tau, d, p: TwoLinkParams, cond_cap: float = MASS_COND_CAP):
    """Joint accelerations ``M^-1 (tau + d - C thetadot - G)``."""
    th = _vec2(theta)
    dth = _vec2(thetadot)
    t = _vec2(tau) + _vec2(d)
    acc, cond = _two_link_accel(th[0], th[1], dth[0], dth[1], t[0], t[1], p.packed())
    if not cond <= cond_cap:
        raise SingularMass(f"mass matrix condition number {cond:.3g} exceeds {cond_cap:.3g}")
    return acc


def one_dof_transition(x, u: float, dt: float, p: OneDofParams) -> np.ndarray:
    """Discrete 1-DOF map on ``x = [d, thetadot, theta]``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return _onedof_f(np.asarray(x, dtype=np.float64), float(u), float(dt), p.packed())


def exo_transition(x, tau, dt: float, p: TwoLinkParams, cond_cap: float = MASS_COND_CAP):
    """Euler step of the augmented two-link state ``[d, theta, thetadot]``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    M, _, _ = _two_link_terms(x[2], x[3], x[4], x[5], p.packed())
    cond = _mass_cond(M)
    if not cond <= cond_cap:
        raise SingularMass(f"mass matrix condition number {cond:.3g} exceeds {cond_cap:.3g}")
    return _exo_f(x, _vec2(tau), float(dt), p.packed())


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h=None) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``.

    ``h`` may be a scalar or per-coordinate vector; by default
    ``1e-6 * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=np.float64)
    steps = _jac_steps(x) if h is None else np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    f0 = np.asarray(f(x), dtype=np.float64)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        fp = np.asarray(f(x + e), dtype=np.float64)
        fm = np.asarray(f(x - e), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFinite(f"non-finite probe along coordinate {j}")
        J[:, j] = (fp - fm) / (2.0 * steps[j])
    return J


# ---------------------------------------------------------------------------
# plant models consumed by the observers


class OneDofPlant:
    """1-DOF manipulator in observer form, ``x = [d, thetadot, theta]``."""

    n = 3
    n_dist = 1
    n_joints = 1

    def __init__(self, params: OneDofParams = OneDofParams(), dt: float = 0.01):
        if not dt > 0:
            raise ConfigError("dt must be positive")
        self.params = params
        self.dt = float(dt)
        self._prm = params.packed()
        self.H = np.array([[0.0, 0.0, 1.0]])
        self.HT = np.ascontiguousarray(self.H.T)

    def transition(self, x, u):
        return _onedof_f(x, float(np.ravel(u)[0]) if np.ndim(u) else float(u), self.dt, self._prm)

    def jacobian(self, x, u):
        return _onedof_jac(x, float(np.ravel(u)[0]) if np.ndim(u) else float(u), self.dt, self._prm)

    def analytic_jacobian(self, x) -> np.ndarray:
        p, dt = self.params, self.dt
        return np.array(
            [
                [1.0, 0.0, 0.0],
                [dt / p.I, (p.I - p.b * dt) / p.I, -(dt / p.I) * (p.k + p.m * p.g * math.cos(x[2]))],
                [0.0, dt, 1.0],
            ]
        )

    def split(self, x):
        """Return ``(d, theta, thetadot)`` views as length-1 arrays."""
        return x[0:1], x[2:3], x[1:2]

    def pack(self, d, theta, thetadot) -> np.ndarray:
        return np.array([float(np.ravel(d)[0]), float(np.ravel(thetadot)[0]), float(np.ravel(theta)[0])])


class TwoLinkPlant:
    """Two-link leg in observer form, ``x = [d1, d2, th1, th2, dth1, dth2]``."""

    n = 6
    n_dist = 2
    n_joints = 2

    def __init__(self, params: TwoLinkParams = TwoLinkParams(), dt: float = 1e-3, cond_cap: float = MASS_COND_CAP):
        if not dt > 0:
            raise ConfigError("dt must be positive")
        self.params = params
        self.dt = float(dt)
        self.cond_cap = cond_cap
        self._prm = params.packed()
        self.H = np.hstack([np.zeros((4, 2)), np.eye(4)])
        self.HT = np.ascontiguousarray(self.H.T)

    def _check(self, x):
        M, _, _ = _two_link_terms(x[2], x[3], x[4], x[5], self._prm)
        cond = _mass_cond(M)
        if not cond <= self.cond_cap:
            raise SingularMass(f"mass matrix condition number {cond:.3g} exceeds {self.cond_cap:.3g}")

    def transition(self, x, u):
        self._check(x)
        return _exo_f(x, np.asarray(u, dtype=np.float64), self.dt, self._prm)

    def jacobian(self, x, u):
        return _exo_jac(x, np.asarray(u, dtype=np.float64), self.dt, self._prm)

    def split(self, x):
        return x[0:2], x[2:4], x[4:6]

    def pack(self, d, theta, thetadot) -> np.ndarray:
        return np.concatenate([_vec2(d), _vec2(theta), _vec2(thetadot)])

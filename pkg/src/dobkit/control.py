"""Augmented PD control with disturbance compensation, and its ultimate bound.

The control law is

    tau = M(th_hat) thdd_d + C(th_hat, thd_hat) thd_d + G(th_hat)
          - Kd (thd_hat - thd_d) - Kp (th_hat - th_d) - d_hat

With exact estimates the tracking error obeys ``M e'' + (C + Kd) e' + Kp e = 0``.
Estimation errors enter through a single lumped term, see :func:`lumped_error`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import OneDofParams, TwoLinkParams, _two_link_terms
from .errors import ConfigError


def _diag(v, n=None) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        a = np.full(n or 1, float(a))
    if a.ndim == 2:
        if not np.allclose(a, np.diag(np.diag(a))):
            raise ConfigError("gain matrices must be diagonal")
        a = np.diag(a)
    return np.diag(a)


@dataclass(frozen=True)
class PdGains:
    """Diagonal proportional and derivative gains.

    Scalars and vectors are promoted to diagonal matrices.  A scalar paired
    with a vector is broadcast to the vector's length.
    """

    Kp: np.ndarray
    Kd: np.ndarray

    def __post_init__(self):
        n = max(np.shape(self.Kp)[:1] + np.shape(self.Kd)[:1], default=1)
        Kp, Kd = _diag(self.Kp, n), _diag(self.Kd, n)
        if Kp.shape != Kd.shape:
            raise ConfigError("Kp and Kd must have the same dimension")
        if np.any(np.diag(Kp) <= 0) or np.any(np.diag(Kd) <= 0):
            raise ConfigError("PD gains must be positive")
        object.__setattr__(self, "Kp", Kp)
        object.__setattr__(self, "Kd", Kd)

    @classmethod
    def uniform(cls, kp: float, kd: float, n: int) -> "PdGains":
        return cls(np.full(n, kp), np.full(n, kd))


@dataclass(frozen=True)
class DesiredTraj:
    """Reference angle, rate and acceleration.

    Arrays may hold one sample (shape ``(j,)``) or a whole horizon (shape
    ``(N, j)``); :meth:`at` picks sample ``k`` from the latter.
    """

    theta: np.ndarray
    thetadot: np.ndarray
    thetaddot: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(getattr(self, f), dtype=np.float64)) for f in ("theta", "thetadot", "thetaddot")]
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ConfigError("desired theta, thetadot, thetaddot must share a shape")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ConfigError("desired trajectory must be finite")
        for f, a in zip(("theta", "thetadot", "thetaddot"), arrs):
            object.__setattr__(self, f, a)

    def __len__(self):
        return self.theta.shape[0] if self.theta.ndim == 2 else 1

    def at(self, k: int) -> "DesiredTraj":
        if self.theta.ndim == 1:
            return self
        return DesiredTraj(self.theta[k], self.thetadot[k], self.thetaddot[k])

    @classmethod
    def sinusoid(cls, amplitude, freq_hz, dt: float, horizon: int, offset=0.0, phase=0.0,
                 derivatives: str = "euler") -> "DesiredTraj":
        """``offset + amplitude * sin(2 pi f t + phase)`` per joint at ``t = k dt``.

        ``derivatives="euler"`` takes rate and acceleration as forward
        differences of the sampled angle, which is what an explicit Euler plant
        can follow exactly: ``theta[k+1] = theta[k] + dt * thetadot[k]``.
        ``"analytic"`` uses the exact time derivatives instead.
        """
        amp = np.atleast_1d(np.asarray(amplitude, dtype=np.float64))
        n = amp.size
        off, w, ph = (
            np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)) for v in (offset, freq_hz, phase)
        )
        w = 2.0 * math.pi * w
        if derivatives == "analytic":
            arg = w * (np.arange(horizon)[:, None] * dt) + ph
            return cls(off + amp * np.sin(arg), amp * w * np.cos(arg), -amp * w * w * np.sin(arg))
        if derivatives != "euler":
            raise ConfigError("derivatives must be 'euler' or 'analytic'")
        arg = w * (np.arange(horizon + 2)[:, None] * dt) + ph
        th = off + amp * np.sin(arg)
        thd = np.diff(th, axis=0) / dt
        thdd = np.diff(thd, axis=0) / dt
        return cls(th[:horizon], thd[:horizon], thdd[:horizon])


@dataclass(frozen=True)
class BoundInputs:
    """Lumped-error bound and the Lyapunov constants of the invariant ellipsoid."""

    l_e_bar: float
    eps: float = 0.01
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        vals = (self.l_e_bar, self.eps, self.alpha1, self.alpha2)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("bound inputs must be finite")
        # l_e_bar = 0 is allowed: it is the exact-estimation limit
        if self.l_e_bar < 0 or self.eps <= 0 or self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ConfigError("bound inputs must be positive")


def _estimate_parts(x_hat, n_joints):
    x = np.asarray(getattr(x_hat, "x", x_hat), dtype=np.float64)
    if x.size != 3 * n_joints:
        raise ValueError(f"expected a {3 * n_joints}-element augmented state, got {x.size}")
    return x


def _clamp(tau, limit):
    if limit is None:
        return tau
    return np.clip(tau, -limit, limit)


def _two_link_law(x, th_d, thd_d, thdd_d, Kp, Kd, prm):
    d, th, thd = x[0:2], x[2:4], x[4:6]
    M, C, G = _two_link_terms(th[0], th[1], thd[0], thd[1], prm)
    return M @ thdd_d + C @ thd_d + G - Kd @ (thd - thd_d) - Kp @ (th - th_d) - d


def _one_dof_law(x, th_d, thd_d, thdd_d, kp, kd, p: OneDofParams):
    d, thd, th = x[0], x[1], x[2]
    tau_ff = p.I * thdd_d + p.b * thd_d + p.k * th_d + p.m * p.g * math.sin(th)
    return tau_ff - kp * (th - th_d) - kd * (thd - thd_d) - d


def augmented_pd(x_hat, des: DesiredTraj, gains: PdGains, p: TwoLinkParams, torque_limit=None) -> np.ndarray:
    """Two-link control torque from ``x_hat = [d1, d2, th1, th2, thd1, thd2]``.

    ``torque_limit`` (scalar or per joint) applies a symmetric clamp; off by default.
    """
    x = _estimate_parts(x_hat, 2)
    tau = _two_link_law(x, des.theta, des.thetadot, des.thetaddot, gains.Kp, gains.Kd, p.packed())
    return _clamp(tau, torque_limit)


def one_dof_pd(x_hat, des: DesiredTraj, gains: PdGains, p: OneDofParams, torque_limit=None) -> float:
    """1-DOF control torque from ``x_hat = [d, thetadot, theta]``.

    The feedforward inverts the plant with the same ``m g sin(theta)`` gravity
    term the plant uses, so nominal cancellation is exact.
    """
    x = _estimate_parts(x_hat, 1)
    tau = _one_dof_law(
        x, float(des.theta[0]), float(des.thetadot[0]), float(des.thetaddot[0]), gains.Kp[0, 0], gains.Kd[0, 0], p
    )
    return float(_clamp(tau, torque_limit))


def lumped_error(theta, thetadot, d, x_hat, des: DesiredTraj, gains: PdGains, p: TwoLinkParams) -> np.ndarray:
    """Lumped error ``l_e`` of the two-link loop.

    Defined so that ``M e'' + C e' + Kd e' + Kp e + l_e = 0`` holds exactly for
    the true plant under :func:`augmented_pd`::

        l_e = -Kd (thd - thd_hat) - Kp (th - th_hat) - (d - d_hat) - delta

    with ``delta`` the feedforward mismatch between estimated and true state.
    """
    xh = _estimate_parts(x_hat, 2)
    x = np.concatenate([np.asarray(v, dtype=np.float64).reshape(2) for v in (d, theta, thetadot)])
    return _lumped_two_link(x, xh, des.thetadot, des.thetaddot, gains.Kp, gains.Kd, p.packed())


def _lumped_two_link(x, xh, thd_d, thdd_d, Kp, Kd, prm):
    # x and xh in the augmented layout [d, theta, thetadot]
    Mh, Ch, Gh = _two_link_terms(xh[2], xh[3], xh[4], xh[5], prm)
    M, C, G = _two_link_terms(x[2], x[3], x[4], x[5], prm)
    delta = (Mh - M) @ thdd_d + (Ch - C) @ thd_d + Gh - G
    return -Kd @ (x[4:6] - xh[4:6]) - Kp @ (x[2:4] - xh[2:4]) - (x[0:2] - xh[0:2]) - delta


def one_dof_lumped_error(theta, thetadot, d, x_hat, gains: PdGains, p: OneDofParams) -> float:
    """Scalar counterpart of :func:`lumped_error`; the feedforward mismatch is
    ``m g (sin(th_hat) - sin(th))``."""
    x = _estimate_parts(x_hat, 1)
    delta = p.m * p.g * (math.sin(x[2]) - math.sin(theta))
    kp, kd = gains.Kp[0, 0], gains.Kd[0, 0]
    return -kd * (thetadot - x[1]) - kp * (theta - x[2]) - (d - x[0]) - delta


def ultimate_bound(gains: PdGains, b: BoundInputs) -> float:
    """Radius ``kappa = (l_e_bar^2 / 2) (1 / lmin(Kd) + eps / lmin(Kp))``."""
    lkd = float(np.linalg.eigvalsh(gains.Kd).min())
    lkp = float(np.linalg.eigvalsh(gains.Kp).min())
    return 0.5 * b.l_e_bar**2 * (1.0 / lkd + b.eps / lkp)


def bound_form(e, edot, b: BoundInputs) -> np.ndarray:
    """``alpha1 ||e||^2 + alpha2 ||e'||^2`` row-wise over a series."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    edot = np.atleast_2d(np.asarray(edot, dtype=np.float64))
    return b.alpha1 * np.sum(e * e, axis=1) + b.alpha2 * np.sum(edot * edot, axis=1)

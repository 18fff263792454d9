"""Disturbance observers on an augmented state ``[d, state]``.

Step functions are pure: an :class:`AugmentedState` goes in, a new one comes
out.  The small stateful wrappers at the bottom (``EkfDob``, ``ImmEkfDob``,
``MkcEkfDob``, ``Ndob``) only hold the latest state so a simulation loop can
treat every observer alike.  Their ``update(u_prev, y)`` returns the prior
untouched when ``u_prev`` is None (the first sample).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._jit import kernel
from .dynamics import TwoLinkParams, _mass_cond, _two_link_terms
from .errors import (
    ConfigError,
    DegenerateLikelihood,
    FixedPointDiverged,
    InnovationSingular,
    NotPD,
    SingularMass,
)

INNOVATION_COND_CAP = 1e12
# Kernel values below this are clamped; the channel's covariance is then
# inflated by at most 1/KERNEL_FLOOR.
KERNEL_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# configuration and state


def _as_cov(a, dim=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1) if dim is None else np.eye(dim) * float(a)
    elif a.ndim == 1:
        a = np.diag(a)
    if dim is not None and a.shape != (dim, dim):
        raise ConfigError(f"covariance must be {dim}x{dim}, got {a.shape}")
    return a


def _check_psd(name, a, strict=False):
    if not np.allclose(a, a.T, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    lmin = np.linalg.eigvalsh(a).min()
    if (strict and lmin <= 0) or lmin < -1e-12:
        raise ConfigError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")


@dataclass(frozen=True)
class AugmentedState:
    """Estimate ``x`` with covariance ``P`` at time index ``k``."""

    x: np.ndarray
    P: np.ndarray
    k: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).copy()
        P = np.asarray(self.P, dtype=np.float64).copy()
        if P.shape != (x.size, x.size):
            raise ValueError(f"P shape {P.shape} does not match x of size {x.size}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "P", P)


@dataclass(frozen=True)
class NoiseConfig:
    """Process/measurement covariances; ``Q = diag(eta * Q_d, Q_s)``."""

    Q_d: np.ndarray
    Q_s: np.ndarray
    R: np.ndarray
    eta: float = 1.0

    def __post_init__(self):
        for name in ("Q_d", "Q_s", "R"):
            object.__setattr__(self, name, _as_cov(getattr(self, name)))
        _check_psd("Q_d", self.Q_d)
        _check_psd("Q_s", self.Q_s)
        _check_psd("R", self.R, strict=True)
        if not self.eta >= 1.0:
            raise ConfigError("eta must be >= 1")

    @cached_property
    def Q(self) -> np.ndarray:
        p, s = self.Q_d.shape[0], self.Q_s.shape[0]
        Q = np.zeros((p + s, p + s))
        Q[:p, :p] = self.eta * self.Q_d
        Q[p:, p:] = self.Q_s
        return Q

    def scaled(self, eta: float) -> "NoiseConfig":
        return NoiseConfig(self.Q_d, self.Q_s, self.R, eta)


@dataclass(frozen=True)
class ImmConfig:
    """Bank of noise hypotheses mixed by a Markov chain."""

    bank: tuple
    markov: np.ndarray
    mu0: np.ndarray = None

    def __post_init__(self):
        bank = tuple(self.bank)
        if not bank:
            raise ConfigError("IMM bank must be non-empty")
        T = np.atleast_2d(np.asarray(self.markov, dtype=np.float64))
        n = len(bank)
        if T.shape != (n, n):
            raise ConfigError(f"Markov matrix must be {n}x{n}")
        if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError("Markov matrix rows must be nonnegative and sum to 1")
        mu0 = np.full(n, 1.0 / n) if self.mu0 is None else np.asarray(self.mu0, dtype=np.float64)
        if mu0.shape != (n,) or np.any(mu0 < 0) or not math.isclose(mu0.sum(), 1.0, abs_tol=1e-12):
            raise ConfigError("mu0 must lie on the probability simplex")
        object.__setattr__(self, "bank", bank)
        object.__setattr__(self, "markov", T)
        object.__setattr__(self, "mu0", mu0)

    @cached_property
    def stacked(self):
        """``(Q, R)`` of every model stacked along a leading axis."""
        return np.stack([nc.Q for nc in self.bank]), np.stack([nc.R for nc in self.bank])


def _bandwidths(sig) -> np.ndarray:
    if sig is None:
        return np.zeros(0)
    out = np.array([math.inf if s is None else float(s) for s in np.ravel(np.asarray(sig, dtype=object))])
    if np.any(out <= 0) or np.any(np.isnan(out)):
        raise ConfigError("kernel bandwidths must be > 0 (use inf/None for a quadratic channel)")
    return out


@dataclass(frozen=True)
class MkcConfig:
    """Kernel bandwidths and fixed-point controls.

    ``sigma_s`` and ``sigma_r`` default to infinite, i.e. least-squares
    channels.  ``math.inf`` or ``None`` mark a channel as infinite; the limit is
    taken exactly, not approximated by a large number.
    """

    sigma_d: object
    sigma_s: object = None
    sigma_r: object = None
    eps_fp: float = 1e-6
    max_iter: int = 20

    def __post_init__(self):
        object.__setattr__(self, "sigma_d", _bandwidths(self.sigma_d))
        object.__setattr__(self, "sigma_s", _bandwidths(self.sigma_s))
        object.__setattr__(self, "sigma_r", _bandwidths(self.sigma_r))
        if not self.eps_fp > 0:
            raise ConfigError("eps_fp must be > 0")
        if int(self.max_iter) < 1:
            raise ConfigError("max_iter must be >= 1")

    def process_bandwidths(self, n: int) -> np.ndarray:
        p = self.sigma_d.size
        s = self.sigma_s if self.sigma_s.size else np.full(n - p, math.inf)
        if s.size != n - p:
            raise ConfigError(f"sigma_s needs {n - p} entries")
        return np.concatenate([self.sigma_d, s])

    def measurement_bandwidths(self, m: int) -> np.ndarray:
        r = self.sigma_r if self.sigma_r.size else np.full(m, math.inf)
        if r.size != m:
            raise ConfigError(f"sigma_r needs {m} entries")
        return r


@dataclass
class NdobState:
    """Auxiliary vector ``z`` and gain ``c`` of the nonlinear observer."""

    z: np.ndarray = field(default_factory=lambda: np.zeros(2))
    c: float = 50.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).reshape(2)
        if not self.c > 0 or not np.all(np.isfinite(self.z)):
            raise ConfigError("NDOB needs finite z and c > 0")


# ---------------------------------------------------------------------------
# kernels


@kernel
def _cond(S):
    for v in S.ravel():
        if not np.isfinite(v):
            return np.inf
    if S.shape[0] == 1:
        return 1.0
    return np.linalg.cond(S)


@kernel
def _gain(P, H, HT, R):
    # an ill-conditioned S yields K = 0 and is reported through its condition number
    S = H @ P @ HT + R
    c = _cond(S)
    if not c <= INNOVATION_COND_CAP:
        return np.zeros((P.shape[0], S.shape[0])), S, c
    PHt = P @ HT
    K = np.ascontiguousarray(np.linalg.solve(S, np.ascontiguousarray(PHt.T)).T)
    return K, S, c


@kernel
def _cov_update(K, H, Pp):
    n = Pp.shape[0]
    P = (np.eye(n) - K @ H) @ Pp
    return 0.5 * (P + P.T)


@kernel
def _ekf_cycle(xp, F, P, Q, H, HT, R, y):
    Pp = F @ P @ F.T + Q
    Pp = 0.5 * (Pp + Pp.T)
    K, S, c = _gain(Pp, H, HT, R)
    e = y - H @ xp
    x = xp + K @ e
    return x, _cov_update(K, H, Pp), e, c, S, Pp


@kernel
def _gauss_kernel(e, sig):
    w = np.empty(e.shape[0])
    for i in range(e.shape[0]):
        if np.isinf(sig[i]):
            w[i] = 1.0
        else:
            w[i] = np.exp(-(e[i] * e[i]) / (2.0 * sig[i] * sig[i]))
    return w


@kernel
def _forward_sub(L, b):
    n = b.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= L[i, j] * out[j]
        out[i] = acc / L[i, i]
    return out


@kernel
def _inflate(C, B, w, floor):
    # C + B diag(1/w - 1) B^T; exact no-op on channels with w == 1
    D = np.empty(w.shape[0])
    for i in range(w.shape[0]):
        D[i] = 1.0 / max(w[i], floor) - 1.0
    return C + (B * D) @ B.T


@kernel
def _all_inf(sig):
    for i in range(sig.shape[0]):
        if not np.isinf(sig[i]):
            return False
    return True


@kernel
def _mkc_cycle(xp, F, P, Q, H, HT, R, y, sig_p, sig_r, eps, max_iter, floor):
    Pp = F @ P @ F.T + Q
    Pp = 0.5 * (Pp + Pp.T)
    Bp = np.linalg.cholesky(Pp)
    Br = np.linalg.cholesky(R)
    quad_p = _all_inf(sig_p)
    quad_r = _all_inf(sig_r)
    innov = y - H @ xp
    x_prev = xp.copy()
    Pt = Pp
    Rt = R
    t = 0
    change = np.inf
    K = np.zeros((xp.shape[0], y.shape[0]))
    x_new = xp.copy()
    c = 1.0
    stalled = False
    while True:
        t += 1
        if not quad_p:
            ep = _forward_sub(Bp, xp - x_prev)
            Pt = _inflate(Pp, Bp, _gauss_kernel(ep, sig_p), floor)
        if not quad_r:
            er = _forward_sub(Br, y - H @ x_prev)
            Rt = _inflate(R, Br, _gauss_kernel(er, sig_r), floor)
        K_try, S, c_try = _gain(Pt, H, HT, Rt)
        if not c_try <= INNOVATION_COND_CAP:
            if t == 1:
                c = c_try
            else:
                # the inflation ran away; keep the last well-conditioned iterate
                stalled = True
            break
        K, c = K_try, c_try
        x_new = xp + K @ innov
        num = np.sqrt(np.sum((x_new - x_prev) ** 2))
        den = np.sqrt(np.sum(x_new**2))
        if num == 0.0:
            change = 0.0
        elif den == 0.0:
            change = np.inf
        else:
            change = num / den
        x_prev = x_new
        if change <= eps or t >= max_iter:
            break
    if quad_p and quad_r:
        # every channel quadratic: K is the least-squares gain, so finish exactly
        # like the EKF; the Joseph form differs from it only by roundoff
        return x_new, _cov_update(K, H, Pp), t, change, c, stalled
    n = xp.shape[0]
    A = np.eye(n) - K @ H
    Pn = A @ Pp @ A.T + K @ R @ K.T
    return x_new, 0.5 * (Pn + Pn.T), t, change, c, stalled


@kernel
def _imm_mix(X, P, mu, T):
    m, n = X.shape
    cbar = T.T @ mu
    X0 = np.zeros((m, n))
    P0 = np.zeros((m, n, n))
    for j in range(m):
        if cbar[j] <= 0.0:
            X0[j] = X[j]
            P0[j] = P[j]
            continue
        for i in range(m):
            X0[j] += (T[i, j] * mu[i] / cbar[j]) * X[i]
        for i in range(m):
            w = T[i, j] * mu[i] / cbar[j]
            dx = X[i] - X0[j]
            P0[j] += w * (P[i] + np.outer(dx, dx))
    return X0, P0, cbar


@kernel
def _imm_combine(X, P, mu):
    m, n = X.shape
    x = np.zeros(n)
    for j in range(m):
        x += mu[j] * X[j]
    Pf = np.zeros((n, n))
    for j in range(m):
        dx = X[j] - x
        Pf += mu[j] * (P[j] + np.outer(dx, dx))
    return x, Pf


@kernel
def _log_gauss(e, S):
    m = e.shape[0]
    L = np.linalg.cholesky(S)
    z = _forward_sub(L, e)
    logdet = 0.0
    for i in range(m):
        logdet += 2.0 * np.log(L[i, i])
    return -0.5 * np.sum(z * z) - 0.5 * logdet - 0.5 * m * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# step functions


def _contig(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _y(y):
    return np.atleast_1d(np.asarray(y, dtype=np.float64))


def _check_innovation(cond):
    if not cond <= INNOVATION_COND_CAP:
        raise InnovationSingular(f"innovation covariance is singular (cond={cond:.3g})")


def _check_dims(model, Q, R, x):
    n, m = model.H.shape[1], model.H.shape[0]
    if Q.shape != (n, n) or R.shape != (m, m) or x.shape != (n,):
        raise ConfigError(
            f"dimension mismatch: plant has n={n}, m={m}; got Q {Q.shape}, R {R.shape}, x {x.shape}"
        )


def _predict_inputs_x(x, model, u):
    return model.transition(x, u), model.jacobian(x, u)


def _predict_inputs(s: AugmentedState, model, u):
    return _predict_inputs_x(s.x, model, u)


def ekf_dob_step(s: AugmentedState, model, u, y, nc: NoiseConfig) -> AugmentedState:
    """One EKF-DOB predict/update cycle."""
    _check_dims(model, nc.Q, nc.R, s.x)
    xp, F = _predict_inputs(s, model, u)
    x, P, _, cond, _, _ = _ekf_cycle(xp, F, s.P, nc.Q, model.H, model.HT, nc.R, _y(y))
    _check_innovation(cond)
    return AugmentedState(x, P, s.k + 1)


def ekf_dob_step_detail(s, model, u, y, nc):
    """Like :func:`ekf_dob_step` but also returns ``(P_pred, K)``."""
    _check_dims(model, nc.Q, nc.R, s.x)
    xp, F = _predict_inputs(s, model, u)
    x, P, e, cond, S, Pp = _ekf_cycle(xp, F, s.P, nc.Q, model.H, model.HT, nc.R, _y(y))
    _check_innovation(cond)
    K = Pp @ model.HT @ np.linalg.inv(S)
    return AugmentedState(x, P, s.k + 1), Pp, K


def _imm_core(X, P, mu, model, u, yv, cfg):
    """Array form of one IMM cycle; returns ``(X', P', mu', x_fused, P_fused)``."""
    m = X.shape[0]
    X0, P0, cbar = _imm_mix(X, P, mu, cfg.markov)
    Qs, Rs = cfg.stacked
    Xn = np.empty_like(X)
    Pn = np.empty_like(P)
    logL = np.empty(m)
    for j in range(m):
        xp, F = _predict_inputs_x(X0[j], model, u)
        Xn[j], Pn[j], e, cond, S, _ = _ekf_cycle(xp, F, P0[j], Qs[j], model.H, model.HT, Rs[j], yv)
        _check_innovation(cond)
        logL[j] = _log_gauss(e, S)
    finite = np.isfinite(logL)
    if not finite.any():
        warnings.warn("all IMM likelihoods underflowed; holding model probabilities", DegenerateLikelihood)
        mu_new = mu.copy()
    else:
        w = np.where(finite, np.exp(logL - logL[finite].max()), 0.0) * cbar
        c = w.sum()
        if not c > 0:
            warnings.warn("IMM normalizer vanished; holding model probabilities", DegenerateLikelihood)
            mu_new = mu.copy()
        else:
            mu_new = w / c
    x, Pf = _imm_combine(Xn, Pn, mu_new)
    return Xn, Pn, mu_new, x, Pf


def immekf_dob_step(bank_states, mu, model, u, y, cfg: ImmConfig):
    """One interacting-multiple-model cycle.

    Returns ``(bank_states', mu', fused)``.  If every model likelihood
    underflows, the previous probabilities are kept and a
    :class:`DegenerateLikelihood` warning is issued.
    """
    m = len(cfg.bank)
    mu = np.asarray(mu, dtype=np.float64)
    if len(bank_states) != m or mu.shape != (m,):
        raise ValueError("bank_states, mu and cfg.bank must have equal length")
    for nc in cfg.bank:
        _check_dims(model, nc.Q, nc.R, bank_states[0].x)
    X = np.stack([b.x for b in bank_states])
    P = np.stack([b.P for b in bank_states])
    k = bank_states[0].k
    Xn, Pn, mu_new, x, Pf = _imm_core(X, P, mu, model, u, _y(y), cfg)
    states = [AugmentedState(Xn[j], Pn[j], k + 1) for j in range(m)]
    return states, mu_new, AugmentedState(x, Pf, k + 1)


def whiten_residuals(x_pred, P_pred, R, x_iter, y, H):
    """Cholesky-whitened process and measurement residuals.

    Returns ``(e_p, e_r, B_p, B_r)`` with ``B_p B_p^T = P_pred`` and
    ``B_r B_r^T = R``.
    """
    P_pred = np.atleast_2d(np.asarray(P_pred, dtype=np.float64))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    try:
        Bp = np.linalg.cholesky(P_pred)
        Br = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise NotPD(str(exc)) from exc
    x_pred = np.atleast_1d(np.asarray(x_pred, dtype=np.float64))
    x_iter = np.atleast_1d(np.asarray(x_iter, dtype=np.float64))
    e_p = _forward_sub(Bp, x_pred - x_iter)
    e_r = _forward_sub(Br, _y(y) - H @ x_iter)
    return e_p, e_r, Bp, Br


def mkc_weight_matrix(e_p, sigma_p) -> np.ndarray:
    """``diag(exp(-e_i^2 / (2 sigma_i^2)))``; infinite bandwidths give exactly 1."""
    e = np.atleast_1d(np.asarray(e_p, dtype=np.float64))
    sig = _bandwidths(sigma_p)
    if sig.shape != e.shape:
        raise ValueError("residual and bandwidth dimensions differ")
    return np.diag(_gauss_kernel(e, sig))


def _mkc_step(s, model, u, y, nc, mk):
    _check_dims(model, nc.Q, nc.R, s.x)
    xp, F = _predict_inputs(s, model, u)
    yv = _y(y)
    sig_p = mk.process_bandwidths(model.n)
    sig_r = mk.measurement_bandwidths(yv.size)
    try:
        x, P, iters, change, cond, stalled = _mkc_cycle(
            xp, F, s.P, nc.Q, model.H, model.HT, nc.R, yv, sig_p, sig_r,
            float(mk.eps_fp), int(mk.max_iter), KERNEL_FLOOR,
        )
    except np.linalg.LinAlgError as exc:
        raise NotPD(f"predicted covariance not positive definite: {exc}") from exc
    _check_innovation(cond)
    diverged = stalled or (iters >= mk.max_iter and change > 100.0 * mk.eps_fp)
    return AugmentedState(x, P, s.k + 1), int(iters), float(change), bool(diverged)


def mkcekf_dob_step(s: AugmentedState, model, u, y, nc: NoiseConfig, mk: MkcConfig):
    """One MKC-EKF-DOB cycle; returns ``(state, fixed_point_iterations)``.

    Hitting ``max_iter`` with a relative change above ``100 * eps_fp`` issues a
    :class:`FixedPointDiverged` warning; the last iterate is still returned.
    The same warning covers a loop whose kernel inflation drives the innovation
    covariance singular: iteration stops at the last well-conditioned gain.
    """
    state, iters, change, diverged = _mkc_step(s, model, u, y, nc, mk)
    if diverged:
        warnings.warn(
            f"fixed point stopped at {iters} iterations with relative change {change:.3g}",
            FixedPointDiverged,
        )
    return state, iters


def _ndob_terms(theta, thetadot, p: TwoLinkParams, c: float):
    th = np.asarray(theta, dtype=np.float64).reshape(2)
    dth = np.asarray(thetadot, dtype=np.float64).reshape(2)
    M, C, G = _two_link_terms(th[0], th[1], dth[0], dth[1], p.packed())
    if not _mass_cond(M) <= 1e8:
        raise SingularMass("mass matrix ill-conditioned in NDOB")
    A = np.array([[1.0, 0.0], [1.0, 1.0]])
    L = c * A @ np.linalg.inv(M)
    pv = c * np.array([dth[0], dth[0] + dth[1]])
    return L, pv, C @ dth + G


def ndob_gain(theta, p: TwoLinkParams, c: float) -> np.ndarray:
    """Observer gain ``L = c [[1,0],[1,1]] M(theta)^-1``."""
    return _ndob_terms(theta, np.zeros(2), p, c)[0]


def ndob_estimate(nd: NdobState, thetadot) -> np.ndarray:
    dth = np.asarray(thetadot, dtype=np.float64).reshape(2)
    return nd.z + nd.c * np.array([dth[0], dth[0] + dth[1]])


def ndob_step(nd: NdobState, theta, thetadot, tau, p: TwoLinkParams, dt: float):
    """Euler step of the nonlinear observer.

    Returns ``(next_state, d_hat)`` where ``d_hat = z + p(thetadot)`` is the
    estimate at the current sample.  Stable discretization needs roughly
    ``c * dt * ||M^-1|| < 2``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    L, pv, cg = _ndob_terms(theta, thetadot, p, nd.c)
    tau = np.asarray(tau, dtype=np.float64).reshape(2)
    d_hat = nd.z + pv
    z_next = (np.eye(2) - L * dt) @ nd.z + (L * dt) @ (cg - tau - pv)
    return NdobState(z_next, nd.c), d_hat


def raw_dob(theta, thetadot, thetaddot, tau, p: TwoLinkParams) -> np.ndarray:
    """Inverse-dynamics disturbance ``M thetaddot + C thetadot + G - tau``."""
    th = np.asarray(theta, dtype=np.float64).reshape(2)
    dth = np.asarray(thetadot, dtype=np.float64).reshape(2)
    M, C, G = _two_link_terms(th[0], th[1], dth[0], dth[1], p.packed())
    return M @ np.asarray(thetaddot, dtype=np.float64).reshape(2) + C @ dth + G - np.asarray(tau).reshape(2)


def rdob_series(theta, thetadot, tau, p: TwoLinkParams, dt: float) -> np.ndarray:
    """Raw disturbance over a recorded series (rows are samples).

    Accelerations come from a central difference of ``thetadot``; the first
    and last samples use zero acceleration.
    """
    theta = np.asarray(theta, dtype=np.float64)
    thetadot = np.asarray(thetadot, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    acc = np.zeros_like(thetadot)
    acc[1:-1] = (thetadot[2:] - thetadot[:-2]) / (2.0 * dt)
    return np.array([raw_dob(theta[i], thetadot[i], acc[i], tau[i], p) for i in range(theta.shape[0])])


# ---------------------------------------------------------------------------
# stateful wrappers used by the closed-loop runner


class EkfDob:
    name = "ekf"

    def __init__(self, model, nc: NoiseConfig, s0: AugmentedState):
        self.model, self.nc, self.state = model, nc, s0

    def update(self, u, y):
        if u is None:
            return self.state.x, {}
        self.state = ekf_dob_step(self.state, self.model, u, y, self.nc)
        return self.state.x, {}


class MkcEkfDob:
    """Counts fixed-point stalls in ``diverged`` instead of warning each step."""

    name = "mkc"

    def __init__(self, model, nc: NoiseConfig, mk: MkcConfig, s0: AugmentedState):
        self.model, self.nc, self.mk, self.state = model, nc, mk, s0
        self.diverged = 0

    def update(self, u, y):
        if u is None:
            return self.state.x, {"iters": 0}
        self.state, iters, _, diverged = _mkc_step(self.state, self.model, u, y, self.nc, self.mk)
        self.diverged += diverged
        return self.state.x, {"iters": iters}


class ImmEkfDob:
    """Keeps the bank as stacked arrays between steps."""

    name = "imm"

    def __init__(self, model, cfg: ImmConfig, s0: AugmentedState):
        self.model, self.cfg = model, cfg
        for nc in cfg.bank:
            _check_dims(model, nc.Q, nc.R, s0.x)
        m = len(cfg.bank)
        self.X = np.repeat(s0.x[None, :], m, axis=0)
        self.P = np.repeat(s0.P[None, :, :], m, axis=0)
        self.mu = cfg.mu0.copy()
        self.x, self.Pf, self.k = s0.x.copy(), s0.P.copy(), s0.k

    @property
    def state(self) -> AugmentedState:
        return AugmentedState(self.x, self.Pf, self.k)

    @property
    def bank(self) -> list:
        return [AugmentedState(self.X[j], self.P[j], self.k) for j in range(self.X.shape[0])]

    def update(self, u, y):
        if u is None:
            return self.x, {"mu": self.mu}
        self.X, self.P, self.mu, self.x, self.Pf = _imm_core(self.X, self.P, self.mu, self.model, u, _y(y), self.cfg)
        self.k += 1
        return self.x, {"mu": self.mu}


class Ndob:
    """Nonlinear observer driven by measured angle and rate.

    ``update(u_prev, y)`` first advances ``z`` with the previous sample and
    torque, then returns ``[d_hat, theta, thetadot]`` at the current sample.
    ``z`` starts at ``-p(thetadot_0)`` so the first estimate is zero.
    """

    name = "ndob"

    def __init__(self, params: TwoLinkParams, dt: float, c: float = 50.0):
        if not dt > 0:
            raise ConfigError("dt must be positive")
        self.params, self.dt, self.c = params, float(dt), float(c)
        self.nd = None
        self._prev = None

    def update(self, u, y):
        y = np.asarray(y, dtype=np.float64)
        th, thd = y[0:2], y[2:4]
        if self.nd is None:
            self.nd = NdobState(-self.c * np.array([thd[0], thd[0] + thd[1]]), self.c)
        elif u is not None:
            self.nd, _ = ndob_step(self.nd, self._prev[0], self._prev[1], u, self.params, self.dt)
        self._prev = (th.copy(), thd.copy())
        d_hat = ndob_estimate(self.nd, thd)
        return np.concatenate([d_hat, th, thd]), {}

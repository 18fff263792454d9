"""Closed-loop simulation, seeded Monte-Carlo runs, and evaluation metrics.

A :class:`SimScenario` is plain data (JSON round-trippable).  One run of it is
a :class:`Trace`; ``K`` seeded runs reduce to an :class:`McReport`.

Per-step order inside :func:`run_closed_loop` at sample ``k``:

1. draw the true disturbance from the current true state,
2. measure ``y_k = H x_k + v_k``,
3. observer update with the torque applied at ``k - 1`` (none at ``k = 0``),
4. compute the control torque from the estimate,
5. advance the true plant one step.

Random streams are Philox generators keyed by the run seed; disturbance noise
and measurement noise use separate child streams, so two observers run with
the same seed see the same noise realizations.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import control
from .control import DesiredTraj, PdGains
from .dynamics import (
    OneDofParams,
    OneDofPlant,
    StribeckParams,
    TwoLinkParams,
    TwoLinkPlant,
    load_params,
)
from .errors import ConfigError, DobkitError, NonFinite, StepError, TooShort
from .observers import (
    AugmentedState,
    EkfDob,
    ImmConfig,
    ImmEkfDob,
    MkcConfig,
    MkcEkfDob,
    Ndob,
    NoiseConfig,
)

SCHEMA_VERSION = "dobkit/1"
DEFAULT_WINDOW = (300, 450)
SNR_CAP_DB = 120.0
# Force of the elastic band stays below 5 kg; acting at the thigh length.
ELASTIC_CAP = 5.0 * 9.81 * 0.40


# ---------------------------------------------------------------------------
# disturbances

_KIND_DEFAULTS = {
    "coulomb-viscous": {"coulomb": 20.0, "viscous": 0.5},
    "stribeck": {"preset": "exo-left-leg"},
    "impulse-train": {"magnitude": 10.0, "width": 0.1, "period": 1.0, "start": 0.5},
    "elastic-periodic": {"amplitude": 15.0, "freq_hz": 0.5, "phase": 0.0, "offset": 0.0, "cap": ELASTIC_CAP},
    "constant": {"value": 0.0},
    "composite": {"parts": []},
}


@dataclass(frozen=True)
class DisturbanceProfile:
    """Parametric true-disturbance generator.

    Kinds and their ``params`` (scalars broadcast over joints):

    ``coulomb-viscous``
        ``coulomb * sgn(ref) + viscous * thetadot``.
    ``stribeck``
        Resistive joint friction ``-tau_fri``; ``preset`` names a friction
        preset, or ``joints`` lists per-joint Stribeck coefficients.
    ``impulse-train``
        Rectangular pulses of ``magnitude`` lasting ``width`` seconds every
        ``period`` seconds from ``start``.
    ``elastic-periodic``
        ``offset + amplitude * sin(2 pi freq_hz t + phase)`` clipped to ``cap``.
    ``constant``
        ``value``.
    ``composite``
        Sum of ``parts`` (a list of profile dicts), each with its own noise.

    ``sign_source="desired"`` takes the sign in Coulomb-type terms from the
    reference rate instead of the measured one.  Near zero crossings this
    keeps the friction jump clean instead of chattering with tracking noise.
    ``noise_std`` adds white Gaussian noise per joint.
    """

    kind: str = "coulomb-viscous"
    params: dict = field(default_factory=dict)
    noise_std: float = 0.5
    sign_source: str = "actual"

    def __post_init__(self):
        if self.kind not in _KIND_DEFAULTS:
            raise ConfigError(f"unknown disturbance kind {self.kind!r}; expected one of {sorted(_KIND_DEFAULTS)}")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ConfigError("noise_std must be finite and >= 0")
        if self.sign_source not in ("actual", "desired"):
            raise ConfigError("sign_source must be 'actual' or 'desired'")
        unknown = set(self.params) - set(_KIND_DEFAULTS[self.kind]) - {"joints"}
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**_KIND_DEFAULTS[self.kind], **self.params}
        if self.kind == "composite":
            merged["parts"] = [p if isinstance(p, DisturbanceProfile) else profile_from_dict(p) for p in merged["parts"]]
        else:
            for key, val in merged.items():
                if key in ("preset", "joints"):
                    continue
                if not np.all(np.isfinite(np.asarray(val, dtype=np.float64))):
                    raise ConfigError(f"disturbance parameter {key} must be finite")
        if self.kind == "impulse-train" and not (np.all(np.asarray(merged["period"]) > 0) and np.all(np.asarray(merged["width"]) >= 0)):
            raise ConfigError("impulse-train needs period > 0 and width >= 0")
        object.__setattr__(self, "params", merged)
        object.__setattr__(self, "_vec_cache", {})
        if self.kind == "stribeck":
            object.__setattr__(self, "_friction", _friction_from(merged))

    def to_dict(self) -> dict:
        params = dict(self.params)
        if self.kind == "composite":
            params["parts"] = [p.to_dict() for p in params["parts"]]
        return {"kind": self.kind, "params": _jsonable(params), "noise_std": self.noise_std, "sign_source": self.sign_source}


def profile_from_dict(d: dict) -> DisturbanceProfile:
    if isinstance(d, DisturbanceProfile):
        return d
    try:
        return DisturbanceProfile(**d)
    except TypeError as exc:
        raise ConfigError(f"bad disturbance profile: {exc}") from exc


def _friction_from(params) -> tuple:
    if "joints" in params:
        return tuple(j if isinstance(j, StribeckParams) else StribeckParams(**j) for j in params["joints"])
    return load_params(params["preset"])["friction"]


def _stribeck_vec(thetadot, ref, joints) -> np.ndarray:
    out = np.empty(thetadot.size)
    for i, (w, r, f) in enumerate(zip(thetadot, ref, joints)):
        sgn = 0.0 if r == 0.0 else math.copysign(1.0, r)
        mag = f.tau_c + (f.tau_s - f.tau_c) * math.exp(-abs(w) / f.thetadot_s)
        out[i] = mag * sgn + f.eta_v * w
    return out


def gen_disturbance(profile: DisturbanceProfile, thetadot, k: int, rng, dt: float = 0.01, sign_ref=None) -> np.ndarray:
    """True disturbance at sample ``k`` (one entry per joint).

    ``sign_ref`` is the reference rate; it is only used when the profile's
    ``sign_source`` is ``"desired"``.
    """
    w = np.atleast_1d(np.asarray(thetadot, dtype=np.float64))
    n = w.size
    pr = profile.params
    if sign_ref is None or profile.sign_source != "desired":
        ref = w
    else:
        ref = np.atleast_1d(np.asarray(sign_ref, dtype=np.float64))
    t = k * dt

    cache = profile._vec_cache

    def vec(key):
        v = cache.get((key, n))
        if v is None:
            try:
                v = np.broadcast_to(np.asarray(pr[key], dtype=np.float64), (n,)).copy()
            except ValueError as exc:
                raise ConfigError(f"disturbance parameter {key} does not fit {n} joints") from exc
            cache[(key, n)] = v
        return v

    kind = profile.kind
    if kind == "coulomb-viscous":
        d = vec("coulomb") * np.sign(ref) + vec("viscous") * w
    elif kind == "stribeck":
        joints = profile._friction
        if len(joints) != n:
            raise ConfigError(f"stribeck profile has {len(joints)} joints, plant has {n}")
        d = -_stribeck_vec(w, ref, joints)
    elif kind == "impulse-train":
        start, period, width = vec("start"), vec("period"), vec("width")
        # the dt-relative slack keeps k * dt round-off from adding a sample to a pulse
        slack = 1e-9 * dt
        on = (t >= start - slack) & (np.mod(t - start + slack, period) < width)
        d = np.where(on, vec("magnitude"), 0.0)
    elif kind == "elastic-periodic":
        raw = vec("offset") + vec("amplitude") * np.sin(2.0 * math.pi * vec("freq_hz") * t + vec("phase"))
        cap = vec("cap")
        d = np.clip(raw, -cap, cap)
    elif kind == "constant":
        d = vec("value").copy()
    else:
        d = np.zeros(n)
        for part in pr["parts"]:
            d = d + gen_disturbance(part, w, k, rng, dt, sign_ref)
    if profile.noise_std > 0:
        d = d + profile.noise_std * rng.standard_normal(n)
    return d


# ---------------------------------------------------------------------------
# scenarios


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, StribeckParams):
        return asdict(v)
    return v


PLANTS = ("one-dof", "two-link")


@dataclass(frozen=True)
class SimScenario:
    """Everything one closed-loop run needs.

    ``trajectory`` is a per-joint sinusoid spec (``amplitude``, ``freq_hz``,
    ``offset``, ``phase``, and ``derivatives``: ``"euler"`` or ``"analytic"``).  ``noise`` holds the observer covariances
    ``Q_d``, ``Q_s``, ``R`` and the initial covariance diagonal ``P0``; the
    simulated sensor uses the same ``R``.  ``observer`` is an observer spec,
    see :func:`build_observer`.
    """

    plant: str = "one-dof"
    dt: float = 0.01
    horizon: int = 1000
    trajectory: dict = field(default_factory=lambda: {"amplitude": 10.0, "freq_hz": 0.2})
    gains: dict = field(default_factory=lambda: {"kp": 100.0, "kd": 10.0})
    observer: dict = field(default_factory=lambda: {"type": "ekf", "eta": 1.0})
    noise: dict = field(default_factory=lambda: {"Q_d": 0.25, "Q_s": [1e-6, 1e-6], "R": 1e-4, "P0": [100.0, 0.01, 0.01]})
    disturbance: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    params: dict | None = None
    seed: int = 0
    init_offset: tuple | None = None
    torque_limit: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.plant not in PLANTS:
            raise ConfigError(f"plant must be one of {PLANTS}")
        if not (isinstance(self.dt, (int, float)) and self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be a positive number")
        if not (isinstance(self.horizon, (int, np.integer)) and self.horizon >= 1):
            raise ConfigError("horizon must be an integer >= 1")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        object.__setattr__(self, "disturbance", profile_from_dict(self.disturbance))
        if "type" not in self.observer:
            raise ConfigError("observer spec needs a 'type'")
        for key in ("kp", "kd"):
            if key not in self.gains:
                raise ConfigError(f"gains need {key!r}")

    @property
    def n_joints(self) -> int:
        return 1 if self.plant == "one-dof" else 2

    def to_dict(self) -> dict:
        out = {}
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            out[f] = v.to_dict() if isinstance(v, DisturbanceProfile) else _jsonable(copy.deepcopy(v))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        d = dict(d)
        d.pop("observers", None)
        d.pop("schema", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        if "disturbance" in d:
            d["disturbance"] = profile_from_dict(d["disturbance"])
        if d.get("init_offset") is not None:
            d["init_offset"] = tuple(d["init_offset"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_observer(self, spec: dict, **kw) -> "SimScenario":
        return replace(self, observer=dict(spec), **kw)


def preset_scenario(name: str) -> SimScenario:
    """Named scenarios.

    ``friction-1dof``
        Sinusoidal tracking of the 1-DOF manipulator against Coulomb-viscous
        friction with white noise; the step-like jumps at the reference rate's
        zero crossings and the slow viscous part exercise both regimes.
    ``elastic-2link``
        Two-link leg on a 0.3 Hz gait-like reference, with joint friction plus
        an elastic band whose pull follows the gait and saturates at the
        5 kg cap.
    """
    if name == "friction-1dof":
        return SimScenario(
            name=name,
            disturbance=DisturbanceProfile("coulomb-viscous", {"coulomb": 20.0, "viscous": 0.5}, 0.5, "desired"),
        )
    if name == "elastic-2link":
        return SimScenario(
            name=name,
            plant="two-link",
            dt=1e-3,
            horizon=4000,
            trajectory={"amplitude": [0.35, 0.45], "freq_hz": 0.3, "offset": [0.1, 0.5], "phase": [0.0, -1.5708]},
            gains={"kp": 5000.0, "kd": 100.0},
            observer={"type": "ekf", "eta": 1.0},
            noise={"Q_d": 0.1, "Q_s": [1e-8, 1e-8, 1e-6, 1e-6], "R": [1e-8, 1e-8, 1e-4, 1e-4],
                   "P0": [100.0, 100.0, 1e-6, 1e-6, 1e-4, 1e-4]},
            disturbance=DisturbanceProfile(
                "composite",
                {"parts": [
                    DisturbanceProfile("stribeck", {"preset": "exo-left-leg"}, 0.0, "desired"),
                    # amplitude far above the cap: flat plateaus joined by fast ramps
                    DisturbanceProfile("elastic-periodic", {"amplitude": [200.0, 100.0], "freq_hz": 0.3}, 0.2),
                ]},
                0.0,
            ),
        )
    raise ConfigError(f"unknown scenario preset {name!r}")


def load_config(source) -> tuple[SimScenario, list]:
    """Read a scenario file; returns ``(scenario, observer_specs)``.

    ``observer_specs`` is the ``observers`` list when present, else the single
    ``observer`` spec.  A ``preset`` key starts from a named scenario and the
    remaining keys override it.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    else:
        d = dict(source)
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d = dict(d)
    base = preset_scenario(d.pop("preset")).to_dict() if "preset" in d else {}
    observers = d.get("observers")
    merged = {**base, **d}
    scn = SimScenario.from_dict(merged)
    if observers is None:
        observers = [scn.observer]
    if not isinstance(observers, list) or not all(isinstance(o, dict) and "type" in o for o in observers):
        raise ConfigError("observers must be a list of specs with a 'type'")
    return scn, observers


def save_config(scn: SimScenario, path, observers=None):
    d = {"schema": SCHEMA_VERSION, **scn.to_dict()}
    if observers is not None:
        d["observers"] = _jsonable(observers)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# observer construction


def _diag_vec(v, n, name) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 2:
        return a
    a = np.broadcast_to(a, (n,)) if a.ndim == 0 else a
    if a.shape != (n,):
        raise ConfigError(f"{name} needs {n} diagonal entries")
    return np.diag(a)


def _eta(spec, key="eta", log_key="log_eta", default=1.0):
    if log_key in spec:
        return math.exp(float(spec[log_key]))
    return float(spec.get(key, default))


class Oracle:
    """Test observer returning the true augmented state.

    ``inject`` subtracts ``amplitude * sin(2 pi freq_hz t + phase)`` from the
    disturbance channel, which enters the loop as a known bounded lumped error.
    """

    name = "oracle"
    needs_truth = True

    def __init__(self, dt, n_dist, inject=None):
        self.dt, self.k = dt, 0
        self.inject = None
        if inject:
            amp = np.broadcast_to(np.asarray(inject.get("amplitude", 0.0), dtype=np.float64), (n_dist,))
            f = np.broadcast_to(np.asarray(inject.get("freq_hz", 1.0), dtype=np.float64), (n_dist,))
            ph = np.broadcast_to(np.asarray(inject.get("phase", 0.0), dtype=np.float64), (n_dist,))
            self.inject = (amp, f, ph)
        self.n_dist = n_dist

    def update(self, u, y, truth):
        x = truth.copy()
        if self.inject is not None:
            amp, f, ph = self.inject
            x[: self.n_dist] -= amp * np.sin(2.0 * math.pi * f * self.k * self.dt + ph)
        self.k += 1
        return x, {}


def build_observer(spec: dict, scn: SimScenario, plant, x0_hat):
    """Instantiate an observer from its spec.

    Spec types: ``ekf`` (``eta`` or ``log_eta``), ``imm`` (``etas`` or
    ``log_etas``, ``markov``, ``mu0``), ``mkc`` (``sigma_d``, optional
    ``sigma_s``/``sigma_r``, ``eta``, ``eps_fp``, ``max_iter``), ``ndob``
    (``c``, two-link only) and ``oracle`` (``inject``).
    """
    kind = spec.get("type")
    nz = scn.noise
    p, n = plant.n_dist, plant.n
    try:
        base = NoiseConfig(
            _diag_vec(nz.get("Q_d", 0.25), p, "Q_d"),
            _diag_vec(nz.get("Q_s", 1e-6), n - p, "Q_s"),
            _diag_vec(nz.get("R", 1e-4), plant.H.shape[0], "R"),
        )
        P0 = _diag_vec(nz.get("P0", 1.0), n, "P0")
        s0 = AugmentedState(x0_hat, P0)
        if kind == "ekf":
            return EkfDob(plant, base.scaled(_eta(spec)), s0)
        if kind == "imm":
            if "log_etas" in spec:
                etas = [math.exp(float(v)) for v in spec["log_etas"]]
            else:
                etas = [float(v) for v in spec.get("etas", [1.0, math.exp(4.0)])]
            markov = spec.get("markov", [[0.95, 0.05], [0.3, 0.7]])
            cfg = ImmConfig(tuple(base.scaled(e) for e in etas), markov, spec.get("mu0"))
            return ImmEkfDob(plant, cfg, s0)
        if kind == "mkc":
            sig = spec.get("sigma_d", 1.5)
            sig = np.broadcast_to(np.asarray(sig, dtype=object), (p,)).tolist()
            mk = MkcConfig(sig, spec.get("sigma_s"), spec.get("sigma_r"), spec.get("eps_fp", 1e-6), spec.get("max_iter", 20))
            return MkcEkfDob(plant, base.scaled(_eta(spec)), mk, s0)
        if kind == "ndob":
            if scn.plant != "two-link":
                raise ConfigError("ndob needs the two-link plant (angle and rate measured)")
            return Ndob(plant.params, scn.dt, float(spec.get("c", 50.0)))
        if kind == "oracle":
            return Oracle(scn.dt, p, spec.get("inject"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"observer spec {spec}: {exc}") from exc
    raise ConfigError(f"unknown observer type {kind!r}")


def observer_label(spec: dict) -> str:
    if "label" in spec:
        return str(spec["label"])
    kind = spec["type"]
    if kind in ("ekf", "mkc") and "log_eta" in spec:
        return f"{kind}(eta=e^{spec['log_eta']:g})"
    if kind == "ekf":
        return f"ekf(eta={_eta(spec):.4g})"
    if kind == "mkc":
        return f"mkc(sigma_d={spec.get('sigma_d', 1.5)})"
    if kind == "imm":
        p = spec.get("markov", [[0.95]])[0][0]
        return f"imm(p11={p:g})"
    return kind


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class Trace:
    """Per-step record of one closed-loop run (rows are samples)."""

    plant: str
    t: np.ndarray
    theta_d: np.ndarray
    thetadot_d: np.ndarray
    x_true: np.ndarray
    y: np.ndarray
    x_hat: np.ndarray
    tau: np.ndarray
    l_e: np.ndarray
    step_time: np.ndarray
    mu: np.ndarray | None = None
    iters: np.ndarray | None = None
    fp_diverged: int = 0

    def __len__(self):
        return self.t.shape[0]

    def _idx(self):
        # (d, theta, thetadot) column slices
        if self.plant == "one-dof":
            return slice(0, 1), slice(2, 3), slice(1, 2)
        return slice(0, 2), slice(2, 4), slice(4, 6)

    @property
    def d(self):
        return self.x_true[:, self._idx()[0]]

    @property
    def d_hat(self):
        return self.x_hat[:, self._idx()[0]]

    @property
    def theta(self):
        return self.x_true[:, self._idx()[1]]

    @property
    def theta_hat(self):
        return self.x_hat[:, self._idx()[1]]

    @property
    def thetadot(self):
        return self.x_true[:, self._idx()[2]]

    @property
    def thetadot_hat(self):
        return self.x_hat[:, self._idx()[2]]

    def columns(self, include_timing: bool = False) -> dict:
        j = self.theta_d.shape[1]
        cols = {"k": np.arange(len(self)), "t": self.t}

        def add(name, arr):
            for i in range(arr.shape[1]):
                cols[f"{name}_{i + 1}"] = arr[:, i]

        add("theta_d", self.theta_d)
        add("thetadot_d", self.thetadot_d)
        add("d", self.d)
        add("theta", self.theta)
        add("thetadot", self.thetadot)
        add("y", self.y)
        add("d_hat", self.d_hat)
        add("theta_hat", self.theta_hat)
        add("thetadot_hat", self.thetadot_hat)
        add("tau", self.tau)
        add("l_e", self.l_e)
        if self.mu is not None:
            add("mu", self.mu)
        if self.iters is not None:
            cols["iters"] = self.iters
        if include_timing:
            cols["step_time_s"] = self.step_time
        assert all(c.shape[0] == len(self) for c in cols.values()) and j >= 1
        return cols

    def to_csv(self, path=None, include_timing: bool = False) -> str:
        """Write one row per sample with a header row; returns the text.

        Wall-clock timing is left out by default so identical runs give
        byte-identical files.
        """
        cols = self.columns(include_timing)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(cols))
        data = np.column_stack([np.asarray(c, dtype=np.float64) for c in cols.values()])
        for k, row in enumerate(data):
            w.writerow([k] + [repr(float(v)) for v in row[1:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def make_plant(scn: SimScenario):
    params = load_params(scn.params) if scn.params else {}
    if scn.plant == "one-dof":
        return OneDofPlant(params.get("one_dof", OneDofParams()), scn.dt)
    return TwoLinkPlant(params.get("two_link", TwoLinkParams()), scn.dt)


def desired_trajectory(scn: SimScenario) -> DesiredTraj:
    tr = dict(scn.trajectory)
    unknown = set(tr) - {"amplitude", "freq_hz", "offset", "phase", "derivatives"}
    if unknown:
        raise ConfigError(f"unknown trajectory keys: {sorted(unknown)}")
    amp = np.broadcast_to(np.asarray(tr.get("amplitude", 0.0), dtype=np.float64), (scn.n_joints,))
    return DesiredTraj.sinusoid(amp, tr.get("freq_hz", 0.0), scn.dt, scn.horizon, tr.get("offset", 0.0),
                                tr.get("phase", 0.0), tr.get("derivatives", "euler"))


def scenario_gains(scn: SimScenario) -> PdGains:
    j = scn.n_joints
    try:
        kp, kd = (np.broadcast_to(np.asarray(scn.gains[k], dtype=np.float64), (j,)) for k in ("kp", "kd"))
    except ValueError as exc:
        raise ConfigError(f"gains must be scalars or {j}-vectors") from exc
    return PdGains(kp, kd)


def _initial_truth(scn, plant, des):
    th = des.theta[0].copy()
    if scn.init_offset is not None:
        off = np.asarray(scn.init_offset, dtype=np.float64)
        th = th + off[: scn.n_joints]
        thd_off = off[scn.n_joints:] if off.size == 2 * scn.n_joints else 0.0
    else:
        thd_off = 0.0
    return plant.pack(np.zeros(plant.n_dist), th, des.thetadot[0] + thd_off)


def run_closed_loop(scn: SimScenario, seed: int | None = None) -> Trace:
    """Simulate one seeded closed-loop run.

    Observer and dynamics failures are re-raised as :class:`StepError`
    carrying the sample index.
    """
    seed = scn.seed if seed is None else int(seed)
    plant = make_plant(scn)
    des = desired_trajectory(scn)
    gains = scenario_gains(scn)
    x = _initial_truth(scn, plant, des)
    obs = build_observer(scn.observer, scn, plant, x.copy())
    needs_truth = getattr(obs, "needs_truth", False)
    dist_ss, meas_ss = np.random.SeedSequence(seed).spawn(2)
    dist_rng = np.random.Generator(np.random.Philox(dist_ss))
    meas_rng = np.random.Generator(np.random.Philox(meas_ss))
    R = _diag_vec(scn.noise.get("R", 1e-4), plant.H.shape[0], "R")
    chol_R = np.linalg.cholesky(R)
    H = plant.H
    N, n, m, j = scn.horizon, plant.n, H.shape[0], scn.n_joints
    d_sl, th_sl, thd_sl = plant.split(np.arange(n))
    d_i, th_i, thd_i = (np.asarray(s) for s in (d_sl, th_sl, thd_sl))

    rec_x = np.empty((N, n))
    rec_y = np.empty((N, m))
    rec_xh = np.empty((N, n))
    rec_tau = np.empty((N, j))
    rec_le = np.empty((N, j))
    rec_dt = np.empty(N)
    rec_mu = None
    rec_it = None
    one_dof = scn.plant == "one-dof"
    prm = plant.params
    prm_packed = prm.packed()
    kp1, kd1 = gains.Kp[0, 0], gains.Kd[0, 0]
    limit = scn.torque_limit
    u_prev = None

    for k in range(N):
        try:
            d = gen_disturbance(scn.disturbance, x[thd_i], k, dist_rng, scn.dt, des.thetadot[k])
            x[d_i] = d
            y = H @ x + chol_R @ meas_rng.standard_normal(m)
            t0 = time.perf_counter()
            if needs_truth:
                xh, extra = obs.update(u_prev, y, x)
            else:
                xh, extra = obs.update(u_prev, y)
            rec_dt[k] = time.perf_counter() - t0
            if one_dof:
                u = control._one_dof_law(xh, des.theta[k, 0], des.thetadot[k, 0], des.thetaddot[k, 0], kp1, kd1, prm)
                u = np.array([u])
                le = control.one_dof_lumped_error(x[2], x[1], x[0], xh, gains, prm)
            else:
                u = control._two_link_law(xh, des.theta[k], des.thetadot[k], des.thetaddot[k], gains.Kp, gains.Kd, prm_packed)
                le = control._lumped_two_link(x, xh, des.thetadot[k], des.thetaddot[k], gains.Kp, gains.Kd, prm_packed)
            if limit is not None:
                u = np.clip(u, -limit, limit)
            rec_x[k] = x
            rec_y[k] = y
            rec_xh[k] = xh
            rec_tau[k] = u
            rec_le[k] = le
            if "mu" in extra:
                if rec_mu is None:
                    rec_mu = np.empty((N, len(extra["mu"])))
                rec_mu[k] = extra["mu"]
            if "iters" in extra:
                if rec_it is None:
                    rec_it = np.zeros(N, dtype=np.int64)
                rec_it[k] = extra["iters"]
            x = plant.transition(x, u[0] if one_dof else u)
            if not np.all(np.isfinite(x)):
                raise NonFinite("true state became non-finite")
            u_prev = u
        except (DobkitError, np.linalg.LinAlgError, FloatingPointError) as exc:
            if isinstance(exc, StepError):
                raise
            raise StepError(k, exc) from exc

    return Trace(
        plant=scn.plant,
        t=np.arange(N) * scn.dt,
        theta_d=des.theta.copy(),
        thetadot_d=des.thetadot.copy(),
        x_true=rec_x,
        y=rec_y,
        x_hat=rec_xh,
        tau=rec_tau,
        l_e=rec_le,
        step_time=rec_dt,
        mu=rec_mu,
        iters=rec_it,
        fp_diverged=int(getattr(obs, "diverged", 0)),
    )


# ---------------------------------------------------------------------------
# metrics


def rmse(a, axis=0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.sqrt(np.mean(a * a, axis=axis))


TRACKING_COLUMNS = ("d", "thetadot", "theta", "track_theta", "track_thetadot")


def tracking_metrics(trace: Trace, burn_in: int = 0) -> dict:
    """Per-joint RMSE of the estimation errors and tracking errors.

    Keys: ``d``, ``thetadot``, ``theta`` (estimation errors, true minus
    estimate), ``track_theta`` (``theta_d - theta``) and ``track_thetadot``.
    """
    if not 0 <= burn_in < len(trace):
        raise ValueError("burn_in must leave at least one sample")
    s = slice(burn_in, None)
    return {
        "d": rmse((trace.d - trace.d_hat)[s]),
        "thetadot": rmse((trace.thetadot - trace.thetadot_hat)[s]),
        "theta": rmse((trace.theta - trace.theta_hat)[s]),
        "track_theta": rmse((trace.theta_d - trace.theta)[s]),
        "track_thetadot": rmse((trace.thetadot_d - trace.thetadot)[s]),
    }


def snr_metric(torque_series, cutoff: float = 0.2, order: int = 12) -> np.ndarray:
    """Smoothness of a command signal in dB, per column.

    The zero-phase low-passed series (Butterworth, forward-backward, odd
    reflection padding of ``3 * order`` samples) is the signal and the
    remainder is the noise.  Values are capped at 120 dB.
    """
    from scipy.signal import butter, sosfiltfilt

    x = np.asarray(torque_series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if not 0.0 < cutoff < 1.0:
        raise ValueError("cutoff must lie in (0, 1) as a fraction of Nyquist")
    if order < 1:
        raise ValueError("order must be >= 1")
    pad = 3 * order
    if x.shape[0] <= pad:
        raise TooShort(f"series of length {x.shape[0]} needs more than {pad} samples")
    sos = butter(order, cutoff, output="sos")
    smooth = sosfiltfilt(sos, x, axis=0, padtype="odd", padlen=pad)
    resid = x - smooth
    sig = np.sum(smooth * smooth, axis=0)
    noise = np.sum(resid * resid, axis=0)
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(sig / noise)
    snr = np.where(noise <= sig * 10.0 ** (-SNR_CAP_DB / 10.0), SNR_CAP_DB, snr)
    return np.minimum(snr, SNR_CAP_DB)


# ---------------------------------------------------------------------------
# Monte Carlo


def worker_count(workers=None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("DOBKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"DOBKIT_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def _summarize(trace: Trace, burn_in: int) -> dict:
    return {
        "err_d": trace.d - trace.d_hat,
        "rmse": tracking_metrics(trace, burn_in),
        "snr": snr_metric(trace.tau) if len(trace) > 36 else np.full(trace.tau.shape[1], np.nan),
        "iters": trace.iters,
        "step_time": float(np.mean(trace.step_time[1:])) if len(trace) > 1 else float(trace.step_time[0]),
        "mu_mean": None if trace.mu is None else trace.mu.mean(axis=0),
        "fp_diverged": trace.fp_diverged,
    }


@dataclass
class McReport:
    """Reduction of ``K`` seeded runs of one scenario.

    ``bias`` and ``std`` are per-step, per-joint statistics of ``d - d_hat``
    across runs (population standard deviation); ``bias2_window`` and
    ``var_window`` average ``bias**2`` and ``std**2`` over the inclusive step
    window.  ``rmse`` averages per-run RMSE values.  ``step_time`` is the
    median over runs of the mean wall time per observer update, in seconds
    (the median keeps a one-off compile out); it is kept out of
    :meth:`to_dict` unless asked for.  ``fp_diverged`` totals MKC fixed-point
    stalls over all runs.
    """

    scenario: dict
    runs: int
    base_seed: int
    window: tuple
    bias: np.ndarray
    std: np.ndarray
    bias2_window: np.ndarray
    var_window: np.ndarray
    rmse: dict
    snr_db: np.ndarray
    iters_median: float | None
    mu_mean: np.ndarray | None
    step_time: float
    fp_diverged: int = 0

    def to_dict(self, include_timing: bool = False, include_curves: bool = True) -> dict:
        out = {
            "schema": SCHEMA_VERSION,
            "scenario": self.scenario,
            "runs": self.runs,
            "base_seed": self.base_seed,
            "window": list(self.window),
            "bias2_window": self.bias2_window.tolist(),
            "var_window": self.var_window.tolist(),
            "rmse": {k: v.tolist() for k, v in self.rmse.items()},
            "snr_db": self.snr_db.tolist(),
            "iters_median": self.iters_median,
            "mu_mean": None if self.mu_mean is None else self.mu_mean.tolist(),
            "fp_diverged": self.fp_diverged,
        }
        if include_curves:
            out["bias"] = self.bias.tolist()
            out["std"] = self.std.tolist()
        if include_timing:
            out["step_time_s"] = self.step_time
        return out

    def to_json(self, include_timing: bool = False, include_curves: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing, include_curves), indent=2, sort_keys=True) + "\n"

    def save(self, path, include_timing: bool = False):
        Path(path).write_text(self.to_json(include_timing))


def _window(window, horizon):
    if window is None:
        window = DEFAULT_WINDOW if horizon > DEFAULT_WINDOW[1] else (0, horizon - 1)
    m1, m2 = int(window[0]), int(window[1])
    if not 0 <= m1 <= m2 < horizon:
        raise ConfigError(f"window {window} must lie within the horizon of {horizon} steps")
    return m1, m2


def monte_carlo(scn: SimScenario, K: int, base_seed: int | None = None, workers: int | None = None,
                window=None, burn_in: int = 0, seeds=None) -> McReport:
    """Run ``K`` independent seeded runs (seed ``base_seed + i``) and reduce them.

    ``seeds`` gives the per-run seeds explicitly instead (its length wins over ``K``).
    Runs are spread over ``workers`` threads (default: ``DOBKIT_THREADS`` or
    the CPU count).  The reduction runs in run-index order, so the report does
    not depend on the number of workers or on completion order.  The default
    window is steps 300..450, or the whole horizon when it is shorter.
    """
    base = scn.seed if base_seed is None else int(base_seed)
    seeds = [base + i for i in range(K)] if seeds is None else [int(v) for v in seeds]
    K = len(seeds)
    if K < 2:
        raise ConfigError("monte_carlo needs K >= 2 runs")
    m1, m2 = _window(window, scn.horizon)
    make_plant(scn)  # fail fast on bad parameters

    def one(i):
        return _summarize(run_closed_loop(scn, seeds[i]), burn_in)

    nw = min(worker_count(workers), K)
    if nw == 1:
        results = [one(i) for i in range(K)]
    else:
        with ThreadPoolExecutor(max_workers=nw) as ex:
            results = list(ex.map(one, range(K)))

    E = np.stack([r["err_d"] for r in results])  # (K, N, p)
    bias = E.mean(axis=0)
    std = np.sqrt(np.mean((E - bias) ** 2, axis=0))
    w = slice(m1, m2 + 1)
    rm = {key: np.mean([r["rmse"][key] for r in results], axis=0) for key in TRACKING_COLUMNS}
    its = [r["iters"][1:] for r in results if r["iters"] is not None]
    mus = [r["mu_mean"] for r in results if r["mu_mean"] is not None]
    return McReport(
        scenario=scn.to_dict(),
        runs=K,
        base_seed=base,
        window=(m1, m2),
        bias=bias,
        std=std,
        bias2_window=np.mean(bias[w] ** 2, axis=0),
        var_window=np.mean(std[w] ** 2, axis=0),
        rmse=rm,
        snr_db=np.mean([r["snr"] for r in results], axis=0),
        iters_median=float(np.median(np.concatenate(its))) if its else None,
        mu_mean=np.mean(mus, axis=0) if mus else None,
        step_time=float(np.median([r["step_time"] for r in results])),
        fp_diverged=int(sum(r["fp_diverged"] for r in results)),
    )


def compare(scn: SimScenario, specs: list, K: int, base_seed: int | None = None, workers=None, window=None) -> list:
    """Monte-Carlo every observer spec on the same seeds; returns ``[(label, McReport)]``."""
    return [(observer_label(s), monte_carlo(scn.with_observer(s), K, base_seed, workers, window)) for s in specs]


def table_rows(results: list) -> list[dict]:
    """One flat row per ``(label, McReport)``: observer label, per-signal RMSE, step time."""
    rows = []
    for label, rep in results:
        row = {"observer": label}
        for key in TRACKING_COLUMNS:
            vals = rep.rmse[key]
            for i, v in enumerate(np.atleast_1d(vals)):
                row[f"rmse_{key}" + (f"_{i + 1}" if np.size(vals) > 1 else "")] = float(v)
        row["step_time_us"] = rep.step_time * 1e6
        rows.append(row)
    return rows

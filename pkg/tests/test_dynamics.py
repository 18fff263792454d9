import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from dobkit.dynamics import (
    PRESETS,
    OneDofParams,
    OneDofPlant,
    StribeckParams,
    TwoLinkParams,
    TwoLinkPlant,
    coriolis_expanded,
    exo_transition,
    forward_dynamics,
    load_params,
    numerical_jacobian,
    one_dof_transition,
    params_to_dict,
    stribeck_friction,
    two_link_terms,
)
from dobkit.errors import ConfigError, NonFinite, SingularMass
from dobkit.observers import raw_dob

P = TwoLinkParams()
angles = st.floats(-math.pi, math.pi)
rates = st.floats(-5.0, 5.0)


# ---------------------------------------------------------------------------
# independent Lagrangian oracle built from raw link parameters


def _raw_link_params():
    # raw masses, COM offsets and inertias chosen to map onto the default preset
    m1, m2, l1 = 15.0, 2.0, 0.40
    r1 = (3.746 - m2 * l1) / m1
    h1 = 0.01 / m1
    r2, h2 = 0.592 / m2, 0.01 / m2
    I2 = 0.549 - m2 * (r2**2 + h2**2)
    I1 = 1.671 - 0.549 - m1 * (r1**2 + h1**2) - m2 * l1**2
    return m1, m2, l1, r1, h1, r2, h2, I1, I2


def _lagrangian_oracle():
    t1, t2, w1, w2 = sp.symbols("t1 t2 w1 w2")
    m1, m2, l1, r1, h1, r2, h2, I1, I2 = _raw_link_params()
    g = 9.81
    # planar positions, angles from the downward vertical
    p1 = sp.Matrix([r1 * sp.sin(t1) + h1 * sp.cos(t1), -r1 * sp.cos(t1) + h1 * sp.sin(t1)])
    knee = sp.Matrix([l1 * sp.sin(t1), -l1 * sp.cos(t1)])
    a = t1 + t2
    p2 = knee + sp.Matrix([r2 * sp.sin(a) + h2 * sp.cos(a), -r2 * sp.cos(a) + h2 * sp.sin(a)])
    q, qd = [t1, t2], [w1, w2]
    v1 = p1.jacobian(q) * sp.Matrix(qd)
    v2 = p2.jacobian(q) * sp.Matrix(qd)
    T = sp.Rational(1, 2) * (m1 * v1.dot(v1) + m2 * v2.dot(v2) + I1 * w1**2 + I2 * (w1 + w2) ** 2)
    V = g * (m1 * p1[1] + m2 * p2[1])
    M = sp.hessian(T, qd)
    G = sp.Matrix([sp.diff(V, qi) for qi in q])
    # Coriolis/centrifugal vector from the Euler-Lagrange equations
    dTdq = sp.Matrix([sp.diff(T, qi) for qi in q])
    Mdot_qd = sp.Matrix([sum(sp.diff(M[i, j], q[k]) * qd[k] * qd[j] for j in range(2) for k in range(2)) for i in range(2)])
    h = Mdot_qd - dTdq
    return sp.lambdify((t1, t2, w1, w2), (M, h, G), "numpy")


ORACLE = _lagrangian_oracle()


def _oracle_step(x, tau, dt):
    M, h, G = (np.asarray(v, dtype=float) for v in ORACLE(*x[2:6]))
    acc = np.linalg.solve(M, tau + x[0:2] - h.ravel() - G.ravel())
    return np.concatenate([x[0:2], x[2:4] + dt * x[4:6], x[4:6] + dt * acc])


# ---------------------------------------------------------------------------
# two_link_terms


def test_gravity_at_zero():
    M, C, G = two_link_terms([0, 0], [0, 0], P)
    assert G == pytest.approx([9.81 * 0.02, 9.81 * 0.01], abs=1e-12)
    assert G == pytest.approx([0.19620, 0.09810], abs=1e-5)


def test_m11_at_right_knee():
    M, _, _ = two_link_terms([0.3, math.pi / 2], [0, 0], P)
    assert M[0, 0] == pytest.approx(1.663, abs=1e-12)


def test_coriolis_zero_at_rest():
    _, C, _ = two_link_terms([0.7, -1.2], [0, 0], P)
    assert np.all(C == 0.0)


@given(angles, angles, rates, rates)
def test_terms_match_lagrangian_oracle(t1, t2, w1, w2):
    M, C, G = two_link_terms([t1, t2], [w1, w2], P)
    Mo, ho, Go = (np.asarray(v, dtype=float) for v in ORACLE(t1, t2, w1, w2))
    assert np.allclose(M, Mo, atol=1e-10)
    assert np.allclose(C @ [w1, w2], ho.ravel(), atol=1e-10)
    assert np.allclose(G, Go.ravel(), atol=1e-10)


@given(angles, angles)
def test_mass_symmetric_positive_definite(t1, t2):
    M, _, _ = two_link_terms([t1, t2], [0, 0], P)
    assert abs(M[0, 1] - M[1, 0]) <= 1e-12
    assert np.linalg.eigvalsh(M).min() > 0


def test_skew_symmetry_of_mdot_minus_2c(rng):
    h = 1e-6
    worst = 0.0
    for _ in range(1000):
        th = rng.uniform(-math.pi, math.pi, 2)
        w = rng.uniform(-5, 5, 2)
        M, C, _ = two_link_terms(th, w, P)
        Mp, _, _ = two_link_terms(th + h * w, w, P)
        Mm, _, _ = two_link_terms(th - h * w, w, P)
        N = (Mp - Mm) / (2 * h) - 2 * C
        worst = max(worst, np.abs(N + N.T).max())
    assert worst < 1e-8


def test_expanded_coriolis_same_vector_but_not_skew():
    th, w = np.array([0.2, 0.9]), np.array([1.5, -0.7])
    _, C, _ = two_link_terms(th, w, P)
    Ce = coriolis_expanded(th, w, P)
    assert np.allclose(C @ w, Ce @ w, atol=1e-12)
    h = 1e-6
    Mdot = (two_link_terms(th + h * w, w, P)[0] - two_link_terms(th - h * w, w, P)[0]) / (2 * h)
    N = Mdot - 2 * Ce
    assert np.abs(N + N.T).max() > 1e-3


# ---------------------------------------------------------------------------
# friction


def test_stribeck_zero_rate():
    assert stribeck_friction(0.0, PRESETS["exo-left-leg"]["friction"][1]) == 0.0


def test_stribeck_knee_value():
    knee = StribeckParams(2.582, 6.216, 2.886, 6.495)
    expected = (2.582 + (6.216 - 2.582) * math.exp(-1.0)) + 6.495 * 2.886
    assert stribeck_friction(2.886, knee) == pytest.approx(expected, rel=1e-14)


def test_stribeck_high_rate_asymptote():
    p = StribeckParams(2.0, 6.0, 1.0, 0.5)
    w = 200.0
    assert stribeck_friction(w, p) == pytest.approx(2.0 + 0.5 * w, rel=1e-12)


@given(st.floats(-50, 50))
def test_stribeck_is_odd(w):
    p = PRESETS["exo-left-leg"]["friction"][0]
    assert stribeck_friction(-w, p) == pytest.approx(-stribeck_friction(w, p), abs=1e-12)


def test_stribeck_rejects_bad_params():
    with pytest.raises(ConfigError):
        StribeckParams(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ConfigError):
        StribeckParams(-1.0, 1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# forward dynamics


def test_force_balance_gives_zero_acceleration():
    th, w = np.array([0.3, -0.4]), np.array([0.8, 1.1])
    _, C, G = two_link_terms(th, w, P)
    d = np.array([0.5, -0.2])
    tau = C @ w + G - d
    assert np.allclose(forward_dynamics(th, w, tau, d, P), 0.0, atol=1e-12)


def test_equilibrium_hold():
    _, _, G = two_link_terms([0, 0], [0, 0], P)
    assert np.allclose(forward_dynamics([0, 0], [0, 0], G, [0, 0], P), 0.0, atol=1e-14)


@given(angles, angles, rates, rates, st.floats(-20, 20), st.floats(-20, 20))
def test_forward_inverse_round_trip(t1, t2, w1, w2, d1, d2):
    tau = np.array([1.0, -2.0])
    acc = forward_dynamics([t1, t2], [w1, w2], tau, [d1, d2], P)
    d = raw_dob([t1, t2], [w1, w2], acc, tau, P)
    assert np.allclose(d, [d1, d2], atol=1e-9)


def test_singular_mass_detected():
    # J1 chosen so det M(theta2 = 0) vanishes
    J2, c = 0.549, 0.4 * 0.592
    bad = TwoLinkParams(J1=(J2 + c) ** 2 / J2 - 2 * c, J2=J2, X2=0.592, Y2=0.0)
    M, _, _ = two_link_terms([0, 0], [0, 0], bad)
    assert np.linalg.cond(M) > 1e8 or np.linalg.eigvalsh(M).min() <= 0
    with pytest.raises(SingularMass):
        forward_dynamics([0, 0], [0, 0], [0, 0], [0, 0], bad)


# ---------------------------------------------------------------------------
# 1-DOF map


def test_one_dof_equilibrium():
    assert np.array_equal(one_dof_transition([0, 0, 0], 0.0, 0.01, OneDofParams()), [0.0, 0.0, 0.0])


@given(st.floats(-100, 100), rates, angles, st.floats(-50, 50))
def test_one_dof_holds_disturbance(d, w, th, u):
    assert one_dof_transition([d, w, th], u, 0.01, OneDofParams())[0] == d


def test_one_dof_hand_value():
    x = one_dof_transition([0, 1, 0], 0.0, 0.01, OneDofParams())
    assert x[1] == pytest.approx(0.9, abs=1e-14)
    assert x[2] == pytest.approx(0.01, abs=1e-15)


def test_one_dof_rejects_bad_dt():
    with pytest.raises(ValueError):
        one_dof_transition([0, 0, 0], 0.0, 0.0, OneDofParams())


# ---------------------------------------------------------------------------
# two-link map


@given(angles, angles, rates, rates)
def test_exo_holds_disturbance(t1, t2, w1, w2):
    x = np.array([3.0, -1.0, t1, t2, w1, w2])
    assert np.array_equal(exo_transition(x, [0.5, 0.5], 1e-3, P)[0:2], x[0:2])


def test_exo_static_balance_keeps_angles():
    th = np.array([0.4, 0.6])
    d = np.array([1.0, -0.5])
    _, _, G = two_link_terms(th, [0, 0], P)
    x = np.concatenate([d, th, [0, 0]])
    nxt = exo_transition(x, G - d, 1e-3, P)
    assert np.array_equal(nxt[2:4], th)
    assert np.allclose(nxt[4:6], 0.0, atol=1e-14)


def test_exo_step_matches_oracle_reference():
    x = np.array([0.0, 0.0, 0.1, 0.2, 0.0, 0.0])
    got = exo_transition(x, [0.0, 0.0], 1e-3, P)
    ref = _oracle_step(x, np.zeros(2), 1e-3)
    assert np.round(got, 4) == pytest.approx(np.round(ref, 4), abs=0)
    assert np.allclose(got, ref, atol=1e-12)


@given(angles, angles, rates, rates, st.floats(-30, 30), st.floats(-30, 30))
def test_exo_step_matches_oracle(t1, t2, w1, w2, u1, u2):
    x = np.array([0.3, -0.1, t1, t2, w1, w2])
    assert np.allclose(exo_transition(x, [u1, u2], 1e-3, P), _oracle_step(x, np.array([u1, u2]), 1e-3), atol=1e-10)


def test_energy_drift_is_first_order():
    # frictionless, unforced: Euler gains energy by O(dt) per unit time
    def energy(x):
        M, _, _ = two_link_terms(x[2:4], x[4:6], P)
        m1, m2, l1, r1, h1, r2, h2, _, _ = _raw_link_params()
        t1, t2 = x[2], x[3]
        y1 = -r1 * math.cos(t1) + h1 * math.sin(t1)
        y2 = -l1 * math.cos(t1) - r2 * math.cos(t1 + t2) + h2 * math.sin(t1 + t2)
        return 0.5 * x[4:6] @ M @ x[4:6] + 9.81 * (m1 * y1 + m2 * y2)

    def drift(dt):
        x = np.array([0.0, 0.0, 0.5, 0.3, 0.0, 0.0])
        e0 = energy(x)
        for _ in range(int(round(0.5 / dt))):
            x = exo_transition(x, [0.0, 0.0], dt, P)
        return abs(energy(x) - e0)

    d1, d2 = drift(1e-3), drift(5e-4)
    assert 1.6 < d1 / d2 < 2.4


# ---------------------------------------------------------------------------
# Jacobians


def test_jacobian_of_linear_map(rng):
    A = rng.normal(size=(4, 4))
    J = numerical_jacobian(lambda v: A @ v, rng.normal(size=4))
    assert np.allclose(J, A, atol=1e-10)


@given(rates, angles, st.floats(-100, 100), st.floats(-20, 20))
def test_jacobian_matches_analytic_one_dof(w, th, d, u):
    plant = OneDofPlant()
    x = np.array([d, w, th])
    J = numerical_jacobian(lambda v: plant.transition(v, u), x)
    assert np.abs(J - plant.analytic_jacobian(x)).max() < 1e-6
    assert np.abs(plant.jacobian(x, u) - plant.analytic_jacobian(x)).max() < 1e-6


def test_jacobian_theta_column():
    p = OneDofParams()
    x = np.array([1.0, 0.3, 0.7])
    J = numerical_jacobian(lambda v: one_dof_transition(v, 0.0, 0.01, p), x)
    assert J[1, 2] == pytest.approx(-(0.01 / p.I) * (p.k + p.m * p.g * math.cos(0.7)), abs=1e-6)


def test_jacobian_second_order_convergence():
    plant = OneDofPlant()
    x = np.array([0.0, 0.5, 1.1])
    exact = plant.analytic_jacobian(x)
    f = lambda v: plant.transition(v, 0.0)
    e1 = np.abs(numerical_jacobian(f, x, h=0.2) - exact).max()
    e2 = np.abs(numerical_jacobian(f, x, h=0.1) - exact).max()
    assert 3.5 < e1 / e2 < 4.5


def test_jacobian_two_link_plant_consistent():
    plant = TwoLinkPlant()
    x = np.array([1.0, -2.0, 0.3, 0.8, 0.5, -0.4])
    u = np.array([3.0, 1.0])
    J = numerical_jacobian(lambda v: plant.transition(v, u), x)
    assert np.allclose(plant.jacobian(x, u), J, atol=1e-7)


def test_jacobian_nonfinite_probe():
    with pytest.raises(NonFinite):
        with np.errstate(divide="ignore"):
            numerical_jacobian(lambda v: 1.0 / (v - v), np.ones(2))


def test_jacobian_rejects_bad_step():
    with pytest.raises(ValueError):
        numerical_jacobian(lambda v: v, np.ones(2), h=0.0)


# ---------------------------------------------------------------------------
# parameters


def test_params_validation():
    with pytest.raises(ConfigError):
        TwoLinkParams(J1=-1.0)
    with pytest.raises(ConfigError):
        OneDofParams(I=0.0)
    with pytest.raises(ConfigError):
        TwoLinkParams(g=float("nan"))


def test_load_params_round_trip(tmp_path):
    import json

    pr = load_params("exo-left-leg")
    path = tmp_path / "p.json"
    path.write_text(json.dumps(params_to_dict(pr)))
    back = load_params(path)
    assert back["two_link"] == pr["two_link"]
    assert back["friction"] == pr["friction"]


def test_load_params_override():
    pr = load_params({"preset": "exo-left-leg", "two_link": {"l1": 0.45}})
    assert pr["two_link"].l1 == 0.45
    assert pr["friction"] == PRESETS["exo-left-leg"]["friction"]


def test_load_params_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_params(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        load_params({"two_link": {"bogus": 1.0}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_params(bad)

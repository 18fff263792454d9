import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dobkit.control import (
    BoundInputs,
    DesiredTraj,
    PdGains,
    augmented_pd,
    bound_form,
    lumped_error,
    one_dof_lumped_error,
    one_dof_pd,
    ultimate_bound,
)
from dobkit.dynamics import OneDofParams, TwoLinkParams, forward_dynamics, two_link_terms
from dobkit.errors import ConfigError
from dobkit.simlab import SimScenario, run_closed_loop

P = TwoLinkParams()
GAINS = PdGains([5000.0, 5000.0], [100.0, 100.0])


def test_gains_promotion():
    g = PdGains(10.0, [1.0, 2.0])
    assert np.array_equal(g.Kp, np.diag([10.0, 10.0]))
    assert np.array_equal(g.Kd, np.diag([1.0, 2.0]))
    assert PdGains.uniform(3.0, 1.0, 2).Kp.shape == (2, 2)
    with pytest.raises(ConfigError):
        PdGains([1.0, -1.0], 1.0)
    with pytest.raises(ConfigError):
        PdGains([[1.0, 0.2], [0.2, 1.0]], 1.0)
    with pytest.raises(ConfigError):
        PdGains([1.0, 1.0], [1.0, 1.0, 1.0])


def test_desired_traj_validation_and_sinusoid():
    with pytest.raises(ConfigError):
        DesiredTraj([0.0], [0.0, 1.0], [0.0])
    with pytest.raises(ConfigError):
        DesiredTraj([np.nan], [0.0], [0.0])
    des = DesiredTraj.sinusoid(10.0, 0.2, 0.01, 1000)
    k = np.arange(1000)
    w = 0.4 * math.pi
    assert np.allclose(des.theta[:, 0], 10.0 * np.sin(w * k * 0.01), atol=1e-12)
    # default: an explicit Euler step from (theta, thetadot) lands on the next sample
    assert np.allclose(des.theta[:-1, 0] + 0.01 * des.thetadot[:-1, 0], des.theta[1:, 0], atol=1e-12)
    assert np.allclose(des.thetadot[:-1, 0] + 0.01 * des.thetaddot[:-1, 0], des.thetadot[1:, 0], atol=1e-10)
    ana = DesiredTraj.sinusoid(10.0, 0.2, 0.01, 1000, derivatives="analytic")
    assert np.allclose(ana.thetadot[:, 0], 10.0 * w * np.cos(w * k * 0.01), atol=1e-12)
    assert np.allclose(ana.thetaddot[:, 0], -10.0 * w * w * np.sin(w * k * 0.01), atol=1e-12)
    # forward differences sit within O(dt) of the exact derivatives
    assert np.abs(des.thetadot - ana.thetadot).max() <= 0.5 * 0.01 * 10.0 * w * w
    with pytest.raises(ConfigError):
        DesiredTraj.sinusoid(1.0, 1.0, 0.01, 10, derivatives="spline")
    assert len(des) == 1000 and len(des.at(5)) == 1


def test_perfect_tracking_gives_feedforward():
    th, w, a = np.array([0.3, 0.5]), np.array([0.2, -0.4]), np.array([1.0, 2.0])
    M, C, G = two_link_terms(th, w, P)
    x_hat = np.concatenate([[0.0, 0.0], th, w])
    tau = augmented_pd(x_hat, DesiredTraj(th, w, a), GAINS, P)
    assert np.allclose(tau, M @ a + C @ w + G, atol=1e-12)


def test_static_setpoint_is_gravity_compensation():
    th = np.array([0.4, -0.2])
    _, _, G = two_link_terms(th, [0, 0], P)
    tau = augmented_pd(np.concatenate([[0, 0], th, [0, 0]]), DesiredTraj(th, [0, 0], [0, 0]), GAINS, P)
    assert np.allclose(tau, G, atol=1e-14)


def test_disturbance_estimate_is_subtracted():
    th = np.array([0.4, -0.2])
    des = DesiredTraj(th, [0, 0], [0, 0])
    base = augmented_pd(np.concatenate([[0, 0], th, [0, 0]]), des, GAINS, P)
    tau = augmented_pd(np.concatenate([[2.0, -1.0], th, [0, 0]]), des, GAINS, P)
    assert np.allclose(base - tau, [2.0, -1.0], atol=1e-12)


def test_torque_limit_clamps():
    th = np.array([0.4, -0.2])
    x_hat = np.concatenate([[0, 0], th + 1.0, [0, 0]])
    tau = augmented_pd(x_hat, DesiredTraj(th, [0, 0], [0, 0]), GAINS, P, torque_limit=50.0)
    assert np.all(np.abs(tau) <= 50.0)


def test_one_dof_static_setpoint():
    p = OneDofParams()
    th = 0.3
    tau = one_dof_pd([0.0, 0.0, th], DesiredTraj([th], [0.0], [0.0]), PdGains(100.0, 10.0), p)
    assert tau == pytest.approx(p.k * th + p.m * p.g * math.sin(th), abs=1e-14)


def test_estimate_size_is_checked():
    with pytest.raises(ValueError):
        augmented_pd(np.zeros(3), DesiredTraj([0, 0], [0, 0], [0, 0]), GAINS, P)


@given(
    st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2),
    st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    st.lists(st.floats(-0.2, 0.2), min_size=6, max_size=6),
    st.lists(st.floats(-20, 20), min_size=2, max_size=2),
)
def test_lumped_error_closes_the_error_equation(th, w, err, d):
    th, w, d = np.array(th), np.array(w), np.array(d)
    err = np.array(err)
    des = DesiredTraj(th + [0.1, -0.05], w + [0.3, 0.2], np.array([1.5, -2.0]))
    x_hat = np.concatenate([d + 10 * err[0:2], th + err[2:4], w + err[4:6]])
    tau = augmented_pd(x_hat, des, GAINS, P)
    acc = forward_dynamics(th, w, tau, d, P)
    M, C, _ = two_link_terms(th, w, P)
    e, edot, eddot = th - des.theta, w - des.thetadot, acc - des.thetaddot
    le = lumped_error(th, w, d, x_hat, des, GAINS, P)
    resid = M @ eddot + C @ edot + GAINS.Kd @ edot + GAINS.Kp @ e + le
    assert np.abs(resid).max() < 1e-8 * max(1.0, np.abs(le).max())


@given(st.floats(-2, 2), st.floats(-3, 3), st.floats(-30, 30), st.floats(-0.1, 0.1), st.floats(-0.5, 0.5))
def test_one_dof_lumped_error_identity(th, w, d, dth, dw):
    p = OneDofParams()
    gains = PdGains(100.0, 10.0)
    des = DesiredTraj([th + 0.2], [w - 0.3], [0.7])
    x_hat = np.array([d + 3.0, w + dw, th + dth])
    tau = one_dof_pd(x_hat, des, gains, p)
    acc = (tau + d - p.b * w - p.k * th - p.m * p.g * math.sin(th)) / p.I
    le = one_dof_lumped_error(th, w, d, x_hat, gains, p)
    e, edot, eddot = th - des.theta[0], w - des.thetadot[0], acc - des.thetaddot[0]
    # 1-DOF error equation: I e'' + b e' + k e + kd e' + kp e + l_e = 0
    resid = p.I * eddot + p.b * edot + p.k * e + 10.0 * edot + 100.0 * e + le
    assert abs(resid) < 1e-9 * max(1.0, abs(le))


def test_exact_estimates_decay_exponentially():
    scn = SimScenario(
        plant="two-link", dt=1e-3, horizon=1500,
        trajectory={"amplitude": [0.3, 0.4], "freq_hz": 0.3, "offset": [0.1, 0.5]},
        gains={"kp": 5000.0, "kd": 100.0}, observer={"type": "oracle"},
        noise={"R": [1e-8, 1e-8, 1e-4, 1e-4]},
        disturbance={"kind": "constant", "params": {"value": [3.0, -2.0]}, "noise_std": 0.0},
        init_offset=(0.05, -0.05),
    )
    tr = run_closed_loop(scn)
    assert np.abs(tr.l_e).max() < 1e-9
    err = np.linalg.norm(tr.theta_d - tr.theta, axis=1)
    # fit while the transient dominates the O(dt) discretization floor
    k = np.arange(0, 150)
    rate = -np.polyfit(k * 1e-3, np.log(err[k]), 1)[0]
    assert rate > 0
    assert err[-1] < 1e-3 * err[0]


# ---------------------------------------------------------------------------
# ultimate bound


def test_kappa_examples():
    assert ultimate_bound(GAINS, BoundInputs(0.0)) == 0.0
    k1 = ultimate_bound(GAINS, BoundInputs(1.0, eps=0.01))
    assert k1 == pytest.approx(0.5 * (1 / 100 + 0.01 / 5000), rel=1e-15)
    assert k1 == pytest.approx(0.005001, rel=1e-12)
    assert ultimate_bound(GAINS, BoundInputs(2.0)) == pytest.approx(4 * k1, rel=1e-15)


@given(st.floats(1, 1e4), st.floats(1, 1e4), st.floats(1, 1e3), st.floats(1, 1e3))
def test_kappa_monotone_in_gains(kp, kp_extra, kd, kd_extra):
    b = BoundInputs(3.0, eps=0.05)
    base = ultimate_bound(PdGains([kp, kp + kp_extra], [kd, kd + kd_extra]), b)
    assert ultimate_bound(PdGains([kp * 2, kp + kp_extra], [kd, kd + kd_extra]), b) <= base
    assert ultimate_bound(PdGains([kp, kp + kp_extra], [kd * 2, kd + kd_extra]), b) <= base


def test_bound_inputs_validation():
    with pytest.raises(ConfigError):
        BoundInputs(-1.0)
    with pytest.raises(ConfigError):
        BoundInputs(1.0, eps=0.0)
    with pytest.raises(ConfigError):
        BoundInputs(float("inf"))


def test_bound_form_rows():
    b = BoundInputs(1.0, alpha1=2.0, alpha2=3.0)
    v = bound_form([[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 1.0]], b)
    assert np.allclose(v, [2.0 + 3.0, 2.0 + 6.0])

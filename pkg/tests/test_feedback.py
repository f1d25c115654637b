import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modecoupling import feedback as fb
from modecoupling.fullsim import Controls, Simulator, state_from_energies
from modecoupling.model import K_B, BathParams, FeedbackConfig, validate_config


def _fc(gain, sign="cool", eta_max=0.1, mode="y"):
    return FeedbackConfig(mode, gain, sign, eta_max)


def test_zero_gain_is_silent(cfg):
    eta = fb.parametric_signal([1e-9, -2e-9], [3e-3, 1e-3], _fc(0.0), cfg.trap)
    assert np.all(eta == 0)


def test_clamp(cfg):
    eta = fb.parametric_signal(1e-9, 1e-9 * cfg.trap.omega_y, _fc(5.0), cfg.trap)
    assert eta == pytest.approx(0.1)
    eta = fb.parametric_signal(1e-9, 1e-9 * cfg.trap.omega_y, _fc(5.0, "heat"), cfg.trap)
    assert eta == pytest.approx(-0.1)


@given(st.floats(-1e-8, 1e-8), st.floats(-1e-2, 1e-2), st.floats(0, 1))
def test_signal_bounded_and_antisymmetric(x, v, gain):
    trap = validate_config({}).trap
    cool = fb.parametric_signal(x, v, _fc(gain), trap)
    heat = fb.parametric_signal(x, v, _fc(gain, "heat"), trap)
    assert abs(cool) <= 0.1 + 1e-15
    assert cool == pytest.approx(-heat)


def test_steady_state():
    kT = K_B * 300
    assert fb.steady_state_energy(kT, 10.0, 0.0) == pytest.approx(kT)
    assert fb.steady_state_energy(kT, 10.0, 990.0) == pytest.approx(kT / 100)
    with pytest.raises(ValueError):
        fb.steady_state_energy(kT, 0.0, 0.0)


def test_calibration_without_gain_returns_bath_rate(cfg):
    c = cfg.replace(bath__gamma_hz=50.0)
    cal = fb.calibrate_feedback_rate(c, 0.0, seed=1, duration=10e-3)
    assert cal.rate == pytest.approx(c.bath.gamma, rel=0.02)


def test_calibration_tracks_ideal_rate_and_is_monotonic(quiet_cfg):
    rates = []
    for g in (1e-4, 2e-4, 4e-4):
        cal = fb.calibrate_feedback_rate(quiet_cfg, g, seed=1)
        assert cal.ci[0] < cal.rate < cal.ci[1]
        assert cal.rate == pytest.approx(fb.ideal_rate(g, quiet_cfg.trap.omega_y), rel=0.1)
        rates.append(cal.rate)
    assert rates == sorted(rates)


def test_heating_sign_grows(quiet_cfg):
    c = quiet_cfg.replace(feedback__sign="heat")
    cal = fb.calibrate_feedback_rate(c, 2e-4, seed=1, duration=5e-3)
    assert cal.rate < 0


def test_other_mode_untouched(quiet_cfg):
    c = quiet_cfg
    kT = K_B * 300
    sim = Simulator(c.trap, c.particle, BathParams(300, 0.0), thermal=False, sample_rate=5e6)
    sim.set_state(state_from_energies(kT, kT, c.trap, c.mass, 0.2, 0.9))
    periods = 100 * 2 * math.pi / c.trap.omega_x
    tr = sim.run_for(periods, Controls(c.drive.off(), 0.0, _fc(4e-4)))
    ex, ey = tr.mode_energies(c.trap, c.mass)
    _, exm = fb.period_average(tr.t, ex, 2 * math.pi / c.trap.omega_x)
    assert np.max(np.abs(exm / exm[0] - 1)) < 0.05
    assert ey[-1] < ey[0]

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from modecoupling import analysis as an
from modecoupling import fullsim as fs
from modecoupling.model import K_B, InvalidParameterError, NoiseModel


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.sampled_from([256, 1024, 4096]))
def test_parseval_white_noise(seed, nperseg):
    x = np.random.default_rng(seed).normal(0, 2.0, 1 << 16)
    psd = an.welch_psd(x, 1e5, nperseg=nperseg)
    assert psd.area() == pytest.approx(np.var(x), rel=0.1)


def test_welch_rejects_long_segments():
    with pytest.raises(an.ConfigError):
        an.welch_psd(np.zeros(100), 1.0, nperseg=128)


def test_lorentzian_recovery():
    f = np.linspace(100e3, 130e3, 600)
    w0, g, a = 2 * math.pi * 115e3, 2 * math.pi * 300, 1e-2
    y = an.lorentzian(f, w0, g, a, 1e-24)
    y = y * np.random.default_rng(3).gamma(50, 1 / 50, f.size)
    est = an.LorentzianPSD().fit(f[:, None], y)
    res = est.result()
    assert res.omega0 == pytest.approx(w0, rel=1e-4)
    assert res.gamma == pytest.approx(g, rel=0.1)
    assert np.isfinite(res.stderr).all()
    assert est.predict(f[:3, None]).shape == (3,)


def test_noise_only_fit_fails():
    x = np.random.default_rng(0).normal(0, 1, 1 << 15)
    psd = an.welch_psd(x, 5e5, nperseg=1024)
    with pytest.raises(an.FitFailedError):
        an.fit_lorentzian(psd, f0_guess=115e3)


def test_estimator_is_clonable():
    est = an.LorentzianPSD(f0_guess=1e5, min_significance=10.0)
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert c.get_params()["f0_guess"] == 1e5


def test_thermal_psd_fit(cfg):
    c = cfg.replace(bath__gamma_hz=2000.0, drive__phi0_rad=0.0)
    tr = fs.run(c, duration=100e-3, seed=11)
    psd = an.welch_psd(tr.x, 1 / (tr.t[1] - tr.t[0]), nperseg=1 << 14)
    fit = an.fit_lorentzian(psd, f0_guess=115e3)
    assert fit.f0 == pytest.approx(115e3, abs=3 * fit.stderr[0] / (2 * math.pi) + psd.resolution)
    assert fit.temperature(c.mass) == pytest.approx(300, rel=0.2)


def test_quadrature_variance():
    assert an.quadrature_variance(2.0, 100) == pytest.approx(0.04)
    assert an.quadrature_variance(1.0, 50) == 2 * an.quadrature_variance(1.0, 100)
    with pytest.raises(InvalidParameterError):
        an.quadrature_variance(1.0, 0)


@given(st.floats(1e-20, 1e-10), st.floats(1e-5, 1.0))
def test_cooling_limit_scaling(s, tau):
    m, w = 1e-17, 2 * math.pi * 1e5
    e1, t1 = an.cooling_limit(m, w, s, tau)
    e2, _ = an.cooling_limit(m, w, 2 * s, tau)
    e3, _ = an.cooling_limit(m, w, s, tau / 2)
    assert e2 == pytest.approx(2 * e1) and e3 == pytest.approx(2 * e1)
    assert t1 == pytest.approx(e1 / K_B)


def test_cooling_limit_guards():
    assert an.cooling_limit(1e-17, 1e6, 0.0, 1e-3) == (0.0, 0.0)
    with pytest.raises(InvalidParameterError):
        an.cooling_limit(1e-17, 1e6, 1e-20, 0.0)
    with pytest.raises(InvalidParameterError):
        an.cooling_limit(1e-17, 1e6, -1.0, 1e-3)


def test_energy_timeseries_flat(quiet_cfg):
    c = quiet_cfg.replace(drive__phi0_rad=0.0)
    kT = K_B * 300
    s0 = fs.state_from_energies(kT, 0.0, c.trap, c.mass, 0.4, 0.0)
    tr = fs.run(c, duration=2e-3, state=s0)
    rec = fs.measure(tr, NoiseModel(0.0, c.noise.sample_rate), np.random.default_rng(0))
    es = an.energy_timeseries(rec, c.trap.omega_x, c.mass, 100e-6)
    assert np.allclose(es.kbt, 1.0, rtol=0.01)


def test_equipartition_scale():
    m, w, t0 = 1e-17, 2 * math.pi * 1e5, 300.0
    area_m2 = K_B * t0 / (m * w**2)
    gain = 2.5e-6
    assert an.equipartition_scale(area_m2 / gain**2, m, w, t0) == pytest.approx(gain)
    with pytest.raises(InvalidParameterError):
        an.equipartition_scale(0.0, m, w, t0)

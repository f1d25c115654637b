import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from modecoupling.model import (
    HBAR,
    K_B,
    ConfigError,
    DriveParams,
    FeedbackConfig,
    InvalidParameterError,
    NoiseModel,
    TrapParams,
    coupling_rate,
    ground_state_temperature,
    hz_to_rad,
    load_config,
    mass_from_geometry,
    parse_config_text,
    rad_to_hz,
    validate_config,
)


def test_default_trap_frequencies(cfg):
    assert cfg.trap.omega_x == pytest.approx(2 * math.pi * 115e3, rel=1e-15)
    assert cfg.trap.omega_y == pytest.approx(2 * math.pi * 141e3, rel=1e-15)
    assert cfg.trap.delta_omega == pytest.approx(2 * math.pi * 26e3, rel=1e-12)


def test_defaults_room_temperature_and_silica(cfg):
    assert cfg.bath.temperature == 300.0
    assert cfg.particle.density == 2200.0
    assert cfg.mass == pytest.approx(2.8976e-18, rel=1e-4)


def test_ground_state_temperature_reference():
    assert ground_state_temperature(2 * math.pi * 141e3) == pytest.approx(6.767e-6, rel=1e-3)
    assert ground_state_temperature(K_B / HBAR) == pytest.approx(1.0, rel=1e-14)
    assert ground_state_temperature(2e5) == pytest.approx(2 * ground_state_temperature(1e5), rel=1e-15)
    with pytest.raises(InvalidParameterError):
        ground_state_temperature(0.0)


def test_coupling_rate_examples(cfg):
    assert coupling_rate(0.0, cfg.trap) == 0.0
    assert coupling_rate(0.01, cfg.trap) == pytest.approx(2 * math.pi * 260.0, rel=1e-12)
    assert coupling_rate(-0.01, cfg.trap) == -coupling_rate(0.01, cfg.trap)
    ratio = coupling_rate(0.01, cfg.trap, exact=True) / coupling_rate(0.01, cfg.trap)
    assert 1.0 < ratio < 1.01


def test_degenerate_trap_rejected():
    with pytest.raises(InvalidParameterError):
        TrapParams(1e5, 1e5)
    with pytest.raises(ConfigError) as exc:
        validate_config({"trap.f_x_khz": 141})
    assert "trap" in str(exc.value)


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError) as exc:
        validate_config({"trap.f_z_khz": 1})
    assert exc.value.field == "trap.f_z_khz"


def test_bad_value_names_field():
    with pytest.raises(ConfigError) as exc:
        validate_config({"drive.phi0_rad": "lots"})
    assert exc.value.field == "drive.phi0_rad"


def test_missing_temperature_defaults():
    assert validate_config({"trap.f_x_khz": 100}).bath.temperature == 300.0


def test_idempotent(cfg):
    again = validate_config(cfg)
    assert again is cfg
    assert validate_config(cfg.to_raw()) == cfg
    assert hash(validate_config(cfg.to_raw())) == hash(cfg)


def test_replace_and_text_roundtrip(cfg, tmp_path):
    c2 = cfg.replace(drive__phi0_rad=0.02)
    assert c2.drive.phi0 == 0.02 and c2 != cfg
    p = tmp_path / "c.cfg"
    p.write_text(c2.to_text())
    assert load_config(p) == c2


def test_parse_rejects_duplicates_and_garbage():
    assert parse_config_text("a.b = 1  # note\n\n# full comment\n") == {"a.b": "1"}
    with pytest.raises(ConfigError):
        parse_config_text("a.b = 1\na.b = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here\n")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_parameter_guards():
    with pytest.raises(InvalidParameterError):
        DriveParams(phi0=1.0, omega_mod=1.0)
    with pytest.raises(InvalidParameterError):
        DriveParams(phi0=0.01, omega_mod=0.0)
    with pytest.raises(InvalidParameterError):
        FeedbackConfig(eta_max=0.2)
    with pytest.raises(InvalidParameterError):
        FeedbackConfig(gain=-1.0)
    with pytest.raises(InvalidParameterError):
        NoiseModel(sample_rate=1e5).check_nyquist(TrapParams(1e6, 2e6))


def test_feedback_rate_sign(cfg):
    fb = FeedbackConfig("y", 1e-3)
    assert fb.rate(cfg.trap) == pytest.approx(0.5e-3 * cfg.trap.omega_y)
    assert FeedbackConfig("y", 1e-3, "heat").rate(cfg.trap) == -fb.rate(cfg.trap)
    assert FeedbackConfig("y", 1e-3, gamma_fb=7.0).rate(cfg.trap) == 7.0


def test_noise_sample_variance():
    assert NoiseModel(1e-24, 5e6).sample_variance == pytest.approx(2.5e-18)


@given(st.floats(1e-3, 1e9, allow_nan=False))
def test_unit_roundtrip(f):
    assert rad_to_hz(hz_to_rad(f)) == pytest.approx(f, rel=1e-15)


@given(st.floats(1e-9, 1e-6), st.floats(100, 2e4), st.floats(1.01, 2.0))
def test_mass_monotone(d, rho, k):
    m = mass_from_geometry(d, rho)
    assert mass_from_geometry(d * k, rho) > m
    assert mass_from_geometry(d, rho * k) > m

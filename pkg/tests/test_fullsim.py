import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modecoupling import fullsim as fs
from modecoupling.analysis import welch_psd
from modecoupling.fullsim import Controls, SimState, Simulator, Trajectory
from modecoupling.model import K_B, BathParams, ConfigError, NoiseModel, validate_config


def test_force_unrotated(cfg):
    fx, fy = fs.potential_force(1e-8, -2e-8, 0.0, cfg.trap, cfg.particle)
    m = cfg.mass
    assert fx == pytest.approx(-m * cfg.trap.omega_x**2 * 1e-8, rel=1e-14)
    assert fy == pytest.approx(m * cfg.trap.omega_y**2 * 2e-8, rel=1e-14)


def test_force_quarter_turn_swaps_stiffness(cfg):
    fx, fy = fs.potential_force(1e-8, 1e-8, math.pi / 2, cfg.trap, 1.0)
    assert fx == pytest.approx(-cfg.trap.omega_y**2 * 1e-8, rel=1e-12)
    assert fy == pytest.approx(-cfg.trap.omega_x**2 * 1e-8, rel=1e-12)


def test_force_small_angle_cross_term(cfg):
    phi, x, y = 1e-3, 1e-8, 2e-8
    wx2, wy2 = cfg.trap.omega_x**2, cfg.trap.omega_y**2
    fx, _ = fs.potential_force(x, y, phi, cfg.trap, 1.0)
    approx = -wx2 * x - (wx2 - wy2) * phi * y
    # the neglected terms are O(phi^2) relative to the on-axis force
    assert fx == pytest.approx(approx, rel=1e-6 + 2 * phi**2 * wy2 / wx2)


@given(st.floats(-1e-7, 1e-7), st.floats(-1e-7, 1e-7), st.floats(-math.pi, math.pi))
def test_force_is_gradient(x, y, phi):
    trap = validate_config({}).trap

    def u(x, y):
        c, s = math.cos(phi), math.sin(phi)
        return 0.5 * (trap.omega_x**2 * (c * x + s * y) ** 2 + trap.omega_y**2 * (-s * x + c * y) ** 2)

    h = 1e-12
    fx, fy = fs.potential_force(x, y, phi, trap, 1.0)
    scale = trap.omega_y**2 * 1e-7
    assert fx == pytest.approx(-(u(x + h, y) - u(x - h, y)) / (2 * h), abs=1e-5 * scale)
    assert fy == pytest.approx(-(u(x, y + h) - u(x, y - h)) / (2 * h), abs=1e-5 * scale)


def test_dt_guard(cfg):
    with pytest.raises(ConfigError):
        Simulator(cfg.trap, cfg.particle, cfg.bath, dt=2 * math.pi / cfg.trap.omega_y / 10)


def test_choose_timestep_divides_sample_interval(cfg):
    dt, k = fs.choose_timestep(cfg.trap, 200, 5e6)
    assert k * dt == pytest.approx(2e-7, rel=1e-15)
    assert dt <= 2 * math.pi / cfg.trap.omega_y / 200


def test_free_oscillation(cfg):
    x0 = 1e-8
    sim = Simulator(cfg.trap, cfg.particle, BathParams(300, 0), steps_per_period=200, thermal=False,
                    state=SimState(x=x0), sample_rate=5e6)
    tr = sim.run_for(1e-3, Controls())
    assert np.allclose(tr.x, x0 * np.cos(cfg.trap.omega_x * tr.t), atol=1e-6 * x0)
    assert np.all(tr.y == 0)


def _shadow(sim, tr):
    kx, ky = sim.stiffness()
    h = sim.dt
    return (tr.vx**2 + kx * (1 - kx * h * h / 4) * tr.x**2) + (tr.vy**2 + ky * (1 - ky * h * h / 4) * tr.y**2)


@pytest.mark.parametrize("phi", [0.0, 0.3])
def test_conservative_limit(cfg, phi):
    # dt = period/100; 1e4 periods of the slower mode
    sim = Simulator(cfg.trap, cfg.particle, BathParams(300, 0), steps_per_period=100, thermal=False,
                    state=SimState(x=1e-8, vy=1e-3), frequency_matched=phi == 0.0)
    n = int(1e4 * 2 * math.pi / cfg.trap.omega_x / sim.dt)
    tr = sim.advance(n, Controls(phi_static=phi), record_every=1000)
    if phi == 0.0:
        e = _shadow(sim, tr)
    else:
        # rotated static trap: total energy; the Verlet ripple is bounded, not secular
        pot = np.array([fs_pot(x, y, phi, cfg.trap) for x, y in zip(tr.x, tr.y)])
        e = 0.5 * (tr.vx**2 + tr.vy**2) + pot
        half = len(e) // 2
        drift = abs(e[half:].mean() - e[:half].mean()) / e.mean()
        assert drift < 1e-6
        return
    assert np.max(np.abs(e / e[0] - 1)) < 1e-6


def fs_pot(x, y, phi, trap):
    c, s = math.cos(phi), math.sin(phi)
    return 0.5 * (trap.omega_x**2 * (c * x + s * y) ** 2 + trap.omega_y**2 * (-s * x + c * y) ** 2)


def test_damped_energy_decay(cfg):
    gamma = 300.0
    sim = Simulator(cfg.trap, cfg.particle, BathParams(300, gamma), thermal=False,
                    state=SimState(x=1e-8), sample_rate=5e6)
    tr = sim.run_for(10e-3, Controls())
    ex, _ = tr.mode_energies(cfg.trap, cfg.mass)
    from modecoupling.feedback import period_average

    tm, em = period_average(tr.t, ex, 2 * math.pi / cfg.trap.omega_x)
    rate = -np.polyfit(tm, np.log(em), 1)[0]
    assert rate == pytest.approx(gamma, rel=0.01)


def test_step_is_deterministic(cfg):
    s0 = SimState(1e-8, 0.0, 0.0, 1e-3)
    bath = BathParams(300, 100.0)
    a = fs.step(s0, Controls(), bath, 1e-8, np.random.default_rng(1), cfg.trap, cfg.particle)
    b = fs.step(s0, Controls(), bath, 1e-8, np.random.default_rng(1), cfg.trap, cfg.particle)
    assert a == b and a.t == pytest.approx(1e-8)


def test_run_bit_identical(cfg):
    c = cfg.replace(bath__gamma_hz=100.0)
    a = fs.run(c, duration=1e-3, seed=4)
    b = fs.run(c, duration=1e-3, seed=4)
    d = fs.run(c, duration=1e-3, seed=5)
    assert a.x.tobytes() == b.x.tobytes() and a.vy.tobytes() == b.vy.tobytes()
    assert not np.array_equal(a.x, d.x)


def test_run_zero_duration(cfg):
    tr = fs.run(cfg, duration=0.0, state=SimState(x=1e-8))
    assert len(tr) == 1 and tr.x[0] == 1e-8


def test_segments_tile_one_grid(cfg):
    c = cfg.replace(bath__gamma_hz=50.0)
    one = Simulator(c.trap, c.particle, c.bath, seed=3, sample_rate=5e6, state=SimState(x=1e-8))
    whole = one.advance(3001, Controls(c.drive))
    two = Simulator(c.trap, c.particle, c.bath, seed=3, sample_rate=5e6, state=SimState(x=1e-8))
    parts = [two.advance(n, Controls(c.drive)) for n in (7, 1000, 1994)]
    joined = Trajectory.concatenate(parts)
    assert np.array_equal(whole.t, joined.t)
    assert np.array_equal(whole.x, joined.x)
    assert np.allclose(np.diff(joined.t), 2e-7, rtol=1e-9)


def test_csv_and_binary_roundtrip(cfg, tmp_path):
    tr = fs.run(cfg, duration=50e-6, seed=2, state=SimState(x=1e-8))
    tr.to_csv(tmp_path / "traj.csv")
    assert (tmp_path / "traj.csv").read_text().splitlines()[0] == "t_s,x_m,vx_ms,y_m,vy_ms"
    back = Trajectory.from_csv(tmp_path / "traj.csv")
    assert np.array_equal(back.x, tr.x) and back.seed == 2 and back.dt == tr.dt
    assert back.config_hash == tr.config_hash == fs.config_hash(cfg)
    tr.to_binary(tmp_path / "traj.bin")
    arr = np.fromfile(tmp_path / "traj.bin", dtype="<f8").reshape(-1, 5)
    assert np.array_equal(arr[:, 3], tr.y)


def test_init_thermal(cfg):
    rng = np.random.default_rng(0)
    assert fs.init_thermal((0, 0), cfg.trap, cfg.particle, rng) == SimState()
    kT = K_B * 300
    e = []
    for _ in range(10000):
        s = fs.init_thermal((450.0, 75.0), cfg.trap, cfg.particle, rng)
        e.append((0.5 * cfg.mass * (s.vx**2 + cfg.trap.omega_x**2 * s.x**2) / kT,
                  0.5 * cfg.mass * (s.vy**2 + cfg.trap.omega_y**2 * s.y**2) / kT))
    e = np.array(e)
    sem = e.std(axis=0, ddof=1) / 100
    assert np.all(np.abs(e.mean(axis=0) - [1.5, 0.25]) < 3 * sem)


def test_state_from_energies(cfg):
    kT = K_B * 300
    s = fs.state_from_energies(1.5 * kT, 0.25 * kT, cfg.trap, cfg.mass, 0.4, -1.0, t=3e-6)
    ex = 0.5 * cfg.mass * (s.vx**2 + cfg.trap.omega_x**2 * s.x**2)
    assert ex == pytest.approx(1.5 * kT, rel=1e-12)
    assert np.angle(s.mode_amplitude("y", cfg.trap)) == pytest.approx(-1.0, abs=1e-12)


def test_measure_noise_level(cfg):
    tr = Trajectory(np.arange(200000) / 5e6, *np.zeros((4, 200000)), dt=2e-7)
    rec = fs.measure(tr, NoiseModel(1e-22, 5e6), np.random.default_rng(1))
    psd = welch_psd(rec.x, 5e6, nperseg=4096)
    assert psd.psd[5:-5].mean() == pytest.approx(1e-22, rel=0.1)
    clean = fs.measure(tr, NoiseModel(0.0, 5e6), np.random.default_rng(1))
    assert np.array_equal(clean.x, tr.x)


def test_demodulate_tone():
    w = 2 * math.pi * 115e3
    t = np.arange(100000) / 5e6
    x0 = 3e-9
    tc, c = fs.demodulate((t, x0 * np.cos(w * t)), w, 50 * 2 * math.pi / w)
    assert np.allclose(np.abs(c), x0, rtol=1e-3)
    assert np.allclose(tc[1:] - tc[:-1], tc[1] - tc[0])


def test_demodulate_leakage_null():
    w, dw = 2 * math.pi * 115e3, 2 * math.pi * 5e3
    t = np.arange(100000) / 5e6
    _, c = fs.demodulate((t, np.cos((w + dw) * t)), w, 2 * math.pi / dw, whole_periods=False)
    assert np.max(np.abs(c)) < 0.01


def test_demodulate_guards():
    w = 2 * math.pi * 115e3
    t = np.arange(10000) / 5e6
    with pytest.raises(ConfigError):
        fs.demodulate((t, np.cos(w * t)), w, 2 * 2 * math.pi / w)
    with pytest.raises(ConfigError):
        fs.demodulate((t, np.cos(w * t)), w, 1e-3, omega_rabi=2 * math.pi * 500)


def test_demodulate_quadrature_variance():
    rng = np.random.default_rng(7)
    w = 2 * math.pi * 115e3
    n = 300
    t = np.arange(n) / 5e6
    sigma = 1.0
    q = rng.normal(0, sigma, (1000, n))
    c = np.array([fs.demodulate((t, row), w, n / 5e6, whole_periods=False)[1][0] for row in q])
    assert np.var(c.real) == pytest.approx(2 * sigma**2 / n, rel=0.2)


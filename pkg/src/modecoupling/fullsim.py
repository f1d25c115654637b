"""Stochastic 2D simulation of the particle in the rotating-polarization trap.

Equation of motion per axis::

    m dv/dt = F(x, y, phi(t)) * (1 + eta(t)) - m gamma v + sqrt(2 m gamma k_B T0) xi(t)

with the exact rotated harmonic potential
``U = m/2 [wx^2 x'^2 + wy^2 y'^2]``, ``(x', y') = R(-phi) (x, y)`` and
``phi(t) = phi_static + phi0 cos(omega_mod t - psi)``.

The integrator is BAOAB (kick, drift, exact Ornstein-Uhlenbeck, drift, kick).
With gamma = 0 it reduces to velocity Verlet. Gaussian increments are drawn
in blocks from a seeded :class:`numpy.random.Generator` and handed to a
compiled kernel, so a run is bit-reproducible from its seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .model import (
    K_B,
    BathParams,
    Config,
    ConfigError,
    DriveParams,
    FeedbackConfig,
    NoiseModel,
    ParticleParams,
    TrapParams,
)

__all__ = [
    "SimState",
    "Controls",
    "Trajectory",
    "MeasuredRecord",
    "FeedbackState",
    "Simulator",
    "potential_force",
    "step",
    "run",
    "init_thermal",
    "state_from_energies",
    "measure",
    "demodulate",
    "choose_timestep",
    "config_hash",
]

_BLOCK = 1 << 16
_TRAJ_HEADER = ("t_s", "x_m", "vx_ms", "y_m", "vy_ms")


@dataclass(frozen=True)
class SimState:
    x: float = 0.0
    vx: float = 0.0
    y: float = 0.0
    vy: float = 0.0
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.vx, self.y, self.vy])

    def mode_amplitude(self, mode: str, trap: TrapParams) -> complex:
        """Complex amplitude X with q = Re[X exp(-i Omega t)]."""
        if mode == "x":
            q, v, w = self.x, self.vx, trap.omega_x
        else:
            q, v, w = self.y, self.vy, trap.omega_y
        return (q + 1j * v / w) * complex(math.cos(w * self.t), math.sin(w * self.t))


@dataclass(frozen=True)
class Controls:
    drive: DriveParams = field(default_factory=DriveParams)
    phi_static: float = 0.0
    feedback: FeedbackConfig | None = None


@dataclass
class FeedbackState:
    """Lock-in quadratures of the target mode (two cascaded low-pass stages)."""

    i1: float = 0.0
    q1: float = 0.0
    i2: float = 0.0
    q2: float = 0.0
    eta: float = 0.0
    clamped: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.i1, self.q1, self.i2, self.q2, self.eta, float(self.clamped)])

    def update(self, arr: np.ndarray) -> None:
        self.i1, self.q1, self.i2, self.q2, self.eta = (float(v) for v in arr[:5])
        self.clamped = int(arr[5])

    @classmethod
    def locked(cls, state: SimState, mode: str, trap: TrapParams) -> "FeedbackState":
        """Start with the filters already settled on the current amplitude."""
        amp = state.mode_amplitude(mode, trap)
        i, q = amp.real / 2, amp.imag / 2
        return cls(i, q, i, q)


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    vx: np.ndarray
    y: np.ndarray
    vy: np.ndarray
    dt: float
    seed: int | None = None
    config_hash: str = ""
    eta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def record_dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else self.dt

    def state(self, i: int = -1) -> SimState:
        return SimState(self.x[i], self.vx[i], self.y[i], self.vy[i], self.t[i])

    def mode_energies(self, trap: TrapParams, mass: float):
        """Coordinate energies ``m/2 (v^2 + Omega^2 q^2)`` per axis, joules."""
        ex = 0.5 * mass * (self.vx**2 + trap.omega_x**2 * self.x**2)
        ey = 0.5 * mass * (self.vy**2 + trap.omega_y**2 * self.y**2)
        return ex, ey

    def mode_amplitudes(self, trap: TrapParams):
        ax = (self.x + 1j * self.vx / trap.omega_x) * np.exp(1j * trap.omega_x * self.t)
        ay = (self.y + 1j * self.vy / trap.omega_y) * np.exp(1j * trap.omega_y * self.t)
        return ax, ay

    @classmethod
    def concatenate(cls, parts: list["Trajectory"]) -> "Trajectory":
        first = parts[0]
        cols = {k: np.concatenate([getattr(p, k) for p in parts]) for k in ("t", "x", "vx", "y", "vy")}
        eta = None
        if all(p.eta is not None for p in parts):
            eta = np.concatenate([p.eta for p in parts])
        return cls(**cols, dt=first.dt, seed=first.seed, config_hash=first.config_hash,
                   eta=eta, meta=dict(first.meta))

    def to_csv(self, path: str | Path, with_eta: bool = False) -> None:
        path = Path(path)
        cols = [self.t, self.x, self.vx, self.y, self.vy]
        header = list(_TRAJ_HEADER)
        if with_eta and self.eta is not None:
            cols.append(self.eta)
            header.append("eta")
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])
        meta = {"config_hash": self.config_hash, "seed": self.seed, "dt": self.dt, **self.meta}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def to_binary(self, path: str | Path) -> None:
        """Row-major little-endian float64, 5 columns in CSV order, no header."""
        arr = np.column_stack([self.t, self.x, self.vx, self.y, self.vy]).astype("<f8")
        Path(path).write_bytes(arr.tobytes())

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[0] == 0 or data.shape[1] < 5:
            raise ValueError(f"{path}: expected at least 5 columns and one row")
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        t = data[:, 0]
        dt = meta.pop("dt", float(t[1] - t[0]) if len(t) > 1 else 0.0)
        return cls(
            t, data[:, 1], data[:, 2], data[:, 3], data[:, 4], dt,
            seed=meta.pop("seed", None), config_hash=meta.pop("config_hash", ""),
            eta=data[:, 5] if data.shape[1] > 5 else None, meta=meta,
        )


@dataclass
class MeasuredRecord:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    sample_rate: float
    channels: tuple[str, str] = ("x", "y")

    def channel(self, name: str) -> np.ndarray:
        if name == "x":
            return self.x
        if name == "y":
            return self.y
        raise ValueError(f"unknown channel {name!r}")

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t_s", "x_m", "y_m"))
            for row in zip(self.t, self.x, self.y):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "MeasuredRecord":
        return cls(traj.t, traj.x, traj.y, 1.0 / traj.record_dt)


# ---------------------------------------------------------------------------
# force and kernel


def potential_force(x, y, phi, trap: TrapParams, particle: ParticleParams | float):
    """Force of the harmonic potential rotated by ``phi`` about the optical axis."""
    m = particle if isinstance(particle, (int, float)) else particle.mass
    c, s = np.cos(phi), np.sin(phi)
    xr = c * x + s * y
    yr = -s * x + c * y
    kx = trap.omega_x**2 * xr
    ky = trap.omega_y**2 * yr
    return -m * (kx * c - ky * s), -m * (kx * s + ky * c)


@numba.njit(cache=True)
def _accel(x, y, phi, wx2, wy2, scale):
    c = math.cos(phi)
    s = math.sin(phi)
    kx = wx2 * (c * x + s * y)
    ky = wy2 * (-s * x + c * y)
    return -scale * (kx * c - ky * s), -scale * (kx * s + ky * c)


@numba.njit(cache=True)
def _kernel(st, t0, k0, n_steps, dt, rec_every, out, eta_out,
            wx2, wy2, c1, c2, noise,
            phi_static, phi0, omega_mod, psi,
            fb_on, fb_axis, fb_omega, fb_gain, fb_eta_max, fb_alpha, fb_eps, fb):
    x, vx, y, vy = st[0], st[1], st[2], st[3]
    i1, q1, i2, q2, eta, clamped = fb[0], fb[1], fb[2], fb[3], fb[4], fb[5]
    h = 0.5 * dt
    rec = 0
    for k in range(n_steps):
        t = t0 + (k0 + k) * dt
        if fb_on:
            q = y if fb_axis == 1 else x
            cw = math.cos(fb_omega * t)
            sw = math.sin(fb_omega * t)
            i1 += fb_alpha * (q * cw - i1)
            q1 += fb_alpha * (q * sw - q1)
            i2 += fb_alpha * (i1 - i2)
            q2 += fb_alpha * (q1 - q2)
            q_hat = 2.0 * (i2 * cw + q2 * sw)
            v_hat = 2.0 * fb_omega * (-i2 * sw + q2 * cw)
            norm = 2.0 * fb_omega * (i2 * i2 + q2 * q2)
            eta = fb_gain * q_hat * v_hat / (norm + fb_eps)
            if eta > fb_eta_max:
                eta = fb_eta_max
                clamped += 1
            elif eta < -fb_eta_max:
                eta = -fb_eta_max
                clamped += 1
        if (k0 + k) % rec_every == 0:
            out[rec, 0] = t
            out[rec, 1] = x
            out[rec, 2] = vx
            out[rec, 3] = y
            out[rec, 4] = vy
            eta_out[rec] = eta
            rec += 1
        phi = phi_static + phi0 * math.cos(omega_mod * t - psi)
        ax, ay = _accel(x, y, phi, wx2, wy2, 1.0 + eta)
        vx += h * ax
        vy += h * ay
        x += h * vx
        y += h * vy
        if c2 > 0.0:
            vx = c1 * vx + c2 * noise[k, 0]
            vy = c1 * vy + c2 * noise[k, 1]
        else:
            vx = c1 * vx
            vy = c1 * vy
        x += h * vx
        y += h * vy
        t1 = t0 + (k0 + k + 1) * dt
        phi = phi_static + phi0 * math.cos(omega_mod * t1 - psi)
        ax, ay = _accel(x, y, phi, wx2, wy2, 1.0 + eta)
        vx += h * ax
        vy += h * ay
    st[0], st[1], st[2], st[3] = x, vx, y, vy
    fb[0], fb[1], fb[2], fb[3], fb[4], fb[5] = i1, q1, i2, q2, eta, clamped
    return rec


# ---------------------------------------------------------------------------


def choose_timestep(trap: TrapParams, steps_per_period: int = 200, sample_rate: float | None = None):
    """Time step no larger than (shortest period)/steps_per_period.

    When ``sample_rate`` is given the step divides the sample interval, and
    the number of steps per sample is returned alongside.
    """
    t_min = 2 * math.pi / trap.omega_max
    if sample_rate is None:
        return t_min / steps_per_period, 1
    k = math.ceil(steps_per_period / (sample_rate * t_min))
    return 1.0 / (sample_rate * k), k


def _check_dt(dt: float, trap: TrapParams) -> None:
    if not 0 < dt < 2 * math.pi / (50 * trap.omega_max):
        raise ConfigError(f"time step {dt:g} s does not resolve the trap period (need < T/50)", "dt")


class Simulator:
    """Stateful driver around the compiled kernel.

    Keeps the phase-space state, lock-in state and random stream between
    calls, so a protocol can run segment by segment and change controls at
    segment boundaries.
    """

    def __init__(self, trap: TrapParams, particle: ParticleParams, bath: BathParams, *,
                 dt: float | None = None, steps_per_period: int = 200, thermal: bool = True,
                 seed: int = 0, state: SimState | None = None, sample_rate: float | None = None,
                 rng: np.random.Generator | None = None, config_hash: str = "",
                 frequency_matched: bool = True):
        self.trap = trap
        self.frequency_matched = frequency_matched
        self.particle = particle
        self.bath = bath
        if dt is None:
            dt, self.record_every = choose_timestep(trap, steps_per_period, sample_rate)
        else:
            self.record_every = 1
        _check_dt(dt, trap)
        self.dt = dt
        self.thermal = thermal and bath.temperature > 0 and bath.gamma > 0
        self.seed = seed
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.state = state or SimState()
        self.t0 = self.state.t
        self.k = 0
        self.fb_state = FeedbackState()
        self._fb_mode: str | None = None
        self.config_hash = config_hash

    @property
    def mass(self) -> float:
        return self.particle.mass

    def stiffness(self) -> tuple[float, float]:
        """Kernel stiffnesses per unit mass.

        Verlet oscillates at ``2/dt asin(Omega dt/2)``; with
        ``frequency_matched`` the stiffness is pre-warped to
        ``(2/dt sin(Omega dt/2))^2`` so each mode runs at exactly Omega and
        the two modes keep their relative phase over long runs.
        """
        wx, wy = self.trap.omega_x, self.trap.omega_y
        if not self.frequency_matched:
            return wx**2, wy**2
        h = 0.5 * self.dt
        return (math.sin(wx * h) / h) ** 2, (math.sin(wy * h) / h) ** 2

    @property
    def t(self) -> float:
        return self.t0 + self.k * self.dt

    def set_state(self, state: SimState) -> None:
        self.state = state
        self.t0 = state.t
        self.k = 0
        self._fb_mode = None

    def steps_for(self, duration: float) -> int:
        return int(round(duration / self.dt))

    def advance(self, n_steps: int, controls: Controls, record_every: int | None = None) -> Trajectory:
        """Integrate ``n_steps``.

        States are recorded before every step whose global index is a
        multiple of ``record_every``, so consecutive calls tile one uniform
        grid. The end point is not recorded; see :meth:`final_record`.
        """
        if n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        rec_every = self.record_every if record_every is None else record_every
        m = self.mass
        c1 = math.exp(-self.bath.gamma * self.dt)
        c2 = math.sqrt((1 - c1 * c1) * K_B * self.bath.temperature / m) if self.thermal else 0.0

        fb = controls.feedback
        fb_on = fb is not None and fb.active
        if fb_on:
            if self._fb_mode != fb.target_mode:
                cur = SimState(self.state.x, self.state.vx, self.state.y, self.state.vy, self.t)
                self.fb_state = FeedbackState.locked(cur, fb.target_mode, self.trap)
                self._fb_mode = fb.target_mode
            fb_omega = self.trap.omega(fb.target_mode)
            fb_gain = fb.gain if fb.sign == "cool" else -fb.gain
            fb_alpha = 1.0 - math.exp(-2 * math.pi * fb.bandwidth * self.dt)
            # regularization relative to the room-temperature amplitude scale
            fb_eps = 1e-9 * K_B * 300.0 / (m * fb_omega)
            fb_axis = 1 if fb.target_mode == "y" else 0
            fb_eta_max = fb.eta_max
        else:
            self._fb_mode = None
            self.fb_state.eta = 0.0
            fb_omega = fb_gain = fb_alpha = fb_eps = fb_eta_max = 0.0
            fb_axis = 0

        drive = controls.drive
        first = (-self.k) % rec_every
        n_rec = 0 if first >= n_steps else (n_steps - 1 - first) // rec_every + 1
        out = np.empty((n_rec, 5))
        eta_out = np.empty(n_rec)
        st = np.array([self.state.x, self.state.vx, self.state.y, self.state.vy])
        fbs = self.fb_state.as_array()
        wx2, wy2 = self.stiffness()
        dummy = np.zeros((1, 2))

        done = 0
        rec = 0
        while done < n_steps:
            n = min(_BLOCK, n_steps - done)
            noise = self.rng.standard_normal((n, 2)) if c2 > 0 else dummy
            rec += _kernel(st, self.t0, self.k, n, self.dt, rec_every, out[rec:], eta_out[rec:],
                           wx2, wy2, c1, c2, noise, controls.phi_static, drive.amplitude,
                           drive.omega_mod, drive.psi, fb_on, fb_axis, fb_omega, fb_gain,
                           fb_eta_max, fb_alpha, fb_eps, fbs)
            self.k += n
            done += n
        self.state = SimState(st[0], st[1], st[2], st[3], self.t)
        self.fb_state.update(fbs)
        return self._trajectory(out, eta_out)

    def _trajectory(self, out, eta_out) -> Trajectory:
        return Trajectory(out[:, 0].copy(), out[:, 1].copy(), out[:, 2].copy(), out[:, 3].copy(),
                          out[:, 4].copy(), self.dt, seed=self.seed, config_hash=self.config_hash,
                          eta=eta_out)

    def final_record(self, record_every: int | None = None) -> Trajectory:
        """The current state as a one-row trajectory if it lies on the record grid."""
        rec_every = self.record_every if record_every is None else record_every
        n = 1 if self.k % rec_every == 0 else 0
        s = self.state
        out = np.array([[self.t, s.x, s.vx, s.y, s.vy]])[:n]
        return self._trajectory(out, np.full(n, self.fb_state.eta))

    def run_for(self, duration: float, controls: Controls, record_every: int | None = None) -> Trajectory:
        return self.advance(self.steps_for(duration), controls, record_every)


def step(state: SimState, controls: Controls, bath: BathParams, dt: float, rng: np.random.Generator,
         trap: TrapParams, particle: ParticleParams) -> SimState:
    """One BAOAB step. Feedback is not available here (it needs filter memory)."""
    sim = Simulator(trap, particle, bath, dt=dt, state=state, rng=rng)
    sim.advance(1, Controls(controls.drive, controls.phi_static, None))
    return sim.state


def config_hash(config: Config) -> str:
    return hashlib.sha256(config.to_text().encode()).hexdigest()[:16]


def state_from_energies(e_x: float, e_y: float, trap: TrapParams, mass: float,
                        phase_x: float = 0.0, phase_y: float = 0.0, t: float = 0.0) -> SimState:
    """Deterministic state with exact per-axis energies (joules) and phases.

    ``phase`` is the argument of the complex amplitude X, q = Re[X e^{-i Omega t}].
    """
    out = []
    for e, w, ph in ((e_x, trap.omega_x, phase_x), (e_y, trap.omega_y, phase_y)):
        amp = math.sqrt(2 * e / (mass * w * w))
        z = amp * complex(math.cos(ph - w * t), math.sin(ph - w * t))
        out += [z.real, w * z.imag]
    return SimState(out[0], out[1], out[2], out[3], t)


def init_thermal(temps, trap: TrapParams, particle: ParticleParams, rng: np.random.Generator,
                 t: float = 0.0) -> SimState:
    """Sample each axis from its Boltzmann distribution at its own temperature."""
    tx, ty = temps
    if tx < 0 or ty < 0:
        raise ValueError("temperatures must be >= 0")
    m = particle.mass
    z = rng.standard_normal(4)
    sx, sy = math.sqrt(K_B * tx / m), math.sqrt(K_B * ty / m)
    return SimState(sx / trap.omega_x * z[0], sx * z[1], sy / trap.omega_y * z[2], sy * z[3], t)


def run(config: Config, schedule=None, duration: float | None = None, seed: int | None = None,
        state: SimState | None = None, record_every: int | None = None) -> Trajectory:
    """Simulate ``duration`` seconds under a piecewise-constant schedule.

    ``schedule`` is any object with ``segments``, each carrying ``start``,
    ``drive`` and ``feedback``; None means the config drive for the whole run.
    """
    seed = config.seed if seed is None else seed
    duration = config.sim.duration if duration is None else duration
    sim = Simulator(config.trap, config.particle, config.bath,
                    steps_per_period=config.sim.steps_per_period, thermal=config.sim.thermal,
                    seed=seed, state=state, sample_rate=config.noise.sample_rate,
                    config_hash=config_hash(config))
    t_end = sim.t + duration
    if schedule is None:
        segs = [(sim.t, Controls(config.drive))]
    else:
        segs = [(s.start, Controls(s.drive, 0.0, s.feedback)) for s in schedule.segments]
        if not segs or segs[0][0] > sim.t:
            segs.insert(0, (sim.t, Controls(config.drive.off())))
    parts = []
    for i, (start, ctl) in enumerate(segs):
        stop = segs[i + 1][0] if i + 1 < len(segs) else t_end
        n = max(0, int(round((min(stop, t_end) - sim.t) / sim.dt)))
        parts.append(sim.advance(n, ctl, record_every))
    parts.append(sim.final_record(record_every))
    traj = Trajectory.concatenate(parts)
    traj.meta.update(record_every=sim.record_every if record_every is None else record_every)
    return traj


def measure(traj: Trajectory, noise: NoiseModel, rng: np.random.Generator) -> MeasuredRecord:
    """Resample positions at ``noise.sample_rate`` and add white detection noise."""
    n = int(math.floor((traj.t[-1] - traj.t[0]) * noise.sample_rate + 1e-9)) + 1
    t = traj.t[0] + np.arange(n) / noise.sample_rate
    x = np.interp(t, traj.t, traj.x)
    y = np.interp(t, traj.t, traj.y)
    if noise.s_x_noise > 0:
        sigma = math.sqrt(noise.sample_variance)
        e = rng.standard_normal((2, n)) * sigma
        x = x + e[0]
        y = y + e[1]
    return MeasuredRecord(t, x, y, noise.sample_rate)


def demodulate(record: MeasuredRecord | tuple, omega_ref: float, window: float, channel: str = "x",
               hop: int | None = None, omega_rabi: float | None = None, whole_periods: bool = True):
    """Sliding-window quadrature demodulation.

    ``c(t) = (2/window) * integral x(t') exp(i omega_ref t') dt'`` over a
    boxcar centred on t, so ``q = Re[c exp(-i omega_ref t)]`` for a slowly
    varying tone. ``record`` may also be a ``(t, samples)`` pair.

    Returns ``(t_centres, c)``; ``hop`` subsamples the output (default: no
    overlap between consecutive windows). With ``whole_periods`` the window
    is snapped to an integer number of reference periods, which cancels the
    image term at twice the reference frequency.
    """
    if isinstance(record, MeasuredRecord):
        t, q = record.t, record.channel(channel)
    else:
        t, q = (np.asarray(a, dtype=float) for a in record)
    if len(t) < 2:
        raise ConfigError("record too short to demodulate", "record")
    dt = float(t[1] - t[0])
    period = 2 * math.pi / omega_ref
    if whole_periods:
        window = max(1, round(window / period)) * period
    n = int(round(window / dt))
    if window < 5 * 2 * math.pi / omega_ref:
        raise ConfigError("demodulation window must span at least 5 reference periods", "window")
    if omega_rabi is not None and omega_rabi > 0 and window > 0.2 * 2 * math.pi / omega_rabi:
        raise ConfigError("demodulation window must be short against the Rabi period", "window")
    if n > len(t):
        raise ConfigError("demodulation window longer than the record", "window")
    z = q * np.exp(1j * omega_ref * t)
    cs = np.concatenate(([0], np.cumsum(z)))
    c = (cs[n:] - cs[:-n]) * (2.0 / n)
    tc = t[: len(c)] + 0.5 * (n - 1) * dt
    hop = n if hop is None else hop
    return tc[::hop], c[::hop]

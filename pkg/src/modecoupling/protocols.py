"""Experiment scripts: Rabi exchange, sympathetic cooling, energy-transfer cooling.

Every protocol talks to a backend through the same small interface
(``start``, ``advance_to``, ``measured``, ``true_populations``), so the same
script runs on the exact envelope model or on the full Langevin simulation.

Populations handed between protocol and backend are in units of k_B T0.
With ``mode_weighting = "action"`` they are mode actions scaled by
``sqrt(Omega_x Omega_y)``, and a mode energy is its population times
``Omega / sqrt(Omega_x Omega_y)``; with ``"energy"`` populations are energies.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import envelope as env
from .analysis import cooling_limit
from .fullsim import Controls, MeasuredRecord, Simulator, demodulate, state_from_energies
from .model import (
    K_B,
    Config,
    DriveParams,
    EstimationError,
    FeedbackConfig,
    InvalidParameterError,
    NoiseModel,
    coupling_rate,
)

__all__ = [
    "Segment",
    "DriveSchedule",
    "Event",
    "RabiFit",
    "RabiCosine",
    "ProtocolTrace",
    "ProtocolAborted",
    "TransferResult",
    "FloorResult",
    "SweepResult",
    "EnvelopeBackend",
    "FullSimBackend",
    "make_backend",
    "weights",
    "envelope_params",
    "estimate_rabi_phase",
    "predict_crossing",
    "run_rabi",
    "run_sympathetic",
    "run_energy_transfer",
    "cooling_floor_monte_carlo",
    "dark_mode_sweep",
]


# ---------------------------------------------------------------------------
# schedules, events, traces


@dataclass(frozen=True)
class Segment:
    start: float
    drive: DriveParams
    feedback: FeedbackConfig | None = None
    label: str = ""


@dataclass
class DriveSchedule:
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        starts = [s.start for s in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise InvalidParameterError("schedule segments must be strictly time-ordered")

    def add(self, start: float, drive: DriveParams, feedback: FeedbackConfig | None = None, label: str = ""):
        if self.segments and start <= self.segments[-1].start:
            raise InvalidParameterError("schedule segments must be strictly time-ordered")
        self.segments.append(Segment(start, drive, feedback, label))
        return self

    def boundaries(self, t_end: float):
        for i, seg in enumerate(self.segments):
            stop = self.segments[i + 1].start if i + 1 < len(self.segments) else t_end
            yield seg, min(stop, t_end)


@dataclass(frozen=True)
class Event:
    name: str
    scheduled: float
    executed: float


class ProtocolAborted(EstimationError):
    """Estimation failed mid-protocol; ``trace`` holds everything up to the failure."""

    def __init__(self, message: str, trace: "ProtocolTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class ProtocolTrace:
    t: np.ndarray
    e_x: np.ndarray
    e_y: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    events: list[Event] = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    source: object = field(default=None, repr=False, compare=False)

    @property
    def total(self) -> np.ndarray:
        return self.e_x + self.e_y

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t_s", "E_x_kbt", "E_y_kbt", "e1", "e2", "e3"))
            for row in zip(self.t, self.e_x, self.e_y, self.e1, self.e2, self.e3):
                w.writerow([repr(float(v)) for v in row])

    def events_to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("event", "scheduled_s", "executed_s"))
            for ev in self.events:
                w.writerow((ev.name, repr(float(ev.scheduled)), repr(float(ev.executed))))


# ---------------------------------------------------------------------------
# Rabi-phase estimation


@dataclass(frozen=True)
class RabiFit:
    """``offset + contrast * cos(omega_r * t + phase) * exp(-decay * (t - t_ref))``.

    ``phase`` refers to absolute time; ``t_ref`` only anchors the decay.
    """

    omega_r: float
    phase: float
    contrast: float
    offset: float
    residual: float
    decay: float = 0.0
    t_ref: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.offset + self.contrast * np.cos(self.omega_r * t + self.phase) * np.exp(
            -self.decay * (t - self.t_ref))


class RabiCosine(RegressorMixin, BaseEstimator):
    """Least-squares fit of a (optionally decaying) cosine to a population series.

    A coarse frequency scan of linear fits around ``omega_guess`` seeds a
    nonlinear refinement; the frequency is confined to
    ``omega_guess * (1 +/- omega_span)`` and a result on that boundary is
    treated as a failed estimate.
    """

    def __init__(self, omega_guess=None, fit_decay=False, min_cycles=2.0, max_residual=0.5, omega_span=0.5):
        self.omega_guess = omega_guess
        self.fit_decay = fit_decay
        self.min_cycles = min_cycles
        self.max_residual = max_residual
        self.omega_span = omega_span

    def _guess_omega(self, tau, y):
        n = len(tau)
        spec = np.abs(np.fft.rfft((y - y.mean()) * np.hanning(n), 16 * n))
        freqs = np.fft.rfftfreq(16 * n, tau[1] - tau[0])
        return 2 * math.pi * freqs[1 + np.argmax(spec[1:])]

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=5)
        t = X[:, 0]
        t_ref = float(t[0])
        tau = t - t_ref
        span = float(tau[-1])
        w0 = self.omega_guess if self.omega_guess is not None else self._guess_omega(tau, y)
        if not w0 > 0 or span * w0 / (2 * math.pi) < self.min_cycles:
            raise EstimationError(
                f"series spans {span * w0 / (2 * math.pi):.2f} Rabi cycles; at least {self.min_cycles} needed")
        lo, hi = w0 * (1 - self.omega_span), w0 * (1 + self.omega_span)

        # batched normal equations of offset + cos + sin at every trial frequency
        grid = np.linspace(lo, hi, 801)
        ph = np.outer(grid, tau)
        basis = np.stack([np.ones_like(ph), np.cos(ph), np.sin(ph)], axis=1)
        gram = np.einsum("gin,gjn->gij", basis, basis)
        rhs = basis @ y
        coefs = np.linalg.solve(gram, rhs[..., None])[..., 0]
        ssr = y @ y - np.einsum("gi,gi->g", coefs, rhs)
        best = int(np.argmin(ssr))
        w_best, coef = grid[best], coefs[best]

        def model(p):
            o, c, s, w = p[:4]
            k = p[4] if self.fit_decay else 0.0
            return o + (c * np.cos(w * tau) + s * np.sin(w * tau)) * np.exp(-k * tau)

        p0 = [*coef, w_best] + ([0.0] if self.fit_decay else [])
        lb = [-np.inf, -np.inf, -np.inf, lo] + ([-np.inf] if self.fit_decay else [])
        ub = [np.inf, np.inf, np.inf, hi] + ([np.inf] if self.fit_decay else [])
        res = optimize.least_squares(lambda p: model(p) - y, p0, bounds=(lb, ub), x_scale="jac",
                                     xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        o, c, s, w = res.x[:4]
        k = float(res.x[4]) if self.fit_decay else 0.0
        if min(w - lo, hi - w) < 1e-6 * w0:
            raise EstimationError("Rabi frequency estimate collapsed onto the search boundary")
        contrast = math.hypot(c, s)
        rms = float(np.sqrt(np.mean(res.fun**2)))
        residual = rms / contrast if contrast > 0 else np.inf
        if residual > self.max_residual:
            raise EstimationError(f"Rabi fit residual {residual:.3g} exceeds {self.max_residual}")
        phase = math.atan2(-s, c) - w * t_ref
        phase = math.atan2(math.sin(phase), math.cos(phase))
        self.fit_ = RabiFit(float(w), phase, contrast, float(o), residual, k, t_ref)
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        return self.fit_(X[:, 0])


def estimate_rabi_phase(t, series, omega_guess: float | None = None, fit_decay: bool = False,
                        max_residual: float = 0.5) -> RabiFit:
    """Fit ``offset + contrast cos(omega_r t + phase)`` to a population series."""
    t = np.asarray(t, dtype=float)
    est = RabiCosine(omega_guess=omega_guess, fit_decay=fit_decay, max_residual=max_residual)
    est.fit(t[:, None], np.asarray(series, dtype=float))
    return est.fit_


def predict_crossing(fit: RabiFit, kind: str, after: float) -> float:
    """Next time after ``after`` at which the fitted cosine has an extremum.

    ``plane_e1e3``: any extremum (the Bloch vector crosses the e1e3 plane
    while rotating about e1). ``pole``: the next minimum of the fitted
    y-population, i.e. the passage closest to the north pole.
    """
    w, ph = fit.omega_r, fit.phase
    if kind == "plane_e1e3":
        k = math.floor((w * after + ph) / math.pi) + 1
        return (k * math.pi - ph) / w
    if kind == "pole":
        k = math.floor(((w * after + ph) / math.pi - 1) / 2) + 1
        return ((2 * k + 1) * math.pi - ph) / w
    raise ValueError(f"unknown crossing kind {kind!r}")


# ---------------------------------------------------------------------------
# backends


def weights(config: Config, weighting: str | None = None):
    """Energy per unit population for each mode, and whether the exact coupling applies."""
    weighting = weighting or config.sim.mode_weighting
    tr = config.trap
    if weighting == "action":
        ref = math.sqrt(tr.omega_x * tr.omega_y)
        return np.array([tr.omega_x / ref, tr.omega_y / ref]), True
    return np.array([1.0, 1.0]), False


def envelope_params(config: Config, drive: DriveParams, feedback: FeedbackConfig | None = None,
                    weighting: str | None = None) -> env.EnvelopeParams:
    """Envelope-model parameters for one drive/feedback segment."""
    _, exact = weights(config, weighting)
    tr = config.trap
    gamma = config.bath.gamma
    ga = gb = gamma
    if feedback is not None and feedback.active:
        if feedback.target_mode == "x":
            ga += feedback.rate(tr)
        else:
            gb += feedback.rate(tr)
    if ga < 0 or gb < 0:
        raise InvalidParameterError("feedback heating exceeds bath damping; envelope model needs rates >= 0")
    return env.EnvelopeParams(
        delta=drive.omega_mod - tr.delta_omega,
        coupling_a=coupling_rate(drive.amplitude, tr, exact=exact),
        gamma_a=ga,
        gamma_b=gb,
        psi=drive.psi,
    )


class _Backend:
    name = "base"

    def __init__(self, config: Config, seed, noise: NoiseModel | None = None, weighting: str | None = None):
        self.config = config
        self.noise = config.noise if noise is None else noise
        self.weights, self.exact = weights(config, weighting)
        self.weighting = weighting or config.sim.mode_weighting
        self.kT = K_B * config.bath.temperature
        self.window = config.protocol.window
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._sim_ss, self._meas_ss, self._phase_ss = ss.spawn(3)
        self.meas_rng = np.random.default_rng(self._meas_ss)
        self._frame_omega = config.drive.omega_mod

    def initial_phase(self, rel_phase):
        if rel_phase is not None:
            return rel_phase
        return float(np.random.default_rng(self._phase_ss).uniform(0, 2 * math.pi))

    def round_time(self, t: float) -> float:
        return t

    def energies_kbt(self, p_x, p_y):
        return p_x * self.weights[0], p_y * self.weights[1]


class EnvelopeBackend(_Backend):
    """Exact piecewise propagation; measurements are sampled once per window."""

    name = "envelope"

    def start(self, p_x: float, p_y: float, rel_phase: float) -> None:
        self.state = env.state_from_populations(p_x, p_y, rel_phase, 0.0)
        self._t, self._a, self._b = [np.zeros(1)], [np.array([self.state.a_bar])], [np.array([self.state.b_bar])]
        self._mx, self._my = [], []
        self._measure(np.zeros(1), self._a[0], self._b[0])

    @property
    def now(self) -> float:
        return self.state.t

    def _measure(self, t, a, b):
        px, py = np.abs(a) ** 2, np.abs(b) ** 2
        s = self.noise.s_x_noise
        if s > 0:
            tr, m = self.config.trap, self.config.mass
            var = s / self.window
            out = []
            for p, w, om in ((px, self.weights[0], tr.omega_x), (py, self.weights[1], tr.omega_y)):
                amp = np.sqrt(2 * p * w * self.kT / (m * om**2))
                z = self.meas_rng.standard_normal((2, len(t))) * math.sqrt(var)
                c = amp + z[0] + 1j * z[1]
                out.append(0.5 * m * om**2 * np.abs(c) ** 2 / (w * self.kT))
            px, py = out
        self._mx.append(px)
        self._my.append(py)

    def advance_to(self, t_stop: float, drive: DriveParams, feedback: FeedbackConfig | None = None) -> None:
        if t_stop < self.now:
            raise ValueError("cannot move backwards in time")
        params = envelope_params(self.config, drive, feedback, self.weighting)
        dt = self.window
        k0 = math.floor(self.now / dt + 1e-9) + 1
        k1 = math.floor(t_stop / dt + 1e-9)
        if k1 >= k0:
            times = np.arange(k0, k1 + 1) * dt
            times = times[times > self.now]
            amps = env.evolve(self.state, params, times)
            self._t.append(times)
            self._a.append(amps[:, 0])
            self._b.append(amps[:, 1])
            self._measure(times, amps[:, 0], amps[:, 1])
        self.state = env.propagate(self.state, params, t_stop - self.now)
        self._last_params = params

    def measured(self, t_from: float, t_to: float):
        t = np.concatenate(self._t)
        sel = (t >= t_from - 1e-12) & (t <= t_to + 1e-12)
        return t[sel], np.concatenate(self._mx)[sel], np.concatenate(self._my)[sel]

    def true_populations(self):
        return abs(self.state.a_bar) ** 2, abs(self.state.b_bar) ** 2

    def amplitudes(self):
        return np.concatenate(self._t), np.concatenate(self._a), np.concatenate(self._b)

    def trace(self) -> ProtocolTrace:
        t, a, b = self.amplitudes()
        ex, ey = self.energies_kbt(np.abs(a) ** 2, np.abs(b) ** 2)
        e1, e2, e3, _ = env.bloch_components(a, b)
        return ProtocolTrace(t, ex, ey, e1, e2, e3)

    def oracle_crossing(self, kind: str, after: float, drive: DriveParams, feedback=None) -> float:
        """Exact passage time from the true state: root of e2 (plane) or e1 with e3 > 0 (pole)."""
        params = envelope_params(self.config, drive, feedback, self.weighting)
        w = max(env.rabi_frequency(params), 1e-12)
        period = 2 * math.pi / w
        grid = after + np.linspace(0, 1.5 * period, 3001)
        st = self.state

        def comp(t):
            ab = env.evolve(st, params, np.atleast_1d(t))
            e1, e2, e3, _ = env.bloch_components(ab[:, 0], ab[:, 1])
            return e1, e2, e3

        e1, e2, e3 = comp(grid)
        f = e2 if kind == "plane_e1e3" else e1
        for i in range(len(grid) - 1):
            if f[i] == 0 or f[i] * f[i + 1] < 0:
                if kind == "pole" and e3[i] < 0:
                    continue
                idx = 1 if kind == "plane_e1e3" else 0
                return optimize.brentq(lambda t: comp(t)[idx][0], grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15)
        raise EstimationError(f"no {kind} crossing within 1.5 Rabi periods")


class FullSimBackend(_Backend):
    """Langevin simulation with detection noise; energies by demodulation."""

    name = "fullsim"

    def __init__(self, config: Config, seed, noise: NoiseModel | None = None, weighting: str | None = None,
                 thermal: bool | None = None):
        super().__init__(config, seed, noise, weighting)
        self.sim = Simulator(config.trap, config.particle, config.bath,
                             steps_per_period=config.sim.steps_per_period,
                             thermal=config.sim.thermal if thermal is None else thermal,
                             rng=np.random.default_rng(self._sim_ss), seed=None,
                             sample_rate=config.noise.sample_rate)
        self.sample_rate = config.noise.sample_rate

    @property
    def now(self) -> float:
        return self.sim.t

    def round_time(self, t: float) -> float:
        return round(t / self.sim.dt) * self.sim.dt

    def start(self, p_x: float, p_y: float, rel_phase: float) -> None:
        ex, ey = self.energies_kbt(p_x, p_y)
        st = state_from_energies(ex * self.kT, ey * self.kT, self.config.trap, self.config.mass, 0.0, rel_phase)
        self.sim.set_state(st)
        self._cols = {k: [] for k in ("t", "x", "vx", "y", "vy", "mx", "my")}

    def advance_to(self, t_stop: float, drive: DriveParams, feedback: FeedbackConfig | None = None) -> None:
        n = int(round((t_stop - self.now) / self.sim.dt))
        if n < 0:
            raise ValueError("cannot move backwards in time")
        traj = self.sim.advance(n, Controls(drive, 0.0, feedback))
        sigma = math.sqrt(self.noise.sample_variance)
        for k in ("t", "x", "vx", "y", "vy"):
            self._cols[k].append(getattr(traj, k))
        for k, q in (("mx", traj.x), ("my", traj.y)):
            self._cols[k].append(q + sigma * self.meas_rng.standard_normal(len(q)) if sigma > 0 else q)

    def record(self) -> MeasuredRecord:
        """Noisy position record accumulated so far."""
        return MeasuredRecord(self._col("t"), self._col("mx"), self._col("my"), self.sample_rate)

    def _col(self, k):
        return np.concatenate(self._cols[k]) if self._cols[k] else np.zeros(0)

    def _demod_pops(self, t, qx, qy):
        """Both channels on the x-channel window grid; y is interpolated onto it."""
        tr, m = self.config.trap, self.config.mass
        tcx, cx = demodulate((t, qx), tr.omega_x, self.window, hop=1)
        tcy, cy = demodulate((t, qy), tr.omega_y, self.window, hop=1)
        n = max(1, int(round(self.window * self.sample_rate)))
        tc = tcx[::n]
        tc = tc[(tc >= tcy[0]) & (tc <= tcy[-1])]
        cx = np.interp(tc, tcx, cx.real) + 1j * np.interp(tc, tcx, cx.imag)
        cy = np.interp(tc, tcy, cy.real) + 1j * np.interp(tc, tcy, cy.imag)
        px = 0.5 * m * tr.omega_x**2 * np.abs(cx) ** 2 / (self.kT * self.weights[0])
        py = 0.5 * m * tr.omega_y**2 * np.abs(cy) ** 2 / (self.kT * self.weights[1])
        return tc, cx, cy, px, py

    def measured(self, t_from: float, t_to: float):
        t = self._col("t")
        sel = (t >= t_from - 1e-12) & (t <= t_to + 1e-12)
        tc, _, _, px, py = self._demod_pops(t[sel], self._col("mx")[sel], self._col("my")[sel])
        return tc, px, py

    def true_populations(self):
        ex, ey = self.true_energies()
        return ex / self.weights[0], ey / self.weights[1]

    def true_energies(self):
        """Coordinate energies of the current state in k_B T0 (exact when the drive is off)."""
        s, tr, m = self.sim.state, self.config.trap, self.config.mass
        ex = 0.5 * m * (s.vx**2 + tr.omega_x**2 * s.x**2) / self.kT
        ey = 0.5 * m * (s.vy**2 + tr.omega_y**2 * s.y**2) / self.kT
        return ex, ey

    def trace(self) -> ProtocolTrace:
        t = self._col("t")
        tc, cx, cy, px, py = self._demod_pops(t, self._col("x"), self._col("y"))
        tr, m = self.config.trap, self.config.mass
        delta = self._frame_omega - tr.delta_omega
        sx = math.sqrt(0.5 * m * tr.omega_x**2 / (self.kT * self.weights[0]))
        sy = math.sqrt(0.5 * m * tr.omega_y**2 / (self.kT * self.weights[1]))
        a = sx * cx * np.exp(-0.5j * delta * tc)
        b = sy * cy * np.exp(0.5j * delta * tc)
        e1, e2, e3, _ = env.bloch_components(a, b)
        ex, ey = self.energies_kbt(px, py)
        return ProtocolTrace(tc, ex, ey, e1, e2, e3)


def make_backend(kind, config: Config, seed=None, noise: NoiseModel | None = None, weighting: str | None = None,
                 **kw) -> _Backend:
    if isinstance(kind, _Backend):
        return kind
    kind = kind or config.sim.backend
    seed = config.seed if seed is None else seed
    if kind == "envelope":
        return EnvelopeBackend(config, seed, noise, weighting)
    if kind == "fullsim":
        return FullSimBackend(config, seed, noise, weighting, **kw)
    raise InvalidParameterError(f"unknown backend {kind!r}")


def _start(backend: _Backend, init, rel_phase):
    e_x, e_y = init
    w = backend.weights
    if rel_phase is None:
        rel_phase = backend.config.init.phase
    phase = backend.initial_phase(rel_phase)
    backend.start(e_x / w[0], e_y / w[1], phase)
    return phase


def _init(config, init):
    return (config.init.e_x, config.init.e_y) if init is None else init


def _drive(config, drive):
    return config.drive if drive is None else drive


# ---------------------------------------------------------------------------
# protocols


def _run_schedule(backend, schedule: DriveSchedule, t_end: float, trace_events: list[Event]):
    for seg, stop in schedule.boundaries(t_end):
        if seg.start > backend.now:
            backend.advance_to(backend.round_time(seg.start), DriveParams(0.0, seg.drive.omega_mod), None)
        if seg.label:
            trace_events.append(Event(seg.label, seg.start, backend.now))
        if stop > backend.now:
            backend.advance_to(backend.round_time(stop), seg.drive, seg.feedback)


def run_rabi(config: Config, init=None, drive: DriveParams | None = None, duration: float | None = None,
             backend=None, seed=None, t_on: float | None = None, rel_phase: float | None = None,
             noise: NoiseModel | None = None, weighting: str | None = None) -> ProtocolTrace:
    """Free energy exchange: feedback off, coupling switched on at ``t_on``."""
    drive = _drive(config, drive)
    duration = config.sim.duration if duration is None else duration
    t_on = config.protocol.t_on if t_on is None else t_on
    be = make_backend(backend, config, seed, noise, weighting)
    phase = _start(be, _init(config, init), rel_phase)
    if t_on > 0:
        sched = DriveSchedule([Segment(0.0, drive.off())]).add(t_on, drive, None, "coupling_on")
    else:
        sched = DriveSchedule([Segment(0.0, drive, None, "coupling_on")])
    events: list[Event] = []
    _run_schedule(be, sched, duration, events)
    tr = be.trace()
    tr.events = events
    params = envelope_params(config, drive, None, be.weighting)
    tr.diagnostics.update(backend=be.name, rel_phase=phase, omega_r=env.rabi_frequency(params),
                          coupling_a=params.coupling_a, delta=params.delta)
    tr.source = be
    return tr


def run_sympathetic(config: Config, init=None, drive: DriveParams | None = None,
                    feedback: FeedbackConfig | None = None, duration: float | None = None, backend=None,
                    seed=None, t_on: float = 0.0, coupling: bool = True, rel_phase: float | None = None,
                    noise: NoiseModel | None = None, weighting: str | None = None) -> ProtocolTrace:
    """Feedback on the y-mode throughout, coupling on from ``t_on``."""
    drive = _drive(config, drive)
    feedback = config.feedback if feedback is None else feedback
    if init is not None and feedback.target_mode == "x" and init[0] > init[1]:
        raise InvalidParameterError("feedback must target the mode opposite to the hot one")
    duration = config.sim.duration if duration is None else duration
    be = make_backend(backend, config, seed, noise, weighting)
    phase = _start(be, _init(config, init), rel_phase)
    on = drive if coupling else drive.off()
    if t_on > 0:
        sched = DriveSchedule([Segment(0.0, drive.off(), feedback, "feedback_on")])
        sched.add(t_on, on, feedback, "coupling_on" if coupling else "")
    else:
        sched = DriveSchedule([Segment(0.0, on, feedback, "coupling_on" if coupling else "feedback_on")])
    events: list[Event] = []
    _run_schedule(be, sched, duration, events)
    tr = be.trace()
    tr.events = events
    params = envelope_params(config, on, feedback, be.weighting)
    tr.diagnostics.update(backend=be.name, rel_phase=phase, decay_rates=env.decay_rates(params),
                          gamma_fb=feedback.rate(config.trap) if feedback.active else 0.0,
                          omega_r=env.rabi_frequency(params))
    tr.source = be
    return tr


@dataclass
class TransferResult:
    trace: ProtocolTrace
    final_e_x: float
    final_e_y: float
    events: list[Event]
    fits: dict

    @property
    def final_fraction(self) -> float:
        tot = self.final_e_x + self.final_e_y
        return self.final_e_y / tot if tot > 0 else 0.0


def _fraction(px, py):
    tot = px + py
    return np.where(tot > 0, py / np.where(tot > 0, tot, 1.0), 0.0)


def _weak_stage1_fit(t, series, w_r):
    """Refit without the residual check; ``None`` if anything else fails."""
    try:
        return estimate_rabi_phase(t, series, omega_guess=w_r, max_residual=np.inf)
    except EstimationError:
        return None


def run_energy_transfer(config: Config, init=(0.6, 0.6), drive: DriveParams | None = None, backend=None,
                        seed=None, n_cycles: float | None = None, oracle: bool = False,
                        rel_phase: float | None = None, noise: NoiseModel | None = None,
                        weighting: str | None = None, monitor: float | None = None,
                        settle: float | None = None, drive2: DriveParams | None = None) -> TransferResult:
    """Three-stage transfer of the y-mode energy into the x-mode.

    1. coupling on at psi (rotation about e1); monitor, fit, predict the
       next e1e3-plane crossing;
    2. at that time shift psi by pi/2 (rotation about e2); monitor, fit,
       predict the next pole passage;
    3. switch the coupling off there.

    ``monitor`` overrides the per-stage observation time (default
    ``n_cycles`` Rabi periods). ``oracle=True`` replaces both estimates with
    exact crossing times from the envelope state. ``drive2`` sets the stage-2
    drive (default: ``drive`` with psi shifted by pi/2).
    """
    drive = _drive(config, drive)
    n_cycles = config.protocol.n_cycles if n_cycles is None else n_cycles
    be = make_backend(backend, config, seed, noise, weighting)
    if oracle and not isinstance(be, EnvelopeBackend):
        raise InvalidParameterError("oracle switch times need the envelope backend")
    phase = _start(be, init, rel_phase)
    params0 = envelope_params(config, drive, None, be.weighting)
    w_r = env.rabi_frequency(params0)
    if not w_r > 0:
        raise InvalidParameterError("coupling drive has zero Rabi frequency")
    t_mon = n_cycles * 2 * math.pi / w_r if monitor is None else monitor
    events: list[Event] = [Event("coupling_on", 0.0, 0.0)]
    fits: dict = {}
    weak_stage1 = False
    stage_drive = [drive, drive.with_psi(drive.psi + math.pi / 2) if drive2 is None else drive2]
    kinds = ["plane_e1e3", "pole"]
    names = ["phase_switch", "coupling_off"]

    for stage in range(2):
        d = stage_drive[stage]
        t_start = be.now
        be.advance_to(be.round_time(t_start + t_mon), d)
        if oracle:
            t_pred = be.oracle_crossing(kinds[stage], be.now, d)
        else:
            t, px, py = be.measured(t_start, be.now)
            series = _fraction(px, py)
            try:
                fit = estimate_rabi_phase(t, series, omega_guess=w_r)
                t_pred = predict_crossing(fit, kinds[stage], be.now)
            except EstimationError as exc:
                fit = _weak_stage1_fit(t, series, w_r) if stage == 0 else None
                if fit is None:
                    tr = be.trace()
                    tr.events = events
                    raise ProtocolAborted(f"stage {stage + 1}: {exc}", tr) from None
                # weak stage-1 oscillation: the start is near the e1 axis, so the
                # plane-crossing error is bounded by the small contrast itself
                t_pred = predict_crossing(fit, kinds[stage], be.now)
                weak_stage1 = True
            fits[f"stage{stage + 1}"] = fit
        t_exec = max(be.round_time(t_pred), be.now)
        be.advance_to(t_exec, d)
        events.append(Event(names[stage], t_pred, t_exec))

    settle = 2 * be.window if settle is None else settle
    pre = be.true_populations()
    be.advance_to(be.round_time(be.now + settle), drive.off())
    px, py = be.true_populations()
    ex, ey = be.energies_kbt(px, py)
    tr = be.trace()
    tr.events = events
    tr.fits = fits
    tr.diagnostics.update(
        backend=be.name, rel_phase=phase, omega_r=w_r, monitor=t_mon,
        timing_floor=max(abs(e.executed - e.scheduled) for e in events),
        populations_at_off=pre, weak_stage1=weak_stage1,
    )
    tr.source = be
    return TransferResult(tr, float(ex), float(ey), events, fits)


@dataclass
class FloorResult:
    tau: float
    s_noise: float
    final_e_y: np.ndarray
    predicted: float
    failures: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_e_y))

    @property
    def stderr(self) -> float:
        return float(np.std(self.final_e_y, ddof=1) / math.sqrt(len(self.final_e_y)))


def _floor_trial(args):
    config, tau, noise, child, init = args
    try:
        res = run_energy_transfer(config, init=init, backend="envelope", seed=child, noise=noise, monitor=tau)
    except EstimationError:
        return None
    return res.final_e_y


def cooling_floor_monte_carlo(config: Config, tau: float, trials: int = 200, s_noise: float | None = None,
                              seed=None, jobs: int = 1, init=(0.6, 0.6)) -> FloorResult:
    """Final y-energy distribution of noisy energy-transfer runs, joules.

    Each trial uses the envelope backend with detection noise ``s_noise``
    (m^2/Hz) and a per-stage observation time ``tau``. The returned
    ``predicted`` value is ``m Omega_y^2 S / (2 tau)``.
    """
    if trials < 100:
        raise InvalidParameterError("at least 100 trials are required")
    s = config.noise.s_x_noise if s_noise is None else s_noise
    noise = NoiseModel(s, config.noise.sample_rate)
    children = np.random.SeedSequence(config.seed if seed is None else seed).spawn(trials)
    args = [(config, tau, noise, c, init) for c in children]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            out = list(ex.map(_floor_trial, args, chunksize=max(1, trials // (4 * jobs))))
    else:
        out = [_floor_trial(a) for a in args]
    kT = K_B * config.bath.temperature
    vals = np.array([v * kT for v in out if v is not None])
    e_min = cooling_limit(config.mass, config.trap.omega_y, s, tau)[0]
    return FloorResult(tau, s, vals, e_min, sum(v is None for v in out))


@dataclass
class SweepResult:
    f_mod: np.ndarray
    mean_e_y: np.ndarray
    final_e_x: np.ndarray
    f_x_estimate: float


def dark_mode_sweep(config: Config, f_mod, duration: float | None = None, init=(0.8, 0.01),
                    backend="envelope", seed=None, rel_phase: float = 0.0) -> SweepResult:
    """Locate the unobserved x-mode by sweeping the coupling frequency.

    Only the y-mode population is used: energy drained from the hot x-mode
    through the feedback-cooled y-mode raises the mean y-energy, which peaks
    at ``f_mod = f_y - f_x``. The peak is refined by a parabola through the
    three highest points.
    """
    f_mod = np.asarray(f_mod, dtype=float)
    duration = config.sim.duration if duration is None else duration
    mean_y, final_x = [], []
    for f in f_mod:
        d = DriveParams(config.drive.phi0, 2 * math.pi * f, config.drive.psi)
        tr = run_sympathetic(config, init=init, drive=d, duration=duration, backend=backend, seed=seed,
                             rel_phase=rel_phase)
        mean_y.append(float(np.mean(tr.e_y)))
        final_x.append(float(tr.e_x[-1]))
    mean_y = np.array(mean_y)
    i = int(np.argmax(mean_y))
    f_pk = f_mod[i]
    if 0 < i < len(f_mod) - 1:
        x3, y3 = f_mod[i - 1: i + 2], mean_y[i - 1: i + 2]
        c2, c1, _ = np.polyfit(x3, y3, 2)
        if c2 < 0:
            f_pk = -c1 / (2 * c2)
    f_x = config.trap.omega_y / (2 * math.pi) - f_pk
    return SweepResult(f_mod, mean_y, np.array(final_x), float(f_x))

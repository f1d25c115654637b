"""Parametric feedback cooling and its reduced description as extra damping.

The controller modulates the trap stiffness by a factor ``1 + eta`` with

    eta = +/- gain * q_hat * v_hat / (q_rms * v_rms + eps)

where ``q_hat``, ``v_hat`` are lock-in reconstructions of the target mode's
position and velocity. For a phase-locked oscillator ``eta`` is a tone at
twice the mode frequency and the energy decays at ``gain * Omega / 2``
regardless of amplitude; that rate is what the envelope model receives as
``gamma_fb``. The compiled loop lives in :mod:`modecoupling.fullsim`; this
module holds the scalar law, calibration and the rate-equation oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .fullsim import Controls, Simulator, state_from_energies
from .model import K_B, BathParams, Config, EstimationError, FeedbackConfig, TrapParams

__all__ = [
    "FeedbackConfig",
    "CalibrationError",
    "FeedbackCalibration",
    "parametric_signal",
    "ideal_rate",
    "steady_state_energy",
    "calibrate_feedback_rate",
    "period_average",
]


class CalibrationError(EstimationError):
    """Closed-loop decay was not exponential enough to define a rate."""


@dataclass(frozen=True)
class FeedbackCalibration:
    rate: float
    stderr: float
    ci: tuple[float, float]
    r_squared: float
    gain: float


def parametric_signal(x_hat, v_hat, cfg: FeedbackConfig, trap: TrapParams, x_rms=None, v_rms=None,
                      eps: float = 1e-30):
    """Stiffness modulation factor for the target mode, clamped to ``eta_max``.

    Without explicit rms values the normalization uses the instantaneous
    amplitude ``sqrt(x^2 + (v/Omega)^2)``.
    """
    w = trap.omega(cfg.target_mode)
    x_hat = np.asarray(x_hat, dtype=float)
    v_hat = np.asarray(v_hat, dtype=float)
    if x_rms is None or v_rms is None:
        amp2 = x_hat**2 + (v_hat / w) ** 2
        norm = 0.5 * w * amp2
    else:
        norm = x_rms * v_rms
    sign = 1.0 if cfg.sign == "cool" else -1.0
    eta = sign * cfg.gain * x_hat * v_hat / (norm + eps)
    return np.clip(eta, -cfg.eta_max, cfg.eta_max)


def ideal_rate(gain: float, omega: float) -> float:
    return 0.5 * gain * omega


def steady_state_energy(kT: float, gamma: float, gamma_fb: float) -> float:
    """Rate-equation steady state ``k_B T0 gamma / (gamma + gamma_fb)``."""
    if gamma + gamma_fb <= 0:
        raise ValueError("total damping must be positive")
    return kT * gamma / (gamma + gamma_fb)


def period_average(t, e, period):
    """Average ``e`` over consecutive whole periods; returns (t_mid, e_mean)."""
    dt = t[1] - t[0]
    n = max(1, int(round(period / dt)))
    m = len(e) // n
    e = np.asarray(e[: m * n]).reshape(m, n).mean(axis=1)
    tm = np.asarray(t[: m * n]).reshape(m, n).mean(axis=1)
    return tm, e


def calibrate_feedback_rate(config: Config, gain: float, seed: int | None = None,
                            duration: float | None = None, e0_kbt: float = 1.0,
                            target_mode: str | None = None, thermal: bool = False,
                            min_r_squared: float = 0.9) -> FeedbackCalibration:
    """Fit the closed-loop energy decay rate of the target mode.

    Runs the full simulation with the coupling drive off, the target mode
    at ``e0_kbt`` and the other mode empty, then fits ``log E`` linearly on
    period-averaged energies. The returned rate includes the bath damping.
    """
    fb = config.feedback
    mode = target_mode or fb.target_mode
    cfg_fb = FeedbackConfig(mode, gain, fb.sign, fb.eta_max, fb.bandwidth)
    trap = config.trap
    w = trap.omega(mode)
    expected = config.bath.gamma + ideal_rate(gain, w) * (1 if fb.sign == "cool" else -1)
    if duration is None:
        duration = 3.0 / abs(expected) if abs(expected) > 0 else 2e-3
        duration = min(max(duration, 1e-3), 50e-3)
    kT = K_B * config.bath.temperature
    bath = BathParams(config.bath.temperature, config.bath.gamma)
    sim = Simulator(trap, config.particle, bath, steps_per_period=config.sim.steps_per_period,
                    thermal=thermal, seed=config.seed if seed is None else seed,
                    sample_rate=config.noise.sample_rate)
    e = e0_kbt * kT
    sim.set_state(state_from_energies(e if mode == "x" else 0.0, e if mode == "y" else 0.0,
                                      trap, config.mass, 0.3, 0.3))
    traj = sim.run_for(duration, Controls(config.drive.off(), 0.0, cfg_fb))
    ex, ey = traj.mode_energies(trap, config.mass)
    energy = ex if mode == "x" else ey
    tm, em = period_average(traj.t, energy, 2 * math.pi / w)
    if np.any(em <= 0):
        raise CalibrationError("energy reached zero during calibration")
    res = stats.linregress(tm, np.log(em))
    rate = -res.slope
    r2 = res.rvalue**2
    drop = abs(math.log(em[-1] / em[0]))
    resid = np.log(em) - (res.intercept + res.slope * tm)
    if drop > 0.05 and r2 < min_r_squared:
        raise CalibrationError(f"closed-loop decay is not exponential (R^2 = {r2:.3f})")
    if drop <= 0.05 and np.std(resid) > 0.05:
        raise CalibrationError("closed-loop energy is neither flat nor exponential")
    half = stats.t.ppf(0.975, len(tm) - 2) * res.stderr
    return FeedbackCalibration(rate, res.stderr, (rate - half, rate + half), r2, gain)

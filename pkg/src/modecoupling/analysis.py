"""Spectral estimation, Lorentzian fits, calibration and cooling limits.

PSDs are one-sided, in m^2/Hz over ordinary frequency, normalized so that
their integral equals the variance of the series. The thermal displacement
spectrum of a damped oscillator in that convention is

    S(f) = s0 * gamma / ((Omega^2 - w^2)^2 + gamma^2 w^2) + floor,  w = 2 pi f

with ``s0 = 4 k_B T / m``; its area without the floor is ``s0 / (4 Omega^2)``,
i.e. ``k_B T / (m Omega^2)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, signal
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fullsim import MeasuredRecord, demodulate
from .model import K_B, ConfigError, EstimationError, InvalidParameterError

__all__ = [
    "PsdEstimate",
    "LorentzianFit",
    "LorentzianPSD",
    "EnergySeries",
    "FitFailedError",
    "welch_psd",
    "lorentzian",
    "fit_lorentzian",
    "quadrature_variance",
    "cooling_limit",
    "energy_timeseries",
    "equipartition_scale",
    "write_psd_csv",
    "write_report",
]


class FitFailedError(EstimationError):
    pass


@dataclass(frozen=True)
class PsdEstimate:
    freq: np.ndarray
    psd: np.ndarray
    n_segments: int
    resolution: float

    def area(self, band: tuple[float, float] | None = None) -> float:
        f, p = self.freq, self.psd
        if band is not None:
            sel = (f >= band[0]) & (f <= band[1])
            f, p = f[sel], p[sel]
        return float(np.sum(p) * self.resolution)

    def peak_frequency(self, band: tuple[float, float] | None = None) -> float:
        f, p = self.freq, self.psd
        if band is not None:
            sel = (f >= band[0]) & (f <= band[1])
            f, p = f[sel], p[sel]
        return float(f[np.argmax(p)])


@dataclass(frozen=True)
class LorentzianFit:
    omega0: float
    gamma: float
    amplitude: float
    floor: float
    covariance: np.ndarray
    band: tuple[float, float]

    @property
    def f0(self) -> float:
        return self.omega0 / (2 * math.pi)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def area(self) -> float:
        """Integrated model power without the floor, m^2."""
        return self.amplitude / (4 * self.omega0**2)

    def temperature(self, mass: float) -> float:
        return self.amplitude * mass / (4 * K_B)

    def __call__(self, freq):
        return lorentzian(freq, self.omega0, self.gamma, self.amplitude, self.floor)


@dataclass(frozen=True)
class EnergySeries:
    t: np.ndarray
    energy: np.ndarray
    kbt: np.ndarray
    amplitude: np.ndarray


def welch_psd(series, sample_rate: float, nperseg: int | None = None, noverlap: int | None = None) -> PsdEstimate:
    """One-sided Hann-windowed Welch estimate."""
    x = np.asarray(series, dtype=float)
    if nperseg is None:
        nperseg = min(len(x), 4096)
    if nperseg < 8 or nperseg > len(x):
        raise ConfigError(f"segment length {nperseg} does not fit a series of length {len(x)}", "nperseg")
    if noverlap is None:
        noverlap = nperseg // 2
    f, p = signal.welch(x, fs=sample_rate, window="hann", nperseg=nperseg, noverlap=noverlap,
                        detrend="constant", scaling="density", return_onesided=True)
    n_seg = 1 + (len(x) - nperseg) // (nperseg - noverlap)
    return PsdEstimate(f, p, n_seg, sample_rate / nperseg)


def lorentzian(freq, omega0, gamma, amplitude, floor=0.0):
    w = 2 * np.pi * np.asarray(freq, dtype=float)
    return amplitude * gamma / ((omega0**2 - w**2) ** 2 + gamma**2 * w**2) + floor


class LorentzianPSD(RegressorMixin, BaseEstimator):
    """Damped-oscillator PSD model fitted by nonlinear least squares.

    ``fit(X, y)`` takes frequencies in Hz (one column) and PSD values; the
    residuals are taken on a log scale, which matches the multiplicative
    scatter of averaged periodograms. A fit counts as failed when the peak is
    not significant against a flat floor.

    Parameters
    ----------
    f0_guess : float, optional
        Centre frequency guess in Hz; the PSD maximum is used when omitted.
    gamma_guess : float, optional
        Linewidth guess in rad/s.
    fit_floor : bool
        Fit an additive flat floor.
    min_significance : float
        Required drop in normalized residual sum of squares against a
        floor-only model.
    max_iter : int
        Function evaluation budget for the optimizer.
    """

    def __init__(self, f0_guess=None, gamma_guess=None, fit_floor=True, min_significance=30.0, max_iter=2000):
        self.f0_guess = f0_guess
        self.gamma_guess = gamma_guess
        self.fit_floor = fit_floor
        self.min_significance = min_significance
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=6)
        f = X[:, 0]
        if np.any(y <= 0):
            raise FitFailedError("PSD values must be positive")
        logy = np.log(y)

        i_pk = int(np.argmax(y))
        f0 = self.f0_guess if self.f0_guess is not None else f[i_pk]
        w0 = 2 * math.pi * f0
        floor0 = float(np.percentile(y, 10)) if self.fit_floor else 0.0
        if self.gamma_guess is not None:
            g0 = self.gamma_guess
        else:
            half = y[i_pk] / 2
            above = f[y > max(half, floor0)]
            g0 = 2 * math.pi * max(above.max() - above.min(), f[1] - f[0]) if above.size else w0 / 10
        peak = max(y[i_pk] - floor0, y[i_pk] * 1e-3)
        s0 = peak * g0 * w0**2
        wmin, wmax = 2 * math.pi * f.min(), 2 * math.pi * f.max()

        def unpack(p):
            fl = math.exp(p[3]) if len(p) > 3 else 0.0
            return p[0], math.exp(p[1]), math.exp(p[2]), fl

        def resid(p):
            w, g, a, fl = unpack(p)
            return np.log(lorentzian(f, w, g, a, fl)) - logy

        p0 = [min(max(w0, wmin), wmax), math.log(g0), math.log(s0)]
        lo = [wmin, -np.inf, -np.inf]
        hi = [wmax, np.inf, np.inf]
        if self.fit_floor:
            p0.append(math.log(max(floor0, y.min() * 1e-3)))
            lo.append(-np.inf)
            hi.append(np.inf)
        try:
            res = optimize.least_squares(resid, p0, bounds=(lo, hi), max_nfev=self.max_iter, x_scale="jac")
        except (ValueError, FloatingPointError) as exc:
            raise FitFailedError(f"Lorentzian fit failed: {exc}") from None
        if not res.success:
            raise FitFailedError(f"Lorentzian fit did not converge: {res.message}")
        w, g, a, fl = unpack(res.x)

        n, k = len(f), len(res.x)
        ssr = float(np.sum(res.fun**2))
        sigma2 = ssr / max(n - k, 1)
        ssr_flat = float(np.sum((logy - logy.mean()) ** 2))
        significance = (ssr_flat - ssr) / sigma2 if sigma2 > 0 else np.inf
        edge = 2 * math.pi * (f[1] - f[0])
        if significance < self.min_significance:
            raise FitFailedError("no significant resonance above the noise floor")
        if w - wmin < edge or wmax - w < edge:
            raise FitFailedError("fitted resonance sits at the edge of the band")

        # covariance in (omega0, gamma, amplitude, floor) from the log-parameter Jacobian
        # pinv: a floor driven to zero leaves a null Jacobian column
        jac = res.jac
        cov_p = np.linalg.pinv(jac.T @ jac) * sigma2
        scale = np.array([1.0, g, a, fl][:k])
        cov = cov_p * np.outer(scale, scale)
        if k == 3:
            cov = np.pad(cov, ((0, 1), (0, 1)))

        self.omega0_, self.gamma_, self.amplitude_, self.floor_ = w, g, a, fl
        self.covariance_ = cov
        self.significance_ = significance
        self.band_ = (float(f.min()), float(f.max()))
        return self

    def predict(self, X):
        check_is_fitted(self, "omega0_")
        X = check_array(X)
        return lorentzian(X[:, 0], self.omega0_, self.gamma_, self.amplitude_, self.floor_)

    def result(self) -> LorentzianFit:
        check_is_fitted(self, "omega0_")
        return LorentzianFit(self.omega0_, self.gamma_, self.amplitude_, self.floor_, self.covariance_, self.band_)


def fit_lorentzian(psd: PsdEstimate, f0_guess: float | None = None, band: tuple[float, float] | None = None,
                   gamma_guess: float | None = None, fit_floor: bool = True) -> LorentzianFit:
    """Fit the damped-oscillator line shape inside ``band`` (Hz).

    Without a band, ``f0_guess +/- 15%`` is used, or the whole estimate if
    there is no guess either.
    """
    f, p = psd.freq, psd.psd
    if band is None and f0_guess is not None:
        band = (0.85 * f0_guess, 1.15 * f0_guess)
    sel = f > 0
    if band is not None:
        if f0_guess is not None and not band[0] <= f0_guess <= band[1]:
            raise FitFailedError("initial guess outside the fit band")
        sel &= (f >= band[0]) & (f <= band[1])
    if sel.sum() < 6:
        raise FitFailedError("too few spectral bins in the fit band")
    est = LorentzianPSD(f0_guess=f0_guess, gamma_guess=gamma_guess, fit_floor=fit_floor)
    est.fit(f[sel, None], p[sel])
    return est.result()


def quadrature_variance(sigma_u_sq: float, n: int) -> float:
    """Variance of one quadrature of a tone estimated from ``n`` samples."""
    if n < 1:
        raise InvalidParameterError("n must be >= 1")
    return 2.0 * sigma_u_sq / n


def cooling_limit(m: float, omega: float, s_noise: float, tau: float) -> tuple[float, float]:
    """Minimal mode energy reachable by energy-transfer cooling, (J, K).

    ``E_min = m Omega^2 S / (2 tau)``. A zero noise floor is allowed and
    gives zero.
    """
    if not m > 0 or not omega > 0 or not tau > 0:
        raise InvalidParameterError("mass, omega and tau must be positive")
    if not s_noise >= 0:
        raise InvalidParameterError("s_noise must be >= 0")
    e_min = 0.5 * m * omega**2 * s_noise / tau
    return e_min, e_min / K_B


def energy_timeseries(record: MeasuredRecord, omega: float, m: float, window: float, channel: str = "x",
                      t0_kelvin: float = 300.0, hop: int | None = None,
                      omega_rabi: float | None = None) -> EnergySeries:
    """Mode energy ``m Omega^2 |c|^2 / 2`` from sliding-window demodulation."""
    t, c = demodulate(record, omega, window, channel=channel, hop=hop, omega_rabi=omega_rabi)
    e = 0.5 * m * omega**2 * np.abs(c) ** 2
    return EnergySeries(t, e, e / (K_B * t0_kelvin), c)


def equipartition_scale(area_volts2: float, m: float, omega: float, t0_kelvin: float) -> float:
    """Detector gain (m/V) making the PSD area equal ``k_B T0 / (m Omega^2)``."""
    if not area_volts2 > 0:
        raise InvalidParameterError("area must be positive")
    return math.sqrt(K_B * t0_kelvin / (m * omega**2 * area_volts2))


def write_psd_csv(path: str | Path, psd: PsdEstimate, columns: dict[str, np.ndarray] | None = None) -> None:
    columns = columns or {}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f_hz", "psd_m2_per_hz", *columns])
        for i in range(len(psd.freq)):
            w.writerow([repr(float(psd.freq[i])), repr(float(psd.psd[i])),
                        *(repr(float(c[i])) for c in columns.values())])


def write_report(path: str | Path, values: dict) -> None:
    """Flat ``key = value`` text report."""
    lines = []
    for k, v in values.items():
        if isinstance(v, np.generic):
            v = v.item()
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")

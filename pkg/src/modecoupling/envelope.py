"""Two-mode envelope dynamics in the frame rotating with the modulation.

The complex amplitudes ``a_bar`` (x-mode) and ``b_bar`` (y-mode) obey

    i d/dt [a, b] = H [a, b],
    H = 1/2 [[delta - i gamma_a,   -A exp(-i psi)],
             [-A exp(+i psi),      -delta - i gamma_b]]

which is a damped two-level Schroedinger equation. ``psi = 0`` rotates the
Bloch vector about e1, ``psi = pi/2`` about e2. Populations ``|a|^2`` and
``|b|^2`` are measured in units of k_B T0.

Propagation is exact: H is constant on each drive segment and its exponential
has a closed form via ``H = h0 I + h . sigma``, which stays valid at the
exceptional point of the non-Hermitian matrix where an eigendecomposition
would break down.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace

import numpy as np

from .model import K_B, InvalidParameterError

__all__ = [
    "PAULI",
    "EnvelopeState",
    "EnvelopeParams",
    "BlochVector",
    "hamiltonian",
    "rabi_frequency",
    "propagator",
    "propagate",
    "evolve",
    "bloch_vector",
    "bloch_components",
    "decay_rates",
    "mode_energies",
    "state_from_populations",
]

PAULI = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


@dataclass(frozen=True)
class EnvelopeState:
    a_bar: complex
    b_bar: complex
    t: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.a_bar, self.b_bar], dtype=complex)

    @property
    def population(self) -> float:
        return abs(self.a_bar) ** 2 + abs(self.b_bar) ** 2


@dataclass(frozen=True)
class EnvelopeParams:
    delta: float = 0.0
    coupling_a: float = 0.0
    gamma_a: float = 0.0
    gamma_b: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        if self.gamma_a < 0 or self.gamma_b < 0:
            raise InvalidParameterError("damping rates must be >= 0")

    def with_(self, **kw) -> "EnvelopeParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class BlochVector:
    e1: float
    e2: float
    e3: float
    norm: float
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.e1, self.e2, self.e3])


def state_from_populations(p_a: float, p_b: float, rel_phase: float = 0.0, t: float = 0.0) -> EnvelopeState:
    """State with the given populations and phase of ``b_bar`` relative to ``a_bar``."""
    if p_a < 0 or p_b < 0:
        raise InvalidParameterError("populations must be >= 0")
    return EnvelopeState(complex(math.sqrt(p_a)), math.sqrt(p_b) * cmath.exp(1j * rel_phase), t)


def hamiltonian(params: EnvelopeParams) -> np.ndarray:
    p = params
    off = -p.coupling_a
    return 0.5 * np.array(
        [
            [p.delta - 1j * p.gamma_a, off * cmath.exp(-1j * p.psi)],
            [off * cmath.exp(1j * p.psi), -p.delta - 1j * p.gamma_b],
        ]
    )


def rabi_frequency(params: EnvelopeParams) -> float:
    return math.hypot(params.coupling_a, params.delta)


def _pauli_coefficients(p: EnvelopeParams):
    h0 = -0.25j * (p.gamma_a + p.gamma_b)
    h1 = -0.5 * p.coupling_a * math.cos(p.psi)
    h2 = -0.5 * p.coupling_a * math.sin(p.psi)
    h3 = 0.5 * (p.delta + 0.5j * (p.gamma_b - p.gamma_a))
    return h0, h1, h2, h3


def _sinc(z):
    # sin(z)/z for complex arrays, series near 0
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-6
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 - z * z / 6.0, np.sin(safe) / safe)


def propagator(params: EnvelopeParams, dt):
    """Exact ``exp(-i dt H)``.

    ``dt`` may be a scalar (returns a 2x2 matrix) or an array of times
    (returns an array of shape ``dt.shape + (2, 2)``).
    """
    dt_arr = np.asarray(dt, dtype=float)
    if np.any(dt_arr < 0):
        raise InvalidParameterError("dt must be >= 0")
    h0, h1, h2, h3 = _pauli_coefficients(params)
    s = cmath.sqrt(h1 * h1 + h2 * h2 + h3 * h3)
    phase = np.exp(-1j * h0 * dt_arr)
    c = np.cos(s * dt_arr)
    sn = dt_arr * _sinc(s * dt_arr)  # sin(s dt) / s
    u = np.empty(dt_arr.shape + (2, 2), dtype=complex)
    u[..., 0, 0] = phase * (c - 1j * sn * h3)
    u[..., 1, 1] = phase * (c + 1j * sn * h3)
    u[..., 0, 1] = phase * (-1j * sn * (h1 - 1j * h2))
    u[..., 1, 0] = phase * (-1j * sn * (h1 + 1j * h2))
    return u


def propagate(state: EnvelopeState, params: EnvelopeParams, dt: float) -> EnvelopeState:
    a, b = propagator(params, dt) @ state.vector
    return EnvelopeState(complex(a), complex(b), state.t + dt)


def evolve(state: EnvelopeState, params: EnvelopeParams, times) -> np.ndarray:
    """Amplitudes at absolute ``times`` (>= state.t) under constant params.

    Returns an array of shape ``(len(times), 2)``.
    """
    times = np.asarray(times, dtype=float)
    u = propagator(params, times - state.t)
    return u @ state.vector


def bloch_components(a, b):
    """Vectorized (e1, e2, e3, norm); degenerate entries are NaN."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    pa = np.abs(a) ** 2
    pb = np.abs(b) ** 2
    n = pa + pb
    with np.errstate(invalid="ignore", divide="ignore"):
        cross = np.conj(a) * b
        e1 = np.where(n > 0, 2 * cross.real / n, np.nan)
        e2 = np.where(n > 0, 2 * cross.imag / n, np.nan)
        e3 = np.where(n > 0, (pa - pb) / n, np.nan)
    return e1, e2, e3, n


def bloch_vector(state: EnvelopeState) -> BlochVector:
    n = state.population
    if n == 0:
        return BlochVector(0.0, 0.0, 0.0, 0.0, degenerate=True)
    cross = state.a_bar.conjugate() * state.b_bar
    return BlochVector(
        2 * cross.real / n,
        2 * cross.imag / n,
        (abs(state.a_bar) ** 2 - abs(state.b_bar) ** 2) / n,
        n,
    )


def decay_rates(params: EnvelopeParams) -> tuple[float, float]:
    """Population decay rates ``-2 Im(lambda)`` of the two eigenmodes, ascending."""
    h0, h1, h2, h3 = _pauli_coefficients(params)
    s = cmath.sqrt(h1 * h1 + h2 * h2 + h3 * h3)
    r = sorted((-2 * (h0 + s).imag, -2 * (h0 - s).imag))
    return r[0], r[1]


def mode_energies(state: EnvelopeState, t0_kelvin: float, weights=(1.0, 1.0)) -> tuple[float, float]:
    """Mode energies in joules, ``E = |amplitude|^2 k_B T0``.

    ``weights`` rescales each population; the protocols pass
    ``(omega_x, omega_y) / omega_ref`` when the amplitudes are normalized to
    action rather than energy.
    """
    if not t0_kelvin > 0:
        raise InvalidParameterError("t0_kelvin must be positive")
    kt = K_B * t0_kelvin
    return (abs(state.a_bar) ** 2 * kt * weights[0], abs(state.b_bar) ** 2 * kt * weights[1])

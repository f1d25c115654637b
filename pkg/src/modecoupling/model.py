"""Physical parameters, unit conventions and configuration handling.

Everything inside the package is SI with angular frequencies in rad/s.
Everything a user types (config files, CLI overrides) and everything written
to disk is in ordinary frequency units (Hz, kHz, MHz) with the unit carried
in the key name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from scipy.constants import Boltzmann as K_B
from scipy.constants import hbar as HBAR

__all__ = [
    "K_B",
    "HBAR",
    "SILICA_DENSITY",
    "ROOM_TEMPERATURE",
    "DEFAULT_SEED",
    "ModeCouplingError",
    "InvalidParameterError",
    "ConfigError",
    "EstimationError",
    "ParticleParams",
    "TrapParams",
    "BathParams",
    "NoiseModel",
    "DriveParams",
    "FeedbackConfig",
    "InitParams",
    "SimSettings",
    "ProtocolSettings",
    "LimitSettings",
    "Config",
    "hz_to_rad",
    "rad_to_hz",
    "mass_from_geometry",
    "ground_state_temperature",
    "coupling_rate",
    "validate_config",
    "parse_config_text",
    "load_config",
    "CONFIG_KEYS",
]

SILICA_DENSITY = 2200.0
ROOM_TEMPERATURE = 300.0
DEFAULT_SEED = 20160711
MAX_PHI0 = math.pi / 4


class ModeCouplingError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ModeCouplingError, ValueError):
    """A physical parameter is outside its domain."""


class ConfigError(ModeCouplingError, ValueError):
    """A configuration value is missing, malformed or violates an invariant."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class EstimationError(ModeCouplingError, RuntimeError):
    """A fit or estimation step did not produce a usable result."""


def hz_to_rad(f):
    return 2.0 * math.pi * f


def rad_to_hz(omega):
    return omega / (2.0 * math.pi)


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class ParticleParams:
    diameter: float
    density: float = SILICA_DENSITY

    def __post_init__(self):
        if not self.diameter > 0:
            raise InvalidParameterError(f"diameter must be positive, got {self.diameter!r}")
        if not self.density > 0:
            raise InvalidParameterError(f"density must be positive, got {self.density!r}")

    @property
    def mass(self) -> float:
        return mass_from_geometry(self.diameter, self.density)


@dataclass(frozen=True)
class TrapParams:
    omega_x: float
    omega_y: float

    def __post_init__(self):
        if not self.omega_x > 0 or not self.omega_y > 0:
            raise InvalidParameterError("trap frequencies must be positive")
        if self.omega_x == self.omega_y:
            raise InvalidParameterError("degenerate trap: omega_x == omega_y")

    @property
    def delta_omega(self) -> float:
        return self.omega_y - self.omega_x

    @property
    def omega_max(self) -> float:
        return max(self.omega_x, self.omega_y)

    def omega(self, mode: str) -> float:
        if mode == "x":
            return self.omega_x
        if mode == "y":
            return self.omega_y
        raise InvalidParameterError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class BathParams:
    temperature: float = ROOM_TEMPERATURE
    gamma: float = 0.0

    def __post_init__(self):
        if not self.temperature >= 0:
            raise InvalidParameterError("temperature must be >= 0")
        if not self.gamma >= 0:
            raise InvalidParameterError("gamma must be >= 0")

    @property
    def kT(self) -> float:
        return K_B * self.temperature


@dataclass(frozen=True)
class NoiseModel:
    """White position-detection noise.

    ``s_x_noise`` is the one-sided PSD in m^2/Hz; the per-sample variance at
    ``sample_rate`` is ``s_x_noise * sample_rate / 2``.
    """

    s_x_noise: float = 0.0
    sample_rate: float = 5e6

    def __post_init__(self):
        if not self.s_x_noise >= 0:
            raise InvalidParameterError("s_x_noise must be >= 0")
        if not self.sample_rate > 0:
            raise InvalidParameterError("sample_rate must be positive")

    @property
    def sample_variance(self) -> float:
        return self.s_x_noise * self.sample_rate / 2.0

    def check_nyquist(self, trap: TrapParams) -> None:
        if not self.sample_rate > 2.0 * rad_to_hz(trap.omega_max):
            raise InvalidParameterError(
                f"sample_rate {self.sample_rate:g} Hz is below the Nyquist rate "
                f"for {rad_to_hz(trap.omega_max):g} Hz"
            )


@dataclass(frozen=True)
class DriveParams:
    """Polarization modulation phi(t) = phi0 * cos(omega_mod * t - psi)."""

    phi0: float = 0.0
    omega_mod: float = 0.0
    psi: float = 0.0
    enabled: bool = True
    max_phi0: float = MAX_PHI0

    def __post_init__(self):
        if not abs(self.phi0) < self.max_phi0:
            raise InvalidParameterError(
                f"|phi0| = {abs(self.phi0):g} rad exceeds the small-angle guard {self.max_phi0:g}"
            )
        if self.enabled and self.phi0 != 0 and not self.omega_mod > 0:
            raise InvalidParameterError("omega_mod must be positive when the drive is enabled")

    @property
    def amplitude(self) -> float:
        return self.phi0 if self.enabled else 0.0

    def off(self) -> "DriveParams":
        return DriveParams(self.phi0, self.omega_mod, self.psi, False, self.max_phi0)

    def with_psi(self, psi: float) -> "DriveParams":
        return DriveParams(self.phi0, self.omega_mod, psi, self.enabled, self.max_phi0)


@dataclass(frozen=True)
class FeedbackConfig:
    """Parametric feedback on one mode.

    ``bandwidth`` is the lock-in low-pass corner in Hz. ``gamma_fb`` is the
    energy damping rate (rad/s) handed to the envelope model; when None it is
    taken from the ideal closed-loop relation ``gain * Omega / 2``.
    """

    target_mode: str = "y"
    gain: float = 0.0
    sign: str = "cool"
    eta_max: float = 0.1
    bandwidth: float = 5e3
    gamma_fb: float | None = None

    def __post_init__(self):
        if self.target_mode not in ("x", "y"):
            raise InvalidParameterError(f"target_mode must be 'x' or 'y', got {self.target_mode!r}")
        if self.sign not in ("cool", "heat"):
            raise InvalidParameterError(f"sign must be 'cool' or 'heat', got {self.sign!r}")
        if not self.gain >= 0:
            raise InvalidParameterError("gain must be >= 0")
        if not 0 < self.eta_max <= 0.1:
            raise InvalidParameterError("eta_max must lie in (0, 0.1]")
        if not self.bandwidth > 0:
            raise InvalidParameterError("bandwidth must be positive")
        if self.gamma_fb is not None and not self.gamma_fb >= 0:
            raise InvalidParameterError("gamma_fb must be >= 0")

    @property
    def active(self) -> bool:
        return self.gain > 0

    def rate(self, trap: TrapParams) -> float:
        """Extra energy damping rate of the target mode (negative when heating)."""
        if self.gamma_fb is not None:
            g = self.gamma_fb
        else:
            g = 0.5 * self.gain * trap.omega(self.target_mode)
        return g if self.sign == "cool" else -g


@dataclass(frozen=True)
class InitParams:
    e_x: float = 1.5
    e_y: float = 0.25
    phase: float | None = None

    def __post_init__(self):
        if not (self.e_x >= 0 and self.e_y >= 0):
            raise InvalidParameterError("initial energies must be >= 0")


@dataclass(frozen=True)
class SimSettings:
    backend: str = "envelope"
    duration: float = 20e-3
    steps_per_period: int = 200
    thermal: bool = True
    mode_weighting: str = "action"

    def __post_init__(self):
        if self.backend not in ("envelope", "fullsim"):
            raise InvalidParameterError(f"unknown backend {self.backend!r}")
        if not self.duration >= 0:
            raise InvalidParameterError("duration must be >= 0")
        if self.steps_per_period < 50:
            raise InvalidParameterError("steps_per_period must be >= 50")
        if self.mode_weighting not in ("action", "energy"):
            raise InvalidParameterError("mode_weighting must be 'action' or 'energy'")


@dataclass(frozen=True)
class ProtocolSettings:
    n_cycles: float = 3.0
    window: float = 50e-6
    t_on: float = 0.0

    def __post_init__(self):
        if not self.n_cycles >= 2:
            raise InvalidParameterError("n_cycles must be >= 2")
        if not self.window > 0:
            raise InvalidParameterError("window must be positive")
        if not self.t_on >= 0:
            raise InvalidParameterError("t_on must be >= 0")


@dataclass(frozen=True)
class LimitSettings:
    q_factor: float = 1e9
    tau: float | None = None
    mode: str = "y"

    def __post_init__(self):
        if not self.q_factor > 0:
            raise InvalidParameterError("q_factor must be positive")
        if self.tau is not None and not self.tau > 0:
            raise InvalidParameterError("tau must be positive")
        if self.mode not in ("x", "y"):
            raise InvalidParameterError("mode must be 'x' or 'y'")


# ---------------------------------------------------------------------------
# scalar physics


def mass_from_geometry(diameter: float, density: float) -> float:
    """Mass of a homogeneous sphere."""
    if not diameter > 0 or not density > 0:
        raise InvalidParameterError("diameter and density must be positive")
    return density * (math.pi / 6.0) * diameter**3


def ground_state_temperature(omega: float) -> float:
    """Temperature equivalent of one motional quantum, hbar * omega / k_B."""
    if not omega > 0:
        raise InvalidParameterError("omega must be positive")
    return HBAR * omega / K_B


def coupling_rate(phi0: float, trap: TrapParams, exact: bool = False) -> float:
    """Mode coupling rate A for a polarization modulation depth ``phi0``.

    The default is the leading-order result ``phi0 * (omega_y - omega_x)``.
    With ``exact=True`` the factor ``(omega_x + omega_y) / (2 sqrt(omega_x omega_y))``
    that appears when the envelopes are normalized to mode action is kept; it
    is within 1% of unity for the reference trap.
    """
    a = phi0 * trap.delta_omega
    if exact:
        a *= (trap.omega_x + trap.omega_y) / (2.0 * math.sqrt(trap.omega_x * trap.omega_y))
    return a


# ---------------------------------------------------------------------------
# flat key-value configuration


def _float(v):
    if isinstance(v, bool):
        raise ValueError("expected a number")
    return float(v)


def _int(v):
    if isinstance(v, bool):
        raise ValueError("expected an integer")
    if isinstance(v, str):
        return int(v.strip())
    if isinstance(v, float) and not v.is_integer():
        raise ValueError("expected an integer")
    return int(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _str(v):
    return str(v).strip()


def _opt_float(v):
    if v is None:
        return None
    if isinstance(v, str) and v.strip().lower() in ("", "none", "auto"):
        return None
    return _float(v)


# key -> (parser, default). ``None`` defaults mean "derived" or "random".
CONFIG_KEYS: dict[str, tuple[Any, Any]] = {
    "particle.diameter_nm": (_float, 136.0),
    "particle.density_kg_m3": (_float, SILICA_DENSITY),
    "trap.f_x_khz": (_float, 115.0),
    "trap.f_y_khz": (_float, 141.0),
    "bath.gamma_hz": (_float, 0.005),
    "bath.temperature_k": (_float, ROOM_TEMPERATURE),
    "drive.phi0_rad": (_float, 0.01),
    "drive.f_mod_khz": (_opt_float, None),
    "drive.psi_rad": (_float, 0.0),
    "noise.s_x_pm2_per_hz": (_float, 0.0),
    "noise.sample_rate_mhz": (_float, 5.0),
    "rng.seed": (_int, DEFAULT_SEED),
    "init.e_x_kbt": (_float, 1.5),
    "init.e_y_kbt": (_float, 0.25),
    "init.phase_rad": (_opt_float, None),
    "feedback.target": (_str, "y"),
    "feedback.gain": (_float, 0.0),
    "feedback.sign": (_str, "cool"),
    "feedback.eta_max": (_float, 0.1),
    "feedback.bandwidth_khz": (_float, 5.0),
    "feedback.gamma_fb_hz": (_opt_float, None),
    "sim.backend": (_str, "envelope"),
    "sim.duration_ms": (_float, 20.0),
    "sim.steps_per_period": (_int, 200),
    "sim.thermal": (_bool, True),
    "sim.mode_weighting": (_str, "action"),
    "protocol.n_cycles": (_float, 3.0),
    "protocol.window_us": (_float, 50.0),
    "protocol.t_on_ms": (_float, 0.0),
    "limit.q_factor": (_float, 1e9),
    "limit.tau_s": (_opt_float, None),
    "limit.mode": (_str, "y"),
}


@dataclass(frozen=True)
class Config:
    """Validated configuration.

    ``raw`` holds the canonical user-unit values (defaults filled in); the
    SI parameter records are derived from it. Two configs compare equal when
    their canonical values are equal.
    """

    raw: Mapping[str, Any]
    particle: ParticleParams = field(compare=False)
    trap: TrapParams = field(compare=False)
    bath: BathParams = field(compare=False)
    noise: NoiseModel = field(compare=False)
    drive: DriveParams = field(compare=False)
    feedback: FeedbackConfig = field(compare=False)
    init: InitParams = field(compare=False)
    sim: SimSettings = field(compare=False)
    protocol: ProtocolSettings = field(compare=False)
    limit: LimitSettings = field(compare=False)

    def __eq__(self, other):
        if not isinstance(other, Config):
            return NotImplemented
        return dict(self.raw) == dict(other.raw)

    def __hash__(self):
        return hash(tuple(sorted((k, repr(v)) for k, v in self.raw.items())))

    @property
    def seed(self) -> int:
        return self.raw["rng.seed"]

    @property
    def mass(self) -> float:
        return self.particle.mass

    def to_raw(self) -> dict[str, Any]:
        return dict(self.raw)

    def replace(self, **overrides) -> "Config":
        """Return a revalidated copy; keyword names use ``__`` for ``.``."""
        raw = self.to_raw()
        for k, v in overrides.items():
            raw[k.replace("__", ".")] = v
        return validate_config(raw)

    def to_text(self) -> str:
        lines = []
        for key in CONFIG_KEYS:
            v = self.raw[key]
            lines.append(f"{key} = {'auto' if v is None else _format_value(v)}")
        return "\n".join(lines) + "\n"


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _build(raw, key, ctor, *args, **kwargs):
    try:
        return ctor(*args, **kwargs)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc), key) from None


def validate_config(raw: Mapping[str, Any] | Config | None = None) -> Config:
    """Check a flat key-value mapping and build the SI parameter records.

    Unknown keys are rejected, missing keys take their defaults, and every
    violated invariant is reported with the offending key.
    """
    if isinstance(raw, Config):
        return raw
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}", unknown[0])

    canon: dict[str, Any] = {}
    for key, (parse, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                canon[key] = parse(raw[key])
            except (TypeError, ValueError):
                raise ConfigError(f"cannot parse value {raw[key]!r}", key) from None
            if isinstance(canon[key], float) and not math.isfinite(canon[key]):
                raise ConfigError("value must be finite", key)
        else:
            canon[key] = default

    particle = _build(canon, "particle.diameter_nm", ParticleParams,
                      canon["particle.diameter_nm"] * 1e-9, canon["particle.density_kg_m3"])
    if canon["trap.f_x_khz"] == canon["trap.f_y_khz"]:
        raise ConfigError("degenerate trap: f_x equals f_y", "trap.f_y_khz")
    trap = _build(canon, "trap.f_x_khz", TrapParams,
                  hz_to_rad(canon["trap.f_x_khz"] * 1e3), hz_to_rad(canon["trap.f_y_khz"] * 1e3))
    bath = _build(canon, "bath.gamma_hz", BathParams,
                  canon["bath.temperature_k"], hz_to_rad(canon["bath.gamma_hz"]))
    noise = _build(canon, "noise.s_x_pm2_per_hz", NoiseModel,
                   canon["noise.s_x_pm2_per_hz"] * 1e-24, canon["noise.sample_rate_mhz"] * 1e6)
    try:
        noise.check_nyquist(trap)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc), "noise.sample_rate_mhz") from None

    f_mod = canon["drive.f_mod_khz"]
    omega_mod = trap.delta_omega if f_mod is None else hz_to_rad(f_mod * 1e3)
    if omega_mod <= 0:
        raise ConfigError("modulation frequency must be positive (f_y > f_x expected)", "drive.f_mod_khz")
    drive = _build(canon, "drive.phi0_rad", DriveParams,
                   canon["drive.phi0_rad"], omega_mod, canon["drive.psi_rad"])

    gfb = canon["feedback.gamma_fb_hz"]
    feedback = _build(canon, "feedback", FeedbackConfig,
                      canon["feedback.target"], canon["feedback.gain"], canon["feedback.sign"],
                      canon["feedback.eta_max"], canon["feedback.bandwidth_khz"] * 1e3,
                      None if gfb is None else hz_to_rad(gfb))
    init = _build(canon, "init", InitParams,
                  canon["init.e_x_kbt"], canon["init.e_y_kbt"], canon["init.phase_rad"])
    sim = _build(canon, "sim", SimSettings,
                 canon["sim.backend"], canon["sim.duration_ms"] * 1e-3,
                 canon["sim.steps_per_period"], canon["sim.thermal"], canon["sim.mode_weighting"])
    protocol = _build(canon, "protocol", ProtocolSettings,
                      canon["protocol.n_cycles"], canon["protocol.window_us"] * 1e-6,
                      canon["protocol.t_on_ms"] * 1e-3)
    limit = _build(canon, "limit", LimitSettings,
                   canon["limit.q_factor"], canon["limit.tau_s"], canon["limit.mode"])
    if canon["rng.seed"] < 0:
        raise ConfigError("seed must be >= 0", "rng.seed")

    return Config(canon, particle, trap, bath, noise, drive, feedback, init, sim, protocol, limit)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key", key)
        out[key] = value
    return out


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    raw: dict[str, Any] = parse_config_text(text)
    raw.update(overrides or {})
    return validate_config(raw)

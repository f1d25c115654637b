"""Command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 estimation or fit
failure. Every run writes ``manifest.json`` into the output directory first
(status ``running``) and finalizes it with artifact hashes afterwards. A
manifest can be passed back as ``--config`` to repeat a run exactly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import envelope as env
from .analysis import (
    cooling_limit,
    energy_timeseries,
    fit_lorentzian,
    welch_psd,
    write_psd_csv,
    write_report,
)
from .fullsim import MeasuredRecord
from .model import (
    K_B,
    Config,
    ConfigError,
    EstimationError,
    InvalidParameterError,
    ModeCouplingError,
    ground_state_temperature,
    parse_config_text,
    validate_config,
)
from .protocols import (
    ProtocolAborted,
    cooling_floor_monte_carlo,
    envelope_params,
    estimate_rabi_phase,
    run_energy_transfer,
    run_rabi,
    run_sympathetic,
    weights,
)

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None = None
    config_text: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    exit_code: int | None = None
    message: str = ""

    def write(self, out: Path) -> None:
        data = {
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "config": self.config_text,
            "outputs": self.outputs,
            "status": self.status,
            "exit_code": self.exit_code,
            "message": self.message,
            "version": __version__,
        }
        (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def finalize(self, out: Path, files: list[Path], code: int, message: str = "") -> None:
        self.outputs = {p.name: _sha256(p) for p in files if p.exists()}
        self.status = "ok" if code == EXIT_OK else "failed"
        self.exit_code = code
        self.message = message
        self.write(out)


def _parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value", "--override")
        out[key.strip()] = value.strip()
    return out


def _load(args) -> tuple[Config, int | None]:
    raw: dict = {}
    seed = None
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", "--config") from None
        if path.suffix == ".json":
            try:
                man = json.loads(text)
                text, seed = man["config"], man.get("seed")
            except (ValueError, KeyError, TypeError):
                raise ConfigError("not a run manifest", "--config") from None
        raw.update(parse_config_text(text))
    raw.update(_parse_overrides(args.override))
    if args.seed is not None:
        seed = args.seed
    if seed is not None:
        raw["rng.seed"] = seed
    cfg = validate_config(raw)
    return cfg, cfg.seed


# ---------------------------------------------------------------------------
# gnuplot companions


def _gnuplot(path: Path, data: str, columns: list[str], xlabel: str, logy: bool = False) -> Path:
    lines = ["set datafile separator ','", "set key autotitle columnhead", f"set xlabel '{xlabel}'"]
    if logy:
        lines.append("set logscale y")
    plots = [f"'{data}' using 1:{i + 2} with lines" for i in range(len(columns))]
    lines.append("plot " + ", \\\n     ".join(plots))
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _trace_outputs(out: Path, trace, summary: dict, gnuplot: bool) -> list[Path]:
    files = [out / "trace.csv", out / "events.csv", out / "summary.txt"]
    trace.to_csv(files[0])
    trace.events_to_csv(files[1])
    write_report(files[2], summary)
    if hasattr(trace.source, "record"):
        files.append(out / "record.csv")
        trace.source.record().to_csv(files[-1])
    if gnuplot:
        files.append(_gnuplot(out / "trace.gp", "trace.csv", ["E_x_kbt", "E_y_kbt"], "t (s)"))
    return files


def _final(trace) -> dict:
    return {"final_E_x_kbt": float(trace.e_x[-1]), "final_E_y_kbt": float(trace.e_y[-1])}


def cmd_rabi(cfg: Config, args, out: Path) -> list[Path]:
    trace = run_rabi(cfg)
    d = trace.diagnostics
    summary = {"backend": d["backend"], "seed": cfg.seed, **_final(trace), "omega_r_model": d["omega_r"],
               "coupling_a": d["coupling_a"], "delta": d["delta"]}
    if cfg.drive.amplitude > 0:
        # population fraction: a pure cosine, free of the common decay
        w = weights(cfg)[0]
        p_y = trace.e_y / w[1]
        frac = p_y / (trace.e_x / w[0] + p_y)
        sel = trace.t >= cfg.protocol.t_on
        fit = estimate_rabi_phase(trace.t[sel], frac[sel], omega_guess=d["omega_r"])
        summary.update(omega_r_fit=fit.omega_r, rabi_period_fit_s=2 * math.pi / fit.omega_r,
                       fit_residual=fit.residual)
    return _trace_outputs(out, trace, summary, args.gnuplot)


def cmd_sympathetic(cfg: Config, args, out: Path) -> list[Path]:
    if not cfg.feedback.active:
        raise ConfigError("sympathetic cooling needs a nonzero feedback gain", "feedback.gain")
    trace = run_sympathetic(cfg)
    d = trace.diagnostics
    rates = d["decay_rates"]
    summary = {"backend": d["backend"], "seed": cfg.seed, **_final(trace), "omega_r_model": d["omega_r"],
               "gamma_fb": d["gamma_fb"], "decay_rate_slow": rates[0], "decay_rate_fast": rates[1]}
    return _trace_outputs(out, trace, summary, args.gnuplot)


def cmd_transfer(cfg: Config, args, out: Path) -> list[Path]:
    try:
        res = run_energy_transfer(cfg, init=(cfg.init.e_x, cfg.init.e_y), oracle=args.oracle)
    except ProtocolAborted as exc:
        exc.trace.to_csv(out / "trace.csv")
        raise
    tr = res.trace
    d = tr.diagnostics
    summary = {"backend": d["backend"], "seed": cfg.seed, "final_E_x_kbt": res.final_e_x,
               "final_E_y_kbt": res.final_e_y, "final_fraction_y": res.final_fraction,
               "omega_r_model": d["omega_r"], "monitor_s": d["monitor"], "timing_floor_s": d["timing_floor"]}
    for name, fit in tr.fits.items():
        summary[f"{name}_omega_r_fit"] = fit.omega_r
        summary[f"{name}_residual"] = fit.residual
    for ev in res.events:
        summary[f"t_{ev.name}_s"] = ev.executed
    return _trace_outputs(out, tr, summary, args.gnuplot)


def _read_record(path: Path) -> MeasuredRecord:
    try:
        if path.suffix in (".bin", ".f64"):
            raw = np.frombuffer(path.read_bytes(), dtype="<f8")
            if raw.size == 0 or raw.size % 5:
                raise ValueError("binary record must hold rows of 5 float64 values")
            arr = raw.reshape(-1, 5)
            t, x, y = arr[:, 0], arr[:, 1], arr[:, 3]
        else:
            with path.open() as fh:
                header = next(csv.reader(fh), None)
            if not header or header[0] != "t_s":
                raise ValueError("missing t_s header")
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            if "x_m" not in header or "y_m" not in header:
                raise ValueError("record needs x_m and y_m columns")
            t, x, y = data[:, 0], data[:, header.index("x_m")], data[:, header.index("y_m")]
    except (OSError, ValueError, StopIteration) as exc:
        raise ConfigError(f"cannot read record: {exc}", "record") from None
    if len(t) < 16 or not np.all(np.isfinite(np.c_[t, x, y])) or np.any(np.diff(t) <= 0):
        raise ConfigError("record is too short, non-finite or not time-ordered", "record")
    return MeasuredRecord(t, x, y, 1.0 / float(np.median(np.diff(t))))


def cmd_analyze(cfg: Config, args, out: Path) -> list[Path]:
    rec = _read_record(Path(args.record))
    mode = args.mode
    omega = cfg.trap.omega(mode)
    psd = welch_psd(rec.channel(mode), rec.sample_rate, nperseg=min(len(rec.t), args.nperseg))
    files = [out / "psd.csv", out / "fit.txt", out / "energy.csv"]
    write_psd_csv(files[0], psd)
    fit = fit_lorentzian(psd, f0_guess=omega / (2 * math.pi))
    write_psd_csv(files[0], psd, {"fit_m2_per_hz": fit(psd.freq)})
    err = fit.stderr
    write_report(files[1], {
        "mode": mode, "f0_hz": fit.f0, "f0_stderr_hz": float(err[0]) / (2 * math.pi),
        "gamma_rad_s": fit.gamma, "gamma_stderr_rad_s": float(err[1]), "amplitude": fit.amplitude,
        "floor_m2_per_hz": fit.floor, "area_m2": fit.area(), "temperature_k": fit.temperature(cfg.mass),
        "psd_resolution_hz": psd.resolution, "n_segments": psd.n_segments,
    })
    es = energy_timeseries(rec, omega, cfg.mass, cfg.protocol.window, channel=mode,
                           t0_kelvin=cfg.bath.temperature)
    with files[2].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t_s", "E_J", "E_kbt"))
        for row in zip(es.t, es.energy, es.kbt):
            w.writerow([repr(float(v)) for v in row])
    if args.gnuplot:
        files.append(_gnuplot(out / "psd.gp", "psd.csv", ["psd", "fit"], "f (Hz)", logy=True))
    return files


def cmd_limit(cfg: Config, args, out: Path) -> list[Path]:
    lim = cfg.limit
    omega = cfg.trap.omega(lim.mode)
    tau = lim.tau if lim.tau is not None else lim.q_factor / omega
    e_min, t_min = cooling_limit(cfg.mass, omega, cfg.noise.s_x_noise, tau)
    t_ground = ground_state_temperature(omega)
    values = {"mode": lim.mode, "mass_kg": cfg.mass, "omega_rad_s": omega, "s_noise_m2_per_hz": cfg.noise.s_x_noise,
              "tau_s": tau, "E_min_J": e_min, "T_min_K": t_min, "T_ground_K": t_ground,
              "below_ground_state": t_min < t_ground}
    path = out / "limit.txt"
    write_report(path, values)
    for k, v in values.items():
        print(f"{k} = {v}")
    print("verdict: T_min " + ("<" if t_min < t_ground else ">=") + " T_ground")
    return [path]


def cmd_montecarlo(cfg: Config, args, out: Path) -> list[Path]:
    tau = args.tau_ms * 1e-3 if args.tau_ms else cfg.protocol.n_cycles * 2 * math.pi / env.rabi_frequency(
        envelope_params(cfg, cfg.drive))
    res = cooling_floor_monte_carlo(cfg, tau, trials=args.trials, jobs=args.jobs)
    if len(res.final_e_y) == 0:
        raise EstimationError("every Monte Carlo trial failed to estimate its switch times")
    files = [out / "floor.csv", out / "summary.txt"]
    kT = K_B * cfg.bath.temperature
    with files[0].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("trial", "final_E_y_J", "final_E_y_kbt"))
        for i, e in enumerate(res.final_e_y):
            w.writerow((i, repr(float(e)), repr(float(e / kT))))
    write_report(files[1], {"seed": cfg.seed, "trials": args.trials, "failures": res.failures, "tau_s": tau,
                            "s_noise_m2_per_hz": res.s_noise, "mean_E_y_J": res.mean,
                            "stderr_E_y_J": res.stderr, "predicted_E_min_J": res.predicted,
                            "ratio_to_prediction": res.mean / res.predicted if res.predicted > 0 else float("inf")})
    return files


COMMANDS = {
    "rabi": cmd_rabi,
    "sympathetic": cmd_sympathetic,
    "transfer": cmd_transfer,
    "analyze": cmd_analyze,
    "limit": cmd_limit,
    "montecarlo": cmd_montecarlo,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file, or a manifest.json to repeat a run")
    common.add_argument("--seed", type=int, help="override rng.seed")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for Monte Carlo batches")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--gnuplot", action="store_true", help="also write gnuplot scripts next to the CSVs")

    p = argparse.ArgumentParser(prog="modecoupling", description="Coupled-mode cooling of a levitated particle.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("rabi", parents=[common], help="free energy exchange between the modes")
    sub.add_parser("sympathetic", parents=[common], help="feedback on one mode, coupling to the other")
    tr = sub.add_parser("transfer", parents=[common], help="three-stage energy-transfer cooling")
    tr.add_argument("--oracle", action="store_true", help="exact switch times (envelope backend only)")
    an = sub.add_parser("analyze", parents=[common], help="PSD, Lorentzian fit and energy series of a record")
    an.add_argument("record", help="trajectory/record CSV, or .bin with 5 float64 columns")
    an.add_argument("--mode", choices=("x", "y"), default="x")
    an.add_argument("--nperseg", type=int, default=1 << 16)
    sub.add_parser("limit", parents=[common], help="noise-limited minimal energy and temperature")
    mc = sub.add_parser("montecarlo", parents=[common], help="cooling-floor Monte Carlo")
    mc.add_argument("--trials", type=int, default=200)
    mc.add_argument("--tau-ms", type=float, default=None, help="observation time per stage")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(args.command, argv)
    man.write(out)
    try:
        if args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        cfg, seed = _load(args)
        man.seed, man.config_text = seed, cfg.to_text()
        man.write(out)
        files = COMMANDS[args.command](cfg, args, out)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        man.finalize(out, [], EXIT_CONFIG, str(exc))
        return EXIT_CONFIG
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        man.finalize(out, [out / "trace.csv"], EXIT_ESTIMATION, str(exc))
        return EXIT_ESTIMATION
    except ModeCouplingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        man.finalize(out, [], EXIT_CONFIG, str(exc))
        return EXIT_CONFIG
    missing = [p.name for p in files if not p.exists()]
    if missing:
        raise RuntimeError(f"outputs missing after run: {missing}")
    man.finalize(out, files, EXIT_OK)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

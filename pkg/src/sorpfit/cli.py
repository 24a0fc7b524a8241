"""Command-line front end.

Subcommands ``fit``, ``sensitivity``, ``abc``, ``sgi`` and ``report``.
Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 ABC stall.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import DatasetError, resolve_dataset, save_dataset
from .models import Model, ModelError, PRIOR_BOUNDS

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STALL = 0, 2, 3, 4
ENV_OUT = "SORPFIT_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = "bundled:table1"
    models: tuple = tuple(Model)
    seed: int | None = 0
    out: Path = field(default_factory=lambda: Path(os.environ.get(ENV_OUT, "sorpfit-out")))
    populations: int = 22
    particles: int = 4000
    kappa0: float = 0.01
    plots: bool = False
    trials: int = 1000
    planted: bool = False
    mode: str = "box"
    curve_tol: float = 1e-10
    param_tol: float = 1e-3
    priors: dict = field(default_factory=dict)   # Model -> ((lo, hi), ...)

    def box(self, m: Model):
        from .sensitivity import ParamBox
        return ParamBox.from_pairs(self.priors.get(m, PRIOR_BOUNDS[m]))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _models(v) -> tuple:
    if isinstance(v, (tuple, list)):
        items = list(v)
    else:
        items = [x for x in str(v).replace(" ", "").split(",") if x]
    if not items or items == ["all"]:
        return tuple(Model)
    try:
        out = tuple(dict.fromkeys(Model.parse(x) for x in items))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return out


_CASTS = {"data": str, "models": _models, "seed": int, "out": Path, "populations": int,
          "particles": int, "kappa0": float, "plots": _bool, "trials": int, "planted": _bool,
          "mode": str, "curve_tol": float, "param_tol": float}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment.

    Prior overrides use ``prior.MODEL.pN = lo hi``.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("prior."):
            values.setdefault("priors", []).append((key, val, f"{source}:{lineno}"))
            continue
        if key not in _CASTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = val
    return values


def _apply_priors(cfg: RunConfig, entries):
    for key, val, where in entries:
        parts = key.split(".")
        if len(parts) != 3 or not parts[2].startswith("p"):
            raise ConfigError(f"{where}: prior keys look like prior.GAB.p3")
        try:
            m = Model.parse(parts[1])
            n = int(parts[2][1:]) - 1
            lo, hi = (float(x) for x in val.replace(",", " ").split())
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from None
        if not 0 <= n < m.n_params:
            raise ConfigError(f"{where}: {m.name} has no parameter p{n + 1}")
        if not lo < hi:
            raise ConfigError(f"{where}: empty interval [{lo}, {hi}]")
        bounds = list(cfg.priors.get(m, PRIOR_BOUNDS[m]))
        bounds[n] = (lo, hi)
        cfg.priors[m] = tuple(bounds)


def build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        raw.update(parse_config_text(text, str(path)))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "priors":
            raw[f.name] = v
    priors = raw.pop("priors", [])
    for k, v in raw.items():
        try:
            setattr(cfg, k, _CASTS[k](v))
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {k}: {v!r} ({e})") from None
    _apply_priors(cfg, priors)
    if cfg.mode not in ("box", "axis"):
        raise ConfigError(f"mode must be 'box' or 'axis', got {cfg.mode!r}")
    for k in ("populations", "particles", "trials"):
        if getattr(cfg, k) < 1:
            raise ConfigError(f"{k} must be at least 1")
    if not cfg.kappa0 > 0:
        raise ConfigError("kappa0 must be positive")
    if not (cfg.curve_tol > 0 and cfg.param_tol > 0):
        raise ConfigError("tolerances must be positive")
    return cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _load(cfg):
    try:
        return resolve_dataset(cfg.data)
    except (OSError, DatasetError) as e:
        raise ConfigError(f"cannot load data {cfg.data!r}: {e}") from None


def _outdir(cfg) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def cmd_fit(cfg: RunConfig) -> list:
    from .estimation import fit_least_squares, residual_profile, write_fit_table
    ds = _load(cfg)
    results = [fit_least_squares(m, ds, cfg.box(m)) for m in cfg.models]
    out = _outdir(cfg)
    written = [write_fit_table(results, out / "fit_results.csv"), save_dataset(ds, out / "dataset.csv")]
    profiles = {}
    for r in results:
        prof = residual_profile(r.model, r.p_est, ds)
        profiles[r.model.name] = prof
        path = out / f"residuals_{r.model.name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["activity", "residual"])
            w.writerows([[repr(float(a)), repr(float(x))] for a, x in prof])
        written.append(path)
    if cfg.plots:
        from . import report
        written.append(report.plot_fits(ds, results, out / "fit_curves.svg"))
        written.append(report.plot_residuals(profiles, ds, out / "fit_residuals.svg"))
    for r in results:
        print(f"{r.model.name:5s} p°={np.array2string(r.p_est, precision=4)} "
              f"d={r.distance:.4g} sse={r.sse:.4g}")
    return written


def cmd_sensitivity(cfg: RunConfig) -> list:
    from .sensitivity import sensitivity_report
    out = _outdir(cfg)
    reports = [sensitivity_report(m, cfg.box(m), mode=cfg.mode) for m in cfg.models]
    path = out / "gamma_total.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"gamma{k}" for k in range(1, 5)] + ["converged", "singular"])
        for r in reports:
            g = [repr(float(x)) for x in r.gamma_total] + [""] * (4 - len(r.gamma_total))
            w.writerow([r.model.name] + g + [int(r.converged), int(r.singular)])
    written = [path]
    for r in reports:
        written.append(r.write_curves(out / f"gamma_local_{r.model.name}.csv"))
        if cfg.plots:
            from . import report
            written.append(report.plot_gamma(r, out / f"gamma_local_{r.model.name}.svg"))
        print(f"{r.model.name:5s} gammaT={np.array2string(r.gamma_total, precision=4)}")
    return written


def cmd_abc(cfg: RunConfig) -> list:
    from .abc_smc import AbcConfig, run_abc, write_outputs
    if cfg.seed is None:
        raise ConfigError("abc requires a seed")
    ds = _load(cfg)
    acfg = AbcConfig(n_populations=cfg.populations, n_particles=cfg.particles, kappa0=cfg.kappa0,
                     seed=cfg.seed, models=cfg.models)
    out = cfg.out

    def progress(p):
        counts = {m.name: c for m, c in p.counts(acfg.models).items() if c}
        print(f"population {p.index + 1:2d} eps={p.epsilon:.4g} tau={p.acceptance_rate:.4f} {counts}",
              flush=True)

    res = run_abc(acfg, ds, {m: cfg.box(m) for m in cfg.models}, progress=progress)
    paths = write_outputs(res, _outdir(cfg))
    written = list(paths.values())
    if cfg.plots:
        from . import report
        written.append(report.plot_selection(res, out / "abc_selection.svg"))
        written.append(report.plot_tolerance(res, out / "abc_tolerance.svg"))
        p = report.plot_posterior(res, out / "abc_posterior.svg")
        if p:
            written.append(p)
    print(f"selected: {res.selected().name}")
    return written


def cmd_sgi(cfg: RunConfig) -> list:
    from .sgi import planted_control, sgi_falsify, write_sgi_table
    reports = []
    for m in cfg.models:
        r = sgi_falsify(m, cfg.box(m), cfg.trials, cfg.curve_tol, cfg.param_tol, cfg.seed)
        reports.append(r)
        print(f"{r.model:8s} {r.verdict} (curve {r.curve_distance:.3g}, params {r.param_distance:.3g})")
    if cfg.planted:
        model, box = planted_control()
        r = sgi_falsify(model, box, min(cfg.trials, 100), cfg.curve_tol, cfg.param_tol, cfg.seed)
        reports.append(r)
        print(f"{r.model:8s} {r.verdict} (curve {r.curve_distance:.3g}, params {r.param_distance:.3g})")
    return [write_sgi_table(reports, _outdir(cfg) / "sgi_summary.csv")]


def cmd_report(cfg: RunConfig) -> list:
    from . import report
    cfg.plots = True
    sections = [("Least-squares fits", cmd_fit(cfg)),
                ("Primary identifiability", cmd_sensitivity(cfg)),
                ("Structural identifiability probe", cmd_sgi(cfg)),
                ("ABC model selection", cmd_abc(cfg))]
    index = report.write_index(cfg.out, sections)
    print(f"report: {index}")
    return [index]


COMMANDS = {"fit": cmd_fit, "sensitivity": cmd_sensitivity, "abc": cmd_abc, "sgi": cmd_sgi,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--data", help="CSV file or bundled:table1 (default)")
    common.add_argument("--models", help="comma separated model names, or 'all'")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./sorpfit-out)")
    common.add_argument("--plots", action="store_const", const="true", help="also write SVG figures")

    p = argparse.ArgumentParser(prog="sorpfit", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("fit", parents=[common], help="least-squares fit of every model")
    s = sub.add_parser("sensitivity", parents=[common], help="sensitivity indices")
    s.add_argument("--mode", choices=("box", "axis"), help="total-index integration domain")
    for name in ("abc", "report"):
        a = sub.add_parser(name, parents=[common],
                           help="ABC-SMC model selection" if name == "abc" else "all of the above plus index.html")
        a.add_argument("--populations", type=int, help="number of populations (default 22)")
        a.add_argument("--particles", type=int, help="particles per population (default 4000)")
        a.add_argument("--kappa0", type=float, help="kernel scale (default 0.01)")
        a.add_argument("--trials", type=int, help="SGI trials per model (report only)")
    g = sub.add_parser("sgi", parents=[common], help="identifiability falsification probe")
    g.add_argument("--trials", type=int, help="trials per model (default 1000)")
    g.add_argument("--planted", action="store_const", const="true",
                   help="add the non-identifiable control model")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        if args.command == "abc" and cfg.seed is None:
            raise ConfigError("abc requires a seed")
        return _run(args.command, cfg)
    except ConfigError as e:
        print(f"sorpfit: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def _run(command: str, cfg: RunConfig) -> int:
    from .abc_smc import AbcError, AbcStall
    from .sensitivity import SensitivityError
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[command](cfg)
    except ConfigError:
        raise
    except AbcStall as e:
        print(f"sorpfit: ABC stalled: {e}", file=sys.stderr)
        if e.populations:
            from .abc_smc import AbcConfig, AbcResult, write_outputs
            acfg = AbcConfig(n_populations=len(e.populations), n_particles=cfg.particles,
                             kappa0=cfg.kappa0, seed=cfg.seed, models=cfg.models)
            partial = AbcResult(acfg, np.array([p.epsilon for p in e.populations]), e.populations)
            write_outputs(partial, _outdir(cfg))
        return EXIT_STALL
    except AbcError as e:
        print(f"sorpfit: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, SensitivityError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"sorpfit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

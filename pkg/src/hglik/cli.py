"""Command-line front end.

Exit codes: 0 success, 1 input or configuration error, 2 fit did not
converge (outputs still written), 3 too many failed simulation replicates.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import predict as _predict
from . import structures
from .aphl import param_profile, re_profile
from .errors import HglikError, SimulationError
from .fit import fit
from .model import build_model, read_table
from .uncert import DEFAULT_TRUTH, CoverageConfig, coverage_sim, var_decomp, wald_intervals

EXIT_OK, EXIT_INPUT, EXIT_NONCONV, EXIT_SIM = 0, 1, 2, 3


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    output_dir: Path
    data_path: Path = None
    config_path: Path = None
    seed: int = None
    flags: dict = field(default_factory=dict)

    def check(self):
        for p in (self.data_path, self.config_path):
            if p is not None and not (p.is_file() and os.access(p, os.R_OK)):
                raise InputError(f"cannot read {p}")
        if self.output_dir.exists() and not self.output_dir.is_dir():
            raise InputError(f"output path {self.output_dir} is not a directory")


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: expected a JSON object")
    return cfg


def _g(x) -> str:
    return "%.17g" % x


def _model(rc: RunConfig):
    return build_model(read_table(rc.data_path), _load_json(rc.config_path))


def cmd_fit(rc: RunConfig) -> int:
    model = _model(rc)
    res = fit(model)
    decomp = var_decomp(model, res)
    ci = wald_intervals(decomp, res, 0.95, "hlik")
    buf = io.StringIO()
    buf.write("effect_index,group_label,v_hat,se_eb,se_hlik,ci_low,ci_high\n")
    for i, lab in enumerate(model.effect_labels):
        buf.write(",".join([str(i + 1), str(lab), _g(res.state.v[i]), _g(np.sqrt(decomp.eb_var[i])),
                            _g(np.sqrt(decomp.hlik_var[i])), _g(ci.lower[i]), _g(ci.upper[i])]) + "\n")
    _write_atomic(rc.output_dir / "fit-summary.json", res.to_json(model, decomp) + "\n")
    _write_atomic(rc.output_dir / "random-effects.csv", buf.getvalue())
    est = res.state
    parts = [f"{n}={b:.6g}" for n, b in zip(model.beta_names, est.beta)]
    parts += [f"{n}={d:.6g}" for n, d in est.dispersion.items()]
    print(("converged" if res.converged else "NOT converged") + ": " + " ".join(parts))
    return EXIT_OK if res.converged else EXIT_NONCONV


def parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise InputError(f"grid must be lo:hi:n, got {text!r}") from None
    if not (lo < hi and n >= 3):
        raise InputError("grid needs lo < hi and n >= 3")
    return np.linspace(lo, hi, n)


def cmd_profile(rc: RunConfig) -> int:
    grid = parse_grid(rc.flags["grid"]) if rc.flags.get("grid") else None
    model = _model(rc)
    res = fit(model)
    verbose = rc.flags.get("verbose")
    if rc.flags.get("effect") is not None:
        idx = int(rc.flags["effect"]) - 1
        if not 0 <= idx < model.k:
            raise InputError(f"effect index must lie in 1..{model.k}")
        if grid is None:
            se = np.sqrt(var_decomp(model, res).hlik_var[idx])
            grid = np.linspace(res.state.v[idx] - 4 * se, res.state.v[idx] + 4 * se, 41)
        curve = re_profile(model, res, idx, grid)
    else:
        name = rc.flags["param"]
        valid = tuple(model.beta_names) + tuple(model.dispersion_names)
        if name not in valid:
            raise InputError(f"unknown parameter {name!r}; valid names: {', '.join(valid)}")
        curve = param_profile(model, name, grid=grid, fit_result=res)
    if verbose:
        for t, val, ok in zip(curve.grid, curve.values, curve.converged):
            print(f"grid point {t:.6g}: {val:.10g}{'' if ok else ' (not converged)'}", file=sys.stderr)
    buf = io.StringIO()
    curve.to_csv(buf)
    _write_atomic(rc.output_dir / "curve.csv", buf.getvalue())
    print(f"profile of {curve.param_name}: maximum at {curve.argmax():.6g} over {curve.grid.size} points")
    return EXIT_OK if res.converged else EXIT_NONCONV


def parse_counts(text: str) -> np.ndarray:
    items = [t.strip() for t in text.split(",")]
    if not text.strip() or any(not t.isdigit() for t in items):
        raise InputError(f"--y must be comma-separated nonnegative integers, got {text!r}")
    return np.array([int(t) for t in items], dtype=float)


def cmd_predict(rc: RunConfig) -> int:
    y = parse_counts(rc.flags["y"])
    method = rc.flags["method"]
    dists = []
    if method in ("plugin", "both"):
        dists.append(_predict.plugin_predictive(y))
    if method in ("profile", "both"):
        dists.append(_predict.profile_predictive(y))
    if method == "both":
        # a common support so the columns line up
        vmax = int(max(d.support[-1] for d in dists))
        dists = [_predict.plugin_predictive(y, vmax), _predict.profile_predictive(y, vmax)]
    buf = io.StringIO()
    _predict.write_csv(buf, dists)
    _write_atomic(rc.output_dir / "predictive.csv", buf.getvalue())
    for d in dists:
        print(f"{d.method}: mean {d.mean:.6g}, variance {d.var:.6g}, "
              f"truncated mass {d.truncation_mass:.3g}", file=sys.stderr)
    print(f"wrote {len(dists[0].support)} support points for {', '.join(d.method for d in dists)}")
    return EXIT_OK


def sim_config(cfg: dict, seed=None) -> CoverageConfig:
    truth = {**DEFAULT_TRUTH, **cfg.get("truth", {})}
    unknown = set(truth) - set(DEFAULT_TRUTH)
    if unknown:
        raise InputError(f"unknown truth keys {sorted(unknown)}")
    n_regions = int(cfg.get("n_regions", 20))
    edges = cfg.get("edges")
    if "lattice" in cfg:
        r, c = cfg["lattice"]
        edges = structures.lattice_adjacency(int(r), int(c))
        n_regions = int(r) * int(c)
    pops = cfg.get("populations")
    if isinstance(pops, dict):
        lo, hi = pops["logspace"]
        pops = np.geomspace(lo, hi, n_regions).round().tolist()
    return CoverageConfig(
        edges=edges, n_regions=n_regions, populations=pops,
        beta=truth["beta"], sigma2=truth["sigma2"], car_lambda=truth["car_lambda"],
        n_sims=int(cfg.get("n_sims", 200)),
        seed=int(seed if seed is not None else cfg.get("seed", 42)),
        level=float(cfg.get("level", 0.95)), n_bins=int(cfg.get("n_bins", 4)),
        oracle_mode=bool(cfg.get("oracle_mode", False)), n_jobs=int(cfg.get("n_jobs", 1)))


def cmd_simulate(rc: RunConfig) -> int:
    try:
        cfg = sim_config(_load_json(rc.config_path), rc.seed)
    except (TypeError, KeyError, ValueError) as exc:
        raise InputError(f"invalid simulation config: {exc}") from None
    code = EXIT_OK
    try:
        report = coverage_sim(cfg)
    except SimulationError as exc:
        report, code = exc.report, EXIT_SIM
        print(f"error: {exc}", file=sys.stderr)
    _write_atomic(rc.output_dir / "coverage.csv", report.to_csv())
    _write_atomic(rc.output_dir / "coverage-meta.json", report.meta_json() + "\n")
    for i, (lo, hi) in enumerate(report.bins):
        print(f"bin {i + 1} (n {lo:g}-{hi:g}): eb {report.eb_coverage[i]:.3f}, "
              f"hlik {report.hlik_coverage[i]:.3f}, count {report.bin_counts[i]}")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hglik", description="h-likelihood fitting for hierarchical GLMs")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("data", type=Path, help="CSV data file with a header row")
            p.add_argument("config", type=Path, help="JSON model configuration")
        p.add_argument("-o", "--output-dir", type=Path, default=Path("."))
        p.add_argument("--seed", type=int, default=None)

    common(sub.add_parser("fit", help="fit a model and write estimates"))
    p = sub.add_parser("profile", help="profile curve of a parameter or random effect")
    common(p)
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--param")
    grp.add_argument("--effect", type=int, help="1-based random-effect index")
    p.add_argument("--grid", help="lo:hi:n")
    p.add_argument("--verbose", action="store_true")
    p = sub.add_parser("predict", help="predictive distribution of a future poisson count")
    common(p, data=False)
    p.add_argument("--y", required=True, help='observed counts, e.g. "3,2,5,0,4"')
    p.add_argument("--method", choices=("plugin", "profile", "both"), default="both")
    p = sub.add_parser("simulate", help="coverage simulation for the CAR poisson model")
    p.add_argument("config", type=Path, help="JSON simulation configuration")
    p.add_argument("-o", "--output-dir", type=Path, default=Path("."))
    p.add_argument("--seed", type=int, default=None)
    return ap


COMMANDS = {"fit": cmd_fit, "profile": cmd_profile, "predict": cmd_predict, "simulate": cmd_simulate}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    flags = {k: v for k, v in vars(args).items()
             if k not in ("subcommand", "data", "config", "output_dir", "seed")}
    rc = RunConfig(args.subcommand, args.output_dir, getattr(args, "data", None),
                   args.config if args.subcommand != "predict" else None, args.seed, flags)
    try:
        rc.check()
        return COMMANDS[rc.subcommand](rc)
    except (InputError, HglikError, KeyError, ValueError, OSError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

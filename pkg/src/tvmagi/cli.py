"""Command-line front end: simulate, infer, evaluate and replicate.

Every run is determined by an INI file with the sections ``[model]``,
``[simulate]``, ``[tvmagi]``, ``[filter]`` and ``[rk4]`` plus the command-line
flags, which override the file.  Data files are plain CSV with a header row;
floats are written with ``repr`` so they read back bit-for-bit.  Timestamps
appear only in the log on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .integrate import IntegrationError, interp_theta, rk4_solve
from .pipeline import TvmagiConfig
from .posterior import ObservationSet
from .simeval import (METHODS, CaseStudy, SimulatedData, case_study,
                      evaluate, run_method)

log = logging.getLogger("tvmagi")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


# (parser, default, description); a default of None means "taken from the case study"
SCHEMA = {
    "model": {
        "case": (str, "seird", "case study: seird, lv or hiv"),
    },
    "simulate": {
        "seed": (int, 1, "seed of the simulated dataset (first seed for replicate)"),
        "noise": (_floats, None, "observation noise sd per component on the log scale"),
        "replications": (int, 10, "number of datasets for replicate"),
    },
    "tvmagi": {
        "discretization_level": (int, None, "grid points per observation gap"),
        "nu_x": (float, 2.01, "Matern smoothness of the state priors"),
        "nu_theta": (float, 2.01, "Matern smoothness of the time-varying parameter priors"),
        "skip_hmc": (_bool, False, "stop after the MAP; interval columns are left empty"),
        "multistart": (_bool, True, "try several starting points for the pointwise and full fits"),
        "seed": (int, 0, "seed of the sampler"),
        "stage1_iters": (int, 4000, "Adam iterations of the constant-parameter fit"),
        "stage2_iters": (int, 4000, "Adam iterations of the pointwise fit"),
        "stage4_iters": (int, 6000, "Adam iterations of the full MAP fit"),
        "hmc_step_size": (float, None, "leapfrog step size"),
        "hmc_leapfrog_steps": (int, None, "leapfrog steps per proposal"),
        "hmc_samples": (int, None, "total HMC iterations including burn-in"),
        "hmc_burn_in_ratio": (float, None, "fraction of iterations discarded"),
    },
    "filter": {
        "ensemble_size": (int, 300, "members for enkf and eakf"),
        "inflation": (float, 1.02, "multiplicative covariance inflation"),
        "walk_fraction": (float, 0.02, "parameter random-walk sd relative to the initial magnitude"),
        "substeps": (int, 10, "RK4 steps per observation interval"),
        "seed": (int, 0, "seed of the ensemble"),
    },
    "rk4": {
        "iters": (int, None, "Adam iterations of the least-squares fit"),
        "learning_rate": (float, None, "Adam learning rate"),
        "substeps": (int, None, "RK4 steps per grid interval"),
    },
}


def reference_config() -> str:
    """Every recognised key with its default, as an INI document."""
    lines = ["# Reference configuration: every key with its default.",
             "# A blank value means the case study supplies the default.", ""]
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (parse, default, desc) in keys.items():
            lines.append(f"# {desc}")
            if default is None:
                lines.append(f"{key} =")
            elif isinstance(default, bool):
                lines.append(f"{key} = {str(default).lower()}")
            else:
                lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)


def _key_line(text: str, section: str, key: str) -> Optional[int]:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return n
    return None


def load_config(path: Optional[str]) -> dict:
    """Parse and validate ``path``; returns ``{section: {key: value}}`` with defaults filled."""
    out = {sec: {k: entry[1] for k, entry in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return out
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            where = f"{path}:{_key_line(text, section, key) or '?'}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            if raw.strip() == "":
                continue
            try:
                out[section][key] = SCHEMA[section][key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None
    return out


def apply_flags(conf: dict, args) -> dict:
    conf = {sec: dict(vals) for sec, vals in conf.items()}
    if getattr(args, "seed", None) is not None:
        conf["simulate"]["seed"] = args.seed
    if getattr(args, "skip_hmc", False):
        conf["tvmagi"]["skip_hmc"] = True
    if getattr(args, "discretization_level", None) is not None:
        conf["tvmagi"]["discretization_level"] = args.discretization_level
    if getattr(args, "nu_theta", None) is not None:
        conf["tvmagi"]["nu_theta"] = args.nu_theta
    return conf


def build_study(conf: dict) -> CaseStudy:
    try:
        study = case_study(conf["model"]["case"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    noise = conf["simulate"]["noise"]
    if noise is not None:
        D = study.truth_model.dim_x
        if len(noise) not in (1, D):
            raise ConfigError(f"simulate.noise needs 1 or {D} values, got {len(noise)}")
        try:
            truth = replace(study.truth, noise_sigma=np.broadcast_to(np.array(noise), (D,)).copy())
        except ValueError as exc:
            raise ConfigError(f"simulate.noise: {exc}") from None
        study = replace(study, truth=truth)
    return study


def tvmagi_config(conf: dict, study: CaseStudy) -> TvmagiConfig:
    c = conf["tvmagi"]
    base = study.tvmagi
    hmc = base.hmc
    hmc_kw = {f: c[f"hmc_{k}"] for f, k in (("step_size", "step_size"),
                                            ("leapfrog_steps", "leapfrog_steps"),
                                            ("n_samples", "samples"),
                                            ("burn_in_ratio", "burn_in_ratio"))
              if c[f"hmc_{k}"] is not None}
    try:
        hmc = replace(hmc, seed=c["seed"], **hmc_kw)
        return replace(
            base,
            discretization_level=c["discretization_level"] or base.discretization_level,
            nu_x=c["nu_x"], nu_theta=c["nu_theta"], skip_hmc=c["skip_hmc"],
            multistart=c["multistart"], seed=c["seed"], hmc=hmc,
            adam_stage1=replace(base.adam_stage1, max_iters=c["stage1_iters"]),
            adam_stage2=replace(base.adam_stage2, max_iters=c["stage2_iters"]),
            adam_stage4=replace(base.adam_stage4, max_iters=c["stage4_iters"]))
    except ValueError as exc:
        raise ConfigError(f"[tvmagi]: {exc}") from None


def _method_kwargs(method: str, conf: dict, study: CaseStudy) -> dict:
    if method == "rk4":
        r = conf["rk4"]
        try:
            adam = replace(study.rk_adam, max_iters=r["iters"] or study.rk_adam.max_iters,
                           lr=r["learning_rate"] or study.rk_adam.lr)
        except ValueError as exc:
            raise ConfigError(f"[rk4]: {exc}") from None
        return {"rk_adam": adam}
    return {}


def _filter_overrides(conf: dict) -> dict:
    f = conf["filter"]
    return {"ensemble_size": f["ensemble_size"], "inflation": f["inflation"],
            "walk_fraction": f["walk_fraction"], "substeps": f["substeps"], "seed": f["seed"]}


# --- file formats ------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return repr(v) if math.isfinite(v) else str(v)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_observations(path: Path, obs: ObservationSet, names) -> None:
    """Wide CSV: a row per distinct time, an empty cell where a component is unobserved."""
    times = obs.all_times()
    rows = []
    for t in times:
        row = [t]
        for tau, y in zip(obs.tau, obs.y):
            hit = np.nonzero(tau == t)[0]
            row.append(y[hit[0]] if hit.size else None)
        rows.append(row)
    write_csv(path, ["t", *names], rows)


def read_observations(path: Path, names) -> ObservationSet:
    header, rows = read_csv(path)
    if header != ["t", *names]:
        raise ConfigError(f"{path}: expected columns {['t', *names]}, found {header}")
    taus = [[] for _ in names]
    ys = [[] for _ in names]
    for row in rows:
        t = float(row[0])
        for d, cell in enumerate(row[1:]):
            if cell != "":
                taus[d].append(t)
                ys[d].append(float(cell))
    return ObservationSet(tuple(taus), tuple(ys))


# --- commands ----------------------------------------------------------------------

def _simulate(study: CaseStudy, seed: int) -> SimulatedData:
    return study.simulate(seed)


def cmd_simulate(conf: dict, out_dir: Path) -> None:
    study = build_study(conf)
    seed = conf["simulate"]["seed"]
    sim = _simulate(study, seed)
    names = study.truth_model.component_names
    out_dir.mkdir(parents=True, exist_ok=True)
    write_observations(out_dir / "observations.csv", sim.obs, names)
    write_observations(out_dir / "truth.csv", sim.truth, names)
    write_json(out_dir / "dataset.json", {"case": study.name, "seed": seed,
                                          "noise": study.truth.noise_sigma,
                                          "counts": dict(zip(names, sim.obs.counts))})
    log.info("simulated %s seed %d into %s", study.name, seed, out_dir)


def _load_dataset(study: CaseStudy, data_dir: Optional[Path], seed: int) -> tuple:
    """(observations on the original scale, seed of the dataset)."""
    if data_dir is None:
        return _simulate(study, seed).obs, seed
    meta_path = data_dir / "dataset.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("case") != study.name:
            raise ConfigError(f"{data_dir}: dataset is for case {meta.get('case')!r}, "
                              f"config says {study.name!r}")
        seed = int(meta.get("seed", seed))
    obs = read_observations(data_dir / "observations.csv", study.truth_model.component_names)
    return obs, seed


def infer(conf: dict, method: str, data_dir: Optional[Path] = None):
    """Fit ``method``; returns ``(study, model, output, dataset seed)``."""
    method = method.lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    study = build_study(conf)
    obs, seed = _load_dataset(study, data_dir, conf["simulate"]["seed"])
    sim = SimulatedData(obs=obs, truth=obs, times=obs.all_times(), states=np.zeros((0, 0)),
                        seed=seed)
    model, prepared = study.prepare(sim)
    cfg = tvmagi_config(conf, study)
    kw = _method_kwargs(method, conf, study)
    if method in ("ekf", "ukf", "enkf", "eakf"):
        kw["filter_cfg"] = _filter_overrides(conf)
    if method == "rk4" and conf["rk4"]["substeps"]:
        study = replace(study, rk_substeps=conf["rk4"]["substeps"])
    try:
        out = run_method(method, study, model, prepared, cfg, **kw)
    except (TypeError, ValueError) as exc:
        if "filter" in str(exc) or "ensemble" in str(exc) or "inflation" in str(exc):
            raise ConfigError(str(exc)) from None
        raise
    return study, model, out, seed


def _theta_rows(study, model, out):
    names = list(study.theta_metric_names)
    est = study.theta_metric(model, out.grid, out.theta_grid)
    if out.metric_lower is not None:
        lo, hi = out.metric_lower, out.metric_upper
    elif out.lower is not None:
        lo = study.theta_metric(model, out.grid, out.lower)
        hi = study.theta_metric(model, out.grid, out.upper)
    else:
        lo = hi = None
    header = ["t"] + [f"{n}{s}" for n in names for s in ("", "_lower", "_upper")]
    rows = []
    for i, t in enumerate(out.grid):
        row = [t]
        for p in range(len(names)):
            row += [est[p, i], None if lo is None else lo[p, i], None if hi is None else hi[p, i]]
        rows.append(row)
    return header, rows


def _trajectory(study, model, out):
    try:
        with np.errstate(all="ignore"):
            traj = rk4_solve(model, out.x0, interp_theta(out.grid, out.theta_grid), out.psi,
                             out.grid, substeps=10)
            traj = study.output(traj)
    except IntegrationError as exc:
        traj = study.output(exc.partial)
    return traj


def write_results(out_dir: Path, study, model, out, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = _theta_rows(study, model, out)
    write_csv(out_dir / "theta.csv", header, rows)
    psi_rows = []
    for q, name in enumerate(model.psi_names):
        psi_rows.append([name, out.psi[q],
                         None if out.psi_lower is None else out.psi_lower[q],
                         None if out.psi_upper is None else out.psi_upper[q]])
    write_csv(out_dir / "psi.csv", ["name", "value", "lower", "upper"], psi_rows)
    traj = _trajectory(study, model, out)
    prefix = "log10_" if study.name == "hiv" else ""
    write_csv(out_dir / "trajectory.csv", ["t", *[prefix + n for n in model.component_names]],
              [[t, *traj[:, i]] for i, t in enumerate(out.grid)])
    summary = {"case": study.name, "method": out.method, "seed": seed,
               "grid_size": int(out.grid.size), "x0": out.x0,
               "theta_grid": dict(zip(model.theta_names, out.theta_grid)),
               "psi": dict(zip(model.psi_names, np.atleast_1d(out.psi)))}
    if out.sigma is not None:
        summary["sigma"] = dict(zip(model.component_names, out.sigma))
    if out.psi_bar is not None:
        summary["psi_bar"] = dict(zip(model.psi_names, out.psi_bar))
    diag = out.diagnostics
    if out.method == "tvmagi":
        fit = diag["fit"]
        d = fit.stage_diagnostics
        summary["diagnostics"] = {"stage4_start": d["stage4_start"],
                                  "stage4_objective": d["stage4_objective"],
                                  "hmc_accept_rate": d["hmc_accept_rate"],
                                  "intervals": out.lower is not None}
    elif out.method == "rk4":
        summary["diagnostics"] = {"sse": diag["sse"], "iters": diag["iters"]}
    write_json(out_dir / "summary.json", summary)


def read_results(out_dir: Path, study: CaseStudy, model):
    """Rebuild a MethodOutput from the files written by ``write_results``."""
    from .simeval import MethodOutput

    summary = json.loads((out_dir / "summary.json").read_text())
    header, rows = read_csv(out_dir / "theta.csv")
    col = {h: i for i, h in enumerate(header)}
    grid = np.array([float(r[0]) for r in rows])
    theta = np.array([summary["theta_grid"][n] for n in model.theta_names], dtype=float)
    psi = np.array([summary["psi"][n] for n in model.psi_names], dtype=float)
    out = MethodOutput(summary["method"], grid, np.array(summary["x0"], dtype=float),
                       theta.reshape(model.dim_theta, grid.size), psi, float("nan"))
    names = list(study.theta_metric_names)
    if rows and rows[0][col[names[0] + "_lower"]] != "":
        out.metric_lower = np.array([[float(r[col[n + "_lower"]]) for r in rows] for n in names])
        out.metric_upper = np.array([[float(r[col[n + "_upper"]]) for r in rows] for n in names])
        out.lower, out.upper = out.metric_lower, out.metric_upper
        _, prow = read_csv(out_dir / "psi.csv")
        out.psi_lower = np.array([float(r[2]) for r in prow])
        out.psi_upper = np.array([float(r[3]) for r in prow])
    return out, summary["seed"]


def cmd_evaluate(conf: dict, results_dir: Path, out_dir: Path) -> dict:
    study = build_study(conf)
    sim0 = _simulate(study, conf["simulate"]["seed"])
    model, _ = study.prepare(sim0)
    out, seed = read_results(results_dir, study, model)
    sim = _simulate(study, seed)
    metrics = evaluate(study, sim, model, out)
    metrics.pop("seconds", None)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "metrics.json", metrics)
    return metrics


def _replicate_one(conf: dict, method: str, seed: int) -> dict:
    conf = {sec: dict(v) for sec, v in conf.items()}
    conf["simulate"]["seed"] = seed
    study = build_study(conf)
    t0 = time.perf_counter()
    study_, model, out, _ = infer(conf, method)
    sim = _simulate(study, seed)
    metrics = evaluate(study_, sim, model, out)
    metrics["seconds"] = time.perf_counter() - t0
    return metrics


def _safe_replicate(args) -> tuple:
    conf, method, seed = args
    try:
        return seed, method, "ok", _replicate_one(conf, method, seed)
    except (ConfigError, KeyboardInterrupt):
        raise
    except Exception as exc:
        return seed, method, f"failed: {type(exc).__name__}: {exc}", {}


def cmd_replicate(conf: dict, methods, n: int, out_dir: Path, workers: int = 1) -> list:
    """Per-replication rows followed by one aggregate row per method."""
    first = conf["simulate"]["seed"]
    jobs = [(conf, m, first + r) for m in methods for r in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_replicate, jobs))
    else:
        results = [_safe_replicate(j) for j in jobs]
    keys = sorted({k for *_, m in results for k, v in m.items() if not isinstance(v, bool)})
    rows = []
    for seed, method, status, m in results:
        if status != "ok":
            log.warning("replication seed %d (%s) %s", seed, method, status)
        rows.append({"seed": str(seed), "method": method, "status": status,
                     **{k: m.get(k) for k in keys}})
    for method in methods:
        ok = [m for s, mm, st, m in results if mm == method and st == "ok"]
        agg = {"seed": "aggregate", "method": method, "status": f"ok {len(ok)}/{n}"}
        for k in keys:
            vals = [m[k] for m in ok if m.get(k) is not None]
            agg[k] = float(np.mean(vals)) if vals else None
        rows.append(agg)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["seed", "method", "status", *keys]
    write_csv(out_dir / "replicate.csv", header, [[r[h] for h in header] for r in rows])
    write_json(out_dir / "replicate.json", [r for r in rows if r["seed"] == "aggregate"])
    return rows


# --- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="dataset seed (overrides simulate.seed)")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true")

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--method", default="tvmagi",
                     help=f"one of {', '.join(METHODS)} (replicate accepts a comma list)")
    fit.add_argument("--skip-hmc", action="store_true", help="no posterior sampling")
    fit.add_argument("--discretization-level", type=int)
    fit.add_argument("--nu-theta", type=float)

    p = argparse.ArgumentParser(prog="tvmagi", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true",
                   help="print the reference configuration and exit")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("simulate", parents=[common], help="simulate a dataset")
    inf = sub.add_parser("infer", parents=[common, fit], help="fit one method to a dataset")
    inf.add_argument("--data", help="directory written by simulate (default: simulate from seed)")
    ev = sub.add_parser("evaluate", parents=[common], help="score results against the truth")
    ev.add_argument("--results", required=True, help="directory written by infer")
    rep = sub.add_parser("replicate", parents=[common, fit], help="simulate, fit and score many seeds")
    rep.add_argument("-n", "--replications", type=int)
    rep.add_argument("--workers", type=int, default=1)
    return p


def main(argv=None) -> int:
    p = build_parser()
    args = p.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(reference_config())
        return EXIT_OK
    if args.command is None:
        p.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s",
                        datefmt="%Y-%m-%dT%H:%M:%S")
    out_dir = Path(args.out_dir)
    try:
        conf = apply_flags(load_config(args.config), args)
        if args.command == "simulate":
            cmd_simulate(conf, out_dir)
        elif args.command == "infer":
            study, model, out, seed = infer(conf, args.method,
                                            Path(args.data) if args.data else None)
            write_results(out_dir, study, model, out, seed)
            log.info("%s finished in %.1f s", out.method, out.seconds)
        elif args.command == "evaluate":
            cmd_evaluate(conf, Path(args.results), out_dir)
        else:
            methods = [m.strip().lower() for m in args.method.split(",") if m.strip()]
            bad = [m for m in methods if m not in METHODS]
            if bad:
                raise ConfigError(f"unknown method {bad[0]!r}; choose from {', '.join(METHODS)}")
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            n = args.replications or conf["simulate"]["replications"]
            cmd_replicate(conf, methods, n, out_dir, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

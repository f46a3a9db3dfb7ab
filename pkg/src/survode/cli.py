"""Command-line interface: ``survode <command> --config run.yaml ...``.

Commands
--------
simulate  write a simulated dataset CSV
fit       MAP, Hessian, Laplace evidence, AIC/BIC and normal-approximation draws
mcmc      adaptive Metropolis draws started at the MAP
select    Gibbs covariate selection
predict   predictive hazard/response/survival curves per covariate profile
compare   AIC/BIC table over earlier fit outputs

Every flag can also be set through an environment variable named
``SURVODE_<FLAG>`` (upper case, dashes as underscores). Exit status is 0 on
success, 2 for invalid input and 3 for numerical failure; failures print a
JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .diagnostics import predictive_curves
from .hazard_models import FAMILY_PARAMS, ModelSpec
from .inference import (
    HessianError,
    OptimizationError,
    PosteriorSample,
    SamplerError,
    adaptive_metropolis,
    credible_intervals,
    find_map,
    sample_normal_approx,
)
from .likelihood import (
    CollinearityError,
    LogPosterior,
    PriorSpec,
    SurvivalDataset,
    effective_sample_size_g,
)
from .ode_engine import IntegrationError
from .simulate import SCENARIO_TRUTH, SimulationError, generate_scenario
from .varselect import InclusionMask, gibbs_select

log = logging.getLogger("survode")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3
ENV_PREFIX = "SURVODE_"
_NUMERIC_ERRORS = (OptimizationError, HessianError, SamplerError, SimulationError,
                   IntegrationError, CollinearityError, FloatingPointError, np.linalg.LinAlgError)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class DataError(ValueError):
    """Malformed input data; the message names the row and column."""


# -- serialisation ----------------------------------------------------------

def fmt(v) -> str:
    """Shortest round-trip text for a number."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def config_hash(config: dict) -> str:
    canon = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def provenance(config: dict, seed) -> dict:
    return {"software": "survode", "version": __version__,
            "config_hash": config_hash(config), "seed": seed}


def _header_line(prov: dict) -> str:
    return "# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)) + "\n"


def write_csv(path: Path, header, rows, prov: dict) -> None:
    buf = io.StringIO()
    buf.write(_header_line(prov))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, payload: dict, prov: dict) -> None:
    path.write_text(dump_json({"provenance": prov, **payload}), encoding="utf-8")


def _read_table(path) -> tuple:
    """Header and rows of a CSV, skipping ``#`` provenance lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh) if not line.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty file")
    reader = csv.reader([l for _, l in lines])
    rows = list(reader)
    return rows[0], [(lineno, r) for (lineno, _), r in zip(lines[1:], rows[1:]) if r]


def ingest_csv(path, max_time: Optional[float] = None) -> SurvivalDataset:
    """Dataset from a CSV with header ``time,status,<covariates...>``.

    Raises :class:`DataError` naming the line and column of the first bad
    cell. Missing values are rejected.
    """
    header, rows = _read_table(path)
    header = [h.strip() for h in header]
    for required in ("time", "status"):
        if required not in header:
            raise DataError(f"{path}: missing column {required!r}")
    if header[:2] != ["time", "status"]:
        raise DataError(f"{path}: the first two columns must be 'time' and 'status'")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    values = np.empty((len(rows), len(header)))
    for r, (lineno, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {lineno}, column {header[c]!r}: "
                                f"non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: line {lineno}, column {header[c]!r}: missing or non-finite value")
            values[r, c] = v
        if values[r, 0] <= 0:
            raise DataError(f"{path}: line {lineno}, column 'time': time must be positive")
        if values[r, 1] not in (0.0, 1.0):
            raise DataError(f"{path}: line {lineno}, column 'status': status must be 0 or 1")
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SurvivalDataset(values[:, 0], values[:, 1].astype(int), values[:, 2:],
                           tuple(header[2:]), max_time=max_time,
                           metadata={"source": str(path)})


def write_dataset(path: Path, data: SurvivalDataset, prov: dict) -> None:
    rows = ([t, int(s), *x] for t, s, x in zip(data.times, data.status, data.covariates))
    write_csv(path, ["time", "status", *data.column_names], rows, prov)


def read_draws(path) -> tuple:
    header, rows = _read_table(path)
    try:
        draws = np.array([[float(v) for v in r] for _, r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return tuple(header), draws


# -- configuration ----------------------------------------------------------

def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        cfg = yaml.safe_load(text)
    else:
        cfg = json.loads(text)
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a mapping")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _require_seed(sec: dict, name: str, override=None) -> int:
    seed = override if override is not None else sec.get("seed")
    if seed is None:
        raise ConfigError(f"{name}.seed must be given explicitly")
    return int(seed)


def build_spec(cfg: dict, data: Optional[SurvivalDataset]) -> ModelSpec:
    m = _section(cfg, "model")
    family = m.get("family")
    if family not in FAMILY_PARAMS:
        raise ConfigError(f"model.family must be one of {sorted(FAMILY_PARAMS)}")
    names = FAMILY_PARAMS[family]
    raw = m.get("formulas") or {}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"model.formulas has unknown parameters {sorted(unknown)}")
    formulas = []
    for pname in names:
        cols = raw.get(pname) or []
        if data is None:
            if cols:
                raise ConfigError("covariate names need a dataset")
            formulas.append(())
            continue
        idx = []
        for c in cols:
            if c not in data.column_names:
                raise ConfigError(f"model.formulas.{pname}: covariate {c!r} not in the data header")
            idx.append(data.column_names.index(c))
        formulas.append(tuple(idx))
    h0 = m.get("h0", 0.01)
    h0 = None if h0 == "free" else h0
    links = tuple(m.get("links") or ())
    max_time = m.get("max_time")
    return ModelSpec(family, tuple(formulas), links, h0=h0, q0=float(m.get("q0", 1e-6)),
                     max_time=float(max_time) if max_time is not None else np.inf)


def build_priors(cfg: dict, spec: ModelSpec, data: SurvivalDataset) -> PriorSpec:
    p = _section(cfg, "priors")
    g = p.get("g")
    if g == "ess":
        g = effective_sample_size_g(data, len(spec.param_names), p.get("g_divisors"))
    h0g = p.get("h0_gamma")
    return PriorSpec(intercept_mean=float(p.get("intercept_mean", 0.0)),
                     intercept_sd=p.get("intercept_sd", 10.0),
                     coef_sd=float(p.get("coef_sd", 10.0)),
                     g=tuple(g) if g is not None else None,
                     h0_prior=tuple(h0g) if h0g is not None else None,
                     complexity_C=float(p.get("complexity_C", 0.0)))


def _solver(cfg):
    s = _section(cfg, "solver")
    return float(s.get("rtol", 1e-8)), float(s.get("atol", 1e-10))


def _target(cfg, data, threads):
    spec = build_spec(cfg, data)
    spec.check_columns(data.p)
    priors = build_priors(cfg, spec, data)
    rtol, atol = _solver(cfg)
    lp = LogPosterior(data, spec, priors, n_threads=threads, rtol=rtol, atol=atol)
    return spec, priors, lp


def _init_vector(cfg, spec: ModelSpec) -> np.ndarray:
    init = _section(cfg, "optimizer").get("init")
    if init is None:
        x = np.zeros(spec.n_params)
        if spec.h0_free:
            x[-1] = math.log(0.1)
        return x
    x = np.asarray(init, dtype=float)
    if x.shape != (spec.n_params,):
        raise ConfigError(f"optimizer.init must have {spec.n_params} entries")
    return x


def _optimizer_opts(cfg) -> dict:
    o = _section(cfg, "optimizer")
    opts = {}
    for key in ("n_starts", "nm_iter", "max_iter"):
        if key in o:
            opts[key] = int(o[key])
    for key in ("jitter", "tol"):
        if key in o:
            opts[key] = float(o[key])
    return opts


# -- commands ---------------------------------------------------------------

def _data_arg(args):
    if not args.data:
        raise ConfigError("--data is required for this command")
    return ingest_csv(args.data)


def cmd_simulate(cfg, args, out: Path):
    s = _section(cfg, "simulate")
    seed = _require_seed(s, "simulate", args.seed)
    n = int(s.get("n", 1000))
    truth = np.asarray(s.get("truth", SCENARIO_TRUTH), dtype=float)
    if truth.shape != (8,):
        raise ConfigError("simulate.truth needs eight coefficients")
    data = generate_scenario(n, s.get("horizon"), seed,
                             target_censoring=float(s.get("target_censoring", 0.2)),
                             grid_step=float(s.get("grid_step", 0.01)), truth=truth,
                             n_threads=args.threads)
    prov = provenance(cfg, seed)
    write_dataset(out / "dataset.csv", data, prov)
    write_json(out / "simulation.json", {"metadata": data.metadata, "n": data.n}, prov)


def _fit(cfg, data, threads):
    spec, priors, lp = _target(cfg, data, threads)
    fit = find_map(lp, _init_vector(cfg, spec), **_optimizer_opts(cfg))
    return spec, priors, lp, fit


def cmd_fit(cfg, args, out: Path):
    data = _data_arg(args)
    na = _section(cfg, "normal_approx")
    seed = _require_seed(na, "normal_approx", args.seed)
    spec, _, lp, fit = _fit(cfg, data, args.threads)
    prov = provenance(cfg, seed)
    payload = {"fit": fit.summary(), "n": data.n, "k": fit.dim, "family": spec.family}
    if fit.positive_definite:
        payload["std_errors"] = fit.std_errors
    write_json(out / "fit.json", payload, prov)
    if not fit.positive_definite:
        raise HessianError("Hessian at the MAP is not positive definite; no normal approximation")
    sample = sample_normal_approx(fit, int(na.get("n_draws", 1000)), seed)
    write_csv(out / "normal_draws.csv", lp.names, sample.draws, prov)


def cmd_mcmc(cfg, args, out: Path):
    data = _data_arg(args)
    m = _section(cfg, "mcmc")
    seed = _require_seed(m, "mcmc", args.seed)
    spec, _, lp, fit = _fit(cfg, data, args.threads)
    d = fit.dim
    cov = fit.covariance if fit.positive_definite else None
    sample = adaptive_metropolis(lp, fit.eta, int(m.get("n_iter", 11000)),
                                 int(m.get("burn_in", 1000)), int(m.get("thin", 10)), seed,
                                 init_cov=cov)
    prov = provenance(cfg, seed)
    write_csv(out / "mcmc_draws.csv", lp.names, sample.draws, prov)
    ci = credible_intervals(sample)
    write_json(out / "mcmc.json", {
        "acceptance_rate": sample.acceptance_rate, "burn_in": sample.burn_in,
        "thin": sample.thin, "n_draws": sample.n, "dim": d,
        "posterior_median": np.median(sample.draws, axis=0),
        "ci95": ci, "quantile_method": "linear", "names": lp.names,
    }, prov)


def cmd_select(cfg, args, out: Path):
    data = _data_arg(args)
    s = _section(cfg, "select")
    seed = _require_seed(s, "select", args.seed)
    spec = build_spec(cfg, data)
    priors = build_priors(cfg, spec, data)
    init = s.get("init_mask")
    init_mask = InclusionMask.from_key(init) if init else None
    res = gibbs_select(data, spec, priors, init_mask, int(s.get("n_iter", 100)),
                       int(s.get("burn_in", 10)), seed,
                       fit_options=_optimizer_opts(cfg) or None)
    probs = res.model_probs()
    prov = provenance(cfg, seed)
    rows = []
    for key, value in sorted(res.cache.items()):
        rows.append([key, value.log_evidence, probs.get(key, 0.0), res.visits.get(key, 0)])
    write_csv(out / "models.csv", ["mask", "log_evidence", "posterior_prob", "visits"], rows, prov)
    names = spec.param_names
    incl_rows = [[names[k], data.column_names[j], res.inclusion_probs[k, j]]
                 for k in range(len(names)) for j in range(data.p)]
    write_csv(out / "inclusion.csv", ["parameter", "covariate", "inclusion_prob"], incl_rows, prov)
    write_json(out / "selection.json", {
        "median_model": res.median.key, "d_tilde": res.d_tilde,
        "n_models": len(res.cache), "trace": res.trace,
        "normalisation": "visited models only",
    }, prov)


def cmd_predict(cfg, args, out: Path):
    data = _data_arg(args)
    p = _section(cfg, "predict")
    spec = build_spec(cfg, data)
    draws_path = args.draws or p.get("draws")
    if not draws_path:
        raise ConfigError("predict needs posterior draws (--draws or predict.draws)")
    _, draws = read_draws(draws_path)
    if draws.shape[1] != spec.n_params:
        raise ConfigError(f"draws have {draws.shape[1]} columns, model needs {spec.n_params}")
    g = p.get("time_grid") or {}
    stop = float(g.get("stop", data.max_time))
    grid = np.arange(0.0, stop + 0.5 * float(g.get("step", stop / 100)), float(g.get("step", stop / 100)))
    grid = grid[grid <= stop]
    spec = ModelSpec(spec.family, spec.formulas, spec.links, spec.h0, spec.q0, max_time=max(stop, grid[-1]))
    profiles = p.get("profiles")
    if not profiles:
        raise ConfigError("predict.profiles must list at least one covariate profile")
    prov = provenance(cfg, None)
    summary = {}
    for name in sorted(profiles):
        prof = profiles[name]
        missing = set(data.column_names) - set(prof)
        if missing:
            raise ConfigError(f"profile {name!r} lacks covariates {sorted(missing)}")
        x = np.array([float(prof[c]) for c in data.column_names])
        pc = predictive_curves(spec, draws, x, grid, args.threads)
        write_csv(out / f"curves_{name}.csv", ["time", "mean", "lo95", "hi95", "quantity"],
                  pc.rows(), prov)
        summary[name] = {"attractor_probs": pc.attractor_probs, "n_draws": pc.n_draws,
                         "n_failed": pc.n_failed}
    write_json(out / "predict.json", {"profiles": summary}, prov)


def cmd_compare(cfg, args, out: Path):
    fits = args.fits or _section(cfg, "compare").get("fits") or []
    if not fits:
        raise ConfigError("compare needs fit.json files (--fits or compare.fits)")
    rows = []
    for path in fits:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        f = doc["fit"]
        rows.append([str(path), doc["k"], doc["n"], f["log_likelihood"], f["aic"], f["bic"]])
    write_csv(out / "compare.csv", ["model", "k", "n", "log_likelihood", "aic", "bic"], rows,
              provenance(cfg, None))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "mcmc": cmd_mcmc,
            "select": cmd_select, "predict": cmd_predict, "compare": cmd_compare}


# -- entry point ------------------------------------------------------------

def _env_default(flag: str, default=None):
    return os.environ.get(ENV_PREFIX + flag.upper().replace("-", "_"), default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="survode", description=__doc__.split("\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", default=_env_default("config"), help="YAML or JSON run configuration")
    ap.add_argument("--data", default=_env_default("data"), help="input dataset CSV")
    ap.add_argument("--out", default=_env_default("out", "."), help="output directory")
    ap.add_argument("--seed", type=int, default=_env_default("seed"), help="overrides the config seed")
    ap.add_argument("--threads", type=int, default=_env_default("threads"))
    ap.add_argument("--draws", default=_env_default("draws"), help="posterior draws CSV for predict")
    ap.add_argument("--fits", nargs="*", default=(_env_default("fits") or "").split() or None,
                    help="fit.json files for compare")
    ap.add_argument("--log-level", default=_env_default("log-level", "WARNING"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        if args.threads is None and cfg.get("threads") is not None:
            args.threads = int(cfg["threads"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
        return EXIT_OK
    except _NUMERIC_ERRORS as exc:
        return _fail(args, exc, EXIT_NUMERIC, "numeric_failure")
    except (ValueError, KeyError, TypeError, OSError) as exc:
        return _fail(args, exc, EXIT_VALIDATION, "validation_error")


def _fail(args, exc: Exception, code: int, kind: str) -> int:
    msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    record = {"error": kind, "type": type(exc).__name__, "message": str(msg),
              "command": args.command, "exit_code": code}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())

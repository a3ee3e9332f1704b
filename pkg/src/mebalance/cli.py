"""Batch command-line interface.

Three subcommands:

* ``estimate``: CSV in, ATT (optionally with bootstrap SE / percentile CI),
  fitted parameter and an imbalance report as JSON out.
* ``balance``: imbalance report only; accepts externally supplied weights
  for auditing.
* ``simulate``: Monte Carlo tables over an error-variance grid, written as
  CSV + JSON plus a tidy plot-data CSV.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
failure.  Runs are reproducible from the config echo embedded in every
result file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .balancing import att, solve_cbps, solve_eb
from .config import (
    RunConfig,
    _parse_scalar,
    build_error_model,
    merge_config,
    parse_config_file,
)
from .correction import CorrectionSpec, solve_corrected
from .data import BalanceFit, Dataset, WeightVector
from .dataio import read_dataset_csv, read_weights_for, write_weights_csv
from .diagnostics import imbalance
from .exceptions import DataValidationError, MebalanceError, SolverError
from .experiments import ScenarioSpec, bootstrap, run_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

RESULT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "mebalance result",
    "type": "object",
    "required": ["command", "version", "config", "n", "n_treated", "n_control",
                 "imbalance", "weights"],
    "properties": {
        "command": {"enum": ["estimate", "balance"]},
        "version": {"type": "string"},
        "config": {"type": "object"},
        "n": {"type": "integer", "minimum": 2},
        "n_treated": {"type": "integer", "minimum": 1},
        "n_control": {"type": "integer", "minimum": 1},
        "fit": {
            "type": ["object", "null"],
            "required": ["method", "theta", "converged", "grad_norm", "iterations"],
            "properties": {
                "method": {"type": "string"},
                "theta": {"type": "array", "items": {"type": "number"}},
                "converged": {"type": "boolean"},
                "grad_norm": {"type": "number"},
                "iterations": {"type": "integer"},
            },
        },
        "att": {
            "type": ["object", "null"],
            "required": ["estimate", "method"],
            "properties": {
                "estimate": {"type": "number"},
                "method": {"type": "string"},
                "se": {"type": ["number", "null"]},
                "ci_lower": {"type": ["number", "null"]},
                "ci_upper": {"type": ["number", "null"]},
                "n_boot": {"type": ["integer", "null"]},
                "n_failed": {"type": "integer"},
            },
        },
        "imbalance": {
            "type": "object",
            "required": ["basis", "weights_source", "asmd", "md",
                         "singular_treated_cov"],
            "properties": {
                "basis": {"type": "string"},
                "weights_source": {"type": "string"},
                "asmd": {
                    "type": "object",
                    "additionalProperties": {"type": ["number", "null"]},
                },
                "md": {"type": ["number", "null"]},
                "singular_treated_cov": {"type": "boolean"},
            },
        },
        "weights": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "weight"],
                "properties": {"weight": {"type": "number", "minimum": 0}},
            },
        },
    },
}


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float):
        return None if not np.isfinite(value) else value
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def _fit(cfg: RunConfig, data: Dataset) -> BalanceFit:
    solver = cfg.solver()
    if cfg.method == "eb":
        return solve_eb(data, solver, observed=True, policy=cfg.replicate_policy)
    if cfg.method == "cbps":
        return solve_cbps(data, solver, observed=True, policy=cfg.replicate_policy)
    spec = CorrectionSpec(
        method=cfg.method,
        error_model=build_error_model(cfg, data),
        solver=solver,
        replicate_policy=cfg.replicate_policy,
    )
    return solve_corrected(data, spec)


def _result_payload(
    command: str,
    cfg: RunConfig,
    data: Dataset,
    weights: WeightVector,
    fit: Optional[BalanceFit],
    att_block: Optional[dict],
    weights_source: str,
) -> dict:
    z = data.covariates(observed=True, policy=cfg.replicate_policy)
    report = imbalance(
        weights, z, data, basis="observed_covariates", weights_source=weights_source
    )
    names = data.column_names()
    payload = {
        "command": command,
        "version": __version__,
        "config": _jsonable(cfg.echo()),
        "n": data.n,
        "n_treated": data.n1,
        "n_control": data.n0,
        "fit": None
        if fit is None
        else {
            "method": fit.method,
            "theta": _jsonable(fit.theta),
            "converged": fit.converged,
            "grad_norm": fit.grad_norm,
            "iterations": fit.iterations,
        },
        "att": att_block,
        "imbalance": {
            "basis": report.basis,
            "weights_source": report.weights_source,
            "asmd": {names[j]: _jsonable(report.asmd[j]) for j in range(len(names))},
            "md": _jsonable(report.md),
            "singular_treated_cov": report.singular_treated_cov,
        },
        "weights": [
            {"id": _jsonable(i), "weight": _jsonable(w)}
            for i, w in zip(weights.ids, weights.values)
        ],
    }
    return payload


def _emit(payload: dict, output: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, allow_nan=False)
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def cmd_estimate(cfg: RunConfig) -> int:
    if not cfg.input:
        raise DataValidationError("estimate needs an input CSV (--input)")
    data = read_dataset_csv(cfg.input)
    data.outcome_required()
    fit = _fit(cfg, data)
    if cfg.bootstrap > 0:
        spec = None
        if cfg.method not in ("eb", "cbps"):
            spec = CorrectionSpec(
                method=cfg.method,
                error_model=build_error_model(cfg, data),
                solver=cfg.solver(),
                replicate_policy=cfg.replicate_policy,
            )
        res = bootstrap(
            data,
            cfg.method,
            spec,
            B=cfg.bootstrap,
            seed=cfg.seed,
            cfg=cfg.solver(),
            policy=cfg.replicate_policy,
        )
        att_block = {
            "estimate": res.estimate,
            "method": res.method,
            "se": res.se,
            "ci_lower": res.ci_lower,
            "ci_upper": res.ci_upper,
            "n_boot": res.n_boot,
            "n_failed": res.n_failed,
        }
    else:
        att_block = {
            "estimate": att(fit.weights, data),
            "method": fit.method,
            "se": None,
            "ci_lower": None,
            "ci_upper": None,
            "n_boot": None,
            "n_failed": 0,
        }
    payload = _result_payload(
        "estimate", cfg, data, fit.weights, fit, att_block, fit.method
    )
    _emit(payload, cfg.output)
    if cfg.weights_out:
        write_weights_csv(fit.weights, cfg.weights_out)
    return EXIT_OK


def cmd_balance(cfg: RunConfig) -> int:
    if not cfg.input:
        raise DataValidationError("balance needs an input CSV (--input)")
    data = read_dataset_csv(cfg.input)
    if cfg.weights_in:
        weights = read_weights_for(data, cfg.weights_in)
        fit = None
        source = "external"
    else:
        fit = _fit(cfg, data)
        weights = fit.weights
        source = fit.method
    payload = _result_payload("balance", cfg, data, weights, fit, None, source)
    _emit(payload, cfg.output)
    if cfg.weights_out:
        write_weights_csv(weights, cfg.weights_out)
    return EXIT_OK


def _table_rows(var: float, table) -> list:
    rows = []
    for method, cell in table.cells.items():
        rows.append(
            {
                "design": table.spec.design,
                "error_variance": var,
                "method": method,
                "n_ok": cell.n_ok,
                "n_failed": cell.n_failed,
                "bias": cell.bias,
                "sd": cell.sd,
                "mse": cell.mse,
            }
        )
    return rows


def _plot_rows(var: float, table, names) -> list:
    rows = []
    scenario = f"{table.spec.design}:{table.spec.error_family}"

    def add(method, metric, value):
        if value is None:
            return
        rows.append(
            {
                "scenario": scenario,
                "method": method,
                "x": var,
                "metric": metric,
                "value": value,
            }
        )

    for method, cell in table.cells.items():
        add(method, "bias", cell.bias)
        add(method, "abs_bias", abs(cell.bias))
        add(method, "sd", cell.sd)
        add(method, "mse", cell.mse)
        add(method, "md_true", cell.mean_md_true)
        for j, name in enumerate(names):
            add(method, f"asmd_true_{name}", cell.mean_asmd_true[j])
            add(method, f"mean_theta_{name}", cell.mean_theta[j])
        if cell.mean_asmd_limit is not None:
            add(method, "md_limit", cell.mean_md_limit)
            for j, name in enumerate(names):
                add(method, f"asmd_limit_{name}", cell.mean_asmd_limit[j])
    return rows


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.design:
        raise DataValidationError("simulate needs a design (--design)")
    threads = cfg.threads
    env_threads = os.environ.get("THREADS")
    if env_threads and threads == 1:
        threads = max(1, int(env_threads))
    variances = [float(v) for v in cfg.error_variance]
    family = cfg.error_family or ("none" if variances == [0.0] else "normal")
    table_rows, plot_rows, meta = [], [], None
    for var in variances:
        spec = ScenarioSpec(
            design=cfg.design,
            n=cfg.n,
            error_family=family,
            error_variance=var,
            m=cfg.m,
            reps=cfg.reps,
            seed=cfg.seed,
            methods=tuple(cfg.methods),
            replicate_policy=cfg.replicate_policy,
        )
        table = run_table(spec, cfg.solver(), threads=threads)
        names = spec.column_names()
        table_rows.extend(_table_rows(var, table))
        plot_rows.extend(_plot_rows(var, table, names))
        meta = table.metadata
    prefix = cfg.out_prefix
    pd.DataFrame(table_rows).to_csv(f"{prefix}_table.csv", index=False)
    pd.DataFrame(plot_rows).to_csv(f"{prefix}_plotdata.csv", index=False)
    payload = {
        "command": "simulate",
        "version": __version__,
        "config": _jsonable(cfg.echo()),
        "threads": threads,
        "metadata": _jsonable(meta),
        "table": _jsonable(table_rows),
    }
    with open(f"{prefix}_table.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, allow_nan=False)
        fh.write("\n")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--input", help="input dataset CSV")
    p.add_argument("--method", help="estimator label")
    p.add_argument("--error-family", dest="error_family",
                   help="estimate: normal|uniform (MGF family); "
                        "simulate: none|normal|uniform|modified_beta|scaled_t")
    p.add_argument("--sigma1", help="error variance: 1, p1 or p1^2 comma values")
    p.add_argument("--estimate-sigma-from-replicates", dest="estimate_sigma_from_replicates",
                   action="store_const", const=True, default=None)
    p.add_argument("--replicate-policy", dest="replicate_policy",
                   choices=("first", "second", "mean"))
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="result JSON path (default stdout)")
    p.add_argument("--weights-out", dest="weights_out", help="weights CSV path")
    p.add_argument("--grad-tol", dest="grad_tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--multi-start", dest="multi_start", type=int)
    p.add_argument("--restart-scale", dest="restart_scale", type=float)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mebalance",
        description="Covariate balancing weights with measurement error correction",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    pe = sub.add_parser("estimate", help="fit weights and estimate the ATT")
    _add_common(pe)
    pe.add_argument("--bootstrap", type=int, help="bootstrap replicates (0 = off)")

    pb = sub.add_parser("balance", help="imbalance report (no outcome needed)")
    _add_common(pb)
    pb.add_argument("--weights-in", dest="weights_in",
                    help="audit externally supplied weights (id,weight CSV)")

    ps = sub.add_parser("simulate", help="Monte Carlo simulation tables")
    _add_common(ps)
    ps.add_argument("--design", choices=("bivariate", "four_covariate"))
    ps.add_argument("--n", type=int)
    ps.add_argument("--error-variance", dest="error_variance",
                    help="comma-separated variance grid")
    ps.add_argument("--m", type=int, help="replicates per subject")
    ps.add_argument("--reps", type=int)
    ps.add_argument("--methods", help="comma-separated method labels")
    ps.add_argument("--threads", type=int)
    ps.add_argument("--out-prefix", dest="out_prefix")
    return parser


def _flag_values(args: argparse.Namespace) -> dict:
    skip = {"command", "config"}
    out = {}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if key in ("sigma1", "error_variance", "methods") and isinstance(value, str):
            value = [_parse_scalar(v) for v in value.split(",")]
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = merge_config(file_values, _flag_values(args))
        if args.command == "estimate":
            return cmd_estimate(cfg)
        if args.command == "balance":
            return cmd_balance(cfg)
        return cmd_simulate(cfg)
    except DataValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except MebalanceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

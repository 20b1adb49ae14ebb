"""Command-line entry point: ``surrojive {simulate,estimate,sweep,verify-ident}``.

Configuration is layered: command-line flags override the ``--config`` JSON
file, which overrides built-in defaults. Each command writes a
``metadata.json`` holding its fully resolved configuration; passing that
file back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .crossfold_risk import minimize_risk_linear
from .data_model import (DataFormatError, Dataset, aggregate, as_table, read_aggregates,
                         read_units, write_aggregates, write_units)
from .estimators import (Estimator, SingularGramError, WeakIdentificationError, jive_2fold_with_ci,
                         jive_lfold, ols_surrogate_index, tsls)
from .identification import (BRIDGE_TOL, AssumptionViolation, BridgeNotFoundError,
                             CompletenessError, FiniteDgp, FiniteDgpParams, build_finite_dgp,
                             instance_seed, solve_bridge, verify_identification, verify_theorem1)
from .simulation import DEFAULT_K_GRID, LinearDgpConfig, SweepFailure, run_sweep, simulate_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_ACCEPTANCE = 5
EXIT_IO = 6

METHODS = ("jive", "jive2-ci", "tsls", "ols", "erm-linear")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- config handling -----------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}", EXIT_CONFIG) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}", EXIT_CONFIG) from exc
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object", EXIT_CONFIG)
    # a metadata.json from an earlier run
    if "command" in data and "config" in data:
        data = data["config"]
    return data


def _parse_k_grid(text: str) -> list[int]:
    try:
        grid = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K grid {text!r}") from None
    if not grid or min(grid) < 1:
        raise argparse.ArgumentTypeError(f"invalid K grid {text!r}")
    return grid


def _split_known(data: dict, cls) -> tuple[dict, dict]:
    names = {f.name for f in fields(cls)}
    return ({k: v for k, v in data.items() if k in names},
            {k: v for k, v in data.items() if k not in names})


def _dgp_config(file_cfg: dict, args) -> LinearDgpConfig:
    dgp_part = file_cfg.get("dgp", file_cfg)
    known, _ = _split_known(dgp_part, LinearDgpConfig)
    if args.seed is not None:
        known["seed"] = args.seed
    if getattr(args, "folds", None) is not None:
        known["num_folds"] = args.folds
    if getattr(args, "cells", None) is not None:
        known["num_cells"] = args.cells
    try:
        return LinearDgpConfig.from_dict(known)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid simulation config: {exc}", EXIT_CONFIG) from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror or exc}",
                       EXIT_IO) from exc
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from exc


def _write_metadata(out: Path, command: str, config: dict) -> None:
    meta = {"command": command, "version": __version__, "config": config}
    _write_text(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _dgp_config(_load_config(args.config), args)
    out = _out_dir(args.out)
    dataset, truth = simulate_dataset(config)
    try:
        write_units(dataset, out / "units.csv")
        write_aggregates(aggregate(dataset), out / "aggregates.csv")
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    _write_text(out / "ground_truth.json", json.dumps(truth.to_dict(), indent=2) + "\n")
    _write_metadata(out, "simulate", config.to_dict())
    print(f"wrote {dataset.num_units} units in {config.num_cells} cells to {out}")
    return EXIT_OK


def _read_input(path: str) -> Dataset | list:
    p = Path(path)
    try:
        with p.open("r", encoding="utf-8") as fh:
            header = fh.readline()
    except OSError as exc:
        raise CliError(f"cannot read {p}: {exc.strerror or exc}", EXIT_IO) from exc
    if header.startswith("cell_id,fold_id,count,"):
        return read_aggregates(p)
    return read_units(p)


def estimate(data, method: str, alpha: float) -> dict:
    """Run one estimation method and return its JSON-ready report."""
    is_units = isinstance(data, Dataset)
    if method == "ols":
        if not is_units:
            raise CliError("method 'ols' needs a unit-level file", EXIT_DATA)
        return ols_surrogate_index(data).to_dict()
    if method == "tsls":
        return tsls(data).to_dict()
    if is_units:
        if not data.has_folds:
            raise CliError(f"method {method!r} needs fold labels in the unit file", EXIT_DATA)
        table = aggregate(data)
    else:
        table = as_table(data)
    if method == "jive":
        return jive_lfold(table).to_dict()
    if method == "jive2-ci":
        return jive_2fold_with_ci(table, alpha).to_dict()
    if method == "erm-linear":
        beta, risk = minimize_risk_linear(data if is_units else table)
        return {"beta_hat": beta.tolist(), "estimator_tag": Estimator.JIVE_LFOLD.value,
                "method": "erm-linear", "risk": asdict(risk)}
    raise CliError(f"unknown method {method!r}", EXIT_CONFIG)


def cmd_estimate(args) -> int:
    file_cfg = _load_config(args.config)
    method = args.method or file_cfg.get("method", "jive")
    alpha = args.alpha if args.alpha is not None else file_cfg.get("alpha", 0.05)
    source = args.input or file_cfg.get("input")
    if source is None:
        raise CliError("no input file given", EXIT_CONFIG)
    if method not in METHODS:
        raise CliError(f"unknown method {method!r}; choose from {', '.join(METHODS)}",
                       EXIT_CONFIG)
    if not 0 < alpha < 1:
        raise CliError(f"alpha must lie in (0, 1), got {alpha}", EXIT_CONFIG)
    data = _read_input(source)
    try:
        report = estimate(data, method, alpha)
    except WeakIdentificationError as exc:
        raise CliError(f"weak identification: {exc}", EXIT_NUMERICAL) from exc
    except SingularGramError as exc:
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        out = _out_dir(args.out)
        _write_text(out / "estimate.json", text + "\n")
        _write_metadata(out, "estimate", {"input": str(source), "method": method,
                                          "alpha": alpha})
    return EXIT_OK


def cmd_sweep(args) -> int:
    file_cfg = _load_config(args.config)
    config = _dgp_config(file_cfg, args)
    k_grid = args.k_grid or file_cfg.get("k_grid") or list(DEFAULT_K_GRID)
    reps = args.reps if args.reps is not None else file_cfg.get("n_replications", 200)
    alpha = args.alpha if args.alpha is not None else file_cfg.get("alpha", 0.05)
    estimators = file_cfg.get("estimators", [e.value for e in
                                            (Estimator.JIVE_LFOLD, Estimator.TSLS, Estimator.OLS)])
    n_novel = file_cfg.get("n_novel")
    parallelism = args.parallelism or file_cfg.get("parallelism", 1)
    out = _out_dir(args.out)
    try:
        result = run_sweep(config, k_grid=k_grid, estimators=estimators, n_replications=reps,
                           alpha=alpha, parallelism=parallelism, n_novel=n_novel)
    except SweepFailure as exc:
        raise CliError(str(exc), EXIT_NUMERICAL) from exc
    except ValueError as exc:
        raise CliError(f"invalid sweep config: {exc}", EXIT_CONFIG) from exc
    _write_text(out / "sweep.csv", result.to_csv())
    _write_text(out / "sweep.json", result.to_json() + "\n")
    resolved = {"dgp": config.to_dict(), "k_grid": list(k_grid), "n_replications": reps,
                "alpha": alpha, "estimators": list(estimators), "n_novel": n_novel,
                "parallelism": parallelism}
    _write_metadata(out, "sweep", resolved)
    print(result.to_csv(), end="")
    return EXIT_OK


def cmd_verify_ident(args) -> int:
    file_cfg = _load_config(args.config)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    tol = file_cfg.get("tolerance", BRIDGE_TOL)
    if args.dgp:
        try:
            dgp = FiniteDgp.from_json(Path(args.dgp).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read {args.dgp}: {exc.strerror or exc}", EXIT_IO) from exc
        except (KeyError, ValueError) as exc:
            raise CliError(f"invalid model file {args.dgp}: {exc}", EXIT_DATA) from exc
        try:
            dgp.check()
            valid, reason = True, None
        except (AssumptionViolation, CompletenessError, ValueError) as exc:
            valid, reason = False, str(exc)
        try:
            sol = solve_bridge(dgp)
        except BridgeNotFoundError as exc:
            raise CliError(str(exc), EXIT_NUMERICAL) from exc
        checks = {dgp.treatment_labels[a]: asdict(verify_theorem1(dgp, sol, a))
                  for a in dgp.holdout_indices}
        max_gap = max(c["gap"] for c in checks.values())
        report = {"valid": valid, "invalid_reason": reason, "residual_norm": sol.residual_norm,
                  "holdout": checks, "max_gap": max_gap, "tolerance": tol}
        resolved = {"dgp_file": str(args.dgp), "tolerance": tol}
    else:
        n_instances = args.reps if args.reps is not None else file_cfg.get("n_instances", 100)
        params_cfg, _ = _split_known(file_cfg.get("params", {}), FiniteDgpParams)
        try:
            params = FiniteDgpParams(**params_cfg)
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid model parameters: {exc}", EXIT_CONFIG) from exc
        try:
            records = verify_identification(n_instances, seed, params, tol)
        except (CompletenessError, BridgeNotFoundError, AssumptionViolation) as exc:
            raise CliError(str(exc), EXIT_NUMERICAL) from exc
        if args.save_dgps:
            for rec in records:
                dgp = build_finite_dgp(params, instance_seed(seed, rec["instance"]))
                _write_text(out / f"dgp_{rec['instance']:04d}.json", dgp.to_json(indent=1))
        max_gap = max(r["max_gap"] for r in records)
        valid = True
        report = {"n_instances": n_instances, "max_gap": max_gap, "tolerance": tol,
                  "all_passed": all(r["passed"] for r in records), "instances": records}
        resolved = {"n_instances": n_instances, "seed": seed, "tolerance": tol,
                    "params": asdict(params)}
    _write_text(out / "verify_ident.json", json.dumps(report, indent=2) + "\n")
    _write_metadata(out, "verify-ident", resolved)
    print(f"max held-out gap {max_gap:.3e} (tolerance {tol:g})")
    if valid and max_gap >= tol:
        return EXIT_ACCEPTANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surrojive",
        description="Long-term effects from many weak experiments via surrogate bridges.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file (or metadata.json of a previous run)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("simulate", help="draw a dataset from the linear model")
    common(p)
    p.add_argument("--folds", type=int, help="number of folds per cell")
    p.add_argument("--cells", type=int, help="number of cells K")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate the bridge from a unit or aggregate CSV")
    common(p, out_required=False)
    p.add_argument("input", nargs="?", help="aggregate or unit-level CSV")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", help="Monte Carlo MSE / coverage sweep over K")
    common(p)
    p.add_argument("--k-grid", type=_parse_k_grid, help="comma-separated list of K values")
    p.add_argument("--reps", type=int, help="replications per K")
    p.add_argument("--alpha", type=float)
    p.add_argument("--parallelism", type=int, help="worker processes")
    p.add_argument("--folds", type=int, help="number of folds per cell")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-ident", help="check identification on finite-support models")
    common(p)
    p.add_argument("--reps", type=int, help="number of random models")
    p.add_argument("--dgp", help="verify a single model from its JSON file")
    p.add_argument("--save-dgps", action="store_true", help="write every model as JSON")
    p.set_defaults(func=cmd_verify_ident)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

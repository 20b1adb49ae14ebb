"""Linear structural simulation model and the Monte Carlo sweep harness.

Units in cell ``a`` follow::

    S_latent = Pi[a] + gamma * U + eta
    S        = S_latent + nu                (optional measurement noise)
    Y        = S_latent @ beta + delta * U + eps

with ``U ~ u_scale * N(0, 1)``, ``eta ~ eta_scale * N(0, I_d)``,
``eps ~ eps_scale * N(0, 1)`` and ``nu ~ measurement_noise_scale * N(0, I_d)``.
Unless fixed in the config, ``beta`` and ``gamma`` are drawn as
``N(0, I_d) / sqrt(d)`` and the rows of ``Pi`` as ``pi_row_scale * N(0, I_d)``.

Every replication ``r`` at grid point ``K`` gets its own Philox stream keyed
by ``(seed, K, r)``, so sweep output does not depend on how replications
are scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .data_model import Dataset, aggregate, assign_folds
from .estimators import (Estimator, EstimateReport, SingularGramError, jive_lfold,
                         normal_quantile, ols_surrogate_index, tsls)

__all__ = [
    "LinearDgpConfig",
    "GroundTruth",
    "NovelCellOutcome",
    "SweepRow",
    "SweepResult",
    "SweepFailure",
    "DEFAULT_K_GRID",
    "replication_rng",
    "simulate_dataset",
    "evaluate_novel_cell",
    "fit_estimator",
    "run_sweep",
    "monte_carlo_estimates",
    "tsls_probability_limit",
    "ols_probability_limit",
]

DEFAULT_K_GRID = (45, 90, 180, 360, 720, 1440, 2000)
MAX_FAILURE_RATE = 0.01


@dataclass(frozen=True)
class LinearDgpConfig:
    """Parameters of the linear simulation model; defaults give the standard simulation design."""

    num_cells: int = 45
    units_per_cell: int = 100
    surrogate_dim: int = 5
    num_folds: int = 5
    eps_scale: float = 3.0
    eta_scale: float = 1.0
    u_scale: float = 3.0
    delta: float = 1.0
    pi_row_scale: float = 0.1
    measurement_noise_scale: float = 0.0
    beta: tuple[float, ...] | None = None
    gamma: tuple[float, ...] | None = None
    pi: tuple[tuple[float, ...], ...] | None = None
    novel_first_stage: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("eps_scale", "eta_scale", "u_scale", "pi_row_scale",
                     "measurement_noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.num_cells < 1 or self.units_per_cell < 1 or self.surrogate_dim < 1:
            raise ValueError("num_cells, units_per_cell and surrogate_dim must be positive")
        if self.num_folds < 2 or self.units_per_cell < self.num_folds:
            raise ValueError("need 2 <= num_folds <= units_per_cell")
        d = self.surrogate_dim
        for name in ("beta", "gamma", "novel_first_stage"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(x) for x in np.atleast_1d(value))
                if len(value) != d:
                    raise ValueError(f"{name} has length {len(value)}, expected {d}")
                object.__setattr__(self, name, value)
        if self.pi is not None:
            pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
            if pi.shape != (self.num_cells, d):
                raise ValueError(f"pi has shape {pi.shape}, expected {(self.num_cells, d)}")
            object.__setattr__(self, "pi", tuple(map(tuple, pi.tolist())))

    @property
    def first_stage_novel(self) -> np.ndarray:
        if self.novel_first_stage is None:
            return np.ones(self.surrogate_dim)
        return np.array(self.novel_first_stage)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LinearDgpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class GroundTruth:
    beta: np.ndarray
    gamma: np.ndarray
    pi: np.ndarray

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "gamma": self.gamma.tolist(),
                "pi": self.pi.tolist()}


def replication_rng(seed: int, num_cells: int, replication: int) -> np.random.Generator:
    """Independent counter-based stream for one (grid point, replication)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(num_cells, replication))
    return np.random.Generator(np.random.Philox(ss))


def _draw_truth(config: LinearDgpConfig, rng: np.random.Generator) -> GroundTruth:
    d = config.surrogate_dim
    beta = (np.array(config.beta) if config.beta is not None
            else rng.standard_normal(d) / math.sqrt(d))
    gamma = (np.array(config.gamma) if config.gamma is not None
             else rng.standard_normal(d) / math.sqrt(d))
    pi = (np.array(config.pi) if config.pi is not None
          else config.pi_row_scale * rng.standard_normal((config.num_cells, d)))
    return GroundTruth(beta=beta, gamma=gamma, pi=pi)


def simulate_dataset(config: LinearDgpConfig, rng: np.random.Generator | None = None
                     ) -> tuple[Dataset, GroundTruth]:
    """Draw structural parameters and a fold-assigned dataset.

    The generator defaults to ``numpy.random.default_rng(config.seed)``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    truth = _draw_truth(config, rng)
    K, n, d = config.num_cells, config.units_per_cell, config.surrogate_dim
    N = K * n
    cell_ids = np.repeat(np.arange(1, K + 1), n)
    u = config.u_scale * rng.standard_normal(N)
    eta = config.eta_scale * rng.standard_normal((N, d))
    eps = config.eps_scale * rng.standard_normal(N)
    s_latent = truth.pi[cell_ids - 1] + u[:, None] * truth.gamma + eta
    y = s_latent @ truth.beta + config.delta * u + eps
    s = s_latent
    if config.measurement_noise_scale > 0:
        s = s_latent + config.measurement_noise_scale * rng.standard_normal((N, d))
    dataset = Dataset(cell_ids=cell_ids, surrogates=s, outcomes=y, num_cells=K)
    return assign_folds(dataset, config.num_folds, rng), truth


@dataclass(frozen=True)
class NovelCellOutcome:
    estimate: float
    target: float
    squared_error: float
    half_width: float
    covered: bool


def evaluate_novel_cell(beta_hat, beta_cov, truth: GroundTruth, config: LinearDgpConfig,
                        n_novel: int, rng, alpha: float = 0.05) -> NovelCellOutcome:
    """Score a fitted bridge on a freshly drawn novel cell.

    The novel cell has first stage ``config.first_stage_novel`` and ``n_novel``
    units; only its surrogates are used. The target is the true long-term
    effect ``first_stage @ beta``, estimated by ``mean(S) @ beta_hat`` with
    variance ``m' Cov(beta_hat) m + beta_hat' Cov(mean S) beta_hat``.

    ``beta_cov=None`` treats ``beta_hat`` as known exactly.
    """
    beta_hat = np.asarray(beta_hat, dtype=float).ravel()
    d = config.surrogate_dim
    if beta_hat.shape != (d,):
        raise ValueError(f"beta_hat has shape {beta_hat.shape}, expected ({d},)")
    if beta_cov is None:
        beta_cov = np.zeros((d, d))
    beta_cov = np.asarray(beta_cov, dtype=float)
    if beta_cov.shape != (d, d):
        raise ValueError(f"beta_cov has shape {beta_cov.shape}, expected ({d}, {d})")
    rng = np.random.default_rng(rng)
    first_stage = config.first_stage_novel
    u = config.u_scale * rng.standard_normal(n_novel)
    s = (first_stage + u[:, None] * truth.gamma
         + config.eta_scale * rng.standard_normal((n_novel, d)))
    if config.measurement_noise_scale > 0:
        s = s + config.measurement_noise_scale * rng.standard_normal((n_novel, d))
    m = s.mean(axis=0)
    cov_m = (np.cov(s, rowvar=False).reshape(d, d) / n_novel if n_novel > 1
             else np.zeros((d, d)))
    estimate = float(m @ beta_hat)
    target = float(first_stage @ truth.beta)
    var = float(m @ beta_cov @ m + beta_hat @ cov_m @ beta_hat)
    half = normal_quantile(1 - alpha / 2) * math.sqrt(max(var, 0.0))
    return NovelCellOutcome(estimate=estimate, target=target,
                            squared_error=(estimate - target) ** 2,
                            half_width=half, covered=abs(estimate - target) <= half)


def fit_estimator(name: Estimator | str, dataset: Dataset, aggregates=None) -> EstimateReport:
    name = Estimator(name)
    if name is Estimator.OLS:
        return ols_surrogate_index(dataset)
    if aggregates is None:
        aggregates = aggregate(dataset)
    if name is Estimator.JIVE_LFOLD:
        return jive_lfold(aggregates)
    if name is Estimator.TSLS:
        return tsls(aggregates)
    raise ValueError(f"estimator {name.value} is not supported in sweeps")


# -- sweeps -------------------------------------------------------------------

class SweepFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepRow:
    K: int
    estimator: str
    mse: float
    mse_se: float
    coverage: float
    coverage_se: float
    n_reps: int
    n_failures: int
    # robust companion to ``mse``; JSON only, the CSV columns are fixed
    median_sq_error: float = math.nan


CSV_COLUMNS = ("K", "estimator", "mse", "mse_se", "coverage", "coverage_se",
               "n_reps", "n_failures")


@dataclass
class SweepResult:
    rows: list[SweepRow]
    config: dict = field(default_factory=dict)

    def row(self, K: int, estimator: Estimator | str) -> SweepRow:
        tag = Estimator(estimator).value
        for r in self.rows:
            if r.K == K and r.estimator == tag:
                return r
        raise KeyError((K, tag))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.K, r.estimator, format(r.mse, ".17g"), format(r.mse_se, ".17g"),
                             format(r.coverage, ".17g"), format(r.coverage_se, ".17g"),
                             r.n_reps, r.n_failures])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": [asdict(r) for r in self.rows]},
                          indent=2)


def _replicate(args) -> dict[str, tuple[float, bool] | None]:
    config, seed, rep, estimators, alpha, n_novel = args
    rng = replication_rng(seed, config.num_cells, rep)
    dataset, truth = simulate_dataset(config, rng)
    aggregates = aggregate(dataset)
    reports: dict[str, EstimateReport | None] = {}
    for name in estimators:
        try:
            reports[name] = fit_estimator(name, dataset, aggregates)
        except SingularGramError:
            reports[name] = None
    # one novel cell per replication, shared by all estimators
    novel_seed = rng.integers(2**63)
    out: dict[str, tuple[float, bool] | None] = {}
    for name, report in reports.items():
        if report is None:
            out[name] = None
            continue
        res = evaluate_novel_cell(report.beta_hat, report.beta_cov, truth, config,
                                  n_novel, np.random.default_rng(novel_seed), alpha)
        out[name] = (res.squared_error, res.covered)
    return out


def _map(fn, tasks: list, parallelism: int) -> list:
    if parallelism <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * parallelism))))


def run_sweep(base_config: LinearDgpConfig, k_grid: Sequence[int] = DEFAULT_K_GRID,
              estimators: Sequence[Estimator | str] = (Estimator.JIVE_LFOLD, Estimator.TSLS,
                                                        Estimator.OLS),
              n_replications: int = 200, alpha: float = 0.05, parallelism: int = 1,
              seed: int | None = None, n_novel: int | None = None) -> SweepResult:
    """MSE and interval coverage of each estimator's novel-cell prediction.

    Every replication redraws ``beta``, ``gamma`` and ``Pi`` (unless fixed in
    ``base_config``) and the historical data. Replications where an
    estimator's Gram matrix is singular are counted in ``n_failures``; more
    than 1% failures for any (K, estimator) raises :class:`SweepFailure`.
    """
    if not k_grid:
        raise ValueError("k_grid must not be empty")
    names = [Estimator(e).value for e in estimators]
    allowed = {Estimator.JIVE_LFOLD.value, Estimator.TSLS.value, Estimator.OLS.value}
    if not names or set(names) - allowed:
        raise ValueError(f"estimators must be a nonempty subset of {sorted(allowed)}")
    if n_replications < 2:
        raise ValueError("need at least 2 replications")
    seed = base_config.seed if seed is None else seed
    n_novel = base_config.units_per_cell if n_novel is None else n_novel
    rows = []
    for K in k_grid:
        config = replace(base_config, num_cells=int(K),
                         pi=None if base_config.pi is None or len(base_config.pi) != K
                         else base_config.pi)
        if base_config.pi is not None and config.pi is None:
            raise ValueError("a fixed pi matrix only fits a single K")
        tasks = [(config, seed, r, names, alpha, n_novel) for r in range(n_replications)]
        results = _map(_replicate, tasks, parallelism)
        for name in names:
            ok = [res[name] for res in results if res[name] is not None]
            failures = n_replications - len(ok)
            if failures > MAX_FAILURE_RATE * n_replications:
                raise SweepFailure(
                    f"{name} failed in {failures}/{n_replications} replications at K={K}")
            sq = np.array([x[0] for x in ok])
            cov = np.array([x[1] for x in ok], dtype=float)
            n_ok = len(ok)
            c = float(cov.mean())
            rows.append(SweepRow(
                K=int(K), estimator=name, mse=float(sq.mean()),
                mse_se=float(sq.std(ddof=1) / math.sqrt(n_ok)),
                coverage=c, coverage_se=math.sqrt(c * (1 - c) / n_ok),
                n_reps=n_ok, n_failures=failures, median_sq_error=float(np.median(sq)),
            ))
    meta = {"base_config": base_config.to_dict(), "k_grid": [int(k) for k in k_grid],
            "estimators": names, "n_replications": n_replications, "alpha": alpha,
            "seed": seed, "n_novel": n_novel}
    return SweepResult(rows=rows, config=meta)


def _estimates_task(args):
    config, seed, rep, names = args
    rng = replication_rng(seed, config.num_cells, rep)
    dataset, truth = simulate_dataset(config, rng)
    aggregates = aggregate(dataset)
    return ({name: fit_estimator(name, dataset, aggregates).beta_hat for name in names},
            truth.beta)


def monte_carlo_estimates(config: LinearDgpConfig, n_replications: int,
                          estimators: Sequence[Estimator | str], seed: int | None = None,
                          parallelism: int = 1) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Point estimates over replications.

    Returns ``({estimator: (R, d) array}, (R, d) array of true betas)``.
    """
    names = [Estimator(e).value for e in estimators]
    seed = config.seed if seed is None else seed
    tasks = [(config, seed, r, names) for r in range(n_replications)]
    results = _map(_estimates_task, tasks, parallelism)
    est = {name: np.array([res[0][name] for res in results]) for name in names}
    return est, np.array([res[1] for res in results])


# -- closed-form probability limits (scalar surrogate) ------------------------

def _scalar_params(config: LinearDgpConfig) -> tuple[float, float, float, float]:
    if config.surrogate_dim != 1:
        raise ValueError("closed-form limits are implemented for d = 1")
    if config.beta is None or config.gamma is None:
        raise ValueError("closed-form limits need fixed beta and gamma")
    if config.pi is not None:
        pi_sq = float(np.mean(np.square(config.pi)))
    else:
        pi_sq = config.pi_row_scale ** 2
    return config.beta[0], config.gamma[0], pi_sq, config.u_scale ** 2


def tsls_probability_limit(config: LinearDgpConfig) -> float:
    """Limit of 2SLS as ``K -> inf`` with ``n`` fixed, scalar surrogate.

    Cell means carry noise of variance ``O(1/n)`` that does not average out
    across cells, so the slope is ``E[Sbar Ybar] / E[Sbar^2]``.
    """
    beta, gamma, pi_sq, var_u = _scalar_params(config)
    n = config.units_per_cell
    var_eta, var_nu = config.eta_scale ** 2, config.measurement_noise_scale ** 2
    cross = beta * pi_sq + (gamma * (beta * gamma + config.delta) * var_u + beta * var_eta) / n
    second = pi_sq + (gamma ** 2 * var_u + var_eta + var_nu) / n
    return cross / second


def ols_probability_limit(config: LinearDgpConfig) -> float:
    """Limit of the unit-level regression of ``Y`` on ``S``, scalar surrogate."""
    beta, gamma, pi_sq, var_u = _scalar_params(config)
    var_eta, var_nu = config.eta_scale ** 2, config.measurement_noise_scale ** 2
    cross = beta * pi_sq + gamma * (beta * gamma + config.delta) * var_u + beta * var_eta
    second = pi_sq + gamma ** 2 * var_u + var_eta + var_nu
    return cross / second

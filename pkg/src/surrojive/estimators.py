"""Closed-form surrogate-bridge estimators for linear bridges ``h(S) = S @ beta``.

* :func:`jive_lfold` -- L-fold jackknife IV estimator from cell-fold aggregates.
* :func:`jive_2fold_with_ci` -- two-fold JIVE with a normal confidence interval
  (scalar surrogate).
* :func:`tsls` -- two-stage least squares, i.e. regression of cell means of
  ``Y`` on cell means of ``S``.
* :func:`ols_surrogate_index` -- unit-level regression of ``Y`` on ``S``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from statistics import NormalDist

import numpy as np

from .data_model import AggregateTable, Dataset, aggregate, as_table

__all__ = [
    "Estimator",
    "EstimateReport",
    "SingularGramError",
    "WeakIdentificationError",
    "normal_quantile",
    "leave_fold_out_means",
    "jive_lfold",
    "jive_2fold_with_ci",
    "tsls",
    "ols_surrogate_index",
    "FAIL_RTOL",
    "WARN_RTOL",
]

# smallest / largest singular value of the Gram matrix
FAIL_RTOL = 1e-10
WARN_RTOL = 1e-6
# minimum |H_K| / sqrt(K) for the two-fold interval
WEAK_ID_TOL = 1e-8


class Estimator(str, Enum):
    JIVE_LFOLD = "JIVE_LFOLD"
    JIVE_2FOLD = "JIVE_2FOLD"
    TSLS = "TSLS"
    OLS = "OLS"


class SingularGramError(np.linalg.LinAlgError):
    def __init__(self, smallest: float, largest: float):
        self.smallest_singular_value = smallest
        self.largest_singular_value = largest
        super().__init__(
            f"Gram matrix is singular: smallest singular value {smallest:.3e} "
            f"(largest {largest:.3e}, relative tolerance {FAIL_RTOL:g})"
        )


class WeakIdentificationError(ValueError):
    """The two-fold cross-moment is too small for the interval to be valid."""


@dataclass
class EstimateReport:
    beta_hat: np.ndarray
    estimator_tag: Estimator
    h_k_matrix: np.ndarray
    ci_lower: float | None = None
    ci_upper: float | None = None
    sigma_eta_hat: float | None = None
    sigma_eps_hat: float | None = None
    condition_warning: bool = False
    beta_cov: np.ndarray | None = None
    quantile: float | None = None
    alpha: float | None = None
    num_cells: int | None = None

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "beta_hat": arr(self.beta_hat),
            "estimator_tag": Estimator(self.estimator_tag).value,
            "h_k_matrix": arr(self.h_k_matrix),
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "sigma_eta_hat": self.sigma_eta_hat,
            "sigma_eps_hat": self.sigma_eps_hat,
            "condition_warning": self.condition_warning,
            "beta_cov": arr(self.beta_cov),
            "quantile": self.quantile,
            "alpha": self.alpha,
            "num_cells": self.num_cells,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return NormalDist().inv_cdf(p)


def _solve_gram(gram: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``gram @ beta = rhs`` after an SVD conditioning check."""
    sv = np.linalg.svd(gram, compute_uv=False)
    largest, smallest = sv[0], sv[-1]
    if largest == 0 or smallest < FAIL_RTOL * largest:
        raise SingularGramError(float(smallest), float(largest))
    return np.linalg.solve(gram, rhs), bool(smallest < WARN_RTOL * largest)


def _sandwich(gram_inv: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """``G^-1 (sum_i psi_i psi_i^T) G^-T`` for score rows ``psi_i``."""
    meat = scores.T @ scores
    return gram_inv @ meat @ gram_inv.T


def leave_fold_out_means(table: AggregateTable) -> np.ndarray:
    """Count-weighted mean surrogate of each cell over all folds but one.

    Returns an array shaped like ``table.s_mean`` whose ``[k, v]`` entry is
    the mean over units of cell ``k`` outside fold ``v``.
    """
    if table.num_folds < 2:
        raise ValueError("leave-fold-out means need at least 2 folds")
    weighted = table.counts[..., None] * table.s_mean
    rest_sum = weighted.sum(axis=1, keepdims=True) - weighted
    rest_count = table.counts.sum(axis=1, keepdims=True) - table.counts
    return rest_sum / rest_count[..., None]


def jive_lfold(aggregates) -> EstimateReport:
    """L-fold JIVE.

    Each fold's cell mean is instrumented by the same cell's mean over the
    remaining folds::

        beta = (sum_{a,v} Sbar_{a,-v}^T Sbar_{a,v})^-1 sum_{a,v} Sbar_{a,-v}^T Ybar_{a,v}

    The reported ``beta_cov`` is a cell-clustered sandwich covariance.
    """
    table = as_table(aggregates)
    K, d = table.num_cells, table.surrogate_dim
    if K < d:
        raise ValueError(f"need at least d={d} cells, got {K}")
    loo = leave_fold_out_means(table)
    gram = np.einsum("kvi,kvj->ij", loo, table.s_mean)
    rhs = np.einsum("kvi,kv->i", loo, table.y_mean)
    beta, warn = _solve_gram(gram, rhs)
    resid = table.y_mean - table.s_mean @ beta
    scores = np.einsum("kvi,kv->ki", loo, resid)
    cov = _sandwich(np.linalg.inv(gram), scores)
    return EstimateReport(beta_hat=beta, estimator_tag=Estimator.JIVE_LFOLD,
                          h_k_matrix=gram, condition_warning=warn, beta_cov=cov,
                          num_cells=K)


def jive_2fold_with_ci(aggregates, alpha: float = 0.05) -> EstimateReport:
    """Two-fold JIVE for a scalar surrogate with a normal confidence interval.

    Fold ``fold_ids[0]`` instruments fold ``fold_ids[1]``::

        beta = sum_a Sbar_{a,0} Ybar_{a,1} / H_K,   H_K = sum_a Sbar_{a,0} Sbar_{a,1}

    and the interval is ``beta +/- q_{1-alpha/2} * sqrt(K) / H_K * sd_eta * sd_eps``.
    Fold-mean noise scales are estimated by within-cell differencing, which
    removes the cell's first-stage effect::

        sd_eta^2 = mean_a (Sbar_{a,0} - Sbar_{a,1})^2 / 2
        sd_eps^2 = mean_a (r_{a,0} - r_{a,1})^2 / 2,   r_{a,v} = Ybar_{a,v} - beta Sbar_{a,v}

    Raises
    ------
    WeakIdentificationError
        If ``H_K <= 0`` or ``H_K / sqrt(K)`` is negligible.
    """
    table = as_table(aggregates)
    if table.num_folds != 2:
        raise ValueError(f"two-fold JIVE needs exactly 2 folds, got {table.num_folds}")
    if table.surrogate_dim != 1:
        raise ValueError("the two-fold interval is defined for a scalar surrogate only")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    K = table.num_cells
    s0, s1 = table.s_mean[:, 0, 0], table.s_mean[:, 1, 0]
    y0, y1 = table.y_mean[:, 0], table.y_mean[:, 1]
    h_k = float(np.dot(s0, s1))
    scale = math.sqrt(K)
    if h_k <= 0 or h_k / scale < WEAK_ID_TOL:
        raise WeakIdentificationError(
            f"H_K = {h_k:.6g} (H_K/sqrt(K) = {h_k / scale:.3g}); the cells do not "
            "move the surrogate enough for a valid interval"
        )
    beta = float(np.dot(s0, y1)) / h_k
    sigma_eta = math.sqrt(np.mean((s0 - s1) ** 2) / 2)
    r0, r1 = y0 - beta * s0, y1 - beta * s1
    sigma_eps = math.sqrt(np.mean((r0 - r1) ** 2) / 2)
    q = normal_quantile(1 - alpha / 2)
    half = q * scale / h_k * sigma_eta * sigma_eps
    return EstimateReport(
        beta_hat=np.array([beta]),
        estimator_tag=Estimator.JIVE_2FOLD,
        h_k_matrix=np.array([[h_k]]),
        ci_lower=beta - half,
        ci_upper=beta + half,
        sigma_eta_hat=sigma_eta,
        sigma_eps_hat=sigma_eps,
        beta_cov=np.array([[(half / q) ** 2]]),
        quantile=q,
        alpha=alpha,
        num_cells=K,
    )


def _cell_means(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Dataset):
        if data.has_folds:
            data = aggregate(data)
        else:
            counts = np.bincount(data.cell_ids, minlength=data.num_cells + 1)[1:]
            s = np.column_stack([
                np.bincount(data.cell_ids, weights=data.surrogates[:, j],
                            minlength=data.num_cells + 1)[1:]
                for j in range(data.surrogate_dim)
            ]) / counts[:, None]
            y = np.bincount(data.cell_ids, weights=data.outcomes,
                            minlength=data.num_cells + 1)[1:] / counts
            return s, y
    if isinstance(data, tuple) and len(data) == 2:
        s, y = (np.asarray(x, dtype=float) for x in data)
        return (s[:, None] if s.ndim == 1 else s), y
    table = as_table(data)
    w = table.counts / table.counts.sum(axis=1, keepdims=True)
    s = np.einsum("kv,kvi->ki", w, table.s_mean)
    y = np.einsum("kv,kv->k", w, table.y_mean)
    return s, y


def tsls(data) -> EstimateReport:
    """Two-stage least squares with one-hot cell instruments.

    Equivalent to regressing cell means of ``Y`` on cell means of ``S``
    through the origin. ``data`` may be an aggregate table (folds are
    pooled), a :class:`Dataset`, or a ``(s_means, y_means)`` pair.
    """
    s, y = _cell_means(data)
    K, d = s.shape
    if K < d:
        raise ValueError(f"need at least d={d} cells, got {K}")
    gram = s.T @ s
    beta, warn = _solve_gram(gram, s.T @ y)
    scores = s * (y - s @ beta)[:, None]
    cov = _sandwich(np.linalg.inv(gram), scores)
    return EstimateReport(beta_hat=beta, estimator_tag=Estimator.TSLS, h_k_matrix=gram,
                          condition_warning=warn, beta_cov=cov, num_cells=K)


def ols_surrogate_index(dataset: Dataset) -> EstimateReport:
    """Unit-level least squares of ``Y`` on ``S`` without intercept.

    ``beta_cov`` is the heteroskedasticity-robust (HC0) covariance.
    """
    s, y = dataset.surrogates, dataset.outcomes
    if s.shape[0] < s.shape[1]:
        raise ValueError(f"need at least d={s.shape[1]} units, got {s.shape[0]}")
    gram = s.T @ s
    beta, warn = _solve_gram(gram, s.T @ y)
    scores = s * (y - s @ beta)[:, None]
    cov = _sandwich(np.linalg.inv(gram), scores)
    return EstimateReport(beta_hat=beta, estimator_tag=Estimator.OLS, h_k_matrix=gram,
                          condition_warning=warn, beta_cov=cov,
                          num_cells=dataset.num_cells)

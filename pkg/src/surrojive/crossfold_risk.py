"""Empirical cross-fold risk of bridge functions and its minimizers.

For a bridge ``h`` the empirical risk is::

    R(h) = 1/L sum_v 1/K sum_a [ -P^v y (a) * P^-v h (a) + 1/2 * P^v h (a) * P^-v h (a) ]

where ``P^v f (a)`` is the mean of ``f`` over units of cell ``a`` in fold
``v`` and ``P^-v f (a)`` the mean over units of cell ``a`` outside fold ``v``.
Only variation induced by cell assignment enters, so noise shared by ``S``
and ``Y`` within a unit drops out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data_model import AggregateTable, Dataset, as_table
from .estimators import _solve_gram

__all__ = [
    "OffSupportError",
    "LinearBridge",
    "TabularBridge",
    "EmpiricalRiskValue",
    "fold_means",
    "empirical_risk",
    "linear_risk_form",
    "minimize_risk_linear",
    "minimize_risk_finite_class",
    "population_risk",
]


class OffSupportError(KeyError):
    """A tabular bridge was evaluated at a surrogate value outside its support."""


class LinearBridge:
    """``h(S) = S @ beta``."""

    kind = "LINEAR"

    def __init__(self, beta):
        self.beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if self.beta.ndim != 1:
            raise ValueError("beta must be a vector")

    def __call__(self, surrogates) -> np.ndarray:
        s = np.atleast_2d(np.asarray(surrogates, dtype=float))
        if s.shape[1] != self.beta.size:
            raise ValueError(f"surrogate dimension {s.shape[1]} != {self.beta.size}")
        return s @ self.beta

    def __repr__(self):
        return f"LinearBridge({self.beta.tolist()})"


class TabularBridge:
    """Lookup table over a finite set of surrogate vectors.

    Parameters
    ----------
    table : mapping
        Support point (tuple of floats) to bridge value.
    """

    kind = "TABULAR"

    def __init__(self, table: Mapping[tuple, float]):
        if not table:
            raise ValueError("empty support")
        self.table = {tuple(float(x) for x in k): float(v) for k, v in table.items()}
        dims = {len(k) for k in self.table}
        if len(dims) != 1:
            raise ValueError("support points must share one dimension")
        self.dim = dims.pop()

    @property
    def support(self) -> list[tuple[float, ...]]:
        return list(self.table)

    def shifted(self, offset: float) -> "TabularBridge":
        return TabularBridge({k: v + offset for k, v in self.table.items()})

    def __call__(self, surrogates) -> np.ndarray:
        s = np.atleast_2d(np.asarray(surrogates, dtype=float))
        if s.shape[1] != self.dim:
            raise ValueError(f"surrogate dimension {s.shape[1]} != {self.dim}")
        points, inverse = np.unique(s, axis=0, return_inverse=True)
        values = np.empty(len(points))
        for j, p in enumerate(points):
            key = tuple(float(x) for x in p)
            try:
                values[j] = self.table[key]
            except KeyError:
                raise OffSupportError(f"surrogate value {key} is outside the bridge's support") from None
        return values[inverse.ravel()]

    def __repr__(self):
        return f"TabularBridge({len(self.table)} points)"


@dataclass(frozen=True)
class EmpiricalRiskValue:
    value: float
    cross_term: float
    quadratic_term: float


def fold_means(values: np.ndarray, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Within-fold and leave-fold-out cell means of per-unit ``values``.

    Returns two ``(K, L)`` arrays ``(P^v f, P^-v f)``.
    """
    if not dataset.has_folds:
        raise ValueError("dataset has no fold assignment")
    K, L = dataset.num_cells, dataset.num_folds
    key = (dataset.cell_ids - 1) * L + (dataset.fold_ids - 1)
    counts = np.bincount(key, minlength=K * L).reshape(K, L)
    if np.any(counts == 0):
        raise ValueError("some (cell, fold) pair has no units")
    sums = np.bincount(key, weights=values, minlength=K * L).reshape(K, L)
    rest_sums = sums.sum(axis=1, keepdims=True) - sums
    rest_counts = counts.sum(axis=1, keepdims=True) - counts
    return sums / counts, rest_sums / rest_counts


def _risk(y_own: np.ndarray, h_own: np.ndarray, h_rest: np.ndarray) -> EmpiricalRiskValue:
    K, L = y_own.shape
    cross = -float(np.sum(y_own * h_rest)) / (K * L)
    quad = 0.5 * float(np.sum(h_own * h_rest)) / (K * L)
    return EmpiricalRiskValue(value=cross + quad, cross_term=cross, quadratic_term=quad)


def empirical_risk(h, dataset: Dataset) -> EmpiricalRiskValue:
    """Empirical cross-fold risk of the bridge ``h`` on a fold-assigned dataset."""
    h_values = np.asarray(h(dataset.surrogates), dtype=float)
    y_own, _ = fold_means(dataset.outcomes, dataset)
    h_own, h_rest = fold_means(h_values, dataset)
    return _risk(y_own, h_own, h_rest)


def linear_risk_form(data) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic form of the empirical risk over linear bridges.

    Returns ``(M, c)`` with ``R(S @ beta) = -c @ beta + beta @ M @ beta / 2``,
    ``M`` symmetric. ``data`` is a fold-assigned :class:`Dataset` or cell-fold
    aggregates (the risk of a linear bridge only depends on those).
    """
    if isinstance(data, Dataset):
        d = data.surrogate_dim
        y_own, _ = fold_means(data.outcomes, data)
        pairs = [fold_means(data.surrogates[:, j], data) for j in range(d)]
        s_own = np.stack([p[0] for p in pairs], axis=-1)
        s_rest = np.stack([p[1] for p in pairs], axis=-1)
    else:
        table: AggregateTable = as_table(data)
        y_own, s_own = table.y_mean, table.s_mean
        weighted = table.counts[..., None] * s_own
        rest_counts = table.counts.sum(axis=1, keepdims=True) - table.counts
        s_rest = (weighted.sum(axis=1, keepdims=True) - weighted) / rest_counts[..., None]
    K, L = y_own.shape
    m = np.einsum("kvi,kvj->ij", s_own, s_rest) / (K * L)
    c = np.einsum("kvi,kv->i", s_rest, y_own) / (K * L)
    return (m + m.T) / 2, c


def minimize_risk_linear(data) -> tuple[np.ndarray, EmpiricalRiskValue]:
    """Exact minimizer of the empirical risk over ``h(S) = S @ beta``.

    Solves the normal equations ``M beta = c`` of :func:`linear_risk_form`.
    With balanced folds this coincides with :func:`~surrojive.estimators.jive_lfold`.
    """
    m, c = linear_risk_form(data)
    beta, _ = _solve_gram(m, c)
    cross = -float(c @ beta)
    quad = 0.5 * float(beta @ m @ beta)
    return beta, EmpiricalRiskValue(value=cross + quad, cross_term=cross, quadratic_term=quad)


def minimize_risk_finite_class(dataset: Dataset, candidates: Sequence
                               ) -> tuple[int, EmpiricalRiskValue]:
    """Index and risk of the best candidate bridge; ties go to the lowest index."""
    if not candidates:
        raise ValueError("no candidate bridges")
    y_own, _ = fold_means(dataset.outcomes, dataset)
    best, best_risk = -1, None
    for j, h in enumerate(candidates):
        h_own, h_rest = fold_means(np.asarray(h(dataset.surrogates), dtype=float), dataset)
        risk = _risk(y_own, h_own, h_rest)
        if best_risk is None or risk.value < best_risk.value:
            best, best_risk = j, risk
    return best, best_risk


def population_risk(h, dgp) -> float:
    """Exact population cross-fold risk on a finite-support model.

    At population level both fold-conditional means reduce to ``E[. | A]``::

        R(h) = -E[ E[Y|A] E[h(S)|A] ] + 1/2 E[ E[h(S)|A]^2 ]

    with ``A`` drawn from ``dgp.treatment_probs`` over the training arms.
    """
    points, _ = dgp.surrogate_points()
    h_vals = np.asarray(h(points), dtype=float)
    terms = []
    for j, a in enumerate(dgp.train_indices):
        probs = dgp.surrogate_distribution(a).ravel()
        m_h = math.fsum(probs * h_vals)
        m_y = dgp.mean_outcome(a)
        p = dgp.treatment_probs[j]
        terms.append(-p * m_y * m_h)
        terms.append(0.5 * p * m_h * m_h)
    return math.fsum(terms)

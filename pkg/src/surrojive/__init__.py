"""Long-term treatment effects from many weak experiments.

Learns a surrogate bridge ``h(S)`` from historical randomized experiments
with cross-fold (jackknife) moments, which stay unbiased when each
experiment is small and barely moves the surrogates.
"""
from .crossfold_risk import (EmpiricalRiskValue, LinearBridge, TabularBridge, empirical_risk,
                             minimize_risk_finite_class, minimize_risk_linear, population_risk)
from .data_model import (AggregateTable, CellFoldAggregate, Dataset, UnitRecord, aggregate,
                         assign_folds, read_aggregates, read_units, write_aggregates, write_units)
from .estimators import (EstimateReport, Estimator, jive_2fold_with_ci, jive_lfold,
                         ols_surrogate_index, tsls)
from .identification import (FiniteDgp, FiniteDgpParams, build_finite_dgp,
                             find_heterogeneity_counterexample, solve_bridge, verify_identification,
                             verify_theorem1)
from .simulation import (LinearDgpConfig, evaluate_novel_cell, run_sweep, simulate_dataset)

__version__ = "0.1.0"

__all__ = [
    "AggregateTable", "CellFoldAggregate", "Dataset", "UnitRecord", "aggregate",
    "assign_folds", "read_aggregates", "read_units", "write_aggregates", "write_units",
    "EstimateReport", "Estimator", "jive_2fold_with_ci", "jive_lfold", "ols_surrogate_index",
    "tsls", "EmpiricalRiskValue", "LinearBridge", "TabularBridge", "empirical_risk",
    "minimize_risk_finite_class", "minimize_risk_linear", "population_risk", "FiniteDgp",
    "FiniteDgpParams", "build_finite_dgp", "find_heterogeneity_counterexample", "solve_bridge",
    "verify_identification", "verify_theorem1",
    "LinearDgpConfig", "evaluate_novel_cell", "run_sweep", "simulate_dataset",
]

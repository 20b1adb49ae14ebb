"""Finite-support surrogate models with an exact bridge solver.

A :class:`FiniteDgp` tabulates the potential-outcome structure::

    U1 ~ u1_probs
    S1(a) | U1=u1      ~ s1_table[a, u1]
    U2(a)              ~ u2_table[a]          (independent of U1, S1)
    S2(u2)             ~ s2_table[u2]
    E[Y(s1, s2, u2) | U1=u1] = y_table[s1, s2, u2, u1]

``U1`` confounds the surrogate ``S1`` and the outcome; ``S2`` is a noisy
proxy of ``U2``, which carries the part of the treatment effect not
mediated by ``S1``. All expectations are exhaustive sums over the support,
accumulated with :func:`math.fsum`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .crossfold_risk import TabularBridge
from .data_model import Dataset, assign_folds

__all__ = [
    "FiniteDgpParams",
    "FiniteDgp",
    "BridgeSolution",
    "IdentificationCheck",
    "CompletenessError",
    "AssumptionViolation",
    "BridgeNotFoundError",
    "build_finite_dgp",
    "solve_bridge",
    "verify_theorem1",
    "verify_identification",
    "find_heterogeneity_counterexample",
    "instance_seed",
    "bridge_system",
    "BRIDGE_TOL",
]

PROB_TOL = 1e-12
BRIDGE_TOL = 1e-10


class CompletenessError(ValueError):
    def __init__(self, rank: int, required: int):
        self.rank, self.required = rank, required
        super().__init__(
            f"completeness fails: Pr[S1, U2 | A] has rank {rank} over the training "
            f"arms but {required} (= |S1| * |U2|) is required"
        )


class AssumptionViolation(ValueError):
    pass


class BridgeNotFoundError(ArithmeticError):
    pass


def _fsum_product(*arrays) -> float:
    """Compensated sum of the elementwise product of broadcastable arrays."""
    prod = arrays[0]
    for a in arrays[1:]:
        prod = prod * a
    return math.fsum(np.ravel(prod))


@dataclass
class FiniteDgp:
    treatment_labels: list[str]
    train_indices: tuple[int, ...]
    treatment_probs: np.ndarray
    u1_probs: np.ndarray
    s1_table: np.ndarray
    u2_table: np.ndarray
    s2_table: np.ndarray
    y_table: np.ndarray
    s1_values: np.ndarray
    s2_values: np.ndarray
    y_noise_sd: float = 1.0

    def __post_init__(self):
        self.train_indices = tuple(int(i) for i in self.train_indices)
        for name in ("treatment_probs", "u1_probs", "s1_table", "u2_table", "s2_table",
                     "y_table", "s1_values", "s2_values"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n_a = len(self.treatment_labels)
        m1, k1, m2, k2 = self.n_u1, self.n_s1, self.n_u2, self.n_s2
        shapes = {
            "treatment_probs": (len(self.train_indices),),
            "s1_table": (n_a, m1, k1),
            "u2_table": (n_a, m2),
            "s2_table": (m2, k2),
            "y_table": (k1, k2, m2, m1),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if len(set(self.s1_values)) != k1 or len(set(self.s2_values)) != k2:
            raise ValueError("surrogate support values must be distinct")
        if not set(self.train_indices) <= set(range(n_a)):
            raise ValueError("train_indices out of range")

    # support sizes
    @property
    def n_u1(self) -> int:
        return self.u1_probs.size

    @property
    def n_s1(self) -> int:
        return self.s1_values.size

    @property
    def n_u2(self) -> int:
        return self.s2_table.shape[0]

    @property
    def n_s2(self) -> int:
        return self.s2_values.size

    @property
    def holdout_indices(self) -> tuple[int, ...]:
        return tuple(i for i in range(len(self.treatment_labels)) if i not in self.train_indices)

    def index_of(self, treatment) -> int:
        if isinstance(treatment, str):
            return self.treatment_labels.index(treatment)
        return int(treatment)

    # distributions given a treatment
    def s1_marginal(self, a: int) -> np.ndarray:
        return self.u1_probs @ self.s1_table[a]

    def s2_marginal(self, a: int) -> np.ndarray:
        return self.u2_table[a] @ self.s2_table

    def surrogate_distribution(self, a: int) -> np.ndarray:
        """``Pr[S1 = s1, S2 = s2 | A = a]`` as a ``(|S1|, |S2|)`` array."""
        return np.outer(self.s1_marginal(a), self.s2_marginal(a))

    def surrogate_points(self) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """Support of ``S = (S1, S2)`` in row-major ``(s1, s2)`` order."""
        idx = [(i, j) for i in range(self.n_s1) for j in range(self.n_s2)]
        points = np.array([(self.s1_values[i], self.s2_values[j]) for i, j in idx])
        return points, idx

    def mean_outcome(self, a: int) -> float:
        """``E[Y(a)]``; for a training arm this equals ``E[Y | A = a]``."""
        # axes: s1, s2, u2, u1
        p_s1 = self.s1_table[a].T[:, None, None, :]
        p_u1 = self.u1_probs[None, None, None, :]
        p_u2 = self.u2_table[a][None, None, :, None]
        p_s2 = self.s2_table.T[None, :, :, None]
        return _fsum_product(p_s1, p_u1, p_u2, p_s2, self.y_table)

    def mean_bridge(self, a: int, h_table: np.ndarray) -> float:
        """``E[h(S(a))]`` for a bridge tabulated on ``(s1, s2)``."""
        return _fsum_product(self.surrogate_distribution(a), h_table)

    def phi_table(self) -> np.ndarray:
        """``E[Y(s1,s2,u2) | U1=u1] - E[Y(s1,s2,u2)]``, shaped like ``y_table``."""
        marginal = np.einsum("abcu,u->abc", self.y_table, self.u1_probs)
        return self.y_table - marginal[..., None]

    def strata_gap(self) -> float:
        """Largest ``|E[phi(S1(a), s2, U1, u2)]|`` over arms, ``s2`` and ``u2``."""
        phi = self.phi_table()
        worst = 0.0
        for a in range(len(self.treatment_labels)):
            joint = self.u1_probs[:, None] * self.s1_table[a]  # (u1, s1)
            for j in range(self.n_s2):
                for u in range(self.n_u2):
                    val = _fsum_product(phi[:, j, u, :], joint.T)
                    worst = max(worst, abs(val))
        return worst

    def completeness_matrix(self) -> np.ndarray:
        """``Pr[S1 = s1, U2 = u2 | A = a]`` over training arms, columns ``(s1, u2)``."""
        return np.array([np.outer(self.s1_marginal(a), self.u2_table[a]).ravel()
                         for a in self.train_indices])

    def completeness_rank(self) -> int:
        return int(np.linalg.matrix_rank(self.completeness_matrix()))

    def proxy_independence_gap(self) -> float:
        """Largest ``|Pr[S2 | U2, S1, A] - Pr[S2 | U2, S1]|`` over the training design."""
        joint = np.zeros((len(self.train_indices), self.n_s1, self.n_u2, self.n_s2))
        for j, a in enumerate(self.train_indices):
            joint[j] = (self.treatment_probs[j]
                        * self.s1_marginal(a)[:, None, None]
                        * self.u2_table[a][None, :, None]
                        * self.s2_table[None, :, :])
        given_all = joint / joint.sum(axis=3, keepdims=True)
        pooled = joint.sum(axis=0)
        given_s1u2 = pooled / pooled.sum(axis=2, keepdims=True)
        mask = joint.sum(axis=3) > 0
        return float(np.max(np.abs(given_all - given_s1u2[None])[mask]))

    def check(self, require_homogeneity: bool = True) -> None:
        """Validate probability tables, the strata condition and completeness."""
        rows = [("treatment_probs", self.treatment_probs), ("u1_probs", self.u1_probs),
                ("s1_table", self.s1_table), ("u2_table", self.u2_table),
                ("s2_table", self.s2_table)]
        for name, table in rows:
            if np.any(table < 0):
                raise ValueError(f"{name} has negative entries")
            if np.max(np.abs(table.sum(axis=-1) - 1)) > PROB_TOL:
                raise ValueError(f"{name} rows do not sum to 1")
        if require_homogeneity:
            gap = self.strata_gap()
            if gap > PROB_TOL:
                raise AssumptionViolation(
                    f"strata heterogeneity does not integrate to zero (max |E phi| = {gap:.3g})")
        required = self.n_s1 * self.n_u2
        rank = self.completeness_rank()
        if rank < required:
            raise CompletenessError(rank, required)

    # sampling
    def sample(self, num_cells: int, units_per_cell: int, num_folds: int, rng
               ) -> tuple[Dataset, np.ndarray]:
        """Draw a fold-assigned dataset; cells get training arms from ``treatment_probs``.

        Returns the dataset (surrogate columns ``S1, S2``) and the arm index of
        every cell.
        """
        rng = np.random.default_rng(rng)
        arms = np.asarray(self.train_indices)[
            rng.choice(len(self.train_indices), size=num_cells, p=self.treatment_probs)]
        unit_arm = np.repeat(arms, units_per_cell)
        N = unit_arm.size

        def draw(probs: np.ndarray) -> np.ndarray:
            cdf = np.cumsum(probs, axis=-1)
            cdf[..., -1] = 1.0
            return (rng.random(N)[:, None] > cdf).sum(axis=-1)

        u1 = draw(np.broadcast_to(self.u1_probs, (N, self.n_u1)))
        s1 = draw(self.s1_table[unit_arm, u1])
        u2 = draw(self.u2_table[unit_arm])
        s2 = draw(self.s2_table[u2])
        y = self.y_table[s1, s2, u2, u1] + self.y_noise_sd * rng.standard_normal(N)
        dataset = Dataset(
            cell_ids=np.repeat(np.arange(1, num_cells + 1), units_per_cell),
            surrogates=np.column_stack([self.s1_values[s1], self.s2_values[s2]]),
            outcomes=y,
            num_cells=num_cells,
        )
        return assign_folds(dataset, num_folds, rng), arms

    # serialization
    def to_dict(self) -> dict:
        return {
            "supports": {
                "treatments": list(self.treatment_labels),
                "train": [self.treatment_labels[i] for i in self.train_indices],
                "s1": self.s1_values.tolist(),
                "s2": self.s2_values.tolist(),
                "u1": [f"u1_{i}" for i in range(self.n_u1)],
                "u2": [f"u2_{i}" for i in range(self.n_u2)],
            },
            "treatment_probs": self.treatment_probs.tolist(),
            "u1_probs": self.u1_probs.tolist(),
            "s1_table": self.s1_table.tolist(),
            "u2_table": self.u2_table.tolist(),
            "s2_table": self.s2_table.tolist(),
            "y_table": self.y_table.tolist(),
            "y_noise_sd": self.y_noise_sd,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FiniteDgp":
        sup = data["supports"]
        labels = list(sup["treatments"])
        return cls(
            treatment_labels=labels,
            train_indices=tuple(labels.index(t) for t in sup["train"]),
            treatment_probs=data["treatment_probs"],
            u1_probs=data["u1_probs"],
            s1_table=data["s1_table"],
            u2_table=data["u2_table"],
            s2_table=data["s2_table"],
            y_table=data["y_table"],
            s1_values=sup["s1"],
            s2_values=sup["s2"],
            y_noise_sd=data.get("y_noise_sd", 1.0),
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "FiniteDgp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class FiniteDgpParams:
    """Support sizes and effect scales for :func:`build_finite_dgp`.

    ``g_scale`` sets the mean-zero additive effect of the confounder on the
    outcome; ``confounding`` sets how strongly ``U1`` shifts ``S1``. With
    ``strata_interaction`` an interaction ``w(U1) * 1{S1 = last}`` of size
    ``violation_scale`` is added, breaking homogeneity across strata.
    """

    n_train: int = 4
    n_holdout: int = 1
    n_s1: int = 2
    n_s2: int = 2
    n_u1: int = 2
    n_u2: int = 2
    f_scale: float = 1.0
    g_scale: float = 1.0
    confounding: float = 1.5
    y_noise_sd: float = 1.0
    strata_interaction: bool = False
    violation_scale: float = 2.0

    def __post_init__(self):
        for name in ("n_train", "n_s1", "n_s2", "n_u1", "n_u2"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")
        if self.n_holdout < 1:
            raise ValueError("need at least one held-out treatment")


def _dirichlet(rng, size, k):
    return rng.dirichlet(np.ones(k), size=size)


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def build_finite_dgp(params: FiniteDgpParams = FiniteDgpParams(), seed=0) -> FiniteDgp:
    """Random finite model satisfying the identification conditions.

    The outcome table is additive, ``f(s1, s2, u2) + g(u1)`` with
    ``E[g(U1)] = 0``, so effect heterogeneity across confounder strata
    integrates to zero for every arm.

    Raises
    ------
    CompletenessError
        If ``Pr[S1, U2 | A]`` over the training arms is rank deficient, which
        is certain when ``n_train < n_s1 * n_u2``.
    """
    p = params
    rng = np.random.default_rng(seed)
    n_a = p.n_train + p.n_holdout
    labels = [f"a{i}" for i in range(p.n_train)] + [f"new{i}" for i in range(p.n_holdout)]
    u1_probs = _dirichlet(rng, None, p.n_u1) * 0.8 + 0.2 / p.n_u1
    arm_effect = rng.standard_normal((n_a, 1, p.n_s1))
    strata_effect = p.confounding * rng.standard_normal((1, p.n_u1, p.n_s1))
    s1_table = _softmax(arm_effect + strata_effect)
    u2_table = _dirichlet(rng, n_a, p.n_u2)
    s2_table = _dirichlet(rng, p.n_u2, p.n_s2) * 0.5 + 0.5 * np.eye(p.n_u2, p.n_s2)
    s2_table /= s2_table.sum(axis=1, keepdims=True)
    f = p.f_scale * rng.standard_normal((p.n_s1, p.n_s2, p.n_u2))
    g = p.g_scale * rng.standard_normal(p.n_u1)
    g -= g @ u1_probs
    y_table = f[..., None] + g[None, None, None, :]
    if p.strata_interaction:
        w = rng.standard_normal(p.n_u1)
        w -= w @ u1_probs
        w *= p.violation_scale / max(np.abs(w).max(), 1e-12)
        y_table[-1] += w[None, None, :]
    dgp = FiniteDgp(
        treatment_labels=labels,
        train_indices=tuple(range(p.n_train)),
        treatment_probs=np.full(p.n_train, 1.0 / p.n_train),
        u1_probs=u1_probs,
        s1_table=s1_table,
        u2_table=u2_table,
        s2_table=s2_table,
        y_table=y_table,
        s1_values=np.arange(p.n_s1, dtype=float),
        s2_values=np.arange(p.n_s2, dtype=float),
        y_noise_sd=p.y_noise_sd,
    )
    dgp.check(require_homogeneity=not p.strata_interaction)
    return dgp


@dataclass
class BridgeSolution:
    h: TabularBridge
    table: np.ndarray
    residual_norm: float


def bridge_system(dgp: FiniteDgp) -> tuple[np.ndarray, np.ndarray]:
    """Moment equations ``B @ vec(h) = E[Y | A]`` over the training arms."""
    design = np.array([dgp.surrogate_distribution(a).ravel() for a in dgp.train_indices])
    rhs = np.array([dgp.mean_outcome(a) for a in dgp.train_indices])
    return design, rhs


def solve_bridge(dgp: FiniteDgp, tol: float = BRIDGE_TOL) -> BridgeSolution:
    """Tabular ``h`` with ``E[Y - h(S) | A = a] = 0`` on every training arm.

    Uses the minimum-norm least-squares solution when the system is
    underdetermined. The residual is recomputed by exact summation.
    """
    design, rhs = bridge_system(dgp)
    vec, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    table = vec.reshape(dgp.n_s1, dgp.n_s2)
    residual = max(abs(rhs[j] - dgp.mean_bridge(a, table))
                   for j, a in enumerate(dgp.train_indices))
    if residual > tol:
        raise BridgeNotFoundError(
            f"no bridge solves the moment restriction: residual {residual:.3g} > {tol:g}")
    points, idx = dgp.surrogate_points()
    h = TabularBridge({tuple(pt): table[i, j] for pt, (i, j) in zip(points, idx)})
    return BridgeSolution(h=h, table=table, residual_norm=float(residual))


@dataclass(frozen=True)
class IdentificationCheck:
    lhs: float
    rhs: float
    gap: float


def verify_theorem1(dgp: FiniteDgp, solution: BridgeSolution, holdout) -> IdentificationCheck:
    """Compare ``E[Y(a')]`` with ``E[h(S(a'))]`` for a held-out arm ``a'``."""
    a = dgp.index_of(holdout)
    if a in dgp.train_indices:
        raise ValueError(f"treatment {dgp.treatment_labels[a]!r} was used to fit the bridge")
    lhs = dgp.mean_outcome(a)
    rhs = dgp.mean_bridge(a, solution.table)
    return IdentificationCheck(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


def instance_seed(seed: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(i,))


def verify_identification(n_instances: int = 100, seed: int = 0,
                          params: FiniteDgpParams = FiniteDgpParams(),
                          tol: float = BRIDGE_TOL) -> list[dict]:
    """Build, solve and check ``n_instances`` random valid models.

    Returns one record per instance with the largest gap over held-out arms.
    """
    out = []
    for i in range(n_instances):
        dgp = build_finite_dgp(params, instance_seed(seed, i))
        sol = solve_bridge(dgp)
        checks = [verify_theorem1(dgp, sol, a) for a in dgp.holdout_indices]
        gap = max(c.gap for c in checks)
        out.append({"instance": i, "residual_norm": sol.residual_norm, "max_gap": gap,
                    "passed": gap < tol})
    return out


def find_heterogeneity_counterexample(params: FiniteDgpParams = FiniteDgpParams(
                                        strata_interaction=True),
                                    seed: int = 0, min_gap: float = 1e-2,
                                    max_tries: int = 200
                                    ) -> tuple[FiniteDgp, BridgeSolution, IdentificationCheck]:
    """Search for a model with strata heterogeneity where extrapolation fails.

    The bridge still solves the training moments exactly, but its prediction
    for a held-out arm misses ``E[Y(a')]`` by more than ``min_gap``.
    """
    if not params.strata_interaction:
        raise ValueError("params must request an assumption violation")
    for i in range(max_tries):
        try:
            dgp = build_finite_dgp(params, instance_seed(seed, i))
            sol = solve_bridge(dgp)
        except (CompletenessError, BridgeNotFoundError):
            continue
        check = max((verify_theorem1(dgp, sol, a) for a in dgp.holdout_indices),
                    key=lambda c: c.gap)
        if check.gap > min_gap:
            return dgp, sol, check
    raise RuntimeError(f"no counterexample with gap > {min_gap} in {max_tries} tries")

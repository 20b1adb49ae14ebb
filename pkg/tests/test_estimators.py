import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surrojive.crossfold_risk import LinearBridge, empirical_risk
from surrojive.data_model import AggregateTable, Dataset, aggregate
from surrojive.estimators import (Estimator, SingularGramError, WeakIdentificationError,
                                  jive_2fold_with_ci, jive_lfold, leave_fold_out_means,
                                  normal_quantile, ols_surrogate_index, tsls)
from surrojive.simulation import LinearDgpConfig, ols_probability_limit, simulate_dataset

from conftest import make_dataset


def _table(s, y):
    """Aggregate table from (K, L) arrays of scalar fold means, two units per fold."""
    s, y = np.asarray(s, float), np.asarray(y, float)
    K, L = s.shape
    return AggregateTable(cell_ids=np.arange(1, K + 1), fold_ids=np.arange(1, L + 1),
                          counts=np.full((K, L), 2), s_mean=s[..., None], y_mean=y)


def quadratic_minimizer(dataset):
    """Minimize the empirical risk over linear bridges using only risk evaluations.

    The risk is an exact quadratic ``-c.b + b.M.b/2``; ``c`` and ``M`` are
    recovered by polarization at +-e_i and e_i + e_j.
    """
    d = dataset.surrogate_dim
    eye = np.eye(d)
    r = lambda b: empirical_risk(LinearBridge(b), dataset).value
    rp = np.array([r(eye[i]) for i in range(d)])
    rm = np.array([r(-eye[i]) for i in range(d)])
    c = (rm - rp) / 2
    m = np.diag(rp + rm)
    for i in range(d):
        for j in range(i + 1, d):
            m[i, j] = m[j, i] = r(eye[i] + eye[j]) + c[i] + c[j] - m[i, i] / 2 - m[j, j] / 2
    return np.linalg.solve(m, c)


class TestJiveLfold:
    def test_noise_free_recovery(self):
        pi = np.array([[1.0, 1.0], [2.0, 2.0]])
        report = jive_lfold(_table(pi, 3 * pi))
        assert report.beta_hat == pytest.approx([3.0], abs=1e-12)
        assert report.estimator_tag is Estimator.JIVE_LFOLD

    def test_identity_outcome(self):
        s = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert jive_lfold(_table(s, s)).beta_hat == pytest.approx([1.0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_quadratic_oracle(self, seed):
        ds = make_dataset(K=5, n=6, d=2, L=2, seed=seed)
        beta = jive_lfold(aggregate(ds)).beta_hat
        np.testing.assert_allclose(beta, quadratic_minimizer(ds), rtol=0, atol=1e-10)

    def test_leave_fold_out_is_count_weighted(self):
        table = AggregateTable(cell_ids=np.array([1]), fold_ids=np.array([1, 2, 3]),
                               counts=np.array([[1, 2, 3]]),
                               s_mean=np.array([[[1.0], [2.0], [4.0]]]),
                               y_mean=np.zeros((1, 3)))
        loo = leave_fold_out_means(table)[0, :, 0]
        np.testing.assert_allclose(loo, [(4 + 12) / 5, (1 + 12) / 4, (1 + 4) / 3])

    def test_singular_gram_names_singular_value(self):
        table = AggregateTable(cell_ids=np.array([1, 2]), fold_ids=np.array([1, 2]),
                               counts=np.full((2, 2), 2),
                               s_mean=np.ones((2, 2, 2)), y_mean=np.ones((2, 2)))
        with pytest.raises(SingularGramError, match="smallest singular value"):
            jive_lfold(table)

    def test_condition_warning(self):
        s = np.zeros((3, 2, 2))
        s[:, :, 0] = [[1, 1], [2, 2], [3, 3]]
        s[:, :, 1] = s[:, :, 0] + 1e-3 * np.array([[1, 1], [-1, -1], [1, 1]])
        table = AggregateTable(cell_ids=np.arange(1, 4), fold_ids=np.array([1, 2]),
                               counts=np.full((3, 2), 2), s_mean=s, y_mean=s[:, :, 0])
        assert jive_lfold(table).condition_warning

    def test_too_few_cells(self):
        ds = make_dataset(K=2, n=4, d=3, L=2)
        with pytest.raises(ValueError, match="at least d=3 cells"):
            jive_lfold(aggregate(ds))

    def test_sigma_fields_absent(self):
        report = jive_lfold(aggregate(make_dataset(5, 4, 1, 2)))
        assert report.sigma_eta_hat is None and report.ci_lower is None

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), L=st.sampled_from([2, 3, 4]))
    def test_fold_exchangeability(self, seed, L):
        ds = make_dataset(K=6, n=2 * L, d=2, L=L, seed=seed % 50)
        rng = np.random.default_rng(seed)
        perms = np.array([rng.permutation(L) + 1 for _ in range(ds.num_cells)])
        relabeled = Dataset(ds.cell_ids, ds.surrogates, ds.outcomes, ds.num_cells,
                            fold_ids=perms[ds.cell_ids - 1, ds.fold_ids - 1], num_folds=L)
        np.testing.assert_allclose(jive_lfold(aggregate(relabeled)).beta_hat,
                                   jive_lfold(aggregate(ds)).beta_hat, rtol=1e-10, atol=1e-12)

    def test_two_fold_symmetrizes_orderings(self):
        table = aggregate(make_dataset(K=30, n=4, d=1, L=2, seed=3))
        s0, s1 = table.s_mean[:, 0, 0], table.s_mean[:, 1, 0]
        y0, y1 = table.y_mean[:, 0], table.y_mean[:, 1]
        h_k = s0 @ s1
        symmetric = (s0 @ y1 + s1 @ y0) / (2 * h_k)
        assert jive_lfold(table).beta_hat[0] == pytest.approx(symmetric, rel=1e-12)
        ordered = jive_2fold_with_ci(table).beta_hat[0]
        reversed_ = (s1 @ y0) / h_k
        assert (ordered + reversed_) / 2 == pytest.approx(symmetric, rel=1e-12)


class TestScaleEquivariance:
    @pytest.mark.parametrize("c", [-2.0, 0.5, 7.0])
    def test_outcome_and_surrogate_scaling(self, c):
        ds = make_dataset(K=8, n=4, d=2, L=2, seed=11)
        base = {"jive": jive_lfold(aggregate(ds)).beta_hat, "tsls": tsls(ds).beta_hat,
                "ols": ols_surrogate_index(ds).beta_hat}
        ys = ds.with_outcomes(c * ds.outcomes)
        ss = ds.with_surrogates(c * ds.surrogates)
        for name, fit in [("jive", lambda x: jive_lfold(aggregate(x))), ("tsls", tsls),
                          ("ols", ols_surrogate_index)]:
            np.testing.assert_allclose(fit(ys).beta_hat, c * base[name], rtol=1e-10)
            np.testing.assert_allclose(fit(ss).beta_hat, base[name] / c, rtol=1e-10)


class TestNoiseFree:
    def test_all_estimators_recover_beta(self):
        cfg = LinearDgpConfig(num_cells=12, units_per_cell=10, surrogate_dim=3, num_folds=5,
                              eps_scale=0, eta_scale=0, u_scale=0, pi_row_scale=1.0, seed=4)
        ds, truth = simulate_dataset(cfg)
        for report in (jive_lfold(aggregate(ds)), tsls(ds), ols_surrogate_index(ds)):
            np.testing.assert_allclose(report.beta_hat, truth.beta, atol=1e-10)


class TestTwoFold:
    def test_quantile(self):
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)
        report = jive_2fold_with_ci(_table([[1, 1.2], [2, 1.9], [3, 3.3]],
                                           [[1, 1.1], [2.1, 2], [3, 3.1]]), 0.05)
        assert report.quantile == pytest.approx(1.959964, abs=1e-6)

    def test_zero_noise_collapses(self):
        pi = np.array([[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]])
        report = jive_2fold_with_ci(_table(pi, 2.5 * pi))
        assert report.sigma_eta_hat == 0 and report.sigma_eps_hat == 0
        assert report.ci_lower == report.ci_upper == pytest.approx(2.5, abs=1e-14)

    def test_interval_formula(self):
        s = np.array([[1.0, 1.4], [2.0, 1.5], [3.0, 3.2], [0.5, 1.0]])
        y = np.array([[0.9, 1.6], [2.2, 1.3], [2.5, 3.9], [0.2, 1.1]])
        r = jive_2fold_with_ci(_table(s, y), 0.1)
        h_k = s[:, 0] @ s[:, 1]
        beta = s[:, 0] @ y[:, 1] / h_k
        se = np.sqrt(np.mean((s[:, 0] - s[:, 1]) ** 2) / 2)
        res = y - beta * s
        sy = np.sqrt(np.mean((res[:, 0] - res[:, 1]) ** 2) / 2)
        half = 1.6448536269514722 * 2 / h_k * se * sy
        assert r.beta_hat[0] == pytest.approx(beta, rel=1e-13)
        assert (r.ci_lower, r.ci_upper) == pytest.approx((beta - half, beta + half), rel=1e-12)
        assert r.ci_lower <= r.beta_hat[0] <= r.ci_upper

    def test_weak_identification(self):
        with pytest.raises(WeakIdentificationError, match="H_K"):
            jive_2fold_with_ci(_table([[1.0, -1.0], [2.0, -2.0]], [[0, 0], [0, 0]]))

    def test_requires_two_folds_scalar(self):
        with pytest.raises(ValueError, match="exactly 2 folds"):
            jive_2fold_with_ci(aggregate(make_dataset(5, 6, 1, 3)))
        with pytest.raises(ValueError, match="scalar"):
            jive_2fold_with_ci(aggregate(make_dataset(5, 4, 2, 2)))

    @pytest.mark.slow
    def test_coverage_at_k2000(self):
        cfg = LinearDgpConfig(num_cells=2000, units_per_cell=100, surrogate_dim=1, num_folds=2,
                              beta=(1.0,), gamma=(0.5,))
        hits, reps = 0, 500
        for r in range(reps):
            ds, _ = simulate_dataset(cfg, np.random.default_rng([77, r]))
            rep = jive_2fold_with_ci(aggregate(ds))
            hits += rep.ci_lower <= 1.0 <= rep.ci_upper
        assert abs(hits / reps - 0.95) <= 0.03


class TestTslsOls:
    def test_single_cell(self):
        assert tsls((np.array([2.0]), np.array([6.0]))).beta_hat == pytest.approx([3.0])

    def test_pools_folds(self):
        s = np.array([[1.0, 3.0], [2.0, 2.0]])
        y = np.array([[1.0, 5.0], [4.0, 2.0]])
        # pooled means (2, 2) and (3, 3) -> slope 1.25 through origin
        assert tsls(_table(s, y)).beta_hat == pytest.approx([(2 * 3 + 2 * 3) / 8])

    def test_ols_exact_fit(self):
        ds = Dataset([1, 1], [[1.0], [2.0]], [2.0, 4.0], 1)
        report = ols_surrogate_index(ds)
        assert report.beta_hat == pytest.approx([2.0])
        assert report.estimator_tag is Estimator.OLS

    def test_ols_exact_multivariate(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((40, 3))
        ds = Dataset(np.repeat([1, 2], 20), s, s @ [1.0, -2.0, 0.5], 2)
        np.testing.assert_allclose(ols_surrogate_index(ds).beta_hat, [1, -2, 0.5], atol=1e-12)

    def test_ols_confounding_limit(self):
        cfg = LinearDgpConfig(num_cells=2000, units_per_cell=100, surrogate_dim=1, num_folds=2,
                              pi_row_scale=0.0, beta=(1.0,), gamma=(0.5,))
        limit = ols_probability_limit(cfg)
        assert limit == pytest.approx(1 + 0.5 * 9 / (0.25 * 9 + 1))
        est = np.array([ols_surrogate_index(simulate_dataset(cfg, np.random.default_rng([5, r]))[0]
                                            ).beta_hat[0] for r in range(40)])
        se = est.std(ddof=1) / np.sqrt(len(est))
        assert abs(est.mean() - limit) < 3 * se

    def test_report_json(self):
        report = tsls(make_dataset(5, 4, 2, 2))
        d = report.to_dict()
        assert d["estimator_tag"] == "TSLS" and len(d["beta_hat"]) == 2

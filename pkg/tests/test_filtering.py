"""多程序 Kalman 濾波（collapsing）測試"""

import numpy as np
import pytest
from scipy.special import logit

from src.mssfs.core.exceptions import ConfigurationError, ModelDomainError, NumericalError
from src.mssfs.core.models.model import ModelSpec
from src.mssfs.core.models.series import Dataset, SubjectSeries
from src.mssfs.core.services.filtering import (
    collapse_mixture,
    filter_dataset,
    filter_step,
    initial_step,
    run_filter,
    subset_observation,
    total_loglik,
)
from src.mssfs.core.services.oracle import standard_kalman_reference
from src.mssfs.core.services.switching import transition_matrix
from tests.conftest import make_bivariate_model, make_scalar_model


def random_series(rng, n, p=1, missing=0.0, subject_id="s"):
    y = rng.normal(size=(n, p)) * 2.0
    if missing:
        y[rng.random(size=(n, p)) < missing] = np.nan
    return SubjectSeries(subject_id=subject_id, y=y, covariates=np.zeros((n, 0)))


class TestHelpers:
    """觀測子集與混合分布合併"""

    def test_subset_all_missing(self):
        assert subset_observation(np.array([np.nan, np.nan]), np.eye(2), np.eye(2)) is None

    def test_subset_partial(self):
        F = np.array([[1.0, 0.0], [0.5, 1.0]])
        V = np.array([[0.3, 0.05], [0.05, 0.2]])
        subset = subset_observation(np.array([np.nan, 2.0]), F, V)
        np.testing.assert_array_equal(subset.index, [1])
        np.testing.assert_array_equal(subset.y, [2.0])
        np.testing.assert_array_equal(subset.F, [[0.5, 1.0]])
        np.testing.assert_array_equal(subset.V, [[0.2]])

    def test_collapse_two_components(self):
        """合併後的協方差包含均值離散項"""
        mean, cov = collapse_mixture(
            np.array([0.25, 0.75]), np.array([[0.0], [4.0]]), np.array([[[1.0]], [[2.0]]])
        )
        assert mean[0] == pytest.approx(3.0)
        assert cov[0, 0] == pytest.approx(0.25 * 1.0 + 0.75 * 2.0 + 0.25 * 9.0 + 0.75 * 1.0)

    def test_collapse_rejects_negative_weight(self):
        with pytest.raises(ModelDomainError):
            collapse_mixture(np.array([-0.1, 1.1]), np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_collapse_rejects_unnormalized(self):
        with pytest.raises(ModelDomainError):
            collapse_mixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_initial_step(self):
        model = make_scalar_model(init_mean=(1.0, 3.0), prob0=0.5)
        step = initial_step(model)
        np.testing.assert_allclose(step.regime_prob, [0.5, 0.5])
        assert step.marg_mean[0] == pytest.approx(2.0)
        assert step.marg_cov[0, 0] == pytest.approx(1.0 + 1.0)

    def test_filter_step_by_hand(self):
        """純量、單一 regime：eta = 2、H = 2、後驗均值 1、後驗變異數 0.5"""
        model = make_scalar_model(v=1.0, g=(1.0, 1.0), w=(0.0, 0.0), gamma=(0.0, 0.0), alpha=(-800.0, 0.0))
        step = filter_step(initial_step(model), model, 1, np.zeros(0), (0.0, 0.0), np.array([2.0]))
        assert step.innovation[0, 0, 0] == pytest.approx(2.0)
        assert step.innovation_cov[0, 0, 0, 0] == pytest.approx(2.0)
        assert step.regime_mean[0, 0] == pytest.approx(1.0)
        assert step.regime_cov[0, 0, 0] == pytest.approx(0.5)
        assert step.loglik_inc == pytest.approx(-0.5 * np.log(2.0 * np.pi * 2.0) - 1.0)

    def test_filter_step_fully_missing(self):
        """整列缺值：後驗等於預測、機率只依轉移核傳遞"""
        model = make_scalar_model(prob0=0.6)
        prev = initial_step(model)
        step = filter_step(prev, model, 1, np.zeros(0), (0.0, 0.0), np.array([np.nan]))
        kernel = transition_matrix(model.switch, np.zeros(0), np.zeros(2))
        np.testing.assert_allclose(step.regime_prob, prev.regime_prob @ kernel)
        assert step.loglik_inc == 0.0
        assert step.fully_missing


class TestSingleRegimeReduction:
    """regime 1 不可到達時與標準 Kalman 濾波一致"""

    def test_matches_standard_kalman(self):
        rng = np.random.default_rng(20)
        for i in range(20):
            v, g0, w0, gamma0 = rng.uniform(0.05, 1.0), rng.uniform(-0.8, 0.8), rng.uniform(0.05, 1.0), rng.normal()
            model = make_scalar_model(
                v=v,
                g=(g0, 0.5),
                w=(w0, 0.5),
                gamma=(gamma0, 5.0),
                alpha=(-800.0, 0.0),
                init_mean=(rng.normal(), 0.0),
                init_var=(rng.uniform(0.1, 2.0), 1.0),
                prob0=1.0,
            )
            theta, y = 0.0, np.empty(50)
            for t in range(50):
                theta = gamma0 + g0 * theta + np.sqrt(w0) * rng.normal()
                y[t] = theta + np.sqrt(v) * rng.normal()
            y[rng.random(50) < 0.1] = np.nan
            series = SubjectSeries(subject_id=f"s{i}", y=y, covariates=np.zeros((50, 0)))
            out = run_filter(series, model)
            ref = standard_kalman_reference(series, model, regime=0)

            np.testing.assert_allclose(out.marg_mean, ref.filtered_mean, atol=1e-8)
            np.testing.assert_allclose(out.marg_cov, ref.filtered_cov, atol=1e-8)
            assert out.loglik == pytest.approx(ref.loglik, abs=1e-8)
            assert np.all(out.regime_prob[:, 1] < 1e-100)


class TestFilterInvariants:
    """機率正規化、協方差半正定、缺值處理"""

    def test_probabilities_and_covariances(self):
        rng = np.random.default_rng(5)
        for i in range(50):
            model = make_scalar_model(
                v=rng.uniform(0.01, 1.0),
                g=tuple(rng.uniform(0.0, 0.95, size=2)),
                w=tuple(rng.uniform(0.01, 1.0, size=2)),
                gamma=(0.0, rng.uniform(0.0, 10.0)),
                alpha=tuple(rng.normal(size=2) * 2),
                prob0=rng.uniform(0.0, 1.0),
            )
            z = rng.normal(size=(30, 2))
            out = run_filter(random_series(rng, 30, missing=0.2), model, z)
            np.testing.assert_allclose(out.regime_prob.sum(axis=1), 1.0, atol=1e-10)
            np.testing.assert_allclose(out.joint_prob.sum(axis=(1, 2)), 1.0, atol=1e-10)
            assert np.all(out.regime_cov[:, :, 0, 0] >= 0.0)
            assert np.all(out.marg_cov[:, 0, 0] >= 0.0)
            assert np.isfinite(out.loglik)

    def test_bivariate_covariances_are_psd(self, bivariate_model):
        rng = np.random.default_rng(9)
        out = run_filter(random_series(rng, 40, p=2, missing=0.25), bivariate_model)
        for cov in out.marg_cov:
            assert np.min(np.linalg.eigvalsh(cov)) >= -1e-10
        np.testing.assert_allclose(out.regime_prob.sum(axis=1), 1.0, atol=1e-10)

    def test_fully_missing_step_propagates_kernel(self):
        """整列缺值：不更新，機率以轉移矩陣傳遞，概似增量為 0"""
        model = make_scalar_model(alpha=(-1.0, 0.5), prob0=0.6)
        series = SubjectSeries(subject_id="a", y=[0.3, np.nan, 1.2], covariates=np.zeros((3, 0)))
        out = run_filter(series, model)
        step2 = out.step(2)
        assert step2.fully_missing
        assert step2.loglik_inc == 0.0
        kernel = transition_matrix(model.switch, np.zeros(0), np.zeros(2))
        np.testing.assert_allclose(step2.regime_prob, out.step(1).regime_prob @ kernel, atol=1e-12)
        assert out.loglik == pytest.approx(out.step(1).loglik_inc + out.step(3).loglik_inc)

    def test_missing_step_equals_two_step_transition(self):
        """整列缺值等同少一期、動態與轉移核各套用兩次"""
        g, w, c = 0.7, 0.2, 0.5
        model = make_scalar_model(v=0.3, g=(g, g), w=(w, w), gamma=(c, c), alpha=(-1.0, 0.8), prob0=0.3)
        kernel = transition_matrix(model.switch, np.zeros(0), np.zeros(2))
        kernel2 = kernel @ kernel
        skipped = make_scalar_model(
            v=0.3,
            g=(g * g, g * g),
            w=(g * g * w + w, g * g * w + w),
            gamma=(g * c + c, g * c + c),
            alpha=(logit(kernel2[0, 1]), logit(kernel2[1, 1])),
        )
        no_x, no_z = np.zeros(0), (0.0, 0.0)
        first = filter_step(initial_step(model), model, 1, no_x, no_z, np.array([0.4]))
        gap = filter_step(first, model, 2, no_x, no_z, np.array([np.nan]))
        full = filter_step(gap, model, 3, no_x, no_z, np.array([1.9]))
        short = filter_step(first, skipped, 2, no_x, no_z, np.array([1.9]))

        np.testing.assert_allclose(full.regime_prob, short.regime_prob, atol=1e-12)
        np.testing.assert_allclose(full.marg_mean, short.marg_mean, atol=1e-12)
        np.testing.assert_allclose(full.marg_cov, short.marg_cov, atol=1e-12)
        assert full.loglik_inc == pytest.approx(short.loglik_inc, abs=1e-12)

    def test_second_identical_channel_tightens_posterior(self):
        """兩個相同觀測通道的後驗變異數嚴格小於單一通道"""
        one = make_scalar_model(v=0.4, alpha=(-800.0, 0.0))
        two = ModelSpec(
            p=2,
            q=1,
            F=[[1.0], [1.0]],
            V=[[0.4, 0.0], [0.0, 0.4]],
            gamma=one.gamma,
            G=one.G,
            W=one.W,
            switch=one.switch,
            init=one.init,
        )
        rng = np.random.default_rng(12)
        y = rng.normal(size=20)
        single = SubjectSeries(subject_id="a", y=y, covariates=np.zeros((20, 0)))
        double = SubjectSeries(subject_id="a", y=np.column_stack([y, y]), covariates=np.zeros((20, 0)))
        loose = run_filter(single, one).regime_cov[:, 0, 0, 0]
        tight = run_filter(double, two).regime_cov[:, 0, 0, 0]
        assert np.all(tight < loose)

    def test_all_missing_series(self):
        model = make_scalar_model()
        series = SubjectSeries(subject_id="a", y=[np.nan] * 5, covariates=np.zeros((5, 0)))
        out = run_filter(series, model)
        assert out.loglik == 0.0
        assert all(s.fully_missing for s in out.steps)

    def test_partial_missing_equals_reduced_model(self, bivariate_model):
        """部分缺值等同只使用觀測到的那一列"""
        rng = np.random.default_rng(4)
        y2 = rng.normal(size=12)
        full = SubjectSeries(
            subject_id="a",
            y=np.column_stack([np.full(12, np.nan), y2]),
            covariates=np.zeros((12, 0)),
        )
        m = bivariate_model
        reduced = ModelSpec(
            p=1,
            q=2,
            F=[m.F[1]],
            V=[[m.V[1, 1]]],
            gamma=m.gamma,
            G=m.G,
            W=m.W,
            switch=m.switch,
            init=m.init,
        )
        single = SubjectSeries(subject_id="a", y=y2, covariates=np.zeros((12, 0)))
        a = run_filter(full, m)
        b = run_filter(single, reduced)
        assert a.loglik == pytest.approx(b.loglik, abs=1e-10)
        np.testing.assert_allclose(a.marg_mean, b.marg_mean, atol=1e-10)

    def test_empty_series(self):
        series = SubjectSeries(subject_id="a", y=np.zeros((0, 1)), covariates=np.zeros((0, 0)))
        out = run_filter(series, make_scalar_model())
        assert out.n == 0
        assert out.loglik == 0.0
        assert out.marg_mean.shape == (0, 1)

    def test_schedule_matches_constant_model(self):
        """時間排程各期相同時結果與時間不變模型一致"""
        model = make_scalar_model()
        scheduled = model.model_copy(update={"V": np.repeat(model.V[None], 6, axis=0)})
        rng = np.random.default_rng(2)
        series = random_series(rng, 6)
        assert run_filter(series, scheduled).loglik == pytest.approx(run_filter(series, model).loglik)
        with pytest.raises(ConfigurationError):
            run_filter(random_series(rng, 7), scheduled)


class TestFilterErrors:
    def test_singular_innovation(self):
        """V、W 與初始變異數皆為 0 時的奇異創新變異數"""
        model = make_scalar_model(v=0.0, w=(0.0, 0.0), init_var=(0.0, 0.0))
        series = SubjectSeries(subject_id="bad", y=[1.0, 2.0], covariates=np.zeros((2, 0)))
        with pytest.raises(NumericalError) as exc:
            run_filter(series, model)
        assert exc.value.t == 1
        assert exc.value.details["subject_id"] == "bad"

    def test_response_dimension_mismatch(self):
        series = SubjectSeries(subject_id="a", y=np.zeros((3, 2)), covariates=np.zeros((3, 0)))
        with pytest.raises(ModelDomainError):
            run_filter(series, make_scalar_model())

    def test_covariate_dimension_mismatch(self):
        series = SubjectSeries(subject_id="a", y=np.zeros(3), covariates=[1.0])
        with pytest.raises(ModelDomainError):
            run_filter(series, make_scalar_model())

    def test_bad_feedback_shape(self):
        series = SubjectSeries(subject_id="a", y=np.zeros(3), covariates=np.zeros((3, 0)))
        with pytest.raises(ModelDomainError):
            run_filter(series, make_scalar_model(), np.zeros((2, 2)))


class TestFilterDataset:
    """多受試者濾波"""

    def setup_method(self):
        rng = np.random.default_rng(8)
        self.dataset = Dataset(subjects=tuple(random_series(rng, 15, subject_id=f"s{i}") for i in range(4)))
        self.model = make_scalar_model()

    def test_subject_order_and_total(self):
        outputs = filter_dataset(self.dataset, self.model)
        assert [o.subject_id for o in outputs] == self.dataset.subject_ids
        assert total_loglik(outputs) == pytest.approx(sum(o.loglik for o in outputs))

    def test_total_ignores_subject_order(self):
        forward = total_loglik(filter_dataset(self.dataset, self.model))
        reversed_ = self.dataset.with_subjects(list(reversed(self.dataset.subjects)))
        assert total_loglik(filter_dataset(reversed_, self.model)) == pytest.approx(forward, rel=1e-12)

    def test_threads_do_not_change_results(self):
        """平行與循序結果逐位元一致"""
        serial = filter_dataset(self.dataset, self.model, threads=1)
        parallel = filter_dataset(self.dataset, self.model, threads=2)
        assert [o.loglik for o in serial] == [o.loglik for o in parallel]

    def test_bivariate_general_path(self):
        rng = np.random.default_rng(1)
        out = run_filter(random_series(rng, 10, p=2), make_bivariate_model())
        assert out.marg_mean.shape == (10, 2)
        assert np.isfinite(out.loglik)

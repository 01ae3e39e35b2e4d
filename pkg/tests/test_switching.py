"""切換方程與回饋測試"""

import numpy as np
import pytest
from scipy.special import expit

from src.mssfs.core.exceptions import ModelDomainError
from src.mssfs.core.models.model import FeedbackSpec, SwitchSpec
from src.mssfs.core.services.switching import (
    feedback_path,
    feedback_value,
    transition_matrix,
    transition_probabilities,
)


class TestTransitionProbabilities:
    """Logistic 切換方程"""

    def setup_method(self):
        self.switch = SwitchSpec(
            alpha=[-3.0, 0.2],
            beta=[[0.15, -0.2], [-0.8, 0.5]],
            zeta=[0.0, 0.3],
        )

    def test_zero_inputs(self):
        """x = 0、z = 0 時只剩截距"""
        probs = transition_probabilities(self.switch, [0.0, 0.0], 0.0, 0.0)
        assert probs.pi_01 == pytest.approx(expit(-3.0))
        assert probs.pi_11 == pytest.approx(expit(0.2))
        assert probs.pi_00 == pytest.approx(1.0 - expit(-3.0))

    def test_covariates_and_feedback(self):
        x = np.array([1.0, -0.5])
        probs = transition_probabilities(self.switch, x, 0.0, 0.9)
        assert probs.pi_01 == pytest.approx(expit(-3.0 + 0.15 + 0.1))
        assert probs.pi_11 == pytest.approx(expit(0.2 - 0.8 - 0.25 + 0.9))

    def test_rows_sum_to_one(self):
        """隨機輸入下每列機率和為 1"""
        rng = np.random.default_rng(0)
        for _ in range(200):
            x = rng.normal(size=2) * 5
            z0, z1 = rng.normal(size=2) * 10
            kernel = transition_probabilities(self.switch, x, z0, z1).matrix
            np.testing.assert_allclose(kernel.sum(axis=1), 1.0, atol=1e-10)
            assert np.all(kernel >= 0.0)

    def test_extreme_linear_predictor(self):
        """極端線性預測值不產生 NaN"""
        kernel = transition_probabilities(self.switch, [0.0, 0.0], -1e4, 1e4).matrix
        assert np.all(np.isfinite(kernel))
        assert kernel[0, 1] == 0.0
        assert kernel[1, 1] == 1.0

    def test_wrong_covariate_length(self):
        with pytest.raises(ModelDomainError):
            transition_probabilities(self.switch, [1.0], 0.0, 0.0)

    def test_non_finite_input(self):
        with pytest.raises(ModelDomainError):
            transition_probabilities(self.switch, [np.nan, 0.0], 0.0, 0.0)
        with pytest.raises(ModelDomainError):
            transition_probabilities(self.switch, [0.0, 0.0], 0.0, np.inf)

    def test_transition_matrix_matches(self):
        z = np.array([0.1, -0.4])
        np.testing.assert_array_equal(
            transition_matrix(self.switch, np.zeros(2), z),
            transition_probabilities(self.switch, np.zeros(2), 0.1, -0.4).matrix,
        )


class TestFeedback:
    """回饋項"""

    def test_weights_orientation(self):
        """w_l = exp(rho (L - l + 1))"""
        fb = FeedbackSpec(L=3, rho=0.5)
        np.testing.assert_allclose(fb.weights(), np.exp([1.5, 1.0, 0.5]))

    def test_no_history(self):
        fb = FeedbackSpec()
        assert feedback_value(fb, 0.3, [], 1) == 0.0

    def test_full_window_normalized(self):
        """t > L 時使用 L 期並正規化"""
        fb = FeedbackSpec(L=3, rho=0.5)
        history = np.array([5.0, 1.0, 2.0, 3.0])
        w = np.exp([1.5, 1.0, 0.5])
        expected = 0.3 * (w @ history[1:4]) / w.sum()
        assert feedback_value(fb, 0.3, history, 5) == pytest.approx(expected)

    def test_partial_window_uses_available_lags(self):
        """t <= L 時只用可得的落後期"""
        fb = FeedbackSpec(L=3, rho=0.5)
        history = np.array([2.0, 4.0])
        w = np.exp([1.0, 0.5])
        expected = (w @ history) / w.sum()
        assert feedback_value(fb, 1.0, history, 3) == pytest.approx(expected)
        assert feedback_value(fb, 1.0, history, 2) == pytest.approx(2.0)

    def test_unnormalized(self):
        fb = FeedbackSpec(L=2, rho=0.0, normalize=False)
        assert feedback_value(fb, 1.0, [1.0, 2.0], 3) == pytest.approx(3.0)

    def test_only_past_states_are_read(self):
        """未來的狀態不影響回饋值"""
        fb = FeedbackSpec()
        a = feedback_value(fb, 1.0, [1.0, 2.0, 3.0, 100.0], 4)
        b = feedback_value(fb, 1.0, [1.0, 2.0, 3.0, -100.0], 4)
        assert a == b

    def test_short_history_raises(self):
        with pytest.raises(ModelDomainError):
            feedback_value(FeedbackSpec(), 1.0, [1.0], 4)

    def test_non_finite_history_raises(self):
        with pytest.raises(ModelDomainError):
            feedback_value(FeedbackSpec(), 1.0, [1.0, np.nan, 1.0], 4)

    def test_vector_states_use_loading(self):
        """向量狀態以 loading 投影；預設取第一個分量"""
        states = np.array([[1.0, 10.0], [2.0, 20.0]])
        default = FeedbackSpec(L=1)
        assert feedback_value(default, 1.0, states, 3) == pytest.approx(2.0)
        loaded = FeedbackSpec(L=1, loading=(0.0, 1.0))
        assert feedback_value(loaded, 1.0, states, 3) == pytest.approx(20.0)

    def test_path_matches_pointwise_values(self):
        fb = FeedbackSpec(L=3, rho=0.5)
        states = np.random.default_rng(1).normal(size=(12, 1))
        path = feedback_path(fb, states)
        for t in range(1, 13):
            assert path[t - 1] == pytest.approx(feedback_value(fb, 1.0, states, t))

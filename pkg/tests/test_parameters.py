"""參數集合與轉換測試"""

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.mssfs.core.exceptions import ModelDomainError
from src.mssfs.core.models.parameters import (
    LOG_FLOOR,
    ParameterEntry,
    ParameterSet,
    Scale,
    Transform,
    apply_transform,
    collect_numbered,
    numbered,
    to_constrained_value,
    to_unconstrained_value,
)


class TestTransforms:
    """單一參數轉換"""

    @pytest.mark.parametrize("value", [1e-6, 0.03, 1.0, 10.0, 350.0])
    def test_log_round_trip(self, value):
        u = to_unconstrained_value(value, Transform.LOG)
        assert to_constrained_value(u, Transform.LOG) == pytest.approx(value, rel=1e-12)

    @pytest.mark.parametrize("value", [1e-9, 0.1, 0.5, 0.9392, 0.999])
    def test_logit_round_trip(self, value):
        u = to_unconstrained_value(value, Transform.LOGIT)
        assert to_constrained_value(u, Transform.LOGIT) == pytest.approx(value, rel=1e-9, abs=1e-12)

    def test_randomized_round_trips(self):
        """隨機值的轉換往返誤差在 1e-12 以內"""
        rng = np.random.default_rng(3)
        for value in rng.uniform(1e-3, 50.0, size=200):
            u = to_unconstrained_value(value, Transform.LOG)
            assert abs(to_constrained_value(u, Transform.LOG) - value) <= 1e-12 * value
        for value in rng.uniform(0.01, 0.99, size=200):
            u = to_unconstrained_value(value, Transform.LOGIT)
            assert abs(to_constrained_value(u, Transform.LOGIT) - value) <= 1e-12

    def test_log_floor(self):
        """極小變異數映射到下限"""
        assert to_unconstrained_value(1e-300, Transform.LOG) == LOG_FLOOR
        assert to_constrained_value(-100.0, Transform.LOG) == pytest.approx(np.exp(LOG_FLOOR))

    def test_logit_accepts_zero(self):
        """G = 0 可轉換（映射到有限值）"""
        u = to_unconstrained_value(0.0, Transform.LOGIT)
        assert np.isfinite(u)
        assert to_constrained_value(u, Transform.LOGIT) < 1e-12

    @pytest.mark.parametrize(
        "value, transform",
        [(0.0, Transform.LOG), (-1.0, Transform.LOG), (1.0, Transform.LOGIT), (-0.1, Transform.LOGIT)],
    )
    def test_out_of_domain(self, value, transform):
        with pytest.raises(ModelDomainError):
            to_unconstrained_value(value, transform, "p")

    def test_non_finite(self):
        with pytest.raises(ModelDomainError):
            to_unconstrained_value(float("nan"), Transform.IDENTITY, "p")
        with pytest.raises(ModelDomainError):
            to_constrained_value(float("inf"), Transform.IDENTITY, "p")

    def test_identity(self):
        assert to_unconstrained_value(-3.7, Transform.IDENTITY) == -3.7
        assert to_constrained_value(-3.7, Transform.IDENTITY) == -3.7


class TestParameterSet:
    """ParameterSet 操作"""

    def setup_method(self):
        self.params = ParameterSet.from_values(
            {"sigma2_v": 0.1, "G0": 0.5, "alpha0": -3.0},
            transforms={"sigma2_v": Transform.LOG, "G0": Transform.LOGIT},
        )

    def test_lookup(self):
        assert self.params.names == ["sigma2_v", "G0", "alpha0"]
        assert self.params["G0"] == 0.5
        assert "alpha0" in self.params
        assert "zeta1" not in self.params
        assert self.params.get("zeta1", 7.0) == 7.0
        assert len(self.params) == 3

    def test_vector_order(self):
        np.testing.assert_array_equal(self.params.vector(["alpha0", "sigma2_v"]), [-3.0, 0.1])

    def test_with_values_dict_and_vector(self):
        updated = self.params.with_values({"alpha0": 1.0})
        assert updated["alpha0"] == 1.0
        assert self.params["alpha0"] == -3.0
        by_vector = self.params.with_values(np.array([0.2, 0.3]), ["sigma2_v", "G0"])
        assert by_vector["sigma2_v"] == 0.2
        assert by_vector.entry("sigma2_v").transform is Transform.LOG

    def test_with_values_rejects_unknown(self):
        with pytest.raises(KeyError):
            self.params.with_values({"nope": 1.0})
        with pytest.raises(ValueError):
            self.params.with_values(np.array([1.0]), ["sigma2_v", "G0"])

    def test_duplicate_names_rejected(self):
        entry = ParameterEntry(name="a", value=1.0)
        with pytest.raises(ValidationError):
            ParameterSet(entries=(entry, entry))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            ParameterSet.from_values({"a": float("nan")})

    def test_apply_transform_round_trip(self):
        u = apply_transform(self.params, "to_unconstrained")
        assert u.scale is Scale.UNCONSTRAINED
        assert u["sigma2_v"] == pytest.approx(np.log(0.1))
        assert u["G0"] == pytest.approx(0.0)
        back = apply_transform(u, "to_constrained")
        for name in self.params.names:
            assert back[name] == pytest.approx(self.params[name], rel=1e-12)

    def test_apply_transform_is_idempotent_on_same_scale(self):
        assert apply_transform(self.params, "to_constrained") is self.params

    def test_apply_transform_bad_direction(self):
        with pytest.raises(ValueError):
            apply_transform(self.params, "sideways")

    def test_frame_round_trip(self):
        """to_frame / from_frame 保留名稱、數值與轉換"""
        frame = self.params.to_frame()
        assert list(frame.columns) == ["parameter", "value", "transform", "group"]
        restored = ParameterSet.from_frame(frame)
        assert restored.as_dict() == self.params.as_dict()
        assert restored.entry("G0").transform is Transform.LOGIT

    def test_from_frame_missing_columns(self):
        with pytest.raises(ModelDomainError):
            ParameterSet.from_frame(pd.DataFrame({"name": ["a"]}))


class TestNumberedNames:
    def test_numbered(self):
        assert numbered("beta0", 2) == ["beta0_1", "beta0_2"]
        assert numbered("beta0", 0) == []

    def test_collect_numbered_stops_at_gap(self):
        params = ParameterSet.from_values({"b_1": 1.0, "b_2": 2.0, "b_4": 4.0})
        assert collect_numbered(params, "b") == [1.0, 2.0]

"""Bootstrap 與 BCa 信賴區間測試"""

import numpy as np
import pytest
from scipy.stats import norm

from src.mssfs.core.exceptions import BootstrapError
from src.mssfs.core.models.series import Dataset
from src.mssfs.core.services.bootstrap import bca_interval, resample_dataset, run_bootstrap
from src.mssfs.core.services.estimation import EmConfig
from src.mssfs.core.services.simulation import StudyDesign, design_parameters, simulate_study
from src.mssfs.core.services.templates import TemperatureTemplate


def reference_bca(reps, jack, point, level):
    """逐步照公式計算的 BCa 端點"""
    reps = np.sort(np.asarray(reps, dtype=float))
    B = len(reps)
    z0 = norm.ppf(np.mean(reps < point))
    d = np.mean(jack) - np.asarray(jack)
    a = (d**3).sum() / (6.0 * ((d**2).sum()) ** 1.5)
    ends = []
    for z in (norm.ppf((1 - level) / 2), norm.ppf((1 + level) / 2)):
        prob = norm.cdf(z0 + (z0 + z) / (1 - a * (z0 + z)))
        k = int(np.ceil(prob * B - 1e-9))
        ends.append(reps[min(max(k, 1), B) - 1])
    return ends, z0, a


class TestBcaInterval:
    """BCa 區間計算"""

    def test_symmetric_case_is_percentile(self):
        """z0 = 0、a = 0 時等同百分位區間"""
        reps = np.arange(1.0, 101.0)
        ci = bca_interval(reps, [1.0, 2.0, 3.0], point=50.5, level=0.95)
        assert ci.z0 == pytest.approx(0.0)
        assert ci.acceleration == pytest.approx(0.0)
        assert ci.lower == 3.0
        assert ci.upper == 98.0
        assert ci.method == "bca"

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        reps = rng.gamma(2.0, size=400)
        jack = rng.gamma(2.0, size=30) * 0.1 + 1.8
        ci = bca_interval(reps, jack, point=1.9, level=0.9)
        (lower, upper), z0, a = reference_bca(reps, jack, 1.9, 0.9)
        assert ci.z0 == pytest.approx(z0)
        assert ci.acceleration == pytest.approx(a)
        assert ci.lower == lower
        assert ci.upper == upper
        assert ci.lower <= ci.upper

    def test_wider_level_contains_narrower(self):
        """同一組複本下 99% 區間包含 95% 區間"""
        rng = np.random.default_rng(6)
        for _ in range(20):
            reps = rng.gamma(rng.uniform(0.5, 5.0), size=300)
            jack = rng.normal(size=25) * 0.1 + reps.mean()
            point = float(np.median(reps))
            narrow = bca_interval(reps, jack, point=point, level=0.95)
            wide = bca_interval(reps, jack, point=point, level=0.99)
            assert wide.lower <= narrow.lower
            assert narrow.upper <= wide.upper

    def test_percentile_fallback(self):
        """jackknife 沒有變異時退回百分位區間"""
        reps = np.arange(1.0, 21.0)
        ci = bca_interval(reps, [2.0, 2.0, 2.0], point=10.5)
        assert ci.method == "percentile"
        assert "percentile_fallback" in ci.flags
        assert ci.acceleration == 0.0
        assert ci.lower == 1.0
        assert ci.upper == 20.0

    def test_z0_is_clamped(self):
        """所有複本皆大於點估計時 z0 取 1/(2B) 的分位數"""
        reps = np.linspace(5.0, 6.0, 50)
        ci = bca_interval(reps, [1.0, 2.0, 4.0], point=0.0)
        assert "z0_clamped" in ci.flags
        assert ci.z0 == pytest.approx(norm.ppf(1.0 / 100.0))
        assert np.isfinite(ci.lower) and np.isfinite(ci.upper)

    def test_non_finite_replicates_are_ignored(self):
        reps = np.append(np.arange(1.0, 13.0), [np.nan, np.inf])
        ci = bca_interval(reps, [1.0, 2.0], point=6.5)
        assert 1.0 <= ci.lower <= ci.upper <= 12.0

    def test_errors(self):
        with pytest.raises(BootstrapError):
            bca_interval([], [1.0, 2.0], point=0.0)
        with pytest.raises(BootstrapError) as exc:
            bca_interval(np.arange(9.0), [1.0, 2.0], point=4.0)
        assert exc.value.details == {"valid": 9, "required": 10}
        with pytest.raises(BootstrapError):
            bca_interval(np.arange(20.0), [1.0, 2.0], point=1.5, level=1.0)


class TestResample:
    """受試者層級重抽"""

    def test_ids_are_distinct(self, small_dataset):
        resampled = resample_dataset(small_dataset, np.random.default_rng(1))
        assert len(resampled) == len(small_dataset)
        ids = resampled.subject_ids
        assert len(set(ids)) == len(ids)
        for k, subject_id in enumerate(ids):
            prefix, original = subject_id.split(":")
            assert prefix == f"b{k + 1:04d}"
            assert original in small_dataset.subject_ids
            np.testing.assert_array_equal(
                resampled.subjects[k].y, small_dataset.subject(original).y
            )

    def test_two_arms_stay_together(self):
        """兩個 arm 屬於同一受試者，重抽時一起被抽出"""
        data = simulate_study(StudyDesign(setting="table1", m=5, n=6, arms=2, seed=4)).to_dataset()
        assert len(data.groups) == 5
        resampled = resample_dataset(data, np.random.default_rng(0))
        assert len(resampled) == 10
        assert len(resampled.groups) == 5
        for group in resampled.groups:
            assert sorted(s.subject_id.rsplit("-", 1)[1] for s in group) == ["neg", "pos"]
            assert len({s.subject_id.rsplit("-", 1)[0] for s in group}) == 1
        ids = resampled.subject_ids
        assert sum(i.endswith("-pos") for i in ids) == sum(i.endswith("-neg") for i in ids) == 5

    def test_needs_two_subjects(self, small_dataset):
        single = small_dataset.with_subjects(list(small_dataset.subjects[:1]))
        with pytest.raises(BootstrapError):
            resample_dataset(single, np.random.default_rng(0))


class TestRunBootstrap:
    def test_rejects_bad_arguments(self, small_dataset, true_params, temperature_template):
        with pytest.raises(BootstrapError):
            run_bootstrap(small_dataset, temperature_template, true_params, B=0)
        single = small_dataset.with_subjects(list(small_dataset.subjects[:1]))
        with pytest.raises(BootstrapError):
            run_bootstrap(single, temperature_template, true_params, B=10)

    def test_empty_dataset(self, true_params, temperature_template):
        with pytest.raises(BootstrapError):
            run_bootstrap(Dataset(), temperature_template, true_params, B=10)

    @pytest.mark.slow
    def test_small_run(self, small_dataset, true_params, temperature_template):
        """少量複本的完整流程；固定種子結果可重現"""
        config = EmConfig(n_max=2, tolerance=1e6, free_parameters=["sigma2_v", "delta"])
        kwargs = dict(B=10, level=0.9, seed=3, config=config)
        result = run_bootstrap(small_dataset, temperature_template, true_params, **kwargs)
        assert result.replicates.shape == (10, 13)
        assert result.jackknife.shape == (4, 13)
        assert result.failures == []
        for name in result.names:
            ci = result.intervals[name]
            assert ci.lower <= ci.upper
        for name in ["sigma2_v", "delta"]:
            column = result.names.index(name)
            wide = bca_interval(
                result.replicates[:, column], result.jackknife[:, column], true_params[name], 0.99
            )
            narrow = result.intervals[name]
            assert wide.lower <= narrow.lower <= narrow.upper <= wide.upper
        fixed = result.intervals["G0"]
        assert fixed.lower == fixed.upper == pytest.approx(true_params["G0"])

        frame = result.to_frame()
        assert list(frame["parameter"]) == true_params.names
        again = run_bootstrap(small_dataset, temperature_template, true_params, **kwargs)
        np.testing.assert_array_equal(result.replicates, again.replicates)

    @pytest.mark.slow
    def test_jackknife_leaves_out_whole_subjects(self):
        """兩個 arm 的資料：jackknife 次數等於受試者數"""
        design = StudyDesign(setting="table1", m=3, n=10, arms=2, seed=8)
        data = simulate_study(design).to_dataset()
        config = EmConfig(n_max=2, tolerance=1e6, free_parameters=["sigma2_v"])
        result = run_bootstrap(
            data, TemperatureTemplate(2), design_parameters(design), B=10, seed=1, config=config
        )
        assert result.jackknife.shape[0] == 3
        assert result.replicates.shape[0] == 10

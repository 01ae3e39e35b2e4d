"""
規模效能測試

量測受試者數增加時完整擬合與單次目標函數計算的耗時，並對擬合時間做最小平方直線。
"""

import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

from src.mssfs.core.exceptions import ConfigurationError
from src.mssfs.core.services.estimation import EmConfig, EmEstimator, penalized_negloglik
from src.mssfs.core.services.simulation import (
    COVARIATE_NAMES,
    StudyDesign,
    design_parameters,
    simulate_study,
)
from src.mssfs.core.services.templates import TemperatureTemplate
from src.mssfs.core.utils.timing import with_timing

logger = structlog.get_logger()


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


@dataclass
class BenchmarkResult:
    table: pd.DataFrame
    fit_seconds: LinearFit
    objective_seconds: LinearFit

    def summary(self) -> dict:
        return {
            "fit_seconds": vars(self.fit_seconds),
            "objective_seconds": vars(self.objective_seconds),
        }


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """最小平方直線 y = intercept + slope * x 及其 R^2"""
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if x_arr.size < 2 or np.ptp(x_arr) == 0.0:
        return LinearFit(slope=float("nan"), intercept=float("nan"), r_squared=float("nan"))
    slope, intercept = np.polyfit(x_arr, y_arr, 1)
    resid = y_arr - (intercept + slope * x_arr)
    total = float(np.sum((y_arr - y_arr.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / total if total > 0.0 else 1.0
    return LinearFit(slope=float(slope), intercept=float(intercept), r_squared=r2)


@with_timing
def scaling_benchmark(
    m_grid: Sequence[int],
    design: Optional[StudyDesign] = None,
    em_config: Optional[EmConfig] = None,
    repeats: int = 1,
    threads: int = 1,
) -> BenchmarkResult:
    """
    對 ``m_grid`` 中每個 m 的模擬研究計時擬合

    每次擬合皆由模板預設值開始；objective 欄為真值、無回饋下單次概似計算的耗時。
    """
    if not m_grid or any(m < 1 for m in m_grid):
        raise ConfigurationError("m_grid must list positive subject counts", parameter="bench.m_grid")
    design = design or StudyDesign()
    em_config = (em_config or EmConfig()).model_copy(update={"threads": threads})
    template = TemperatureTemplate(len(COVARIATE_NAMES), design.feedback)
    estimator = EmEstimator(template, em_config)
    truth = design_parameters(design)

    rows: List[dict] = []
    for m in m_grid:
        for r in range(repeats):
            data = simulate_study(
                design.model_copy(update={"m": m, "seed": design.seed + r}), threads
            ).to_dataset()
            bases = [np.zeros(s.n) for s in data.subjects]

            start = time.perf_counter()
            penalized_negloglik(template.without_feedback(truth), data, bases, template, em_config.penalty)
            objective_seconds = time.perf_counter() - start

            start = time.perf_counter()
            result = estimator.fit(data)
            fit_seconds = time.perf_counter() - start

            rows.append(
                {
                    "m": m,
                    "repeat": r,
                    "fit_seconds": fit_seconds,
                    "objective_seconds": objective_seconds,
                    "iterations": result.iterations,
                    "converged": result.converged,
                }
            )
            logger.info("Benchmark point", m=m, repeat=r, fit_seconds=round(fit_seconds, 3))

    table = pd.DataFrame(rows)
    return BenchmarkResult(
        table=table,
        fit_seconds=linear_fit(table["m"], table["fit_seconds"]),
        objective_seconds=linear_fit(table["m"], table["objective_seconds"]),
    )

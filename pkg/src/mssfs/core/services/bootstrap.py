"""
Bootstrap 信賴區間

以受試者為單位的無母數 bootstrap，搭配偏誤校正加速（BCa）區間。
每個複本以點估計為暖啟動、用一半的 EM 迭代上限重新擬合；
加速常數來自逐一剔除受試者的 jackknife。
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy.stats import norm

from src.mssfs.core.exceptions import BootstrapError, MssfsError, is_numerical_error
from src.mssfs.core.models.parameters import ParameterSet
from src.mssfs.core.models.series import Dataset
from src.mssfs.core.services.estimation import EmConfig, fit
from src.mssfs.core.services.templates import ModelTemplate
from src.mssfs.core.utils.timing import with_timing
from src.mssfs.infrastructure.parallel import parallel_map

logger = structlog.get_logger()

MAX_FAILURE_FRACTION = 0.2
MIN_REPLICATES = 10


@dataclass
class BcaInterval:
    lower: float
    upper: float
    z0: float
    acceleration: float
    level: float
    method: str = "bca"
    flags: List[str] = field(default_factory=list)


@dataclass
class ReplicateOutcome:
    index: int
    values: Optional[np.ndarray]
    converged: bool
    error: Optional[str] = None
    numerical: bool = False

    @property
    def ok(self) -> bool:
        return self.values is not None and self.converged


@dataclass
class BootstrapResult:
    """複本估計、BCa 區間與失敗紀錄"""

    point: ParameterSet
    names: List[str]
    replicates: np.ndarray
    jackknife: np.ndarray
    intervals: Dict[str, BcaInterval]
    failures: List[Tuple[int, str]] = field(default_factory=list)
    level: float = 0.95

    def to_frame(self) -> pd.DataFrame:
        """每個參數的點估計與區間"""
        rows: List[Dict[str, Any]] = []
        for name in self.names:
            ci = self.intervals[name]
            rows.append(
                {
                    "parameter": name,
                    "estimate": self.point[name],
                    "lower": ci.lower,
                    "upper": ci.upper,
                    "method": ci.method,
                    "z0": ci.z0,
                    "acceleration": ci.acceleration,
                    "flags": ";".join(ci.flags),
                }
            )
        return pd.DataFrame(rows)


def resample_dataset(dataset: Dataset, rng: np.random.Generator) -> Dataset:
    """
    放回抽取 m 位受試者，重複抽到者給予不同 id

    受試者為共用 ``group_id`` 的一組序列（例如同一人的兩個 arm），
    抽中時整組序列一起保留。

    Raises:
        BootstrapError: 受試者少於兩位
    """
    groups = dataset.groups
    m = len(groups)
    if m < 2:
        raise BootstrapError("bootstrap needs at least two subjects", details={"m": m})
    picks = rng.integers(0, m, size=m)
    subjects = []
    for k, i in enumerate(picks):
        prefix = f"b{k + 1:04d}:"
        subjects.extend(
            s.relabeled(prefix + s.subject_id, prefix + str(s.group_id)) for s in groups[i]
        )
    return dataset.with_subjects(subjects)


def _order_statistic(sorted_values: np.ndarray, prob: float) -> float:
    B = sorted_values.size
    idx = int(np.ceil(prob * B - 1e-9))
    return float(sorted_values[min(max(idx, 1), B) - 1])


def bca_interval(
    replicates: Sequence[float],
    jackknife: Sequence[float],
    point: float,
    level: float = 0.95,
) -> BcaInterval:
    """
    由 bootstrap 複本與 jackknife 估計計算 BCa 區間

    z0 = Phi^{-1}(#{replicate < point} / B)，比例截在 [1/(2B), 1 - 1/(2B)]；
    a = sum d^3 / (6 (sum d^2)^{3/2})，d 為 jackknife 平均減去各 jackknife 估計。
    jackknife 沒有變異時退回百分位區間。
    """
    reps = np.sort(np.asarray(replicates, dtype=float))
    reps = reps[np.isfinite(reps)]
    B = reps.size
    if B < MIN_REPLICATES:
        raise BootstrapError(
            f"need at least {MIN_REPLICATES} finite bootstrap replicates, got {B}",
            details={"valid": int(B), "required": MIN_REPLICATES},
        )
    if not 0.0 < level < 1.0:
        raise BootstrapError(f"level must lie in (0, 1), got {level}")

    flags: List[str] = []
    tail = (1.0 - level) / 2.0
    prop = float(np.sum(reps < point)) / B
    clamped = min(max(prop, 0.5 / B), 1.0 - 0.5 / B)
    if clamped != prop:
        flags.append("z0_clamped")
    z0 = float(norm.ppf(clamped))

    jack = np.asarray(jackknife, dtype=float)
    jack = jack[np.isfinite(jack)]
    d = jack.mean() - jack if jack.size else jack
    spread = float(np.sum(d**2))
    if jack.size < 2 or spread <= 0.0:
        flags.append("percentile_fallback")
        return BcaInterval(
            lower=_order_statistic(reps, tail),
            upper=_order_statistic(reps, 1.0 - tail),
            z0=z0,
            acceleration=0.0,
            level=level,
            method="percentile",
            flags=flags,
        )

    a = float(np.sum(d**3) / (6.0 * spread**1.5))

    def adjusted(z_tail: float) -> float:
        denom = 1.0 - a * (z0 + z_tail)
        if denom <= 0.0:
            flags.append("acceleration_degenerate")
            return 1.0 if z_tail > 0 else 0.0
        return float(norm.cdf(z0 + (z0 + z_tail) / denom))

    return BcaInterval(
        lower=_order_statistic(reps, adjusted(float(norm.ppf(tail)))),
        upper=_order_statistic(reps, adjusted(float(norm.ppf(1.0 - tail)))),
        z0=z0,
        acceleration=a,
        level=level,
        flags=flags,
    )


def _refit(
    item: Tuple[int, Dataset, ModelTemplate, EmConfig, ParameterSet, List[str]]
) -> ReplicateOutcome:
    index, data, template, config, start, names = item
    try:
        result = fit(data, template, config, start=start, warm_start=True)
    except MssfsError as e:
        return ReplicateOutcome(
            index, None, False, f"{e.error_code}: {e.message}", numerical=is_numerical_error(e)
        )
    return ReplicateOutcome(index, result.params.vector(names), result.converged)


@with_timing
def run_bootstrap(
    dataset: Dataset,
    template: ModelTemplate,
    point: ParameterSet,
    B: int = 300,
    level: float = 0.95,
    seed: int = 0,
    config: Optional[EmConfig] = None,
    threads: int = 1,
) -> BootstrapResult:
    """
    對 EM 估計量做 bootstrap

    Args:
        dataset: 原始受試者
        template: 模型參數化
        point: 點估計（受限尺度），作為暖啟動與 BCa 中心
        B: 複本數
        level: 區間涵蓋率
        seed: 基礎種子；第 k 個複本使用第 k 個衍生種子
        config: 原始擬合的 EM 設定；複本的 n_max 減半
        threads: 複本平行數

    Raises:
        BootstrapError: B < 10、受試者少於兩位，或失敗複本超過 20%
    """
    if B < MIN_REPLICATES:
        raise BootstrapError(f"B must be at least {MIN_REPLICATES}", details={"B": B})
    groups = dataset.groups
    if len(groups) < 2:
        raise BootstrapError("bootstrap needs at least two subjects", details={"m": len(groups)})

    config = config or EmConfig()
    warm = config.model_copy(update={"n_max": max(1, config.n_max // 2), "threads": 1})
    names = list(point.names)

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(B)]
    items = [(k, resample_dataset(dataset, rng), template, warm, point, names) for k, rng in enumerate(rngs)]
    outcomes = parallel_map(_refit, items, threads)

    failures = [(o.index, o.error or "not converged") for o in outcomes if not o.ok]
    numerical = sum(1 for o in outcomes if o.numerical)
    if len(failures) > MAX_FAILURE_FRACTION * B:
        raise BootstrapError(
            f"{len(failures)} of {B} bootstrap replicates failed",
            details={"failures": failures[:20]},
        )
    for index, reason in failures:
        logger.warning("Bootstrap replicate dropped", replicate=index, reason=reason)
    replicates = np.array([o.values for o in outcomes if o.ok])

    jack_items = [
        (
            i,
            dataset.with_subjects([s for j, group in enumerate(groups) if j != i for s in group]),
            template,
            warm,
            point,
            names,
        )
        for i in range(len(groups))
    ]
    jack_outcomes = parallel_map(_refit, jack_items, threads)
    dropped = [o.index for o in jack_outcomes if o.values is None]
    if dropped:
        logger.warning("Jackknife fits dropped", subjects=dropped)
    jackknife = np.array([o.values for o in jack_outcomes if o.values is not None]).reshape(-1, len(names))

    intervals = {
        name: bca_interval(replicates[:, j], jackknife[:, j], point[name], level)
        for j, name in enumerate(names)
    }
    logger.info(
        "Bootstrap completed",
        B=B,
        succeeded=len(replicates),
        failed=len(failures),
        numerical_failures=numerical,
    )
    return BootstrapResult(
        point=point,
        names=names,
        replicates=replicates,
        jackknife=jackknife,
        intervals=intervals,
        failures=failures,
        level=level,
    )

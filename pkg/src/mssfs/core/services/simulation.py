"""
資料模擬

由生成模型抽出受試者：先以切換核抽 regime（回饋用真實的過去狀態計算），
再抽狀態與觀測值，並依模擬設定組成研究資料集。

每位受試者的種子皆由設計的基礎種子衍生，平行產生與循序產生結果完全相同。
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from src.mssfs.core.exceptions import ConfigurationError, ModelDomainError
from src.mssfs.core.models.model import N_REGIMES, FeedbackSpec, ModelSpec
from src.mssfs.core.models.parameters import ParameterSet
from src.mssfs.core.models.series import Dataset, SubjectSeries
from src.mssfs.core.services.switching import feedback_value, transition_matrix
from src.mssfs.core.services.templates import TemperatureTemplate
from src.mssfs.infrastructure.parallel import parallel_map

logger = structlog.get_logger()

MALE_PROBABILITY = 0.605
COVARIATE_NAMES = ("male", "age")

# 模擬設定的共同參數；alpha1、zeta1 依回饋方向而定
_COMMON = {
    "sigma2_v": 0.1,
    "sigma2_0": 0.03,
    "sigma2_1": 0.3,
    "G0": 0.5,
    "G1": 0.5,
    "alpha0": -3.0,
    "beta0_1": 0.15,
    "beta0_2": -0.2,
    "beta1_1": -0.8,
    "beta1_2": 0.5,
}
_FEEDBACK = {
    "positive_feedback": {"alpha1": 0.2, "zeta1": 0.3},
    "negative_feedback": {"alpha1": 4.0, "zeta1": -0.3},
}
# 接近實際資料的點估計；sigma2_0 不取 0
_TABLE1 = {
    "sigma2_v": 0.3839,
    "sigma2_0": 1e-4,
    "sigma2_1": 0.6218,
    "delta": 1.0979,
    "G0": 0.9392,
    "G1": 0.6651,
    "alpha0": -3.7057,
    "beta0_1": 0.1616,
    "beta0_2": -0.1896,
    "alpha1": 1.0606,
    "beta1_1": -0.8571,
    "beta1_2": 0.8377,
    "zeta1": 2.5922,
}


class StudyDesign(BaseModel):
    """模擬研究設計"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    setting: Literal["positive_feedback", "negative_feedback", "table1"] = Field(
        default="positive_feedback", description="參數組合"
    )
    delta: float = Field(default=10.0, gt=0, description="發燒平均升溫（table1 設定下忽略）")
    m: int = Field(default=100, ge=0, description="受試者數")
    n: int = Field(default=101, ge=1, description="每位受試者的序列長度")
    arms: int = Field(default=1, ge=1, le=2, description="每位受試者的序列數（table1 使用 2）")
    missing_rate: float = Field(default=0.0, ge=0.0, lt=1.0, description="整列缺值的比例")
    seed: int = Field(default=2024, ge=0, description="基礎亂數種子")
    feedback: FeedbackSpec = Field(default_factory=FeedbackSpec, description="回饋設定")


@dataclass
class SimulatedSubject:
    series: SubjectSeries
    true_states: np.ndarray
    true_regimes: np.ndarray
    seed: int


@dataclass
class SimulatedDataset:
    """模擬受試者與生成參數"""

    subjects: List[SimulatedSubject]
    params: ParameterSet
    design: StudyDesign
    covariate_names: Tuple[str, ...] = COVARIATE_NAMES
    seeds: List[int] = field(default_factory=list)

    def to_dataset(self) -> Dataset:
        return Dataset(
            subjects=tuple(s.series for s in self.subjects),
            response_names=("y1",),
            covariate_names=self.covariate_names,
        )


def design_parameters(design: StudyDesign) -> ParameterSet:
    """設計對應的溫度預設真值"""
    if design.setting == "table1":
        values = dict(_TABLE1)
    else:
        values = {**_COMMON, **_FEEDBACK[design.setting], "delta": design.delta}
    return TemperatureTemplate(len(COVARIATE_NAMES), design.feedback).parameter_set(values)


def _draw(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    if cov.shape == (1, 1):
        return mean + np.sqrt(max(float(cov[0, 0]), 0.0)) * rng.standard_normal(1)
    return rng.multivariate_normal(mean, cov, method="eigh")


def simulate_subject(
    model: ModelSpec,
    n: int,
    x: np.ndarray,
    seed: int,
    subject_id: str = "s0001",
    missing_rate: float = 0.0,
    group_id: Optional[str] = None,
) -> SimulatedSubject:
    """
    模擬單一受試者

    Args:
        model: 生成模型
        n: 序列長度
        x: 共變數，(d,) 為固定值，(n, d) 為逐期
        seed: 受試者種子
        subject_id: 序列識別碼
        missing_rate: 整列移除觀測值的時間比例
        group_id: 序列所屬受試者，預設為 ``subject_id``
    """
    if n < 1:
        raise ModelDomainError("series length must be at least 1")
    model.check_horizon(n)
    x = np.asarray(x, dtype=float)
    covariates = np.repeat(x[None, :], n, axis=0) if x.ndim == 1 else x
    if covariates.shape != (n, model.d):
        raise ModelDomainError(f"covariates must have shape ({n}, {model.d})")

    rng = np.random.default_rng(seed)
    switch, feedback = model.switch, model.switch.feedback
    regime = 0 if rng.random() < model.init.prob0 else 1
    theta = _draw(rng, model.init.mean[regime], model.init.cov[regime])

    states = np.empty((n, model.q))
    regimes = np.empty(n, dtype=int)
    y = np.empty((n, model.p))
    for t in range(1, n + 1):
        z = np.array(
            [feedback_value(feedback, switch.zeta[k], states[: t - 1], t) for k in range(N_REGIMES)]
        )
        kernel = transition_matrix(switch, covariates[t - 1], z)
        regime = 1 if rng.random() < kernel[regime, 1] else 0
        theta = (
            model.gamma_at(t)[regime]
            + model.G_at(t)[regime] @ theta
            + _draw(rng, np.zeros(model.q), model.W_at(t)[regime])
        )
        states[t - 1] = theta
        regimes[t - 1] = regime
        y[t - 1] = model.F_at(t) @ theta + _draw(rng, np.zeros(model.p), model.V_at(t))

    n_missing = int(round(missing_rate * n))
    if n_missing:
        y[rng.choice(n, size=n_missing, replace=False)] = np.nan

    series = SubjectSeries(subject_id=subject_id, y=y, covariates=covariates, group_id=group_id)
    return SimulatedSubject(series=series, true_states=states, true_regimes=regimes, seed=int(seed))


def draw_covariates(seed: int) -> np.ndarray:
    """(male, age)：Bernoulli(0.605) 與標準常態"""
    rng = np.random.default_rng(seed)
    male = float(rng.random() < MALE_PROBABILITY)
    return np.array([male, rng.standard_normal()])


def _subject_seeds(design: StudyDesign) -> List[Tuple[int, List[int]]]:
    seeds = []
    for child in np.random.SeedSequence(design.seed).spawn(design.m):
        cov_seq, *arm_seqs = child.spawn(1 + design.arms)
        seeds.append(
            (int(cov_seq.generate_state(1)[0]), [int(s.generate_state(1)[0]) for s in arm_seqs])
        )
    return seeds


def _simulate_one(item: Tuple[int, ModelSpec, StudyDesign, int, List[int]]) -> List[SimulatedSubject]:
    index, model, design, cov_seed, arm_seeds = item
    x = draw_covariates(cov_seed)
    label = f"s{index + 1:04d}"
    out = []
    for arm, seed in enumerate(arm_seeds):
        subject_id = label if design.arms == 1 else f"{label}-{('pos', 'neg')[arm]}"
        out.append(
            simulate_subject(model, design.n, x, seed, subject_id, design.missing_rate, group_id=label)
        )
    return out


def simulate_study(design: StudyDesign, threads: int = 1) -> SimulatedDataset:
    """
    模擬整個研究資料集

    Raises:
        ConfigurationError: 設計中沒有受試者
    """
    if design.m < 1:
        raise ConfigurationError("study design must contain at least one subject", parameter="m")
    params = design_parameters(design)
    model = TemperatureTemplate(len(COVARIATE_NAMES), design.feedback).build(params)
    seeds = _subject_seeds(design)
    items = [(i, model, design, cov_seed, arm_seeds) for i, (cov_seed, arm_seeds) in enumerate(seeds)]
    nested = parallel_map(_simulate_one, items, threads)
    subjects = [s for group in nested for s in group]
    logger.info(
        "Study simulated",
        setting=design.setting,
        m=design.m,
        n=design.n,
        arms=design.arms,
        seed=design.seed,
    )
    return SimulatedDataset(
        subjects=subjects,
        params=params,
        design=design,
        seeds=[s.seed for s in subjects],
    )


def replicate_designs(design: StudyDesign, replications: int) -> List[StudyDesign]:
    """獨立複本的研究設計，種子由基礎種子衍生"""
    if replications < 1:
        raise ConfigurationError("replications must be at least 1", parameter="replications")
    children = np.random.SeedSequence(design.seed).spawn(replications)
    return [
        design.model_copy(update={"seed": int(c.generate_state(1)[0])}) for c in children
    ]

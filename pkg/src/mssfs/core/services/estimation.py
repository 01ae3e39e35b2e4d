"""
懲罰 EM 估計

交替進行兩件事：對 collapsing 懲罰概似做準牛頓 M-step，以及用平滑結果
更新代入回饋。回饋以 zeta 乘上過去平滑狀態的加權平均進入切換方程；
M-step 期間該平均固定，只最佳化 zeta 本身。

功能：
- 先做無回饋初始化，再進入 EM 迴圈
- 由給定值暖啟動（供 bootstrap 使用）
- L-BFGS-B 搭配平行計算的中央差分梯度
- 對 regime 1 切換係數施加 ridge 懲罰
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize

from src.mssfs.core.exceptions import (
    ConfigurationError,
    FitError,
    ModelDomainError,
    MssfsError,
    NumericalError,
)
from src.mssfs.core.models.model import N_REGIMES, FeedbackSpec, ModelSpec
from src.mssfs.core.models.parameters import ParameterSet, apply_transform
from src.mssfs.core.models.series import Dataset, SubjectSeries
from src.mssfs.core.services.filtering import run_filter
from src.mssfs.core.services.smoothing import SmootherOutput, run_smoother
from src.mssfs.core.services.switching import feedback_path
from src.mssfs.core.services.templates import ModelTemplate
from src.mssfs.core.utils.timing import with_timing
from src.mssfs.infrastructure.parallel import parallel_map

logger = structlog.get_logger()

# 模型無法計算時回報給最佳化器的目標值
INFEASIBLE = 1e25


class OptimizerConfig(BaseModel):
    """M-step 最佳化器設定"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iter: int = Field(default=200, ge=1, description="每次 M-step 的 L-BFGS-B 迭代上限")
    max_evals: int = Field(default=2000, ge=1, description="每次 M-step 的目標函數計算上限")
    gradient_step: float = Field(default=1e-5, gt=0, description="中央差分步長")
    ftol: float = Field(default=1e-10, gt=0, description="目標函數相對容忍度")
    gtol: float = Field(default=1e-6, gt=0, description="投影梯度容忍度")
    bound: float = Field(default=30.0, gt=0, description="非受限尺度上的對稱邊界")
    bounds: Dict[str, Tuple[float, float]] = Field(
        default_factory=dict, description="各參數在非受限尺度上的邊界"
    )


class EmConfig(BaseModel):
    """EM 迴圈設定"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_max: int = Field(default=30, ge=1, description="EM 迭代上限")
    tolerance: float = Field(default=0.001, gt=0, description="d_EM 低於此值即停止")
    kappa: float = Field(default=1e-6, gt=0, description="d_EM 分母的穩定項")
    penalty: float = Field(default=0.01, ge=0, description="受懲罰係數的 ridge 權重")
    free_parameters: Optional[List[str]] = Field(
        default=None, description="要估計的參數；None 表示全部"
    )
    increase_tolerance: float = Field(
        default=1e-4, gt=0, description="視為退步的目標函數相對增幅"
    )
    max_increases: int = Field(
        default=3, ge=1, description="連續退步幾次即中止擬合"
    )
    threads: int = Field(default=1, ge=1, description="梯度與平滑計算的平行數")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


@dataclass
class MStepResult:
    x: np.ndarray
    fun: float
    start_fun: float
    n_evals: int
    message: str


@dataclass
class FitResult:
    """單次 EM 擬合結果"""

    params: ParameterSet
    iterations: int
    converged: bool
    loglik: float
    d_em_trace: List[float] = field(default_factory=list)
    loglik_trace: List[float] = field(default_factory=list)
    objective_increases: List[int] = field(default_factory=list)
    initial_params: Optional[ParameterSet] = None
    smoothed: List[SmootherOutput] = field(default_factory=list)
    z_hat: List[np.ndarray] = field(default_factory=list)
    bases: List[np.ndarray] = field(default_factory=list)

    def trace_rows(self) -> List[Dict[str, Any]]:
        return [
            {"iteration": i + 1, "penalized_loglik": ll, "d_em": d}
            for i, (ll, d) in enumerate(zip(self.loglik_trace, self.d_em_trace))
        ]


# ==================== 代入回饋 ====================


def feedback_basis(smoothed: SmootherOutput, feedback: FeedbackSpec) -> np.ndarray:
    """不含 zeta 的代入回饋：過去平滑狀態均值的加權平均，形狀 (n,)"""
    return feedback_path(feedback, smoothed.smooth_mean)


def plugin_feedback(smoothed: SmootherOutput, model: ModelSpec) -> np.ndarray:
    """在模型 zeta 下各期的代入回饋值 (z0, z1)，形狀 (n, 2)"""
    basis = feedback_basis(smoothed, model.switch.feedback)
    return np.outer(basis, model.switch.zeta)


def _z_from_basis(basis: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    return np.outer(basis, zeta)


# ==================== 目標函數 ====================


def penalized_negloglik(
    params: ParameterSet,
    dataset: Dataset,
    bases: Sequence[np.ndarray],
    template: ModelTemplate,
    penalty: float = 0.01,
    penalized_names: Optional[Sequence[str]] = None,
) -> float:
    """
    -sum_i loglik_i + penalty * ||受懲罰係數||^2（非受限尺度）

    ``bases[i]`` 為受試者 i 固定的代入回饋平均，候選 zeta 下的回饋值為 ``zeta * bases[i]``。
    """
    if len(bases) != len(dataset):
        raise ModelDomainError(f"{len(bases)} feedback bases for {len(dataset)} subjects")
    model = template.build(params)
    zeta = model.switch.zeta
    total = 0.0
    for series, basis in zip(dataset.subjects, bases):
        total += run_filter(series, model, _z_from_basis(basis, zeta)).loglik

    names = template.penalized_names if penalized_names is None else penalized_names
    unconstrained = apply_transform(params, "to_unconstrained")
    ridge = sum(unconstrained[n] ** 2 for n in names if n in unconstrained)
    return -total + penalty * ridge


class PenalizedObjective:
    """以自由參數的非受限向量為自變數的目標函數"""

    def __init__(
        self,
        template: ModelTemplate,
        dataset: Dataset,
        bases: Sequence[np.ndarray],
        base_params: ParameterSet,
        free_names: Sequence[str],
        penalty: float,
        penalized_names: Sequence[str],
    ) -> None:
        self.template = template
        self.dataset = dataset
        self.bases = list(bases)
        self.free_names = list(free_names)
        self.penalty = penalty
        self.penalized_names = list(penalized_names)
        self._base_u = apply_transform(base_params, "to_unconstrained")

    def u_of(self, params: ParameterSet) -> np.ndarray:
        return apply_transform(params, "to_unconstrained").vector(self.free_names)

    def params_at(self, u: np.ndarray) -> ParameterSet:
        return apply_transform(self._base_u.with_values(u, self.free_names), "to_constrained")

    def evaluate(self, u: np.ndarray) -> float:
        """u 處的目標值；計算錯誤直接拋出"""
        return penalized_negloglik(
            self.params_at(u),
            self.dataset,
            self.bases,
            self.template,
            self.penalty,
            self.penalized_names,
        )

    def __call__(self, u: np.ndarray) -> float:
        try:
            value = self.evaluate(np.asarray(u, dtype=float))
        except (NumericalError, ModelDomainError, ConfigurationError):
            return INFEASIBLE
        return value if np.isfinite(value) else INFEASIBLE


def _central_gradient(
    fun: PenalizedObjective, u: np.ndarray, step: float, threads: int
) -> np.ndarray:
    points = []
    for j in range(u.size):
        e = np.zeros_like(u)
        e[j] = step
        points.extend([u + e, u - e])
    values = np.asarray(parallel_map(fun, points, threads), dtype=float)
    return (values[0::2] - values[1::2]) / (2.0 * step)


def optimizer_bounds(names: Sequence[str], config: OptimizerConfig) -> List[Tuple[float, float]]:
    return [config.bounds.get(n, (-config.bound, config.bound)) for n in names]


def m_step(
    objective: PenalizedObjective,
    start: np.ndarray,
    config: Optional[OptimizerConfig] = None,
    threads: int = 1,
) -> MStepResult:
    """
    自 ``start`` 起以有界 L-BFGS-B 最小化目標函數

    Raises:
        FitError: 起點無法計算目標值，或最佳化器回傳非有限點
    """
    config = config or OptimizerConfig()
    start = np.asarray(start, dtype=float)
    start_fun = objective(start)
    if start_fun >= INFEASIBLE:
        try:
            objective.evaluate(start)
        except MssfsError as e:
            raise FitError(f"Objective cannot be evaluated at the start: {e.message}",
                           details=dict(e.details)) from e
        raise FitError("Objective is not finite at the start")

    bounds = optimizer_bounds(objective.free_names, config)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    x0 = np.clip(start, lo, hi)

    evals = {"n": 0}

    def _fun(u: np.ndarray) -> float:
        evals["n"] += 1
        return objective(u)

    def _grad(u: np.ndarray) -> np.ndarray:
        return _central_gradient(objective, u, config.gradient_step, threads)

    res = minimize(
        _fun,
        x0,
        method="L-BFGS-B",
        jac=_grad,
        bounds=bounds,
        options={
            "maxiter": config.max_iter,
            "maxfun": config.max_evals,
            "ftol": config.ftol,
            "gtol": config.gtol,
            "maxcor": 10,
        },
    )
    x = np.asarray(res.x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise FitError("Optimizer returned a non-finite point", details={"message": str(res.message)})

    fun = float(res.fun)
    if fun > start_fun:
        logger.warning("M-step did not improve the objective", message=str(res.message))
        x, fun = start, start_fun
    return MStepResult(x=x, fun=fun, start_fun=start_fun, n_evals=evals["n"], message=str(res.message))


def check_convergence(theta_prev: np.ndarray, theta_curr: np.ndarray, kappa: float = 1e-6) -> float:
    """d_EM = ||curr - prev||^2 / (||prev||^2 + kappa)"""
    prev = np.asarray(theta_prev, dtype=float)
    diff = np.asarray(theta_curr, dtype=float) - prev
    return float(diff @ diff / (prev @ prev + kappa))


# ==================== 平滑輔助 ====================


def _smooth_one(item: Tuple[SubjectSeries, ModelSpec, np.ndarray]) -> SmootherOutput:
    series, model, z = item
    return run_smoother(series, model, z)


def smooth_dataset(
    dataset: Dataset, model: ModelSpec, z_hats: Sequence[np.ndarray], threads: int = 1
) -> List[SmootherOutput]:
    items = [(s, model, z) for s, z in zip(dataset.subjects, z_hats)]
    return parallel_map(_smooth_one, items, threads)


def _bases_of(smoothed: Sequence[SmootherOutput], feedback: FeedbackSpec) -> List[np.ndarray]:
    return [feedback_basis(s, feedback) for s in smoothed]


def _zero_bases(dataset: Dataset) -> List[np.ndarray]:
    return [np.zeros(s.n) for s in dataset.subjects]


def settle_feedback(
    dataset: Dataset, model: ModelSpec, threads: int = 1
) -> Tuple[List[SmootherOutput], List[np.ndarray]]:
    """
    固定參數下的代入回饋

    先做無回饋平滑並算出回饋基底，再以 z = zeta * basis 平滑一次；
    回傳第二次平滑結果與其產生的基底。
    """
    zeros = [np.zeros((s.n, N_REGIMES)) for s in dataset.subjects]
    smoothed = smooth_dataset(dataset, model, zeros, threads)
    bases = _bases_of(smoothed, model.switch.feedback)
    zeta = model.switch.zeta
    smoothed = smooth_dataset(dataset, model, [_z_from_basis(b, zeta) for b in bases], threads)
    return smoothed, _bases_of(smoothed, model.switch.feedback)


# ==================== EM 主流程 ====================


def fit(
    dataset: Dataset,
    template: ModelTemplate,
    config: Optional[EmConfig] = None,
    start: Optional[ParameterSet] = None,
    warm_start: bool = False,
) -> FitResult:
    """
    以懲罰 EM 估計參數

    Args:
        dataset: 要擬合的受試者
        template: 模型參數化
        config: EM 設定
        start: 起始值（受限尺度）；None 時使用模板預設
        warm_start: 略過無回饋初始化，直接由 ``start`` 的平滑結果取得代入回饋

    Raises:
        FitError: 沒有觀測值、最佳化失敗或目標函數持續上升
    """
    config = config or EmConfig()
    if len(dataset) == 0 or dataset.n_observed() == 0:
        raise FitError("Degenerate likelihood: the dataset has no observed values")

    start = start if start is not None else template.start_values(dataset)
    start = template.parameter_set(apply_transform(start, "to_constrained").as_dict())
    free = list(config.free_parameters or template.parameter_names)
    unknown = [n for n in free if n not in template.parameter_names]
    if unknown:
        raise ConfigurationError(f"unknown free parameters {unknown}", parameter=unknown[0])
    penalized = [n for n in template.penalized_names if n in free]
    feedback_names = [n for n in template.feedback_names if n is not None]
    threads = config.threads

    if warm_start:
        params = start
        initial = start
        smoothed, bases = settle_feedback(dataset, template.build(params), threads)
    else:
        no_feedback = template.without_feedback(start)
        free0 = [n for n in free if n not in feedback_names]
        objective0 = PenalizedObjective(
            template, dataset, _zero_bases(dataset), no_feedback, free0, config.penalty, penalized
        )
        if free0:
            step0 = m_step(objective0, objective0.u_of(no_feedback), config.optimizer, threads)
            initial = objective0.params_at(step0.x)
        else:
            initial = no_feedback
        logger.info("No-feedback initialization completed", params=initial.as_dict())
        model0 = template.build(initial)
        smoothed = smooth_dataset(
            dataset, model0, [np.zeros((s.n, N_REGIMES)) for s in dataset.subjects], threads
        )
        bases = _bases_of(smoothed, template.feedback)
        params = initial.with_values({n: start[n] for n in feedback_names if n in start})

    result = FitResult(
        params=params, iterations=0, converged=False, loglik=float("nan"), initial_params=initial
    )
    previous_fun: Optional[float] = None
    consecutive = 0

    for iteration in range(1, config.n_max + 1):
        objective = PenalizedObjective(
            template, dataset, bases, params, free, config.penalty, penalized
        )
        u_prev = objective.u_of(params)
        try:
            step = m_step(objective, u_prev, config.optimizer, threads)
        except FitError as e:
            raise e.with_context(iteration=iteration)
        params_new = objective.params_at(step.x)
        d_em = check_convergence(u_prev, step.x, config.kappa)

        result.loglik_trace.append(-step.fun)
        result.d_em_trace.append(d_em)
        if previous_fun is not None and step.fun > previous_fun + config.increase_tolerance * max(
            1.0, abs(previous_fun)
        ):
            consecutive += 1
            result.objective_increases.append(iteration)
            logger.warning("EM objective increased", iteration=iteration, objective=step.fun)
            if consecutive >= config.max_increases:
                raise FitError(
                    "EM objective increased in consecutive iterations",
                    details={"iteration": iteration, "increases": result.objective_increases},
                )
        else:
            consecutive = 0
        previous_fun = step.fun

        model = template.build(params_new)
        zeta = model.switch.zeta
        try:
            smoothed = smooth_dataset(
                dataset, model, [_z_from_basis(b, zeta) for b in bases], threads
            )
        except MssfsError as e:
            raise e.with_context(iteration=iteration)
        bases = _bases_of(smoothed, template.feedback)
        params = params_new
        result.iterations = iteration

        logger.info(
            "EM iteration completed",
            iteration=iteration,
            penalized_loglik=-step.fun,
            d_em=d_em,
            evaluations=step.n_evals,
        )
        if d_em <= config.tolerance:
            result.converged = True
            break

    model = template.build(params)
    zeta = model.switch.zeta
    result.params = params
    result.smoothed = smoothed
    result.bases = bases
    result.z_hat = [_z_from_basis(b, zeta) for b in bases]
    result.loglik = float(sum(s.filtered.loglik for s in smoothed if s.filtered is not None))
    if not result.converged:
        logger.warning("EM reached the iteration limit", n_max=config.n_max)
    return result


class EmEstimator:
    """
    EM 估計服務

    針對單一模板與設定包裝 ``fit``，讓 CLI、bootstrap 與模擬研究共用同一組設定。
    """

    def __init__(self, template: ModelTemplate, config: Optional[EmConfig] = None) -> None:
        """
        Args:
            template: 模型參數化
            config: EM 設定，None 時使用預設
        """
        self.template = template
        self.config = config or EmConfig()
        logger.info(
            "EmEstimator initialized",
            template=template.name,
            config={"n_max": self.config.n_max, "tolerance": self.config.tolerance,
                    "penalty": self.config.penalty, "threads": self.config.threads},
        )

    @with_timing
    def fit(
        self, dataset: Dataset, start: Optional[ParameterSet] = None, warm_start: bool = False
    ) -> FitResult:
        return fit(dataset, self.template, self.config, start, warm_start)

    def with_config(self, **updates: Any) -> "EmEstimator":
        return EmEstimator(self.template, self.config.model_copy(update=updates))

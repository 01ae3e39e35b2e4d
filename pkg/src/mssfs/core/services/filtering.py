"""
多程序 Kalman 濾波（collapsing）

對單一受試者序列的前向遞迴。每期傳遞（前一 regime, 目前 regime）四個
高斯分支，於對數空間計算權重，再合併回每個 regime 一個高斯與一個邊際高斯。

功能：
- 整列缺值：略過更新，機率只以轉移核傳遞
- 部分缺值：只使用觀測到的 F、V 列
- 創新協方差奇異時先加 jitter 重試一次，仍失敗才拋出 NumericalError
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.special import logsumexp

from src.mssfs.core.exceptions import ModelDomainError, MssfsError, NumericalError
from src.mssfs.core.models.model import N_REGIMES, ModelSpec
from src.mssfs.core.models.series import Dataset, SubjectSeries
from src.mssfs.core.services.switching import transition_matrix
from src.mssfs.core.utils.linalg import (
    LOG_2PI,
    chol_solve,
    factor_psd,
    gaussian_logpdf,
    symmetrize,
)
from src.mssfs.infrastructure.parallel import parallel_map

logger = structlog.get_logger()

PROB_FLOOR = 1e-300
WEIGHT_TOL = 1e-8


class ObservationSubset(NamedTuple):
    """y_t 中觀測到的分量及對應的 F、V 列"""

    index: np.ndarray
    y: np.ndarray
    F: np.ndarray
    V: np.ndarray


@dataclass(frozen=True)
class FilterStep:
    """單一時間點的濾波結果（t = 0 存放初始條件）"""

    t: int
    joint_prob: np.ndarray  # (2, 2): Pr(I_{t-1}=o, I_t=p | psi_t)
    regime_prob: np.ndarray  # (2,)
    regime_mean: np.ndarray  # (2, q)
    regime_cov: np.ndarray  # (2, q, q)
    marg_mean: np.ndarray  # (q,)
    marg_cov: np.ndarray  # (q, q)
    loglik_inc: float
    fully_missing: bool = False
    innovation: Optional[np.ndarray] = None  # (2, 2, k)
    innovation_cov: Optional[np.ndarray] = None  # (2, 2, k, k)


@dataclass
class FilterOutput:
    """單一受試者的所有濾波步驟與總對數概似"""

    subject_id: str
    initial: FilterStep
    steps: List[FilterStep] = field(default_factory=list)
    loglik: float = 0.0

    @property
    def n(self) -> int:
        return len(self.steps)

    def _stack(self, name: str, shape: Tuple[int, ...]) -> np.ndarray:
        if not self.steps:
            return np.zeros((0, *shape))
        return np.stack([getattr(s, name) for s in self.steps])

    @property
    def regime_prob(self) -> np.ndarray:
        return self._stack("regime_prob", (N_REGIMES,))

    @property
    def regime_mean(self) -> np.ndarray:
        return self._stack("regime_mean", self.initial.regime_mean.shape)

    @property
    def regime_cov(self) -> np.ndarray:
        return self._stack("regime_cov", self.initial.regime_cov.shape)

    @property
    def marg_mean(self) -> np.ndarray:
        return self._stack("marg_mean", self.initial.marg_mean.shape)

    @property
    def marg_cov(self) -> np.ndarray:
        return self._stack("marg_cov", self.initial.marg_cov.shape)

    @property
    def joint_prob(self) -> np.ndarray:
        return self._stack("joint_prob", (N_REGIMES, N_REGIMES))

    @property
    def loglik_inc(self) -> np.ndarray:
        return np.array([s.loglik_inc for s in self.steps])

    def step(self, t: int) -> FilterStep:
        """時間 t 的步驟；t = 0 回傳初始條件"""
        return self.initial if t == 0 else self.steps[t - 1]


def subset_observation(y: np.ndarray, F: np.ndarray, V: np.ndarray) -> Optional[ObservationSubset]:
    """
    選出 y_t 中觀測到的分量

    全部缺值時回傳 None；否則以觀測列的選取矩陣 S 回傳 y*、F* = S F 與 V* = S V S'。
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    index = np.flatnonzero(~np.isnan(y))
    if index.size == 0:
        return None
    if index.size == y.size:
        return ObservationSubset(index, y, F, V)
    return ObservationSubset(index, y[index], F[index], V[np.ix_(index, index)])


def collapse_mixture(
    weights: np.ndarray, means: np.ndarray, covs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    以單一高斯對高斯混合做動差匹配

    Args:
        weights: (k,) 非負且總和為 1
        means: (k, q)
        covs: (k, q, q)

    Returns:
        (mean, cov)，其中 cov = sum_k w_k (P_k + (m_k - mean)(m_k - mean)')
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0.0):
        raise ModelDomainError("negative mixture weight", details={"weights": weights.tolist()})
    if abs(weights.sum() - 1.0) > WEIGHT_TOL:
        raise ModelDomainError(
            "mixture weights do not sum to one", details={"sum": float(weights.sum())}
        )
    mean = weights @ means
    spread = means - mean
    cov = np.einsum("k,kij->ij", weights, covs) + np.einsum("k,ki,kj->ij", weights, spread, spread)
    return mean, symmetrize(cov)


def initial_step(model: ModelSpec) -> FilterStep:
    """由模型初始條件建立 t = 0 的濾波狀態"""
    init = model.init
    probs = init.probs
    marg_mean, marg_cov = collapse_mixture(probs, init.mean, init.cov)
    return FilterStep(
        t=0,
        joint_prob=np.diag(probs),
        regime_prob=probs,
        regime_mean=np.array(init.mean),
        regime_cov=np.array(init.cov),
        marg_mean=marg_mean,
        marg_cov=marg_cov,
        loglik_inc=0.0,
        fully_missing=True,
    )


def _update_scalar(
    subset: ObservationSubset, pred_mean: np.ndarray, pred_cov: np.ndarray, t: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """只觀測到一個分量時，一次更新四個分支"""
    f = subset.F[0]
    pf = pred_cov @ f  # (2, 2, q)
    h = pf @ f + subset.V[0, 0]  # (2, 2)
    eta = subset.y[0] - pred_mean @ f  # (2, 2)
    bad = ~(np.isfinite(h) & (h > 0.0))
    if np.any(bad):
        o, p = (int(i) for i in np.argwhere(bad)[0])
        raise NumericalError("Singular innovation variance", t=t, branch=(o, p))
    post_mean = pred_mean + pf * (eta / h)[..., None]
    post_cov = pred_cov - pf[..., :, None] * pf[..., None, :] / h[..., None, None]
    log_dens = -0.5 * (LOG_2PI + np.log(h) + eta**2 / h)
    return post_mean, post_cov, log_dens, eta[..., None], h[..., None, None]


def _update_general(
    subset: ObservationSubset, pred_mean: np.ndarray, pred_cov: np.ndarray, t: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    k = subset.index.size
    post_mean = np.empty_like(pred_mean)
    post_cov = np.empty_like(pred_cov)
    log_dens = np.empty((N_REGIMES, N_REGIMES))
    etas = np.empty((N_REGIMES, N_REGIMES, k))
    hs = np.empty((N_REGIMES, N_REGIMES, k, k))
    for o in range(N_REGIMES):
        for p in range(N_REGIMES):
            m, P = pred_mean[o, p], pred_cov[o, p]
            eta = subset.y - subset.F @ m
            pft = P @ subset.F.T
            h = symmetrize(subset.F @ pft + subset.V)
            factor = factor_psd(h, t=t, branch=(o, p))
            post_mean[o, p] = m + pft @ chol_solve(factor, eta)
            post_cov[o, p] = P - pft @ chol_solve(factor, pft.T)
            log_dens[o, p] = gaussian_logpdf(eta, factor)
            etas[o, p], hs[o, p] = eta, h
    return post_mean, post_cov, log_dens, etas, hs


def filter_step(
    prev: FilterStep,
    model: ModelSpec,
    t: int,
    x_t: np.ndarray,
    z_t: Sequence[float],
    y_t: np.ndarray,
) -> FilterStep:
    """
    collapsing 濾波的單步前向遞迴

    Args:
        prev: t - 1 的濾波狀態
        model: 已代入參數的模型
        t: 時間索引，自 1 起算
        x_t: t 期共變數
        z_t: t 期的代入回饋值 (z0, z1)
        y_t: 觀測值，缺值為 NaN
    """
    z = np.asarray(z_t, dtype=float)
    kernel = transition_matrix(model.switch, x_t, z)
    joint_prior = prev.regime_prob[:, None] * kernel

    G, gamma, W = model.G_at(t), model.gamma_at(t), model.W_at(t)
    pred_mean = gamma[None, :, :] + np.einsum("pij,oj->opi", G, prev.regime_mean)
    pred_cov = np.einsum("pij,ojk,plk->opil", G, prev.regime_cov, G) + W[None]

    subset = subset_observation(y_t, model.F_at(t), model.V_at(t))
    innovation = innovation_cov = None
    if subset is None:
        post_mean, post_cov = pred_mean, symmetrize(pred_cov)
        joint = joint_prior
        loglik_inc = 0.0
    else:
        update = _update_scalar if subset.index.size == 1 else _update_general
        post_mean, post_cov, log_dens, innovation, innovation_cov = update(
            subset, pred_mean, pred_cov, t
        )
        post_cov = symmetrize(post_cov)
        log_num = log_dens + np.log(np.maximum(joint_prior, PROB_FLOOR))
        loglik_inc = float(logsumexp(log_num))
        if not np.isfinite(loglik_inc):
            raise NumericalError("Non-finite likelihood increment", t=t)
        joint = np.exp(log_num - loglik_inc)

    regime_prob = np.maximum(joint.sum(axis=0), PROB_FLOOR)
    regime_prob = regime_prob / regime_prob.sum()

    q = model.q
    regime_mean = np.empty((N_REGIMES, q))
    regime_cov = np.empty((N_REGIMES, q, q))
    for p in range(N_REGIMES):
        column = joint[:, p]
        if column.sum() <= PROB_FLOOR:
            # regime 不可到達：改用先驗分支權重
            column = joint_prior[:, p]
            if column.sum() <= PROB_FLOOR:
                column = np.ones(N_REGIMES)
        regime_mean[p], regime_cov[p] = collapse_mixture(
            column / column.sum(), post_mean[:, p], post_cov[:, p]
        )
    marg_mean, marg_cov = collapse_mixture(regime_prob, regime_mean, regime_cov)

    return FilterStep(
        t=t,
        joint_prob=joint,
        regime_prob=regime_prob,
        regime_mean=regime_mean,
        regime_cov=regime_cov,
        marg_mean=marg_mean,
        marg_cov=marg_cov,
        loglik_inc=loglik_inc,
        fully_missing=subset is None,
        innovation=innovation,
        innovation_cov=innovation_cov,
    )


def _check_z(z_hat: Optional[np.ndarray], n: int) -> np.ndarray:
    if z_hat is None:
        return np.zeros((n, N_REGIMES))
    z = np.asarray(z_hat, dtype=float)
    if z.shape != (n, N_REGIMES):
        raise ModelDomainError(f"feedback values must have shape ({n}, 2), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ModelDomainError("non-finite feedback values")
    return z


def run_filter(
    series: SubjectSeries, model: ModelSpec, z_hat: Optional[np.ndarray] = None
) -> FilterOutput:
    """
    對整條序列濾波

    Args:
        series: 單一受試者
        model: 模型設定
        z_hat: (n, 2) 代入回饋值；None 表示無回饋

    Returns:
        每期一步的 FilterOutput，loglik 為各期增量之和
    """
    if series.p != model.p:
        raise ModelDomainError(f"series has {series.p} responses, model expects {model.p}")
    if series.n and series.d != model.d:
        raise ModelDomainError(f"series has {series.d} covariates, model expects {model.d}")
    model.check_horizon(series.n)
    z = _check_z(z_hat, series.n)

    prev = initial_step(model)
    output = FilterOutput(subject_id=series.subject_id, initial=prev)
    try:
        for t in range(1, series.n + 1):
            prev = filter_step(prev, model, t, series.covariates[t - 1], z[t - 1], series.y[t - 1])
            output.steps.append(prev)
    except MssfsError as e:
        raise e.with_context(subject_id=series.subject_id)
    output.loglik = float(sum(s.loglik_inc for s in output.steps))
    return output


def _filter_one(item: Tuple[SubjectSeries, ModelSpec, Optional[np.ndarray]]) -> FilterOutput:
    series, model, z = item
    return run_filter(series, model, z)


def filter_dataset(
    dataset: Dataset,
    model: ModelSpec,
    z_hats: Optional[Sequence[Optional[np.ndarray]]] = None,
    threads: int = 1,
) -> List[FilterOutput]:
    """各受試者獨立濾波，輸出依受試者順序"""
    z_list = list(z_hats) if z_hats is not None else [None] * len(dataset)
    items = [(s, model, z) for s, z in zip(dataset.subjects, z_list)]
    return parallel_map(_filter_one, items, threads)


def total_loglik(outputs: Sequence[FilterOutput]) -> float:
    """依受試者順序加總對數概似"""
    return float(sum(o.loglik for o in outputs))

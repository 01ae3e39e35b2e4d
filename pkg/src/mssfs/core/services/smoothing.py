"""
切換模型的固定區間平滑器

在 collapsing 濾波輸出上做後向遞迴：由混合分布的一步預測動差取得相鄰
狀態的交叉協方差，再以 Rauch-Tung-Striebel 形式修正邊際均值與協方差。
regime 機率另由濾波機率與轉移核做後向平滑。
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import structlog

from src.mssfs.core.exceptions import ModelDomainError, MssfsError
from src.mssfs.core.models.model import N_REGIMES, ModelSpec
from src.mssfs.core.models.series import SubjectSeries
from src.mssfs.core.services.filtering import (
    PROB_FLOOR,
    FilterOutput,
    FilterStep,
    run_filter,
)
from src.mssfs.core.services.switching import feedback_value, transition_matrix
from src.mssfs.core.utils.linalg import chol_solve, factor_psd, symmetrize

logger = structlog.get_logger()


class PredictiveMoments(NamedTuple):
    """theta_{t+1|t}、Sigma_{t,t+1} = Cov(theta_t, theta_{t+1} | psi_t) 與 P_{t+1|t}"""

    mean: np.ndarray
    cross_cov: np.ndarray
    cov: np.ndarray


@dataclass
class SmootherOutput:
    """
    單一受試者的平滑結果

    ``pred_*`` 與 ``cross_cov`` 的第 t - 1 列描述進入時間 t 的那一步
    （theta_{t|t-1}、Pr(I_t | psi_{t-1})、Sigma_{t-1,t}、P_{t|t-1}）。
    ``pairwise_prob[t - 1]`` 為 Pr(I_t = p, I_{t+1} = q | psi_n)，t = 1..n-1。
    """

    subject_id: str
    smooth_mean: np.ndarray
    smooth_cov: np.ndarray
    smooth_prob: np.ndarray
    pairwise_prob: np.ndarray
    pred_mean: np.ndarray
    pred_prob: np.ndarray
    cross_cov: np.ndarray
    pred_cov: np.ndarray
    flagged_times: List[int] = field(default_factory=list)
    filtered: Optional[FilterOutput] = None

    @property
    def n(self) -> int:
        return int(self.smooth_mean.shape[0])


def transition_kernels(model: ModelSpec, series: SubjectSeries, z_hat: Optional[np.ndarray]) -> np.ndarray:
    """(n, 2, 2) 轉移核；第 t - 1 個對應由 t - 1 到 t 的轉移"""
    z = np.zeros((series.n, N_REGIMES)) if z_hat is None else np.asarray(z_hat, dtype=float)
    kernels = np.empty((series.n, N_REGIMES, N_REGIMES))
    for t in range(1, series.n + 1):
        kernels[t - 1] = transition_matrix(model.switch, series.covariates[t - 1], z[t - 1])
    return kernels


def predictive_moments(
    step: FilterStep, model: ModelSpec, t_next: int, trans_joint: np.ndarray
) -> PredictiveMoments:
    """
    collapsing 混合分布的一步預測動差

    Args:
        step: 時間 t 的濾波狀態
        model: 模型設定
        t_next: t + 1，用於選取 G、gamma 與 W
        trans_joint: (2, 2) Pr(I_t = p, I_{t+1} = q | psi_t)
    """
    w = np.asarray(trans_joint, dtype=float)
    G, gamma, W = model.G_at(t_next), model.gamma_at(t_next), model.W_at(t_next)
    m, P = step.regime_mean, step.regime_cov

    a = gamma[None, :, :] + np.einsum("qij,pj->pqi", G, m)  # (2, 2, q)
    mean = np.einsum("pq,pqi->i", w, a)
    cross = (
        np.einsum("pq,pi,pqj->ij", w, m, a)
        + np.einsum("pq,pik,qjk->ij", w, P, G)
        - np.outer(step.marg_mean, mean)
    )
    cov = (
        np.einsum("pq,qij,pjk,qlk->il", w, G, P, G)
        + np.einsum("pq,qij->ij", w, W)
        + np.einsum("pq,pqi,pqj->ij", w, a, a)
        - np.outer(mean, mean)
    )
    return PredictiveMoments(mean, cross, symmetrize(cov))


def _all_predictive(
    filtered: FilterOutput, model: ModelSpec, kernels: np.ndarray
) -> List[PredictiveMoments]:
    moments = []
    for t in range(1, filtered.n + 1):
        prev = filtered.step(t - 1)
        moments.append(predictive_moments(prev, model, t, prev.regime_prob[:, None] * kernels[t - 1]))
    return moments


def smooth_pass(
    filtered: FilterOutput, model: ModelSpec, kernels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, List[PredictiveMoments]]:
    """
    狀態動差的後向遞迴

    Returns:
        (平滑均值 (n, q)、平滑協方差 (n, q, q)、各期預測動差)
    """
    n = filtered.n
    moments = _all_predictive(filtered, model, kernels)
    if n == 0:
        q = model.q
        return np.zeros((0, q)), np.zeros((0, q, q)), moments

    mean = filtered.marg_mean.copy()
    cov = filtered.marg_cov.copy()
    for t in range(n - 1, 0, -1):
        step = filtered.step(t)
        ahead = moments[t]  # 進入 t + 1 的一步
        if not np.any(ahead.cross_cov):
            continue
        factor = factor_psd(ahead.cov, t=t + 1, what="predicted state covariance")
        gain = chol_solve(factor, ahead.cross_cov.T).T
        mean[t - 1] = step.marg_mean + gain @ (mean[t] - ahead.mean)
        cov[t - 1] = symmetrize(
            step.marg_cov - gain @ ahead.cross_cov.T + gain @ cov[t] @ gain.T
        )
    return mean, cov, moments


def smooth_probabilities(
    filtered: FilterOutput, kernels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """
    regime 機率的後向遞迴

    Returns:
        (平滑機率 (n, 2)、成對機率 (n - 1, 2, 2)、
        預測機率質量為 0 而退回濾波機率的時間點)
    """
    n = filtered.n
    filt = filtered.regime_prob
    smooth = filt.copy()
    pairwise = np.zeros((max(n - 1, 0), N_REGIMES, N_REGIMES))
    flagged: List[int] = []
    for t in range(n - 1, 0, -1):
        joint = filt[t - 1][:, None] * kernels[t]
        denom = joint.sum(axis=0)
        pair = np.empty((N_REGIMES, N_REGIMES))
        for q in range(N_REGIMES):
            if denom[q] > PROB_FLOOR:
                pair[:, q] = smooth[t, q] * joint[:, q] / denom[q]
            else:
                pair[:, q] = smooth[t, q] * filt[t - 1]
                flagged.append(t)
        pairwise[t - 1] = pair
        smooth[t - 1] = pair.sum(axis=1)
    return smooth, pairwise, sorted(set(flagged))


def run_smoother(
    series: SubjectSeries,
    model: ModelSpec,
    z_hat: Optional[np.ndarray] = None,
    filtered: Optional[FilterOutput] = None,
) -> SmootherOutput:
    """對單一受試者濾波（若未提供濾波輸出）並平滑"""
    if filtered is None:
        filtered = run_filter(series, model, z_hat)
    try:
        kernels = transition_kernels(model, series, z_hat)
        mean, cov, moments = smooth_pass(filtered, model, kernels)
        prob, pairwise, flagged = smooth_probabilities(filtered, kernels)
    except MssfsError as e:
        raise e.with_context(subject_id=series.subject_id)
    if flagged:
        logger.warning(
            "Zero predictive regime mass in smoother", subject_id=series.subject_id, times=flagged
        )

    q = model.q
    pred_prob = np.stack(
        [filtered.step(t - 1).regime_prob @ kernels[t - 1] for t in range(1, series.n + 1)]
    ) if series.n else np.zeros((0, N_REGIMES))
    return SmootherOutput(
        subject_id=series.subject_id,
        smooth_mean=mean,
        smooth_cov=cov,
        smooth_prob=prob,
        pairwise_prob=pairwise,
        pred_mean=np.array([m.mean for m in moments]).reshape(-1, q),
        pred_prob=pred_prob,
        cross_cov=np.array([m.cross_cov for m in moments]).reshape(-1, q, q),
        pred_cov=np.array([m.cov for m in moments]).reshape(-1, q, q),
        flagged_times=flagged,
        filtered=filtered,
    )


def one_step_predict(
    filtered: FilterOutput,
    model: ModelSpec,
    series: SubjectSeries,
    z_hat: Optional[np.ndarray],
    t: int,
) -> Tuple[np.ndarray, float]:
    """
    由時間 t 的濾波狀態預測 theta_{t+1} 與 Pr(I_{t+1} = 1)

    t = n 時為樣本外預測：沿用最後一列共變數，回饋值由濾波均值即時計算。
    """
    n = filtered.n
    if n == 0:
        raise ModelDomainError("cannot predict from an empty series")
    if not 0 <= t <= n:
        raise ModelDomainError(f"prediction origin {t} is outside 0..{n}")
    if t < n:
        z = np.zeros(N_REGIMES) if z_hat is None else np.asarray(z_hat, dtype=float)[t]
        x = series.covariates[t]
    else:
        history = filtered.marg_mean
        zeta = model.switch.zeta
        z = np.array(
            [feedback_value(model.switch.feedback, zeta[k], history, n + 1) for k in range(N_REGIMES)]
        )
        x = series.x_at(n)
    step = filtered.step(t)
    kernel = transition_matrix(model.switch, x, z)
    trans_joint = step.regime_prob[:, None] * kernel
    moments = predictive_moments(step, model, t + 1, trans_joint)
    return moments.mean, float(trans_joint[:, 1].sum())

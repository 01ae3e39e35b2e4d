"""
驗證 collapsing 濾波與平滑器用的參考計算

- exact_filter：列舉短序列的所有 regime 路徑，每條路徑各跑一次條件 Kalman 濾波
  （成本為指數級，n <= 16）
- standard_kalman_reference：固定單一 regime 的標準 Kalman 濾波加 RTS 平滑，
  不共用濾波模組的輔助函式
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import structlog
from scipy.special import logsumexp

from src.mssfs.core.exceptions import CapacityError, NumericalError
from src.mssfs.core.models.model import N_REGIMES, ModelSpec
from src.mssfs.core.models.series import SubjectSeries
from src.mssfs.core.services.switching import transition_matrix

logger = structlog.get_logger()

MAX_EXACT_LENGTH = 16


@dataclass
class ExactPosterior:
    """單一序列的精確 regime 後驗"""

    filtered_prob: np.ndarray  # (n, 2) Pr(I_t | y_1..t)
    filtered_mean: np.ndarray  # (n, q) E(theta_t | y_1..t)
    loglik_inc: np.ndarray  # (n,)
    loglik: float
    path_probs: Dict[Tuple[int, ...], float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.filtered_prob.shape[0])


@dataclass
class KalmanReference:
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    smoothed_mean: np.ndarray
    smoothed_cov: np.ndarray
    loglik: float


def _condition(
    means: np.ndarray, covs: np.ndarray, y: np.ndarray, F: np.ndarray, V: np.ndarray, t: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """批次 Kalman 更新，回傳後驗均值、協方差與對數密度"""
    obs = ~np.isnan(y)
    if not obs.any():
        return means, covs, np.zeros(means.shape[0])
    Fo, yo, Vo = F[obs], y[obs], V[np.ix_(obs, obs)]
    k = yo.size
    resid = yo[None, :] - means @ Fo.T  # (B, k)
    S = Fo[None] @ covs @ Fo.T[None] + Vo[None]  # (B, k, k)
    sign, logdet = np.linalg.slogdet(S)
    if np.any(sign <= 0):
        raise NumericalError("Singular innovation covariance", t=t)
    S_inv = np.linalg.inv(S)
    gain = covs @ Fo.T[None] @ S_inv  # (B, q, k)
    new_means = means + np.einsum("bqk,bk->bq", gain, resid)
    new_covs = covs - gain @ Fo[None] @ covs
    new_covs = 0.5 * (new_covs + np.swapaxes(new_covs, 1, 2))
    quad = np.einsum("bi,bij,bj->b", resid, S_inv, resid)
    return new_means, new_covs, -0.5 * (k * np.log(2.0 * np.pi) + logdet + quad)


def exact_filter(
    series: SubjectSeries, model: ModelSpec, z_hat: Optional[np.ndarray] = None
) -> ExactPosterior:
    """
    列舉所有 regime 路徑的精確濾波

    Raises:
        CapacityError: 序列長度超過 MAX_EXACT_LENGTH
        NumericalError: 某條路徑上的創新協方差奇異
    """
    n = series.n
    if n > MAX_EXACT_LENGTH:
        raise CapacityError(n, MAX_EXACT_LENGTH)
    model.check_horizon(n)
    z = np.zeros((n, N_REGIMES)) if z_hat is None else np.asarray(z_hat, dtype=float)

    init = model.init
    start = [k for k in range(N_REGIMES) if init.probs[k] > 0.0]
    means = np.array([init.mean[k] for k in start])
    covs = np.array([init.cov[k] for k in start])
    logw = np.log(np.array([init.probs[k] for k in start]))
    last = np.array(start, dtype=int)
    code = np.zeros(len(start), dtype=np.int64)

    filtered_prob = np.zeros((n, N_REGIMES))
    filtered_mean = np.zeros((n, model.q))
    loglik_inc = np.zeros(n)
    previous_total = 0.0

    with np.errstate(divide="ignore"):
        for t in range(1, n + 1):
            kernel = transition_matrix(model.switch, series.covariates[t - 1], z[t - 1])
            G, gamma, W = model.G_at(t), model.gamma_at(t), model.W_at(t)
            parts = []
            for p in range(N_REGIMES):
                parts.append(
                    (
                        gamma[p][None, :] + means @ G[p].T,
                        G[p][None] @ covs @ G[p].T[None] + W[p][None],
                        logw + np.log(kernel[last, p]),
                        np.full(last.shape, p),
                        code * 2 + p,
                    )
                )
            means = np.concatenate([pt[0] for pt in parts])
            covs = np.concatenate([pt[1] for pt in parts])
            logw = np.concatenate([pt[2] for pt in parts])
            last = np.concatenate([pt[3] for pt in parts])
            code = np.concatenate([pt[4] for pt in parts])

            keep = np.isfinite(logw)
            means, covs, logw, last, code = means[keep], covs[keep], logw[keep], last[keep], code[keep]

            means, covs, log_dens = _condition(
                means, covs, series.y[t - 1], model.F_at(t), model.V_at(t), t
            )
            logw = logw + log_dens

            total = float(logsumexp(logw))
            weights = np.exp(logw - total)
            for p in range(N_REGIMES):
                filtered_prob[t - 1, p] = weights[last == p].sum()
            filtered_mean[t - 1] = weights @ means
            loglik_inc[t - 1] = total - previous_total
            previous_total = total

    path_probs: Dict[Tuple[int, ...], float] = {}
    if n:
        weights = np.exp(logw - logsumexp(logw))
        for c, w in zip(code.tolist(), weights.tolist()):
            path = tuple((c >> (n - 1 - i)) & 1 for i in range(n))
            path_probs[path] = path_probs.get(path, 0.0) + w

    return ExactPosterior(
        filtered_prob=filtered_prob,
        filtered_mean=filtered_mean,
        loglik_inc=loglik_inc,
        loglik=float(previous_total),
        path_probs=path_probs,
    )


def exact_smoother_probs(posterior: ExactPosterior) -> np.ndarray:
    """加總精確路徑後驗得到 Pr(I_t = p | y_1..n)"""
    probs = np.zeros((posterior.n, N_REGIMES))
    for path, w in posterior.path_probs.items():
        for t, regime in enumerate(path):
            probs[t, regime] += w
    return probs


def standard_kalman_reference(
    series: SubjectSeries, model: ModelSpec, regime: int = 0
) -> KalmanReference:
    """
    固定 regime 的 Kalman 濾波與 RTS 平滑

    適用於時間不變模型；初始狀態取 ``regime`` 的初始條件。

    Raises:
        NumericalError: 創新協方差或預測協方差奇異
    """
    n, q = series.n, model.q
    F, V = model.F_at(1), model.V_at(1)
    G, gamma, W = model.G_at(1)[regime], model.gamma_at(1)[regime], model.W_at(1)[regime]

    x = np.array(model.init.mean[regime], dtype=float)
    P = np.array(model.init.cov[regime], dtype=float)
    xs, Ps, x_pred, P_pred = (np.zeros((n, q)), np.zeros((n, q, q)),
                              np.zeros((n, q)), np.zeros((n, q, q)))
    loglik = 0.0
    for t in range(n):
        x = gamma + G @ x
        P = G @ P @ G.T + W
        x_pred[t], P_pred[t] = x, P
        y = series.y[t]
        obs = ~np.isnan(y)
        if obs.any():
            H, R = F[obs], V[np.ix_(obs, obs)]
            r = y[obs] - H @ x
            S = H @ P @ H.T + R
            sign, logdet = np.linalg.slogdet(S)
            if sign <= 0:
                raise NumericalError("Singular innovation covariance", t=t + 1)
            S_inv = np.linalg.inv(S)
            K = P @ H.T @ S_inv
            x = x + K @ r
            I_KH = np.eye(q) - K @ H
            P = I_KH @ P @ I_KH.T + K @ R @ K.T
            loglik += -0.5 * (r.size * np.log(2 * np.pi) + logdet + r @ S_inv @ r)
        xs[t], Ps[t] = x, P

    sm, sP = xs.copy(), Ps.copy()
    for t in range(n - 2, -1, -1):
        if np.linalg.slogdet(P_pred[t + 1])[0] <= 0:
            raise NumericalError("Singular predicted covariance", t=t + 2)
        C = Ps[t] @ G.T @ np.linalg.inv(P_pred[t + 1])
        sm[t] = xs[t] + C @ (sm[t + 1] - x_pred[t + 1])
        sP[t] = Ps[t] + C @ (sP[t + 1] - P_pred[t + 1]) @ C.T

    return KalmanReference(
        filtered_mean=xs, filtered_cov=Ps, smoothed_mean=sm, smoothed_cov=sP, loglik=float(loglik)
    )

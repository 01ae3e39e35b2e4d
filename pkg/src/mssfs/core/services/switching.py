"""
切換方程與回饋

兩個 regime 之間的 logistic 轉移機率，以及過去狀態經指數加權後
進入切換方程的回饋項。
"""

from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.special import expit

from src.mssfs.core.exceptions import ModelDomainError
from src.mssfs.core.models.model import FeedbackSpec, SwitchSpec


class TransitionProbabilities(NamedTuple):
    """列和為 1 的 2x2 轉移核；pi_ab = Pr(I_t = b | I_{t-1} = a)"""

    pi_00: float
    pi_01: float
    pi_10: float
    pi_11: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.pi_00, self.pi_01], [self.pi_10, self.pi_11]])


def transition_probabilities(
    switch: SwitchSpec, x: Union[Sequence[float], np.ndarray], z0: float, z1: float
) -> TransitionProbabilities:
    """
    在共變數 ``x`` 與回饋值 ``z0``、``z1`` 下計算切換方程

    Raises:
        ModelDomainError: 輸入非有限值或共變數長度不符
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (switch.d,):
        raise ModelDomainError(f"expected {switch.d} covariates, got {x.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.isfinite(z0) and np.isfinite(z1)):
        raise ModelDomainError("non-finite input to the switch equations")

    eta0 = switch.alpha[0] + float(x @ switch.beta[0]) + z0
    eta1 = switch.alpha[1] + float(x @ switch.beta[1]) + z1
    pi_01 = float(expit(eta0))
    pi_11 = float(expit(eta1))
    return TransitionProbabilities(1.0 - pi_01, pi_01, 1.0 - pi_11, pi_11)


def transition_matrix(switch: SwitchSpec, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """以陣列回傳轉移核，z = (z0, z1)"""
    return transition_probabilities(switch, x, float(z[0]), float(z[1])).matrix


def _lag_weights(feedback: FeedbackSpec, available: int) -> np.ndarray:
    # 落後期 l = L-available+1 .. L 的權重，由舊到新
    w = feedback.weights()[feedback.L - available :]
    if feedback.normalize:
        w = w / w.sum()
    return w


def feedback_value(
    feedback: FeedbackSpec,
    zeta: float,
    theta_history: Union[Sequence[float], np.ndarray],
    t: int,
) -> float:
    """
    z = zeta * sum_l w_l theta_{t-L+l-1}，只加總時間 t 之前存在的落後期

    ``theta_history[i]`` 為時間 i + 1 的狀態；只讀取前 t - 1 筆，可直接傳入整條路徑。
    t = 1 時沒有歷史，回傳 0。
    """
    if t <= 1:
        return 0.0
    available = min(feedback.L, t - 1)
    history = feedback.project(np.asarray(theta_history, dtype=float))
    if history.shape[0] < t - 1:
        raise ModelDomainError(
            f"feedback at t={t} needs {t - 1} past states, got {history.shape[0]}"
        )
    lags = history[t - 1 - available : t - 1]
    if not np.all(np.isfinite(lags)):
        raise ModelDomainError(f"non-finite state in feedback history at t={t}")
    return float(zeta) * float(_lag_weights(feedback, available) @ lags)


def feedback_path(feedback: FeedbackSpec, states: np.ndarray) -> np.ndarray:
    """
    整條路徑各期不含 zeta 的回饋值

    回傳 (n,) 陣列，第 t - 1 個元素等於 ``feedback_value(feedback, 1.0, states, t)``。
    """
    projected = feedback.project(np.asarray(states, dtype=float))
    n = projected.shape[0]
    out = np.zeros(n)
    for t in range(2, n + 1):
        available = min(feedback.L, t - 1)
        out[t - 1] = _lag_weights(feedback, available) @ projected[t - 1 - available : t - 1]
    return out

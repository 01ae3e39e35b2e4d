"""
多程序狀態空間模型（含回饋與切換）的結構定義

ModelSpec 描述兩個 regime 下的量測方程與狀態方程、logistic 切換方程，
以及初始條件。矩陣可為時間不變，或以第一軸為時間的排程（schedule）。
"""

from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.mssfs.core.exceptions import ConfigurationError, ModelDomainError
from src.mssfs.core.utils.linalg import validate_psd

N_REGIMES = 2


def _frozen(value: Any, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ModelDomainError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


class FeedbackSpec(BaseModel):
    """回饋項設定：過去 L 期狀態的指數加權平均"""

    model_config = ConfigDict(frozen=True)

    L: int = Field(default=3, ge=1, description="回饋使用的落後期數")
    rho: float = Field(default=0.5, description="指數權重 w_l = exp(rho * (L - l + 1)) 的衰減參數")
    normalize: bool = Field(default=True, description="是否將可用落後期的權重正規化為總和 1")
    loading: Optional[Tuple[float, ...]] = Field(
        default=None, description="向量狀態投影到純量的係數；None 表示取第一個分量"
    )

    @field_validator("rho")
    @classmethod
    def validate_rho(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("rho must be finite")
        return v

    def weights(self) -> np.ndarray:
        """w_1 … w_L（未正規化）；l = L 對應最近一期"""
        lags = np.arange(1, self.L + 1)
        return np.exp(self.rho * (self.L - lags + 1))

    def project(self, states: np.ndarray) -> np.ndarray:
        """(k, q) 或 (k,) 狀態 → (k,) 純量"""
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            return states
        if self.loading is None:
            return states[:, 0]
        return states @ np.asarray(self.loading, dtype=float)


class SwitchSpec(BaseModel):
    """Logistic 切換方程：pi_01 = expit(alpha0 + x'beta0 + z0)，pi_11 = expit(alpha1 + x'beta1 + z1)"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    alpha: np.ndarray = Field(..., description="截距 (alpha0, alpha1)")
    beta: np.ndarray = Field(..., description="共變數係數，形狀 (2, d)")
    zeta: np.ndarray = Field(..., description="回饋係數 (zeta0, zeta1)")
    feedback: FeedbackSpec = Field(default_factory=FeedbackSpec, description="回饋設定")

    @field_validator("alpha", "zeta", mode="before")
    @classmethod
    def validate_pair(cls, v: Any) -> np.ndarray:
        arr = _frozen(v, "switch coefficient")
        if arr.shape != (N_REGIMES,):
            raise ValueError(f"expected shape (2,), got {arr.shape}")
        return arr

    @field_validator("beta", mode="before")
    @classmethod
    def validate_beta(cls, v: Any) -> np.ndarray:
        arr = _frozen(v, "beta")
        if arr.ndim == 1 and arr.size == 0:
            arr = _frozen(np.zeros((N_REGIMES, 0)), "beta")
        if arr.ndim != 2 or arr.shape[0] != N_REGIMES:
            raise ValueError(f"beta must have shape (2, d), got {arr.shape}")
        return arr

    @property
    def d(self) -> int:
        return int(self.beta.shape[1])


class InitialCondition(BaseModel):
    """初始條件：各 regime 的狀態均值與協方差，以及 Pr(I_0 = 0)"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mean: np.ndarray = Field(..., description="形狀 (2, q)")
    cov: np.ndarray = Field(..., description="形狀 (2, q, q)")
    prob0: float = Field(default=1.0, ge=0.0, le=1.0, description="Pr(I_0 = 0)")
    estimable: Dict[str, bool] = Field(
        default_factory=dict, description="可估計欄位旗標：mean / cov / prob0"
    )

    @field_validator("mean", mode="before")
    @classmethod
    def validate_mean(cls, v: Any) -> np.ndarray:
        arr = _frozen(v, "initial mean")
        if arr.ndim != 2 or arr.shape[0] != N_REGIMES:
            raise ValueError(f"initial mean must have shape (2, q), got {arr.shape}")
        return arr

    @field_validator("cov", mode="before")
    @classmethod
    def validate_cov(cls, v: Any) -> np.ndarray:
        arr = _frozen(v, "initial covariance")
        if arr.ndim != 3 or arr.shape[0] != N_REGIMES or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"initial covariance must have shape (2, q, q), got {arr.shape}")
        for k in range(N_REGIMES):
            validate_psd(arr[k], f"initial covariance[{k}]")
        return arr

    @field_validator("estimable")
    @classmethod
    def validate_estimable(cls, v: Dict[str, bool]) -> Dict[str, bool]:
        unknown = set(v) - {"mean", "cov", "prob0"}
        if unknown:
            raise ValueError(f"unknown estimable fields: {sorted(unknown)}")
        return v

    @property
    def probs(self) -> np.ndarray:
        return np.array([self.prob0, 1.0 - self.prob0])


class ModelSpec(BaseModel):
    """
    完整模型設定

    量測方程：y_t = F theta_t + v_t，v_t ~ N(0, V)
    狀態方程：theta_t = gamma_k + G_k theta_{t-1} + w_t，w_t ~ N(0, W_k)，k = I_t

    F、V 可為 (p, q)/(p, p) 或加上時間軸的排程；G、gamma、W 可為
    (2, q, q)/(2, q)/(2, q, q) 或加上時間軸的排程。排程第 i 列對應時間 t = i + 1。
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    p: int = Field(..., ge=1, description="觀測維度")
    q: int = Field(..., ge=1, description="狀態維度")
    F: np.ndarray = Field(..., description="量測矩陣")
    V: np.ndarray = Field(..., description="量測雜訊協方差")
    gamma: np.ndarray = Field(..., description="各 regime 狀態截距")
    G: np.ndarray = Field(..., description="各 regime 狀態轉移矩陣")
    W: np.ndarray = Field(..., description="各 regime 狀態雜訊協方差")
    switch: SwitchSpec
    init: InitialCondition

    @field_validator("F", "V", "gamma", "G", "W", mode="before")
    @classmethod
    def validate_matrix(cls, v: Any) -> np.ndarray:
        return _frozen(v, "model matrix")

    @model_validator(mode="after")
    def validate_shapes(self) -> "ModelSpec":
        p, q = self.p, self.q
        expected = {
            "F": (p, q),
            "V": (p, p),
            "gamma": (N_REGIMES, q),
            "G": (N_REGIMES, q, q),
            "W": (N_REGIMES, q, q),
        }
        lengths = set()
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape == shape:
                continue
            if arr.ndim == len(shape) + 1 and arr.shape[1:] == shape:
                lengths.add(arr.shape[0])
                continue
            raise ConfigurationError(
                f"{name} has shape {arr.shape}, expected {shape} or (n, *{shape})", parameter=name
            )
        if len(lengths) > 1:
            raise ConfigurationError(f"schedule lengths disagree: {sorted(lengths)}")

        for V in self._slices(self.V, 2):
            validate_psd(V, "V")
        for W in self._slices(self.W, 3):
            for k in range(N_REGIMES):
                validate_psd(W[k], f"W[{k}]")
        if self.init.mean.shape[1] != q:
            raise ConfigurationError("initial mean dimension does not match q", parameter="init")
        if self.switch.feedback.loading is not None and len(self.switch.feedback.loading) != q:
            raise ConfigurationError("feedback loading must have length q", parameter="loading")
        return self

    @staticmethod
    def _slices(arr: np.ndarray, static_ndim: int) -> np.ndarray:
        return arr[None] if arr.ndim == static_ndim else arr

    @property
    def schedule_length(self) -> Optional[int]:
        """排程長度；全部時間不變時為 None"""
        for arr, nd in ((self.F, 2), (self.V, 2), (self.gamma, 2), (self.G, 3), (self.W, 3)):
            if arr.ndim > nd:
                return int(arr.shape[0])
        return None

    @property
    def d(self) -> int:
        return self.switch.d

    def _at(self, arr: np.ndarray, static_ndim: int, t: int) -> np.ndarray:
        if arr.ndim == static_ndim:
            return arr
        if not 1 <= t <= arr.shape[0]:
            raise ModelDomainError(f"time {t} is outside the model schedule (1..{arr.shape[0]})")
        return arr[t - 1]

    def F_at(self, t: int) -> np.ndarray:
        return self._at(self.F, 2, t)

    def V_at(self, t: int) -> np.ndarray:
        return self._at(self.V, 2, t)

    def gamma_at(self, t: int) -> np.ndarray:
        return self._at(self.gamma, 2, t)

    def G_at(self, t: int) -> np.ndarray:
        return self._at(self.G, 3, t)

    def W_at(self, t: int) -> np.ndarray:
        return self._at(self.W, 3, t)

    def check_horizon(self, n: int) -> None:
        """排程長度須涵蓋序列長度"""
        length = self.schedule_length
        if length is not None and length < n:
            raise ConfigurationError(
                f"model schedule covers {length} times but the series has {n}", parameter="schedule"
            )

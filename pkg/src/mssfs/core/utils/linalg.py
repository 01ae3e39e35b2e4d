"""
濾波、平滑與參考計算共用的小型稠密線性代數工具

所有協方差分解都經過 ``factor_psd``，jitter 重試與錯誤回報在各處一致。
"""

from typing import Optional, Tuple

import numpy as np
from scipy import linalg as sla

from src.mssfs.core.exceptions import ModelDomainError, NumericalError

JITTER_SCALE = 1e-10
LOG_2PI = float(np.log(2.0 * np.pi))

CholFactor = Tuple[np.ndarray, bool]


def symmetrize(a: np.ndarray) -> np.ndarray:
    """方陣（或其堆疊）與轉置取平均"""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def factor_psd(
    a: np.ndarray,
    t: Optional[int] = None,
    branch: Optional[Tuple[int, int]] = None,
    what: str = "innovation covariance",
) -> CholFactor:
    """
    對稱矩陣的 Cholesky 分解，失敗時加對角 jitter 重試一次

    jitter 為 ``1e-10 * trace(a) / dim``；再次失敗時拋出標註時間索引與 regime 分支的 NumericalError。
    """
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"Non-finite {what}", t=t, branch=branch)
    try:
        return sla.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass

    dim = a.shape[0]
    jitter = JITTER_SCALE * float(np.trace(a)) / dim
    if jitter > 0.0:
        try:
            return sla.cho_factor(a + jitter * np.eye(dim), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            pass
    raise NumericalError(f"Singular {what}", t=t, branch=branch, details={"jitter": jitter})


def chol_solve(factor: CholFactor, b: np.ndarray) -> np.ndarray:
    return sla.cho_solve(factor, b, check_finite=False)


def chol_logdet(factor: CholFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


def gaussian_logpdf(resid: np.ndarray, factor: CholFactor) -> float:
    """由 A 的 Cholesky 因子計算 log N(resid; 0, A)"""
    k = resid.shape[0]
    quad = float(resid @ chol_solve(factor, resid))
    return -0.5 * (k * LOG_2PI + chol_logdet(factor) + quad)


def validate_psd(a: np.ndarray, name: str, tol: float = 1e-10) -> None:
    """``a`` 不是對稱半正定矩陣時拋出 ModelDomainError"""
    if not np.all(np.isfinite(a)):
        raise ModelDomainError(f"{name} has non-finite entries")
    if not np.allclose(a, np.swapaxes(a, -1, -2), atol=tol, rtol=0.0):
        raise ModelDomainError(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(a)
    scale = max(1.0, float(np.max(np.abs(eig))))
    if np.min(eig) < -tol * scale:
        raise ModelDomainError(f"{name} is not positive semi-definite")

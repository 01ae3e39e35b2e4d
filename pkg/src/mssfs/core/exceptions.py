"""
自定義異常類別，用於數值錯誤分類與 CLI 結構化錯誤報告
"""

from typing import Any, Dict, Optional, Tuple


class MssfsError(Exception):
    """基礎異常類別"""

    # 錯誤代碼 - 寫入 error.json
    error_code: str = "mssfs_error"
    # CLI 結束代碼 - 子類別可覆蓋
    exit_code: int = 1

    def __init__(self, message: str, hint: str = "", details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.hint = hint  # 給操作者的處理建議
        self.details = details or {}  # 額外的除錯資訊

    def with_context(self, **context: Any) -> "MssfsError":
        """補上 subject_id / iteration 等上下文後回傳自身"""
        for key, value in context.items():
            self.details.setdefault(key, value)
        return self


# ==================== 模型與參數相關異常 ====================


class ModelDomainError(MssfsError):
    """輸入值超出定義域（非有限值、違反約束、負的混合權重）"""

    error_code = "domain_error"


class ConfigurationError(MssfsError):
    """模型或執行設定錯誤（缺少參數、參數超出範圍）"""

    error_code = "configuration_error"
    exit_code = 2

    def __init__(
        self, message: str, parameter: Optional[str] = None, details: Optional[Dict[str, Any]] = None
    ):
        hint = f"請檢查參數 {parameter}" if parameter else "請檢查設定檔"
        details = dict(details or {})
        if parameter:
            details["parameter"] = parameter
        super().__init__(message, hint, details)
        self.parameter = parameter


# ==================== 數值計算相關異常 ====================


class NumericalError(MssfsError):
    """協方差矩陣無法分解（加上 jitter 後仍非正定）"""

    error_code = "numerical_error"

    def __init__(
        self,
        message: str,
        t: Optional[int] = None,
        branch: Optional[Tuple[int, int]] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        details = dict(details or {})
        if t is not None:
            details["t"] = t
        if branch is not None:
            details["branch"] = list(branch)
        super().__init__(
            message,
            "協方差退化：請檢查變異數參數是否過小或觀測矩陣是否秩不足",
            details,
        )
        self.t = t
        self.branch = branch


class CapacityError(MssfsError):
    """精確枚舉超出容量上限"""

    error_code = "capacity_error"

    def __init__(self, n: int, limit: int, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        details.update({"n": n, "limit": limit})
        super().__init__(
            f"Exact enumeration needs 2^{n} paths; limit is n <= {limit}",
            f"請將序列長度縮短至 {limit} 以內",
            details,
        )


# ==================== 估計相關異常 ====================


class FitError(MssfsError):
    """估計失敗（最佳化失敗、概似退化、目標函數持續上升）"""

    error_code = "fit_error"


class BootstrapError(MssfsError):
    """Bootstrap 前置條件不符或失敗比例過高"""

    error_code = "bootstrap_error"


# ==================== 資料集相關異常 ====================


class DatasetParseError(MssfsError):
    """資料檔無法解析"""

    error_code = "dataset_parse_error"
    exit_code = 2

    def __init__(self, message: str, row: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        if row is not None:
            details["row"] = row
        hint = f"請檢查資料檔第 {row} 列" if row is not None else "請檢查資料檔格式"
        super().__init__(message, hint, details)
        self.row = row


class DatasetValidationError(MssfsError):
    """資料集內容不符要求（重複的 subject/time、缺少共變數）"""

    error_code = "dataset_validation_error"
    exit_code = 2

    def __init__(self, message: str, row: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        if row is not None:
            details["row"] = row
        super().__init__(message, "請修正資料集後重新執行", details)
        self.row = row


# ==================== 工具函數 ====================


def get_error_report(exception: Exception, verbose: bool = False) -> Dict[str, Any]:
    """
    將異常轉換為結構化錯誤報告

    Args:
        exception: 捕捉到的異常
        verbose: 是否附上除錯資訊

    Returns:
        可直接序列化為 JSON 的字典
    """
    if isinstance(exception, MssfsError):
        report: Dict[str, Any] = {
            "error_code": exception.error_code,
            "message": exception.message,
            "hint": exception.hint,
            "exit_code": exception.exit_code,
        }
        if verbose or exception.details:
            report["details"] = {k: _jsonable(v) for k, v in exception.details.items()}
        return report

    report = {
        "error_code": "unexpected_error",
        "message": str(exception),
        "hint": "未預期的錯誤，請附上日誌回報",
        "exit_code": 1,
    }
    if verbose:
        report["details"] = {"type": type(exception).__name__}
    return report


def is_numerical_error(exception: Exception) -> bool:
    """判斷異常是否為數值退化"""
    return isinstance(exception, NumericalError)


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)

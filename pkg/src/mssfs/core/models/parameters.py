"""
參數集合模型

ParameterSet 以固定順序保存具名純量參數，並記錄各參數的轉換方式
（log / logit / identity），供最佳化器在無約束尺度上運作。
"""

from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import expit, logit

from src.mssfs.core.exceptions import ModelDomainError

# 變異數在原尺度上的下限為 exp(-30)
LOG_FLOOR = -30.0
# logit 參數允許 0，映射到此值
LOGIT_FLOOR = 1e-13
# exp 溢位界線
LOG_CEILING = 700.0


class Transform(str, Enum):
    """參數轉換方式"""

    LOG = "log"
    LOGIT = "logit"
    IDENTITY = "identity"


class Scale(str, Enum):
    """參數值所在尺度"""

    CONSTRAINED = "constrained"
    UNCONSTRAINED = "unconstrained"


class ParameterEntry(BaseModel):
    """單一具名參數"""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1, description="參數名稱")
    value: float = Field(..., description="參數值（尺度由所屬 ParameterSet 決定）")
    transform: Transform = Field(default=Transform.IDENTITY, description="最佳化時使用的轉換")
    group: str = Field(default="switch", description="參數分組：measurement/state/switch/feedback/initial")


def to_unconstrained_value(value: float, transform: Transform, name: str = "") -> float:
    """原尺度 → 無約束尺度"""
    if not np.isfinite(value):
        raise ModelDomainError(f"Parameter {name} is not finite", details={"parameter": name})
    if transform is Transform.LOG:
        if value <= 0.0:
            raise ModelDomainError(
                f"Parameter {name} must be positive, got {value}", details={"parameter": name}
            )
        return max(float(np.log(value)), LOG_FLOOR)
    if transform is Transform.LOGIT:
        if value < 0.0 or value >= 1.0:
            raise ModelDomainError(
                f"Parameter {name} must lie in [0, 1), got {value}", details={"parameter": name}
            )
        return float(logit(max(value, LOGIT_FLOOR)))
    return float(value)


def to_constrained_value(u: float, transform: Transform, name: str = "") -> float:
    """無約束尺度 → 原尺度"""
    if not np.isfinite(u):
        raise ModelDomainError(f"Parameter {name} is not finite", details={"parameter": name})
    if transform is Transform.LOG:
        if u > LOG_CEILING:
            raise ModelDomainError(f"Overflow transforming {name}", details={"parameter": name})
        return float(np.exp(max(u, LOG_FLOOR)))
    if transform is Transform.LOGIT:
        return float(expit(u))
    return float(u)


class ParameterSet(BaseModel):
    """
    有序的具名參數集合

    - 名稱唯一且順序固定，向量化時依此順序
    - scale 標示目前的值位於原尺度或無約束尺度
    """

    model_config = ConfigDict(frozen=True)

    entries: Tuple[ParameterEntry, ...] = Field(default=(), description="參數列表")
    scale: Scale = Field(default=Scale.CONSTRAINED, description="數值所在尺度")

    @field_validator("entries")
    @classmethod
    def validate_unique_names(cls, v: Tuple[ParameterEntry, ...]) -> Tuple[ParameterEntry, ...]:
        """參數名稱不可重複"""
        names = [e.name for e in v]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate parameter names: {duplicates}")
        return v

    @classmethod
    def from_values(
        cls,
        values: Mapping[str, float],
        transforms: Optional[Mapping[str, Transform]] = None,
        groups: Optional[Mapping[str, str]] = None,
    ) -> "ParameterSet":
        transforms = transforms or {}
        groups = groups or {}
        return cls(
            entries=tuple(
                ParameterEntry(
                    name=name,
                    value=float(value),
                    transform=transforms.get(name, Transform.IDENTITY),
                    group=groups.get(name, "switch"),
                )
                for name, value in values.items()
            )
        )

    # ---- 查詢 ----

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: object) -> bool:
        return any(e.name == name for e in self.entries)

    def entry(self, name: str) -> ParameterEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __getitem__(self, name: str) -> float:
        return self.entry(name).value

    def get(self, name: str, default: Optional[float] = None) -> Optional[float]:
        return self[name] if name in self else default

    def as_dict(self) -> Dict[str, float]:
        return {e.name: e.value for e in self.entries}

    def vector(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        """依名稱順序取出數值向量（目前尺度）"""
        names = self.names if names is None else names
        lookup = self.as_dict()
        return np.array([lookup[n] for n in names], dtype=float)

    # ---- 修改（回傳新物件） ----

    def with_values(
        self, values: Union[Mapping[str, float], np.ndarray], names: Optional[Sequence[str]] = None
    ) -> "ParameterSet":
        """以新值取代部分參數；values 可為 dict 或依 names 排列的向量"""
        if not isinstance(values, Mapping):
            names = self.names if names is None else list(names)
            arr = np.asarray(values, dtype=float)
            if arr.shape != (len(names),):
                raise ValueError(f"expected {len(names)} values, got shape {arr.shape}")
            values = dict(zip(names, arr.tolist()))
        unknown = set(values) - set(self.names)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        return self.model_copy(
            update={
                "entries": tuple(
                    e.model_copy(update={"value": float(values[e.name])}) if e.name in values else e
                    for e in self.entries
                )
            }
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "parameter": self.names,
                "value": [e.value for e in self.entries],
                "transform": [e.transform.value for e in self.entries],
                "group": [e.group for e in self.entries],
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ParameterSet":
        """讀回 to_frame 的輸出（原尺度）"""
        missing = {"parameter", "value"} - set(frame.columns)
        if missing:
            raise ModelDomainError(f"parameter table is missing columns {sorted(missing)}")
        entries = []
        for row in frame.itertuples(index=False):
            entries.append(
                ParameterEntry(
                    name=str(row.parameter),
                    value=float(row.value),
                    transform=Transform(getattr(row, "transform", "identity")),
                    group=str(getattr(row, "group", "switch")),
                )
            )
        return cls(entries=tuple(entries))

    @model_validator(mode="after")
    def validate_finite(self) -> "ParameterSet":
        for e in self.entries:
            if not np.isfinite(e.value):
                raise ValueError(f"parameter {e.name} is not finite")
        return self


def apply_transform(params: ParameterSet, direction: str) -> ParameterSet:
    """
    在原尺度與無約束尺度之間轉換

    Args:
        params: 參數集合
        direction: "to_unconstrained" 或 "to_constrained"

    Returns:
        轉換後的新 ParameterSet
    """
    if direction == "to_unconstrained":
        if params.scale is Scale.UNCONSTRAINED:
            return params
        fn, target = to_unconstrained_value, Scale.UNCONSTRAINED
    elif direction == "to_constrained":
        if params.scale is Scale.CONSTRAINED:
            return params
        fn, target = to_constrained_value, Scale.CONSTRAINED
    else:
        raise ValueError(f"unknown direction {direction!r}")

    return ParameterSet(
        entries=tuple(
            e.model_copy(update={"value": fn(e.value, e.transform, e.name)}) for e in params.entries
        ),
        scale=target,
    )


def numbered(prefix: str, count: int) -> List[str]:
    """prefix_1 … prefix_count"""
    return [f"{prefix}_{j}" for j in range(1, count + 1)]


def collect_numbered(params: ParameterSet, prefix: str) -> List[float]:
    """依序收集 prefix_1, prefix_2, … 直到缺號"""
    values = []
    j = 1
    while f"{prefix}_{j}" in params:
        values.append(params[f"{prefix}_{j}"])
        j += 1
    return values

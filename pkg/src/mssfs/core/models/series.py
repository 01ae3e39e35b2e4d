"""
受試者時間序列與資料集模型
"""

from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.mssfs.core.exceptions import DatasetValidationError


class SubjectSeries(BaseModel):
    """
    單一受試者的觀測序列

    - y: (n, p)，NaN 表示缺值
    - covariates: (n, d)，每個時間點一列（時間不變的共變數即各列相同）
    - times: (n,) 嚴格遞增的整數時間索引
    - group_id: 所屬受試者；同一受試者的多條序列（例如正、負兩個 arm）共用，預設為 subject_id
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    subject_id: str = Field(..., min_length=1, description="受試者識別碼")
    y: np.ndarray = Field(..., description="觀測值，形狀 (n, p)")
    covariates: np.ndarray = Field(..., description="共變數，形狀 (n, d)")
    times: Optional[np.ndarray] = Field(default=None, description="時間索引，預設 1..n")
    group_id: Optional[str] = Field(default=None, description="所屬受試者，預設為 subject_id")

    @field_validator("y", mode="before")
    @classmethod
    def validate_y(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError(f"y must be (n, p), got shape {arr.shape}")
        if np.any(np.isinf(arr)):
            raise ValueError("y contains infinite values")
        arr.setflags(write=False)
        return arr

    @field_validator("covariates", mode="before")
    @classmethod
    def validate_covariates(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ValueError(f"covariates must be (n, d), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("covariates must be complete and finite")
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def validate_lengths(self) -> "SubjectSeries":
        n = self.y.shape[0]
        if self.covariates.shape[0] == 1 and n != 1:
            tiled = np.repeat(self.covariates, n, axis=0)
            tiled.setflags(write=False)
            object.__setattr__(self, "covariates", tiled)
        if self.covariates.shape[0] != n and n > 0:
            raise ValueError(f"covariates have {self.covariates.shape[0]} rows for {n} times")
        if self.times is None:
            times = np.arange(1, n + 1)
        else:
            times = np.asarray(self.times, dtype=int)
            if times.shape != (n,):
                raise ValueError("times must have one entry per row of y")
            if n > 1 and np.any(np.diff(times) <= 0):
                raise ValueError("times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        if not self.group_id:
            object.__setattr__(self, "group_id", self.subject_id)
        return self

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.y.shape[1])

    @property
    def d(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.y)

    def x_at(self, t: int) -> np.ndarray:
        """時間 t（1 起算）的共變數列；t 超出範圍時取最後一列"""
        return self.covariates[min(t, self.n) - 1]

    def n_observed(self) -> int:
        return int(np.sum(self.observed_mask))

    def relabeled(self, subject_id: str, group_id: Optional[str] = None) -> "SubjectSeries":
        return self.model_copy(
            update={"subject_id": subject_id, "group_id": group_id or self.group_id}
        )


class Dataset(BaseModel):
    """多位受試者的資料集；受試者間互相獨立"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    subjects: Tuple[SubjectSeries, ...] = Field(default=(), description="受試者序列")
    response_names: Tuple[str, ...] = Field(default=("y1",), description="觀測欄位名稱")
    covariate_names: Tuple[str, ...] = Field(default=(), description="共變數欄位名稱")

    @model_validator(mode="after")
    def validate_subjects(self) -> "Dataset":
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetValidationError(f"duplicate subject ids: {dup}")
        for s in self.subjects:
            if s.p != len(self.response_names):
                raise DatasetValidationError(
                    f"subject {s.subject_id} has {s.p} responses, expected {len(self.response_names)}"
                )
            if s.n > 0 and s.d != len(self.covariate_names):
                raise DatasetValidationError(
                    f"subject {s.subject_id} has {s.d} covariates, "
                    f"expected {len(self.covariate_names)}"
                )
        return self

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def p(self) -> int:
        return len(self.response_names)

    @property
    def d(self) -> int:
        return len(self.covariate_names)

    @property
    def groups(self) -> List[List[SubjectSeries]]:
        """依 group_id 分組的序列，組別與組內順序皆依首次出現"""
        grouped: Dict[str, List[SubjectSeries]] = {}
        for s in self.subjects:
            grouped.setdefault(s.group_id, []).append(s)
        return list(grouped.values())

    def subject(self, subject_id: str) -> SubjectSeries:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def n_observed(self) -> int:
        return sum(s.n_observed() for s in self.subjects)

    def with_subjects(self, subjects: List[SubjectSeries]) -> "Dataset":
        return Dataset(
            subjects=tuple(subjects),
            response_names=self.response_names,
            covariate_names=self.covariate_names,
        )

    def observed_values(self) -> np.ndarray:
        """所有非缺值觀測攤平成一維"""
        if not self.subjects:
            return np.zeros(0)
        stacked = np.concatenate([s.y.ravel() for s in self.subjects])
        return stacked[~np.isnan(stacked)]

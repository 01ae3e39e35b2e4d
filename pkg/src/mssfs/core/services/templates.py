"""
模型模板

模板把具名的 ParameterSet 轉成 ModelSpec，並提供估計器所需的參數化資訊：
名稱、轉換、起始值、受懲罰的係數以及乘在回饋上的係數。

模板：
- TemperatureTemplate：純量體溫預設（兩個共變數時共 13 個參數）
- GeneralTemplate：使用者提供矩陣，可選擇要估計的元素
"""

import re
from abc import ABC, abstractmethod
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import structlog

from src.mssfs.core.exceptions import ConfigurationError, ModelDomainError
from src.mssfs.core.models.model import (
    FeedbackSpec,
    InitialCondition,
    ModelSpec,
    SwitchSpec,
)
from src.mssfs.core.models.parameters import (
    ParameterEntry,
    ParameterSet,
    Transform,
    apply_transform,
    collect_numbered,
    numbered,
)
from src.mssfs.core.models.series import Dataset

logger = structlog.get_logger()

START_QUANTILE = 0.95


class ModelTemplate(ABC):
    """參數組 → 模型設定"""

    name: str = "template"

    def __init__(self, covariate_dim: int, feedback: Optional[FeedbackSpec] = None) -> None:
        if covariate_dim < 0:
            raise ConfigurationError("covariate dimension must be non-negative")
        self.d = covariate_dim
        self.feedback = feedback or FeedbackSpec()

    # ---- 參數化 ----

    @property
    @abstractmethod
    def parameter_names(self) -> List[str]:
        """模板所有參數的有序名稱"""

    @abstractmethod
    def transform_of(self, name: str) -> Transform:
        ...

    @abstractmethod
    def group_of(self, name: str) -> str:
        ...

    @abstractmethod
    def _build(self, values: Mapping[str, float]) -> ModelSpec:
        ...

    @abstractmethod
    def start_values(self, dataset: Dataset) -> ParameterSet:
        """在 ``dataset`` 上估計的預設起點"""

    @property
    def penalized_names(self) -> List[str]:
        return ["alpha1", *numbered("beta1", self.d), "zeta1"]

    @property
    def feedback_names(self) -> Tuple[Optional[str], Optional[str]]:
        """regime 0 與 regime 1 中乘在回饋上的參數名稱"""
        return (None, "zeta1")

    def parameter_set(self, values: Mapping[str, float]) -> ParameterSet:
        """依模板順序建立受限尺度的 ParameterSet，並標註轉換"""
        missing = [n for n in self.parameter_names if n not in values]
        if missing:
            raise ConfigurationError(f"missing parameters {missing}", parameter=missing[0])
        unknown = sorted(set(values) - set(self.parameter_names))
        if unknown:
            raise ConfigurationError(f"unknown parameters {unknown}", parameter=unknown[0])
        return ParameterSet(
            entries=tuple(
                ParameterEntry(
                    name=n,
                    value=float(values[n]),
                    transform=self.transform_of(n),
                    group=self.group_of(n),
                )
                for n in self.parameter_names
            )
        )

    def build(self, params: ParameterSet) -> ModelSpec:
        """ParameterSet（任一尺度）→ ModelSpec"""
        constrained = apply_transform(params, "to_constrained")
        return self._build(constrained.as_dict())

    def without_feedback(self, params: ParameterSet) -> ParameterSet:
        """回饋係數全設為 0 的 ``params`` 副本"""
        zeros = {n: 0.0 for n in self.feedback_names if n is not None and n in params}
        return params.with_values(zeros)


# ==================== 體溫預設 ====================

_VARIANCES = ("sigma2_v", "sigma2_0", "sigma2_1")


def temperature_preset(params: ParameterSet, feedback: Optional[FeedbackSpec] = None) -> ModelSpec:
    """
    體溫的純量兩 regime 模型

    regime 0 向 0 衰減，regime 1 為繞 ``delta`` 的 AR(1)；regime 0 的切換方程
    沒有回饋，過程由 regime 0、狀態 0、無不確定性開始。

    Raises:
        ConfigurationError: 缺少參數或參數超出範圍
    """
    feedback = feedback or FeedbackSpec()
    values = apply_transform(params, "to_constrained").as_dict()
    required = [*_VARIANCES, "delta", "G0", "G1", "alpha0", "alpha1", "zeta1"]
    for name in required:
        if name not in values:
            raise ConfigurationError(f"temperature preset requires {name}", parameter=name)

    beta0 = collect_numbered(params, "beta0")
    beta1 = collect_numbered(params, "beta1")
    if len(beta0) != len(beta1):
        raise ConfigurationError(
            f"beta0 has {len(beta0)} entries but beta1 has {len(beta1)}", parameter="beta1"
        )

    for name in _VARIANCES:
        if values[name] < 0.0:
            raise ConfigurationError(f"{name} must be non-negative", parameter=name)
    if values["delta"] < 0.0:
        raise ConfigurationError("delta must be non-negative", parameter="delta")
    for name in ("G0", "G1"):
        if not 0.0 <= values[name] < 1.0:
            raise ConfigurationError(f"{name} must lie in [0, 1)", parameter=name)

    delta, g0, g1 = values["delta"], values["G0"], values["G1"]
    try:
        return ModelSpec(
            p=1,
            q=1,
            F=[[1.0]],
            V=[[values["sigma2_v"]]],
            gamma=[[0.0], [delta * (1.0 - g1)]],
            G=[[[g0]], [[g1]]],
            W=[[[values["sigma2_0"]]], [[values["sigma2_1"]]]],
            switch=SwitchSpec(
                alpha=[values["alpha0"], values["alpha1"]],
                beta=[beta0, beta1] if beta0 else np.zeros((2, 0)),
                zeta=[0.0, values["zeta1"]],
                feedback=feedback,
            ),
            init=InitialCondition(mean=[[0.0], [delta]], cov=np.zeros((2, 1, 1)), prob0=1.0),
        )
    except ModelDomainError as e:
        raise ConfigurationError(e.message, details=e.details) from e


class TemperatureTemplate(ModelTemplate):
    """
    體溫預設模板

    參數（d 個共變數）：sigma2_v, sigma2_0, sigma2_1, delta, G0, G1,
    alpha0, beta0_1..d, alpha1, beta1_1..d, zeta1.
    """

    name = "temperature"

    @property
    def parameter_names(self) -> List[str]:
        return [
            *_VARIANCES,
            "delta",
            "G0",
            "G1",
            "alpha0",
            *numbered("beta0", self.d),
            "alpha1",
            *numbered("beta1", self.d),
            "zeta1",
        ]

    def transform_of(self, name: str) -> Transform:
        if name in _VARIANCES or name == "delta":
            return Transform.LOG
        if name in ("G0", "G1"):
            return Transform.LOGIT
        return Transform.IDENTITY

    def group_of(self, name: str) -> str:
        if name == "sigma2_v":
            return "measurement"
        if name in ("sigma2_0", "sigma2_1", "delta", "G0", "G1"):
            return "state"
        if name == "zeta1":
            return "feedback"
        return "switch"

    def _build(self, values: Mapping[str, float]) -> ModelSpec:
        return temperature_preset(self.parameter_set(values), self.feedback)

    def start_values(self, dataset: Dataset) -> ParameterSet:
        """變異數 1、切換係數 0、G 為 0.5、delta 取資料的上分位數"""
        observed = dataset.observed_values()
        delta = float(np.quantile(observed, START_QUANTILE)) if observed.size else 1.0
        if not np.isfinite(delta) or delta <= 0.0:
            delta = 1.0
        values: Dict[str, float] = {n: 0.0 for n in self.parameter_names}
        values.update({n: 1.0 for n in _VARIANCES})
        values.update({"delta": delta, "G0": 0.5, "G1": 0.5})
        return self.parameter_set(values)


# ==================== 一般矩陣 ====================

_ENTRY = re.compile(r"^(F|V|gamma0|gamma1|G0|G1|W0|W1)\[(\d+)(?:,(\d+))?\]$")


class GeneralTemplate(ModelTemplate):
    """
    固定 ModelSpec、只開放選定元素估計的模板

    自由矩陣元素寫作 ``V[0,0]``、``W1[0,0]``、``G0[1,0]``、``gamma1[0]`` 或 ``F[0,1]``。
    兩個 regime 的切換係數（alpha、beta、zeta）一律自由。基礎模型標記為可估計時，
    初始均值與初始 regime 機率也成為參數。
    """

    name = "general"

    def __init__(self, base: ModelSpec, free_entries: Optional[List[str]] = None) -> None:
        super().__init__(base.d, base.switch.feedback)
        if base.schedule_length is not None:
            raise ConfigurationError("estimation needs time-invariant matrices", parameter="schedule")
        self.base = base
        self.free_entries = list(free_entries or [])
        self._parsed: Dict[str, Tuple[str, Tuple[int, ...]]] = {}
        for entry in self.free_entries:
            self._parsed[entry] = self._parse(entry)

    def _parse(self, entry: str) -> Tuple[str, Tuple[int, ...]]:
        m = _ENTRY.match(entry.replace(" ", ""))
        if not m:
            raise ConfigurationError(f"cannot parse free entry {entry!r}", parameter=entry)
        matrix, i, j = m.group(1), int(m.group(2)), m.group(3)
        p, q = self.base.p, self.base.q
        if matrix.startswith("gamma"):
            if j is not None or i >= q:
                raise ConfigurationError(f"{entry} is out of range", parameter=entry)
            return matrix, (i,)
        if j is None:
            raise ConfigurationError(f"{entry} needs two indices", parameter=entry)
        rows, cols = {"F": (p, q), "V": (p, p)}.get(matrix, (q, q))
        if i >= rows or int(j) >= cols:
            raise ConfigurationError(f"{entry} is out of range", parameter=entry)
        return matrix, (i, int(j))

    @property
    def _initial_names(self) -> List[str]:
        names: List[str] = []
        flags = self.base.init.estimable
        if flags.get("mean"):
            names += numbered("mu0", self.base.q) + numbered("mu1", self.base.q)
        if flags.get("prob0"):
            names.append("prob0")
        return names

    @property
    def parameter_names(self) -> List[str]:
        return [
            *self.free_entries,
            *self._initial_names,
            "alpha0",
            *numbered("beta0", self.d),
            "zeta0",
            "alpha1",
            *numbered("beta1", self.d),
            "zeta1",
        ]

    @property
    def feedback_names(self) -> Tuple[Optional[str], Optional[str]]:
        return ("zeta0", "zeta1")

    def transform_of(self, name: str) -> Transform:
        if name in self._parsed:
            matrix, idx = self._parsed[name]
            if matrix in ("V", "W0", "W1") and idx[0] == idx[1]:
                return Transform.LOG
            return Transform.IDENTITY
        if name == "prob0":
            return Transform.LOGIT
        return Transform.IDENTITY

    def group_of(self, name: str) -> str:
        if name in self._parsed:
            matrix = self._parsed[name][0]
            return "measurement" if matrix in ("F", "V") else "state"
        if name.startswith("mu") or name == "prob0":
            return "initial"
        if name.startswith("zeta"):
            return "feedback"
        return "switch"

    def _build(self, values: Mapping[str, float]) -> ModelSpec:
        base = self.base
        arrays = {
            "F": np.array(base.F),
            "V": np.array(base.V),
            "gamma": np.array(base.gamma),
            "G": np.array(base.G),
            "W": np.array(base.W),
        }
        for entry, (matrix, idx) in self._parsed.items():
            value = values[entry]
            if matrix in ("F", "V"):
                arrays[matrix][idx] = value
                if matrix == "V":
                    arrays["V"][idx[::-1]] = value
            elif matrix.startswith("gamma"):
                arrays["gamma"][int(matrix[-1]), idx[0]] = value
            else:
                k = int(matrix[-1])
                arrays[matrix[0]][k][idx] = value
                if matrix[0] == "W":
                    arrays["W"][k][idx[::-1]] = value

        init = base.init
        mean = np.array(init.mean)
        prob0 = init.prob0
        if init.estimable.get("mean"):
            mean[0] = [values[n] for n in numbered("mu0", base.q)]
            mean[1] = [values[n] for n in numbered("mu1", base.q)]
        if init.estimable.get("prob0"):
            prob0 = values["prob0"]

        try:
            return ModelSpec(
                p=base.p,
                q=base.q,
                switch=SwitchSpec(
                    alpha=[values["alpha0"], values["alpha1"]],
                    beta=[
                        [values[n] for n in numbered("beta0", self.d)],
                        [values[n] for n in numbered("beta1", self.d)],
                    ]
                    if self.d
                    else np.zeros((2, 0)),
                    zeta=[values["zeta0"], values["zeta1"]],
                    feedback=base.switch.feedback,
                ),
                init=InitialCondition(
                    mean=mean, cov=init.cov, prob0=prob0, estimable=dict(init.estimable)
                ),
                **arrays,
            )
        except ModelDomainError as e:
            raise ConfigurationError(e.message, details=e.details) from e

    def start_values(self, dataset: Dataset) -> ParameterSet:
        base = self.base
        values: Dict[str, float] = {}
        for entry, (matrix, idx) in self._parsed.items():
            if matrix in ("F", "V"):
                values[entry] = float(getattr(base, matrix)[idx])
            elif matrix.startswith("gamma"):
                values[entry] = float(base.gamma[int(matrix[-1]), idx[0]])
            else:
                values[entry] = float(getattr(base, matrix[0])[int(matrix[-1])][idx])
        if base.init.estimable.get("mean"):
            for k in (0, 1):
                for j, name in enumerate(numbered(f"mu{k}", base.q)):
                    values[name] = float(base.init.mean[k, j])
        if base.init.estimable.get("prob0"):
            values["prob0"] = min(base.init.prob0, 1.0 - 1e-6)
        sw = base.switch
        for k in (0, 1):
            values[f"alpha{k}"] = float(sw.alpha[k])
            values[f"zeta{k}"] = float(sw.zeta[k])
            for j, name in enumerate(numbered(f"beta{k}", self.d)):
                values[name] = float(sw.beta[k, j])
        return self.parameter_set(values)


def build_template(
    kind: str,
    covariate_dim: int,
    feedback: Optional[FeedbackSpec] = None,
    base: Optional[ModelSpec] = None,
    free_entries: Optional[List[str]] = None,
) -> ModelTemplate:
    """供 CLI 設定使用的工廠函式"""
    if kind == "temperature":
        return TemperatureTemplate(covariate_dim, feedback)
    if kind == "general":
        if base is None:
            raise ConfigurationError("general template needs a base model", parameter="model")
        return GeneralTemplate(base, free_entries)
    raise ConfigurationError(f"unknown model template {kind!r}", parameter="template")

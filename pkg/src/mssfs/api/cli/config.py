"""
執行設定（RunConfig）

JSON 文件，各區段對應 RunConfig 欄位；所有欄位皆有預設值，
只給資料檔與模板名稱即可執行 fit。
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.mssfs.core.exceptions import ConfigurationError, MssfsError
from src.mssfs.core.models.model import FeedbackSpec, ModelSpec
from src.mssfs.core.models.parameters import ParameterSet
from src.mssfs.core.services.estimation import EmConfig
from src.mssfs.core.services.simulation import StudyDesign
from src.mssfs.core.services.templates import ModelTemplate, build_template

logger = structlog.get_logger()


class ModelSection(BaseModel):
    """模型區段"""

    model_config = ConfigDict(extra="forbid")

    template: Literal["temperature", "general"] = Field(
        default="temperature", description="模型模板：temperature 預設或 general 一般矩陣"
    )
    feedback: FeedbackSpec = Field(default_factory=FeedbackSpec, description="回饋設定（L、rho）")
    general: Optional[Dict[str, Any]] = Field(
        default=None, description="general 模板的 ModelSpec 欄位（p、q、F、V、gamma、G、W、switch、init）"
    )
    free_entries: List[str] = Field(
        default_factory=list, description="general 模板中要估計的矩陣元素，例如 V[0,0]"
    )


class BootstrapSection(BaseModel):
    """Bootstrap 區段"""

    model_config = ConfigDict(extra="forbid")

    B: int = Field(default=300, ge=10, description="重抽次數")
    level: float = Field(default=0.95, gt=0.0, lt=1.0, description="信賴水準")


class StudySection(BaseModel):
    """模擬研究區段"""

    model_config = ConfigDict(extra="forbid")

    replications: int = Field(default=50, ge=1, description="模擬重複次數")
    scale: float = Field(default=100.0, gt=0.0, description="MSE、Bias^2、變異數的乘數")


class BenchSection(BaseModel):
    """效能測試區段"""

    model_config = ConfigDict(extra="forbid")

    m_grid: List[int] = Field(default_factory=lambda: [100, 200, 400], description="受試者數網格")
    repeats: int = Field(default=1, ge=1, description="每個 m 的重複次數")


class RunConfig(BaseModel):
    """CLI 執行設定"""

    model_config = ConfigDict(extra="forbid")

    model: ModelSection = Field(default_factory=ModelSection, description="模型設定")
    parameters: Optional[Dict[str, float]] = Field(
        default=None, description="參數值（原尺度）；fit 作為起始值，filter/smooth/predict 直接使用"
    )
    parameters_file: Optional[str] = Field(
        default=None, description="先前輸出的 parameters.csv，與 parameters 二擇一"
    )
    em: EmConfig = Field(default_factory=EmConfig, description="EM 設定")
    bootstrap: BootstrapSection = Field(default_factory=BootstrapSection, description="Bootstrap 設定")
    simulate: StudyDesign = Field(default_factory=StudyDesign, description="模擬設計")
    study: StudySection = Field(default_factory=StudySection, description="模擬研究設定")
    bench: BenchSection = Field(default_factory=BenchSection, description="效能測試設定")
    seed: Optional[int] = Field(default=None, ge=0, description="全域種子；覆蓋 simulate.seed")
    threads: Optional[int] = Field(default=None, ge=1, description="平行工作數")

    def build_model_template(self, covariate_dim: int) -> ModelTemplate:
        """依模型區段建立模板"""
        section = self.model
        base: Optional[ModelSpec] = None
        if section.template == "general":
            if section.general is None:
                raise ConfigurationError("general template needs a model.general section", parameter="model.general")
            fields = dict(section.general)
            switch = dict(fields.pop("switch", {}))
            switch["feedback"] = section.feedback
            try:
                base = ModelSpec(**fields, switch=switch)
            except ValidationError as e:
                raise ConfigurationError(
                    "invalid model.general section", parameter="model.general", details={"errors": _errors(e)}
                ) from e
            except MssfsError as e:
                raise ConfigurationError(e.message, parameter="model.general", details=e.details) from e
            if base.d != covariate_dim:
                raise ConfigurationError(
                    f"model has {base.d} covariates, the dataset has {covariate_dim}",
                    parameter="model.general.switch.beta",
                )
        return build_template(section.template, covariate_dim, section.feedback, base, section.free_entries)

    def resolve_parameters(self, template: ModelTemplate) -> Optional[ParameterSet]:
        """讀取設定中的參數值；未提供時回傳 None"""
        if self.parameters is not None and self.parameters_file is not None:
            raise ConfigurationError("give either parameters or parameters_file, not both", parameter="parameters")
        if self.parameters is not None:
            return template.parameter_set(self.parameters)
        if self.parameters_file is not None:
            try:
                frame = pd.read_csv(self.parameters_file)
            except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
                raise ConfigurationError(
                    f"cannot read parameters file: {e}", parameter="parameters_file"
                ) from e
            try:
                values = ParameterSet.from_frame(frame).as_dict()
            except (MssfsError, ValueError) as e:
                raise ConfigurationError(str(e), parameter="parameters_file") from e
            return template.parameter_set(values)
        return None


def _errors(e: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """
    讀取 JSON 執行設定；path 為 None 時回傳全預設設定

    Raises:
        ConfigurationError: 檔案無法讀取、JSON 格式錯誤或欄位驗證失敗
    """
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}", parameter="config") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(
            f"config {path} is not valid JSON: {e.msg}",
            parameter="config",
            details={"line": e.lineno, "column": e.colno},
        ) from e
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object", parameter="config")
    try:
        config = RunConfig(**raw)
    except ValidationError as e:
        raise ConfigurationError(
            "invalid run configuration", parameter="config", details={"errors": _errors(e)}
        ) from e
    except MssfsError as e:
        raise ConfigurationError(e.message, parameter="config", details=e.details) from e
    logger.info("Run configuration loaded", path=str(path), template=config.model.template)
    return config

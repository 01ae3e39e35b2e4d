"""
CLI 指令處理

每個指令把表格寫入輸出目錄，並寫出 run_metadata.json（設定回顯、
套件版本、執行時間、收斂紀錄）。失敗時寫出 error.json 並回傳非零結束代碼。
"""

import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import joblib
import numpy as np
import pandas as pd
import scipy
import structlog

from src.mssfs import __version__
from src.mssfs.api.cli.benchmark import scaling_benchmark
from src.mssfs.api.cli.config import RunConfig
from src.mssfs.core.exceptions import ConfigurationError, MssfsError, get_error_report
from src.mssfs.core.models.parameters import ParameterSet
from src.mssfs.core.models.series import Dataset
from src.mssfs.core.services.bootstrap import run_bootstrap
from src.mssfs.core.services.estimation import EmConfig, EmEstimator, FitResult, settle_feedback
from src.mssfs.core.services.simulation import simulate_study
from src.mssfs.core.services.smoothing import one_step_predict
from src.mssfs.core.services.study import run_study, summarize_study
from src.mssfs.core.services.templates import ModelTemplate
from src.mssfs.core.utils.timing import Stopwatch
from src.mssfs.infrastructure.storage.dataset_io import load_dataset, write_dataset
from src.mssfs.infrastructure.storage.results_writer import (
    filter_frame,
    prediction_frame,
    series_frame,
    truth_frame,
    write_metadata,
    write_table,
)

logger = structlog.get_logger()

COMMANDS = ("simulate", "fit", "filter", "smooth", "predict", "bootstrap", "bench", "study")


@dataclass
class RunContext:
    """單次執行的輸入與累積的輸出紀錄"""

    command: str
    config: RunConfig
    out_dir: Path
    data_path: Optional[Path] = None
    seed: Optional[int] = None
    threads: int = 1
    stopwatch: Stopwatch = field(default_factory=Stopwatch)
    artifacts: List[str] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)

    def write(self, frame: pd.DataFrame, name: str) -> None:
        write_table(frame, self.out_dir / name)
        self.artifacts.append(name)

    def dataset(self) -> Dataset:
        if self.data_path is None:
            raise ConfigurationError(f"{self.command} needs --data", parameter="data")
        with self.stopwatch.measure("load"):
            return load_dataset(self.data_path)

    def em_config(self) -> EmConfig:
        return self.config.em.model_copy(update={"threads": self.threads})

    def template_and_params(self, dataset: Dataset, required: bool) -> Tuple[ModelTemplate, Optional[ParameterSet]]:
        template = self.config.build_model_template(dataset.d)
        params = self.config.resolve_parameters(template)
        if required and params is None:
            raise ConfigurationError(
                f"{self.command} needs parameters or parameters_file in the config",
                parameter="parameters",
            )
        return template, params


def _times(dataset: Dataset) -> List[np.ndarray]:
    return [s.times for s in dataset.subjects]


def _fit_summary(result: FitResult) -> Dict[str, Any]:
    return {
        "iterations": result.iterations,
        "converged": result.converged,
        "loglik": result.loglik,
        "d_em_trace": result.d_em_trace,
        "loglik_trace": result.loglik_trace,
        "objective_increases": result.objective_increases,
    }


# ==================== 指令 ====================


def cmd_simulate(ctx: RunContext) -> None:
    design = ctx.config.simulate
    if ctx.seed is not None:
        design = design.model_copy(update={"seed": ctx.seed})
    with ctx.stopwatch.measure("simulate"):
        simulated = simulate_study(design, ctx.threads)
    write_dataset(simulated.to_dataset(), ctx.out_dir / "dataset.csv")
    ctx.artifacts.append("dataset.csv")
    ctx.write(truth_frame(simulated), "truth.csv")
    ctx.write(simulated.params.to_frame(), "true_parameters.csv")
    ctx.results["design"] = design.model_dump(mode="json")


def _run_fit(ctx: RunContext, dataset: Dataset) -> Tuple[ModelTemplate, FitResult]:
    template, start = ctx.template_and_params(dataset, required=False)
    estimator = EmEstimator(template, ctx.em_config())
    with ctx.stopwatch.measure("fit"):
        result = estimator.fit(dataset, start)
    ctx.results["fit"] = _fit_summary(result)
    return template, result


def cmd_fit(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    _, result = _run_fit(ctx, dataset)
    ctx.write(result.params.to_frame(), "parameters.csv")
    ctx.write(pd.DataFrame(result.trace_rows()), "trace.csv")
    ctx.write(series_frame(result.smoothed, _times(dataset)), "series.csv")


def cmd_filter(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    template, params = ctx.template_and_params(dataset, required=True)
    model = template.build(params)
    with ctx.stopwatch.measure("filter"):
        smoothed, _ = settle_feedback(dataset, model, ctx.threads)
    filtered = [s.filtered for s in smoothed if s.filtered is not None]
    ctx.results["loglik"] = float(sum(f.loglik for f in filtered))
    ctx.write(filter_frame(filtered, _times(dataset)), "filtered.csv")


def cmd_smooth(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    template, params = ctx.template_and_params(dataset, required=True)
    model = template.build(params)
    with ctx.stopwatch.measure("smooth"):
        smoothed, _ = settle_feedback(dataset, model, ctx.threads)
    flagged = {s.subject_id: s.flagged_times for s in smoothed if s.flagged_times}
    if flagged:
        ctx.results["flagged_times"] = flagged
    ctx.write(series_frame(smoothed, _times(dataset)), "series.csv")


def cmd_predict(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    template, params = ctx.template_and_params(dataset, required=True)
    model = template.build(params)
    rows = []
    with ctx.stopwatch.measure("predict"):
        smoothed, bases = settle_feedback(dataset, model, ctx.threads)
        zeta = model.switch.zeta
        for series, out, basis in zip(dataset.subjects, smoothed, bases):
            if out.filtered is None or series.n == 0:
                continue
            z_hat = np.outer(basis, zeta)
            for t in range(series.n + 1):
                mean, prob = one_step_predict(out.filtered, model, series, z_hat, t)
                origin = int(series.times[0]) - 1 + t
                rows.append((series.subject_id, origin, mean, prob))
    ctx.write(prediction_frame(rows), "predictions.csv")


def cmd_bootstrap(ctx: RunContext) -> None:
    dataset = ctx.dataset()
    template, point = ctx.template_and_params(dataset, required=False)
    if point is None:
        template, fitted = _run_fit(ctx, dataset)
        point = fitted.params
    boot_cfg = ctx.config.bootstrap
    with ctx.stopwatch.measure("bootstrap"):
        result = run_bootstrap(
            dataset,
            template,
            point,
            B=boot_cfg.B,
            level=boot_cfg.level,
            seed=ctx.seed if ctx.seed is not None else 0,
            config=ctx.em_config(),
            threads=ctx.threads,
        )
    ctx.write(result.to_frame(), "intervals.csv")
    ctx.write(pd.DataFrame(result.replicates, columns=result.names), "replicates.csv")
    ctx.results["bootstrap"] = {
        "B": boot_cfg.B,
        "level": boot_cfg.level,
        "warm_start": True,
        "succeeded": int(result.replicates.shape[0]),
        "failures": [{"replicate": i, "reason": r} for i, r in result.failures],
    }


def cmd_bench(ctx: RunContext) -> None:
    design = ctx.config.simulate
    if ctx.seed is not None:
        design = design.model_copy(update={"seed": ctx.seed})
    with ctx.stopwatch.measure("bench"):
        result = scaling_benchmark(
            ctx.config.bench.m_grid,
            design,
            ctx.em_config(),
            repeats=ctx.config.bench.repeats,
            threads=ctx.threads,
        )
    ctx.write(result.table, "bench.csv")
    ctx.results["bench"] = result.summary()


def cmd_study(ctx: RunContext) -> None:
    design = ctx.config.simulate
    if ctx.seed is not None:
        design = design.model_copy(update={"seed": ctx.seed})
    with ctx.stopwatch.measure("study"):
        outcome = run_study(design, ctx.config.study.replications, ctx.em_config(), ctx.threads)
    ctx.write(outcome.estimates, "estimates.csv")
    ctx.write(summarize_study(outcome.estimates, outcome.truth, ctx.config.study.scale), "summary.csv")
    ctx.results["study"] = {
        "replications": ctx.config.study.replications,
        "converged": int(sum(outcome.converged)),
        "failures": outcome.failures,
    }


HANDLERS: Dict[str, Callable[[RunContext], None]] = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "filter": cmd_filter,
    "smooth": cmd_smooth,
    "predict": cmd_predict,
    "bootstrap": cmd_bootstrap,
    "bench": cmd_bench,
    "study": cmd_study,
}


# ==================== 派送 ====================


def _versions() -> Dict[str, str]:
    return {
        "mssfs": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "joblib": joblib.__version__,
    }


def _metadata(ctx: RunContext, status: str) -> Dict[str, Any]:
    return {
        "command": ctx.command,
        "status": status,
        "config": ctx.config.model_dump(mode="json"),
        "data": str(ctx.data_path) if ctx.data_path else None,
        "seed": ctx.seed,
        "threads": ctx.threads,
        "versions": _versions(),
        "timings": {k: round(v, 6) for k, v in ctx.stopwatch.timings.items()},
        "artifacts": sorted(ctx.artifacts),
        "results": ctx.results,
    }


def command_dispatch(ctx: RunContext, verbose: bool = False) -> int:
    """
    執行指令並寫出輸出檔

    Returns:
        結束代碼：成功為 0，失敗時取自異常類別
    """
    handler = HANDLERS.get(ctx.command)
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        if handler is None:
            raise ConfigurationError(f"unknown command {ctx.command!r}", parameter="command")
        logger.info("Command started", command=ctx.command, out=str(ctx.out_dir), threads=ctx.threads)
        handler(ctx)
    except MssfsError as e:
        report = get_error_report(e, verbose)
        logger.error("Command failed", command=ctx.command, **report)
        write_metadata(report, ctx.out_dir / "error.json")
        write_metadata(_metadata(ctx, "failed"), ctx.out_dir / "run_metadata.json")
        return e.exit_code

    write_metadata(_metadata(ctx, "ok"), ctx.out_dir / "run_metadata.json")
    logger.info("Command completed", command=ctx.command, artifacts=sorted(ctx.artifacts))
    return 0

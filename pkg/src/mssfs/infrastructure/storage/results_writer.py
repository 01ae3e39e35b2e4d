"""
Result tables and run metadata.

Tables are CSV written by pandas with full float precision; metadata is
pretty-printed JSON with sorted keys.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from src.mssfs.core.services.filtering import FilterOutput
from src.mssfs.core.services.simulation import SimulatedDataset
from src.mssfs.core.services.smoothing import SmootherOutput
from src.mssfs.infrastructure.storage.dataset_io import FLOAT_FORMAT

logger = structlog.get_logger()


def write_table(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", float_format=FLOAT_FORMAT)
    logger.info("Table written", path=str(path), rows=len(frame))
    return path


def _to_json(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_metadata(metadata: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(metadata, indent=2, sort_keys=True, default=_to_json) + "\n", encoding="utf-8"
    )
    return path


def _suffixes(q: int) -> List[str]:
    return [""] if q == 1 else [f"_{j + 1}" for j in range(q)]


def _filter_columns(filt: FilterOutput) -> Dict[str, Any]:
    q = filt.marg_mean.shape[1]
    columns: Dict[str, Any] = {}
    for j, sfx in enumerate(_suffixes(q)):
        columns[f"filt_mean{sfx}"] = filt.marg_mean[:, j]
        columns[f"filt_var{sfx}"] = filt.marg_cov[:, j, j]
    columns["filt_prob1"] = filt.regime_prob[:, 1]
    return columns


def filter_frame(filtered: Sequence[FilterOutput], times: Sequence[np.ndarray]) -> pd.DataFrame:
    """Per-subject filtered states and Pr(I_t = 1 | psi_t)."""
    frames = [
        pd.DataFrame({"subject_id": f.subject_id, "t": np.asarray(t), **_filter_columns(f)})
        for f, t in zip(filtered, times)
        if f.n
    ]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def series_frame(smoothed: Sequence[SmootherOutput], times: Sequence[np.ndarray]) -> pd.DataFrame:
    """Per-subject filtered and smoothed states and regime-1 probabilities."""
    frames = []
    for out, t in zip(smoothed, times):
        if out.filtered is None or out.n == 0:
            continue
        columns: Dict[str, Any] = {"subject_id": out.subject_id, "t": np.asarray(t)}
        columns.update(_filter_columns(out.filtered))
        for j, sfx in enumerate(_suffixes(out.smooth_mean.shape[1])):
            columns[f"smooth_mean{sfx}"] = out.smooth_mean[:, j]
            columns[f"smooth_var{sfx}"] = out.smooth_cov[:, j, j]
        columns["smooth_prob1"] = out.smooth_prob[:, 1]
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def prediction_frame(rows: Sequence[Tuple[str, int, np.ndarray, float]]) -> pd.DataFrame:
    """(subject_id, origin t, theta_{t+1|t}, Pr(I_{t+1}=1 | psi_t)) rows."""
    records = []
    for subject_id, t, mean, prob in rows:
        record: Dict[str, Any] = {"subject_id": subject_id, "t": t}
        for j, sfx in enumerate(_suffixes(mean.size)):
            record[f"pred_mean{sfx}"] = float(mean[j])
        record["pred_prob1"] = prob
        records.append(record)
    return pd.DataFrame(records)


def truth_frame(simulated: SimulatedDataset) -> pd.DataFrame:
    """True states and regimes of simulated subjects."""
    frames = []
    for s in simulated.subjects:
        columns: Dict[str, Any] = {"subject_id": s.series.subject_id, "time": s.series.times}
        for j, sfx in enumerate(_suffixes(s.true_states.shape[1])):
            columns[f"state{sfx}"] = s.true_states[:, j]
        columns["regime"] = s.true_regimes
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

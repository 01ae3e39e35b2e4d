"""
Long-format dataset files.

One row per (subject, time): ``subject_id``, ``time``, response columns
``y1 .. yp`` (or a single ``y``), then covariate columns. An optional
``group_id`` column ties several series (arms) to one subject. An empty response
cell is a missing value; covariates must be complete. Row numbers in error
messages are 1-based file lines (the header is line 1).
"""

import re
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd
import structlog

from src.mssfs.core.exceptions import DatasetParseError, DatasetValidationError
from src.mssfs.core.models.series import Dataset, SubjectSeries

logger = structlog.get_logger()

_RESPONSE = re.compile(r"^y\d*$")
FLOAT_FORMAT = "%.17g"


def _line(index: int) -> int:
    return int(index) + 2


def _numeric(frame: pd.DataFrame, column: str, allow_missing: bool) -> np.ndarray:
    raw = frame[column].astype(str).str.strip()
    values = pd.to_numeric(raw.where(raw != "", None), errors="coerce")
    bad = values.isna() & (raw != "")
    if bad.any():
        index = bad.idxmax()
        raise DatasetParseError(
            f"non-numeric value {raw[index]!r} in column {column}", row=_line(index)
        )
    if not allow_missing and (raw == "").any():
        index = (raw == "").idxmax()
        raise DatasetValidationError(f"missing value in column {column}", row=_line(index))
    return values.to_numpy(dtype=float)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Parse a long-format CSV into a Dataset.

    Subjects keep their order of first appearance; rows within a subject are
    sorted by time. Gaps in the time index become fully missing rows whose
    covariates repeat the previous row.

    Raises:
        DatasetParseError: unreadable file, missing columns, non-numeric cells,
            duplicate (subject, time), more than one group per subject
        DatasetValidationError: incomplete covariates, empty subject_id
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetParseError(f"cannot read dataset {path}: {e}") from e

    frame.columns = [str(c).strip() for c in frame.columns]
    for required in ("subject_id", "time"):
        if required not in frame.columns:
            raise DatasetParseError(f"dataset is missing the {required!r} column")
    responses = [c for c in frame.columns if _RESPONSE.match(c)]
    if not responses:
        raise DatasetParseError("dataset has no response column (y or y1, y2, ...)")
    reserved = ("subject_id", "group_id", "time", *responses)
    covariates = [c for c in frame.columns if c not in reserved]

    times = _numeric(frame, "time", allow_missing=False)
    non_integer = np.flatnonzero(times != np.round(times))
    if non_integer.size:
        raise DatasetParseError("time must be an integer", row=_line(non_integer[0]))
    y = np.column_stack([_numeric(frame, c, allow_missing=True) for c in responses])
    x = (
        np.column_stack([_numeric(frame, c, allow_missing=False) for c in covariates])
        if covariates
        else np.zeros((len(frame), 0))
    )

    ids = frame["subject_id"].str.strip()
    empty_id = np.flatnonzero((ids == "").to_numpy())
    if empty_id.size:
        raise DatasetValidationError("empty subject_id", row=_line(empty_id[0]))
    keys = pd.DataFrame({"subject_id": ids, "time": times.astype(int)})
    duplicated = keys.duplicated(keep="first").to_numpy()
    if duplicated.any():
        index = int(np.flatnonzero(duplicated)[0])
        raise DatasetParseError(
            f"duplicate (subject_id, time) = ({ids.iloc[index]}, {int(times[index])})",
            row=_line(index),
        )

    groups = frame["group_id"].str.strip() if "group_id" in frame.columns else ids

    subjects: List[SubjectSeries] = []
    for subject_id in pd.unique(ids):
        rows = np.flatnonzero((ids == subject_id).to_numpy())
        labels = groups.iloc[rows]
        if labels.nunique() > 1:
            index = int(rows[np.flatnonzero((labels != labels.iloc[0]).to_numpy())[0]])
            raise DatasetParseError(
                f"subject {subject_id} has more than one group_id", row=_line(index)
            )
        rows = rows[np.argsort(times[rows], kind="stable")]
        t = times[rows].astype(int)
        full = np.arange(t[0], t[-1] + 1)
        position = t - t[0]
        y_full = np.full((full.size, len(responses)), np.nan)
        y_full[position] = y[rows]
        x_full = np.empty((full.size, len(covariates)))
        filled = np.zeros(full.size, dtype=bool)
        filled[position] = True
        x_full[position] = x[rows]
        for i in range(full.size):
            if not filled[i]:
                x_full[i] = x_full[i - 1]
        if full.size != t.size:
            logger.info("Filled time gaps", subject_id=subject_id, added=int(full.size - t.size))
        subjects.append(
            SubjectSeries(
                subject_id=str(subject_id),
                y=y_full,
                covariates=x_full,
                times=full,
                group_id=str(labels.iloc[0]) or None,
            )
        )

    dataset = Dataset(
        subjects=tuple(subjects),
        response_names=tuple(responses),
        covariate_names=tuple(covariates),
    )
    logger.info(
        "Dataset loaded",
        path=str(path),
        subjects=len(dataset),
        responses=len(responses),
        covariates=covariates,
    )
    return dataset


def dataset_frame(dataset: Dataset) -> pd.DataFrame:
    """Long-format frame of a dataset (inverse of ``load_dataset``)."""
    grouped = any(s.group_id != s.subject_id for s in dataset.subjects)
    columns: Dict[str, list] = {"subject_id": []}
    if grouped:
        columns["group_id"] = []
    columns["time"] = []
    for name in (*dataset.response_names, *dataset.covariate_names):
        columns[name] = []
    for s in dataset.subjects:
        columns["subject_id"].extend([s.subject_id] * s.n)
        if grouped:
            columns["group_id"].extend([s.group_id] * s.n)
        columns["time"].extend(s.times.tolist())
        for j, name in enumerate(dataset.response_names):
            columns[name].extend(s.y[:, j].tolist())
        for j, name in enumerate(dataset.covariate_names):
            columns[name].extend(s.covariates[:, j].tolist())
    return pd.DataFrame(columns)


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(dataset).to_csv(path, index=False, na_rep="", float_format=FLOAT_FORMAT)
    return path

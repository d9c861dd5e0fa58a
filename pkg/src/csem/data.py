"""Reading raw data or covariance matrices into sample moments."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import MissingColumn, NonNumericCell, TooFewRows, UserError
from .estimator import SampleMoments

MISSING_TOKENS = ("NA", "")


@dataclass(frozen=True)
class DataInput:
    """Where the data come from and how to preprocess them.

    ``kind`` is ``"csv"`` for raw data or ``"cov"`` for a covariance matrix
    (with ``n``).  ``columns`` maps model variable names to file columns
    when they differ.
    """

    path: str
    kind: str = "csv"
    n: int | None = None
    standardize: bool = False
    missing_policy: str = "listwise"
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("csv", "cov"):
            raise UserError(f"unknown data kind {self.kind!r}")
        if self.missing_policy not in ("listwise", "fail"):
            raise UserError(f"unknown missing-data policy {self.missing_policy!r}")
        if self.kind == "cov" and (self.n is None or self.n < 2):
            raise UserError("covariance input needs the sample size n")


@dataclass
class LoadedData:
    moments: SampleMoments
    data: pd.DataFrame | None
    n_total: int
    n_dropped: int
    standardized: bool


def _read(path: str, **kw) -> pd.DataFrame:
    if not os.path.exists(path):
        raise UserError(f"no such file: {path}")
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, **kw)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc


def _numeric(frame: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    out = {}
    for col in columns:
        raw = frame[col].str.strip()
        missing = raw.isin(MISSING_TOKENS)
        values = pd.to_numeric(raw.where(~missing), errors="coerce")
        bad = values.isna() & ~missing
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            # rows are reported 1-based, counting data rows after the header
            raise NonNumericCell(i + 1, col, frame[col].iloc[i])
        out[col] = values.astype(float)
    return pd.DataFrame(out, index=frame.index)


def zscore(frame: pd.DataFrame) -> pd.DataFrame:
    """Centre and scale each column by its sample SD (divisor n - 1)."""
    sd = frame.std(ddof=1)
    if (sd <= 0).any():
        raise UserError(f"column {sd[sd <= 0].index[0]!r} has zero variance")
    return (frame - frame.mean()) / sd


def load_csv(path: str, variables: Sequence[str], *, standardize: bool = False,
             missing_policy: str = "listwise", columns: dict | None = None) -> LoadedData:
    frame = _read(path)
    columns = columns or {}
    wanted = [columns.get(v, v) for v in variables]
    absent = [c for c in wanted if c not in frame.columns]
    if absent:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(absent)}")
    values = _numeric(frame, wanted)
    values.columns = list(variables)
    complete = values.notna().all(axis=1)
    n_total = len(values)
    if missing_policy == "fail" and not complete.all():
        raise UserError(f"{path}: {int((~complete).sum())} row(s) with missing values")
    values = values[complete].reset_index(drop=True)
    p = len(variables)
    if len(values) < p + 1:
        raise TooFewRows(f"{path}: {len(values)} complete rows for {p} variables (need at least {p + 1})")
    if standardize:
        values = zscore(values)
    moments = SampleMoments.from_data(values.to_numpy(), list(variables))
    return LoadedData(moments, values, n_total, n_total - len(values), standardize)


def load_covariance(path: str, n: int, variables: Sequence[str],
                    columns: dict | None = None) -> LoadedData:
    """Covariance matrix CSV with a header row; an optional first column of row names."""
    frame = _read(path)
    if len(frame.columns) == len(frame) + 1:
        frame = frame.set_index(frame.columns[0])
    if len(frame.columns) != len(frame):
        raise UserError(f"{path}: covariance matrix is not square ({len(frame)} x {len(frame.columns)})")
    names = [str(c).strip() for c in frame.columns]
    frame.columns = names
    values = _numeric(frame, names).to_numpy()
    if np.isnan(values).any():
        raise UserError(f"{path}: covariance matrix has missing entries")
    columns = columns or {}
    wanted = [columns.get(v, v) for v in variables]
    absent = [c for c in wanted if c not in names]
    if absent:
        raise MissingColumn(f"{path}: covariance matrix lacks {', '.join(absent)}")
    idx = [names.index(c) for c in wanted]
    cov = values[np.ix_(idx, idx)]
    if n < len(variables) + 1:
        raise TooFewRows(f"n = {n} is too small for {len(variables)} variables")
    moments = SampleMoments.from_covariance(cov, n, list(variables))
    return LoadedData(moments, None, n, 0, False)


def load(spec: DataInput, variables: Sequence[str]) -> LoadedData:
    """Sample moments (and the cleaned data, for raw input) for ``variables``."""
    if spec.kind == "cov":
        return load_covariance(spec.path, spec.n, variables, spec.columns)
    return load_csv(spec.path, variables, standardize=spec.standardize,
                    missing_policy=spec.missing_policy, columns=spec.columns)

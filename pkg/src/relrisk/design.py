"""Data ingestion, validation and design matrices.

A design is described by an ordered list of terms. A term is a column name
or several names joined by ``:``, which denotes their elementwise product
(an interaction). Transformations other than products are left to the user.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import DataError, SpecError

INTERCEPT = "intercept"


@dataclass(frozen=True)
class Dataset:
    """Binary outcome ``y``, binary exposure ``a`` and named covariate columns."""

    y: np.ndarray
    a: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y)
        a = np.asarray(self.a)
        if y.ndim != 1 or a.shape != y.shape:
            raise DataError("y and a must be 1-d vectors of equal length")
        for name, vec in (("outcome", y), ("exposure", a)):
            bad = np.flatnonzero(~np.isin(vec, (0, 1)))
            if bad.size:
                raise DataError(f"non-binary {name}, row {bad[0] + 1}")
        cov = {}
        for key, col in self.covariates.items():
            col = np.asarray(col, dtype=float)
            if col.shape != y.shape:
                raise DataError(f"covariate {key!r} has {col.size} rows, expected {y.size}")
            missing = np.flatnonzero(~np.isfinite(col))
            if missing.size:
                raise DataError(f"missing value in column {key!r}, row {missing[0] + 1}")
            col.setflags(write=False)
            cov[key] = col
        y = y.astype(float)
        a = a.astype(float)
        y.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "covariates", cov)

    @property
    def n(self) -> int:
        return int(self.y.size)

    def take(self, index) -> "Dataset":
        """Row subset (or resample) by integer index."""
        index = np.asarray(index)
        return Dataset(self.y[index], self.a[index],
                       {k: v[index] for k, v in self.covariates.items()})

    def to_frame(self, y_col="y", a_col="a") -> pd.DataFrame:
        df = pd.DataFrame({y_col: self.y.astype(int), a_col: self.a.astype(int)})
        for k, v in self.covariates.items():
            df[k] = v
        return df


@dataclass(frozen=True)
class DesignSpec:
    """Ordered term list plus an intercept flag."""

    terms: tuple[str, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        terms = tuple(self.terms) if not isinstance(self.terms, str) else (self.terms,)
        for t in terms:
            if not t or any(not part.strip() for part in t.split(":")):
                raise SpecError(f"malformed term {t!r}")
        object.__setattr__(self, "terms", tuple(":".join(p.strip() for p in t.split(":"))
                                                for t in terms))

    @classmethod
    def parse(cls, text: str | Sequence[str] | None, intercept: bool = True) -> "DesignSpec":
        """Build from ``"x1,x2,x1:x2"`` or a list of terms."""
        if text is None:
            return cls((), intercept)
        if isinstance(text, str):
            items = [t.strip() for t in text.split(",") if t.strip()]
        else:
            items = list(text)
        return cls(tuple(items), intercept)

    def columns(self) -> set[str]:
        return {part for t in self.terms for part in t.split(":")}

    @property
    def column_names(self) -> list[str]:
        return ([INTERCEPT] if self.intercept else []) + list(self.terms)

    @property
    def size(self) -> int:
        return len(self.terms) + int(self.intercept)

    def to_dict(self) -> dict:
        return {"terms": list(self.terms), "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesignSpec":
        return cls(tuple(d.get("terms", ())), bool(d.get("intercept", True)))


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: list[str]

    @property
    def shape(self):
        return self.values.shape


def build_design(data: Dataset | Mapping[str, np.ndarray], spec: DesignSpec,
                 n: int | None = None) -> DesignMatrix:
    """Evaluate ``spec`` on the covariates of ``data``.

    ``data`` may also be a plain mapping of covariate columns (used for
    prediction on new covariate tables); ``n`` is then inferred from the
    columns, or must be given when the spec has no terms.
    """
    if isinstance(data, Dataset):
        cols, n = data.covariates, data.n
    else:
        cols = {k: np.asarray(v, dtype=float) for k, v in data.items()}
        if n is None:
            n = len(next(iter(cols.values()))) if cols else None
    missing = sorted(spec.columns() - set(cols))
    if missing:
        raise SpecError(f"unknown column(s) in design: {', '.join(missing)}")
    if n is None:
        raise SpecError("cannot infer row count for a design without terms")
    out = []
    if spec.intercept:
        out.append(np.ones(n))
    for term in spec.terms:
        col = np.ones(n)
        for part in term.split(":"):
            col = col * cols[part]
        out.append(col)
    values = np.column_stack(out) if out else np.empty((n, 0))
    values.setflags(write=False)
    return DesignMatrix(values, spec.column_names)


def load_csv(path: str | Path, y_col: str, a_col: str,
             columns: Sequence[str] | None = None) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    All columns other than ``y_col`` and ``a_col`` become covariates unless
    ``columns`` restricts them. Rows are numbered from 1 in error messages
    (header excluded).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        df = pd.read_csv(path, encoding="utf-8", skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    for c in (y_col, a_col):
        if c not in df.columns:
            raise DataError(f"column {c!r} not found in {path}")
    keep = [c for c in df.columns if c not in (y_col, a_col)] if columns is None else list(columns)
    for c in keep:
        if c not in df.columns:
            raise DataError(f"column {c!r} not found in {path}")

    na = df[[y_col, a_col, *keep]].isna()
    if na.to_numpy().any():
        r, c = np.argwhere(na.to_numpy())[0]
        raise DataError(f"missing value in column {na.columns[c]!r}, row {r + 1}")

    def numeric(c):
        vals = pd.to_numeric(df[c], errors="coerce")
        bad = np.flatnonzero(vals.isna().to_numpy())
        if bad.size:
            raise DataError(f"non-numeric value {df[c].iloc[bad[0]]!r} in column {c!r}, row {bad[0] + 1}")
        return vals.to_numpy(dtype=float)

    y, a = numeric(y_col), numeric(a_col)
    for label, c, vec in (("outcome", y_col, y), ("exposure", a_col, a)):
        bad = np.flatnonzero(~np.isin(vec, (0.0, 1.0)))
        if bad.size:
            raise DataError(f"non-binary {label}, row {bad[0] + 1} (column {c!r})")
    return Dataset(y, a, {c: numeric(c) for c in keep})


def load_covariates(path: str | Path) -> dict[str, np.ndarray]:
    """Covariate-only CSV, used for prediction."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    df = pd.read_csv(path, encoding="utf-8", skipinitialspace=True)
    if df.isna().to_numpy().any():
        r, c = np.argwhere(df.isna().to_numpy())[0]
        raise DataError(f"missing value in column {df.columns[c]!r}, row {r + 1}")
    return {c: pd.to_numeric(df[c]).to_numpy(dtype=float) for c in df.columns}

"""Datasets with missing covariates, missingness patterns and CSV I/O.

A missing cell is represented twice: ``mask[i, j] == 1`` and ``x[i, j]`` is NaN.
NaN propagates through arithmetic, so a missing entry that leaks into a
computation poisons the result instead of silently acting as zero.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MAX_COLUMNS = 63


class DataError(ValueError):
    """Raised for malformed datasets and unreadable CSV input."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response vector, covariates with gaps and the missingness mask.

    Parameters
    ----------
    y : array, shape (n,)
        Fully observed response.
    x : array, shape (n, p)
        Covariates. Entries where ``mask`` is set are stored as NaN.
    mask : array, shape (n, p)
        1 where the covariate is missing.
    col_names : sequence of str
        Covariate names, length p.
    response_name : str
    """

    y: np.ndarray
    x: np.ndarray
    mask: np.ndarray
    col_names: tuple[str, ...]
    response_name: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        mask = np.asarray(self.mask)
        if x.ndim == 1 and x.size == 0:
            x = x.reshape(0, len(self.col_names))
        if mask.ndim == 1 and mask.size == 0:
            mask = mask.reshape(x.shape)
        if x.ndim != 2:
            raise DataError("x must be a 2-d matrix")
        if mask.shape != x.shape:
            raise DataError(f"mask shape {mask.shape} does not match x shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise DataError(f"y has {y.shape[0]} rows but x has {x.shape[0]}")
        if not np.isin(mask, (0, 1)).all():
            raise DataError("mask entries must be 0 or 1")
        if x.shape[1] > MAX_COLUMNS:
            raise DataError(f"at most {MAX_COLUMNS} covariates are supported, got {x.shape[1]}")
        if len(self.col_names) != x.shape[1]:
            raise DataError("col_names length does not match the number of columns")
        if np.isnan(y).any():
            raise DataError(f"response is missing on row {int(np.flatnonzero(np.isnan(y))[0])}")
        mask = mask.astype(np.uint8)
        x = np.where(mask == 1, np.nan, x)
        if np.isnan(x[mask == 0]).any():
            i, j = np.argwhere(np.isnan(x) & (mask == 0))[0]
            raise DataError(f"row {i}, column {self.col_names[j]!r} is NaN but not flagged missing")
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "col_names", tuple(str(c) for c in self.col_names))

    @classmethod
    def from_arrays(cls, y, x, mask=None, col_names=None, response_name="y") -> "Dataset":
        """Build a dataset; when ``mask`` is omitted NaN cells in ``x`` are treated as missing."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if mask is None:
            mask = np.isnan(x).astype(np.uint8)
        if col_names is None:
            col_names = [f"x{j + 1}" for j in range(x.shape[1])]
        return cls(y=y, x=x, mask=mask, col_names=tuple(col_names), response_name=response_name)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.y[rows], self.x[rows], self.mask[rows], self.col_names, self.response_name)

    def pattern_ids(self) -> np.ndarray:
        return pattern_ids(self.mask)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.col_names == other.col_names
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x, equal_nan=True)
        )


def pattern_of(mask_row: Sequence[int]) -> int:
    """Pattern id of a mask row: bit j is set when covariate j is missing."""
    row = np.asarray(mask_row).reshape(-1)
    if row.size > MAX_COLUMNS:
        raise DataError(f"at most {MAX_COLUMNS} covariates are supported")
    pid = 0
    for j in np.flatnonzero(row):
        pid |= 1 << int(j)
    return pid


def pattern_ids(mask: np.ndarray) -> np.ndarray:
    """Vectorised :func:`pattern_of` over the rows of ``mask``."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.ndim != 2:
        raise DataError("mask must be 2-d")
    if mask.shape[1] > MAX_COLUMNS:
        raise DataError(f"at most {MAX_COLUMNS} covariates are supported")
    weights = np.left_shift(np.int64(1), np.arange(mask.shape[1], dtype=np.int64))
    return mask @ weights


def observed_columns(pid: int, p: int) -> tuple[int, ...]:
    """Covariate indices observed under pattern ``pid`` (bit clear), ascending."""
    return tuple(j for j in range(p) if not (pid >> j) & 1)


def missing_columns(pid: int, p: int) -> tuple[int, ...]:
    return tuple(j for j in range(p) if (pid >> j) & 1)


def mask_of(pid: int, p: int) -> np.ndarray:
    return np.array([(pid >> j) & 1 for j in range(p)], dtype=np.uint8)


def pattern_label(pid: int, p: int) -> str:
    """Bit string with column 0 first, e.g. ``"10"`` for x1 missing out of two."""
    return "".join(str((pid >> j) & 1) for j in range(p))


@dataclass(frozen=True)
class PatternIndex:
    """Partition of row indices by missingness pattern, iterated in id order."""

    groups: dict[int, np.ndarray] = field(default_factory=dict)

    def __iter__(self):
        return iter(sorted(self.groups))

    def __len__(self):
        return len(self.groups)

    def __getitem__(self, pid: int) -> np.ndarray:
        return self.groups[pid]

    def __contains__(self, pid: int) -> bool:
        return pid in self.groups

    def sizes(self) -> dict[int, int]:
        return {pid: int(self.groups[pid].size) for pid in self}

    @property
    def n(self) -> int:
        return int(sum(g.size for g in self.groups.values()))


def partition_mask(mask: np.ndarray) -> PatternIndex:
    ids = pattern_ids(mask) if len(mask) else np.zeros(0, dtype=np.int64)
    groups = {}
    for pid in np.unique(ids):
        groups[int(pid)] = _readonly(np.flatnonzero(ids == pid))
    return PatternIndex(groups)


def partition(ds: Dataset) -> PatternIndex:
    """Group the rows of ``ds`` by missingness pattern."""
    return partition_mask(ds.mask)


# -- CSV --------------------------------------------------------------------


def _format(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else str(v)


def load_records(path, col_names: Iterable[str] | None = None, na_token: str = "NA"):
    """Read covariate columns (no response) from a CSV file.

    Returns ``(x, mask, header)`` where ``header`` is the selected column order.
    Extra columns are ignored when ``col_names`` is given.
    """
    header, rows = _read_rows(path)
    names = list(header) if col_names is None else list(col_names)
    missing = [c for c in names if c not in header]
    if missing:
        raise DataError(f"{path}: columns not found: {', '.join(missing)}")
    idx = [header.index(c) for c in names]
    x = np.full((len(rows), len(names)), np.nan)
    mask = np.zeros((len(rows), len(names)), dtype=np.uint8)
    for i, row in enumerate(rows):
        for out_j, j in enumerate(idx):
            cell = row[j].strip()
            if cell == na_token:
                mask[i, out_j] = 1
            else:
                x[i, out_j] = _parse(cell, path, i, names[out_j])
    return x, mask, names


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise DataError(f"{path}: empty file, header row expected")
    header = [h.strip() for h in header]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"{path}: data row {i} has {len(r)} fields, header has {len(header)}")
    return header, rows


def _parse(cell, path, i, name):
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}: data row {i}, column {name!r}: non-numeric value {cell!r}") from None


def load_csv(path, response: str, na_token: str = "NA") -> Dataset:
    """Load a dataset; ``response`` names the outcome column, all others are covariates."""
    header, rows = _read_rows(path)
    if response not in header:
        raise DataError(f"{path}: response column {response!r} not in header")
    r = header.index(response)
    cov = [j for j in range(len(header)) if j != r]
    y = np.empty(len(rows))
    x = np.full((len(rows), len(cov)), np.nan)
    mask = np.zeros((len(rows), len(cov)), dtype=np.uint8)
    for i, row in enumerate(rows):
        cell = row[r].strip()
        if cell == na_token:
            raise DataError(f"{path}: response {response!r} missing on data row {i}")
        y[i] = _parse(cell, path, i, response)
        for out_j, j in enumerate(cov):
            cell = row[j].strip()
            if cell == na_token:
                mask[i, out_j] = 1
            else:
                x[i, out_j] = _parse(cell, path, i, header[j])
    return Dataset(y, x, mask, tuple(header[j] for j in cov), response)


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_csv(ds: Dataset, na_token: str = "NA", response_first: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(ds.col_names)
    w.writerow([ds.response_name, *names] if response_first else [*names, ds.response_name])
    for i in range(ds.n):
        cells = [na_token if ds.mask[i, j] else _format(ds.x[i, j]) for j in range(ds.p)]
        yv = _format(ds.y[i])
        w.writerow([yv, *cells] if response_first else [*cells, yv])
    return buf.getvalue()


def save_csv(ds: Dataset, path, na_token: str = "NA") -> None:
    """Write ``ds`` with the response as the first column.

    Floats are written with ``repr`` (shortest round-tripping form, at most 17
    significant digits), so a load/save/load cycle is bit-exact.
    """
    atomic_write_text(path, dataset_to_csv(ds, na_token))

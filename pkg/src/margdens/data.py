"""CSV dataset ingestion with a missingness mask."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

# Cell contents treated as missing when no explicit token is given.
DEFAULT_MISSING_TOKENS = ("", "NA")


@dataclass
class Dataset:
    """Row-major real matrix plus a parallel missingness mask.

    mask True means the stored value (0.0) is a placeholder and the
    coordinate is treated as missing.  Every row must keep at least one
    observed entry; fully masked rows are rejected.
    """

    values: np.ndarray
    mask: np.ndarray
    columns: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ValueError("values and mask must be matching 2-D arrays")
        if len(self.columns) != self.values.shape[1]:
            raise ValueError("column count does not match data width")
        fully_missing = self.mask.all(axis=1)
        if fully_missing.any():
            raise ValueError("row %d fully missing"
                             % int(np.flatnonzero(fully_missing)[0]))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def complete_rows(self) -> np.ndarray:
        """Rows without any missing entry."""
        return self.values[~self.mask.any(axis=1)]


def load_csv(path, missing_token: str | None = None) -> Dataset:
    """Parse a headered CSV into a Dataset.

    Cells equal to the missing token (by default the empty string or
    "NA") set the mask; ragged rows, unparseable cells, and fully
    missing rows are rejected with the offending position.
    """
    tokens = DEFAULT_MISSING_TOKENS if missing_token is None else (missing_token,)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty file: %s" % path) from None
        width = len(header)
        values: list[list[float]] = []
        mask: list[list[bool]] = []
        for r, row in enumerate(reader):
            if len(row) != width:
                raise ValueError("row %d has %d cells, expected %d"
                                 % (r, len(row), width))
            vals, miss = [], []
            for c, cell in enumerate(row):
                cell = cell.strip()
                if cell in tokens:
                    vals.append(0.0)
                    miss.append(True)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError("unparseable cell at row %d, column %d"
                                     % (r, c)) from None
                if not np.isfinite(v):
                    raise ValueError("non-finite value at row %d, column %d"
                                     % (r, c))
                vals.append(v)
                miss.append(False)
            if all(miss):
                raise ValueError("row %d fully missing" % r)
            values.append(vals)
            mask.append(miss)
    shape = (len(values), width)
    return Dataset(values=np.array(values, dtype=np.float64).reshape(shape),
                   mask=np.array(mask, dtype=bool).reshape(shape),
                   columns=[h.strip() for h in header])


def write_csv(path, array, header) -> None:
    """Write a numeric matrix with 17 significant digits per value, so a
    float64 round-trips exactly through load_csv."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in arr:
            writer.writerow(["%.17g" % v for v in row])

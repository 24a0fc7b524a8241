"""Sorption measurements: replicate aggregation, CSV I/O and the bundled table."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .models import OMEGA_A, ActivityDomain

COLUMNS = ("activity", "moisture", "uncertainty_total", "uncertainty_random",
           "uncertainty_systematic")
DELTA_SYSTEMATIC = 1e-7


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, msg: str, line: int, column: int | None = None):
        where = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{where}: {msg}")
        self.line = line
        self.column = column


class InvariantError(DatasetError):
    def __init__(self, msg: str, row: int | None = None):
        super().__init__(msg if row is None else f"row {row}: {msg}")
        self.row = row


class UncertaintyWarning(UserWarning):
    """Total uncertainty smaller than its random component."""


class SingleReplicateWarning(UserWarning):
    pass


class MissingColumnWarning(UserWarning):
    pass


def _frozen(x) -> np.ndarray:
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class SorptionDataset:
    activity: np.ndarray
    moisture: np.ndarray
    delta: np.ndarray
    delta_random: np.ndarray
    delta_sys: np.ndarray
    name: str = field(default="", compare=False)

    def __post_init__(self):
        for f in ("activity", "moisture", "delta", "delta_random", "delta_sys"):
            object.__setattr__(self, f, _frozen(np.ravel(getattr(self, f))))
        self.validate()

    def validate(self):
        n = self.activity.size
        for f in ("moisture", "delta", "delta_random", "delta_sys"):
            if getattr(self, f).size != n:
                raise InvariantError(f"column {f} has {getattr(self, f).size} entries, expected {n}")
        cols = np.vstack([self.activity, self.moisture, self.delta, self.delta_random, self.delta_sys])
        bad = np.flatnonzero(~np.all(np.isfinite(cols), axis=0))
        if bad.size:
            raise InvariantError("non-finite value", int(bad[0]))
        bad = np.flatnonzero(np.diff(self.activity) <= 0)
        if bad.size:
            raise InvariantError("activity not strictly increasing", int(bad[0]) + 1)
        bad = np.flatnonzero((self.activity < 0) | (self.activity >= 1))
        if bad.size:
            raise InvariantError("activity outside [0, 1)", int(bad[0]))
        bad = np.flatnonzero(self.moisture < 0)
        if bad.size:
            raise InvariantError("negative moisture content", int(bad[0]))
        bad = np.flatnonzero((self.delta < 0) | (self.delta_random < 0) | (self.delta_sys < 0))
        if bad.size:
            raise InvariantError("negative uncertainty", int(bad[0]))
        for i in np.flatnonzero(self.delta ** 2 < self.delta_random ** 2):
            warnings.warn(f"row {i} (a={self.activity[i]}): total uncertainty "
                          f"{self.delta[i]} below random uncertainty {self.delta_random[i]}",
                          UncertaintyWarning, stacklevel=3)

    def __len__(self) -> int:
        return self.activity.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, SorptionDataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("activity", "moisture", "delta", "delta_random", "delta_sys"))

    def restrict(self, domain: ActivityDomain = OMEGA_A) -> "SorptionDataset":
        """Rows with activity inside ``domain`` (the analysis subset)."""
        keep = (self.activity >= domain.lo) & (self.activity <= domain.hi)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UncertaintyWarning)
            return SorptionDataset(self.activity[keep], self.moisture[keep], self.delta[keep],
                                   self.delta_random[keep], self.delta_sys[keep], self.name)

    def rows(self):
        return zip(self.activity, self.moisture, self.delta, self.delta_random, self.delta_sys)


# --------------------------------------------------------------------------
# replicates
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicateSet:
    """``N_e`` moisture series measured on one shared activity grid."""

    activity: np.ndarray
    series: tuple[np.ndarray, ...]

    @classmethod
    def from_arrays(cls, activity, series) -> "ReplicateSet":
        act = np.asarray(activity, dtype=float)
        return cls(act, tuple(np.asarray(s, dtype=float) for s in series))


def aggregate_replicates(r: ReplicateSet, delta_sys: float = DELTA_SYSTEMATIC) -> SorptionDataset:
    """Best estimate and uncertainty decomposition from replicate series.

    ``delta_random = sqrt(mean((u_i - u_mean)^2) / N_e)`` (population variance)
    and ``delta = sqrt(delta_random^2 + delta_sys^2)``.
    """
    n_e = len(r.series)
    if n_e == 0:
        raise DatasetError("no replicates (N_e = 0)")
    for k, s in enumerate(r.series):
        if s.shape != r.activity.shape:
            raise DatasetError(f"replicate {k} has {s.size} readings on a grid of {r.activity.size}")
    if n_e == 1:
        warnings.warn("single replicate: random uncertainty is zero by construction",
                      SingleReplicateWarning, stacklevel=2)
    U = np.sort(np.vstack(r.series), axis=0)  # sorted so the sums are order-independent
    # shifted mean: identical replicates give exactly zero spread
    u_hat = U[0] + (U - U[0]).mean(axis=0)
    d_rand = np.sqrt(np.mean((U - u_hat) ** 2, axis=0) / n_e)
    d_tot = np.sqrt(d_rand ** 2 + delta_sys ** 2)
    return SorptionDataset(r.activity, u_hat, d_tot, d_rand, np.full_like(u_hat, delta_sys))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def _parse(text: str, source: str) -> SorptionDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{source} is empty", 1) from None
    header = [h.strip() for h in header]
    if not any(header):
        raise ParseError("empty header", 1)
    unknown = [h for h in header if h not in COLUMNS]
    if unknown:
        raise ParseError(f"unknown column {unknown[0]!r}", 1, header.index(unknown[0]) + 1)
    if len(set(header)) != len(header):
        raise ParseError("duplicate column", 1)
    for req in COLUMNS[:2]:
        if req not in header:
            raise ParseError(f"missing required column {req!r}", 1)
    missing = [c for c in COLUMNS[2:] if c not in header]
    if missing:
        warnings.warn(f"{source}: columns {', '.join(missing)} missing, filled with 0",
                      MissingColumnWarning, stacklevel=3)
    data = {c: [] for c in COLUMNS}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        for col, (name, cell) in enumerate(zip(header, row), start=1):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} as a number", lineno, col) from None
            data[name].append(v)
    n = len(data["activity"])
    if n == 0:
        raise ParseError(f"{source} has no data rows", 2)
    for c in missing:
        data[c] = [0.0] * n
    return SorptionDataset(*(data[c] for c in COLUMNS), name=source)


def load_dataset(path, format: str = "csv") -> SorptionDataset:
    if format != "csv":
        raise DatasetError(f"unsupported format {format!r}")
    path = Path(path)
    return _parse(path.read_text(encoding="utf-8"), str(path))


def dumps_dataset(ds: SorptionDataset) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in ds.rows():
        w.writerow([repr(float(v)) for v in row])
    return out.getvalue()


def save_dataset(ds: SorptionDataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(ds), encoding="utf-8", newline="\n")
    return path


def bundled_table1() -> SorptionDataset:
    """The 21-row best-estimate table shipped with the package."""
    text = resources.files("sorpfit").joinpath("data", "table1.csv").read_text(encoding="utf-8")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UncertaintyWarning)
        return _parse(text, "bundled:table1")


def resolve_dataset(spec: str) -> SorptionDataset:
    """Load ``bundled:table1`` or a CSV path."""
    if spec.startswith("bundled:"):
        if spec != "bundled:table1":
            raise DatasetError(f"unknown bundled dataset {spec!r}")
        return bundled_table1()
    return load_dataset(spec)


def uncertainty_norm(ds: SorptionDataset) -> float:
    """``sqrt(sum delta_i^2)`` over every row."""
    return math.sqrt(float(np.sum(ds.delta ** 2)))

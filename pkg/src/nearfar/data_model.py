"""Case records, delimited-file ingestion and the analysis-population filters."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

COLUMNS = (
    "case_id", "judge_id", "region", "top_charge", "crime_type", "charge_class",
    "gender", "age", "race_white", "race_black", "non_hispanic",
    "prior_counts_2014", "weekly_income", "any_income", "has_employer",
    "has_phone", "has_address", "bail_set", "guilty", "disposed_at_arraignment",
    "excluded_reason",
)
BINARY_COLUMNS = (
    "race_white", "race_black", "non_hispanic", "any_income", "has_employer",
    "has_phone", "has_address", "bail_set", "disposed_at_arraignment",
)
CRIME_TYPES = ("felony", "misdemeanor")
EXCLUSION_REASONS = ("extradited", "special_court", "irregular")

# filter names, in the order they are applied
FILTERS = ("excluded_reason", "disposed_at_arraignment", "unresolved_outcome")


class DataError(ValueError):
    """Base class for input-data problems."""


class SchemaError(DataError):
    """The header is missing required columns."""

    def __init__(self, missing: Sequence[str]):
        self.missing = tuple(missing)
        super().__init__("missing required column(s): " + ", ".join(self.missing))


class RowError(DataError):
    """One or more data rows could not be parsed; ``problems`` lists them all."""

    def __init__(self, problems: Sequence[tuple[int, str, str]]):
        self.problems = tuple(problems)
        lines = [f"line {line}: {col}: {msg}" for line, col, msg in self.problems]
        super().__init__(f"{len(self.problems)} malformed value(s)\n" + "\n".join(lines))


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    judge_id: str
    region: str
    top_charge: str
    crime_type: str
    charge_class: str
    gender: str
    age: float
    race_white: int
    race_black: int
    non_hispanic: int
    prior_counts_2014: int
    weekly_income: float
    any_income: int
    has_employer: int
    has_phone: int
    has_address: int
    bail_set: int
    guilty: Optional[int]
    disposed_at_arraignment: int = 0
    excluded_reason: Optional[str] = None

    def __post_init__(self):
        problems = _record_problems(self)
        if problems:
            raise ValueError(f"case {self.case_id!r}: " + "; ".join(
                f"{col}: {msg}" for col, msg in problems))

    @property
    def is_male(self) -> int:
        return int(self.gender.strip().lower() in ("m", "male"))


def _record_problems(rec: CaseRecord) -> list[tuple[str, str]]:
    out = []
    for col in BINARY_COLUMNS:
        if getattr(rec, col) not in (0, 1):
            out.append((col, "must be 0 or 1"))
    if rec.guilty is not None and rec.guilty not in (0, 1):
        out.append(("guilty", "must be 0, 1 or empty"))
    if rec.crime_type not in CRIME_TYPES:
        out.append(("crime_type", f"must be one of {CRIME_TYPES}"))
    if rec.excluded_reason is not None and rec.excluded_reason not in EXCLUSION_REASONS:
        out.append(("excluded_reason", f"must be empty or one of {EXCLUSION_REASONS}"))
    if not (rec.age >= 0):
        out.append(("age", "must be non-negative"))
    if not (rec.weekly_income >= 0):
        out.append(("weekly_income", "must be non-negative"))
    if rec.prior_counts_2014 < 0:
        out.append(("prior_counts_2014", "must be non-negative"))
    if rec.any_income != int(rec.weekly_income > 0):
        out.append(("any_income", "must be 1 exactly when weekly_income > 0"))
    return out


def _parse_binary(s: str) -> int:
    if s not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {s!r}")
    return int(s)


def _parse_float(s: str) -> float:
    v = float(s)
    if not np.isfinite(v):
        raise ValueError(f"not a finite number: {s!r}")
    return v


def _parse_count(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError(f"negative count {s!r}")
    return v


_PARSERS = {
    "age": _parse_float,
    "weekly_income": _parse_float,
    "prior_counts_2014": _parse_count,
    **{c: _parse_binary for c in BINARY_COLUMNS},
}


def _parse_row(row: dict[str, str]) -> tuple[dict, list[tuple[str, str]]]:
    values: dict = {}
    problems = []
    for col in COLUMNS:
        raw = (row.get(col) or "").strip()
        if col == "guilty":
            if raw == "":
                values[col] = None
            else:
                try:
                    values[col] = _parse_binary(raw)
                except ValueError as e:
                    problems.append((col, str(e)))
        elif col == "excluded_reason":
            values[col] = None if raw in ("", "none") else raw
        elif col in _PARSERS:
            if raw == "":
                problems.append((col, "missing value"))
                continue
            try:
                values[col] = _PARSERS[col](raw)
            except ValueError as e:
                problems.append((col, str(e)))
        else:
            if raw == "" and col != "charge_class":
                problems.append((col, "missing value"))
            values[col] = raw
    return values, problems


def load_cases(path: str | Path, delimiter: str = ",", encoding: str = "utf-8") -> list[CaseRecord]:
    """Read one CaseRecord per data row.

    The whole file is scanned before failing, so a RowError lists every
    malformed value with its line number (the header is line 1).
    """
    records = []
    problems: list[tuple[int, str, str]] = []
    with open(path, newline="", encoding=encoding) as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise SchemaError(missing)
        for lineno, row in enumerate(reader, start=2):
            values, row_problems = _parse_row(row)
            if not row_problems:
                try:
                    records.append(CaseRecord(**values))
                except ValueError:
                    row_problems = _record_problems_from_values(values)
            problems.extend((lineno, col, msg) for col, msg in row_problems)
    if problems:
        raise RowError(problems)
    return records


def _record_problems_from_values(values: dict) -> list[tuple[str, str]]:
    # bypass validation to collect every invariant violation for reporting
    rec = object.__new__(CaseRecord)
    for k, v in values.items():
        object.__setattr__(rec, k, v)
    return _record_problems(rec)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_cases(records: Iterable[CaseRecord], path: str | Path, delimiter: str = ",") -> None:
    """Write records in the ingestion schema; ``load_cases`` reads them back identically."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            writer.writerow([_format(getattr(rec, c)) for c in COLUMNS])


def records_to_frame(records: Sequence[CaseRecord]) -> pd.DataFrame:
    """Columnar view of the records, in record order, with a ``male`` indicator."""
    cols = {f.name: [getattr(r, f.name) for r in records] for f in fields(CaseRecord)}
    frame = pd.DataFrame(cols, columns=list(COLUMNS))
    frame["guilty"] = frame["guilty"].astype("Float64")
    frame["male"] = [r.is_male for r in records]
    return frame


@dataclass(frozen=True)
class AnalysisSet:
    """Records surviving every filter, with per-filter drop counts."""

    records: tuple[CaseRecord, ...]
    provenance: dict[str, int] = field(default_factory=lambda: dict.fromkeys(FILTERS, 0))
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def frame(self) -> pd.DataFrame:
        frame = records_to_frame(self.records)
        if len(frame):
            frame["guilty"] = frame["guilty"].astype(int)
        return frame

    @cached_property
    def by_id(self) -> dict[str, CaseRecord]:
        return {r.case_id: r for r in self.records}


def _failed_filter(rec: CaseRecord) -> Optional[str]:
    if rec.excluded_reason is not None:
        return "excluded_reason"
    if rec.disposed_at_arraignment:
        return "disposed_at_arraignment"
    if rec.guilty is None:
        return "unresolved_outcome"
    return None


def apply_filters(records: Iterable[CaseRecord]) -> AnalysisSet:
    """Keep cases that reached the pre-trial stage and have a final disposition.

    Each dropped record is counted under the first filter it fails.
    """
    kept = []
    provenance = dict.fromkeys(FILTERS, 0)
    for rec in records:
        reason = _failed_filter(rec)
        if reason is None:
            kept.append(rec)
        else:
            provenance[reason] += 1
    warnings = ()
    if not kept:
        warnings = ("no records survived the inclusion filters",)
        log.warning(warnings[0])
    ids = [r.case_id for r in kept]
    if len(set(ids)) != len(ids):
        raise DataError("case_id values must be unique")
    return AnalysisSet(tuple(kept), provenance, warnings)

"""Covariate balance of matched pairs and matched-versus-full sample comparisons."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
import pandas as pd

from .data_model import AnalysisSet
from .instrument import InstrumentTable
from .matching import Calibration, MatchedPair, MatchResult

# (label, column); "severity" comes from the instrument table
BALANCE_ROWS = (
    ("Guilty", "guilty"),
    ("Bail Set", "bail_set"),
    ("IV", "severity"),
    ("Age", "age"),
    ("White", "race_white"),
    ("Black", "race_black"),
    ("Non-Hispanic", "non_hispanic"),
    ("Male", "male"),
    ("Prior Records 2014", "prior_counts_2014"),
    ("Wkly Income", "weekly_income"),
    ("Any Income", "any_income"),
    ("Employer", "has_employer"),
    ("Phone Number", "has_phone"),
    ("Address", "has_address"),
)
# outcome, treatment and instrument rows describe the design; they are not balanced
DIAGNOSTIC_ROWS = ("Guilty", "Bail Set", "IV")
COVARIATE_ROWS = tuple(label for label, _ in BALANCE_ROWS if label not in DIAGNOSTIC_ROWS)
GENERALIZABILITY_FLAG = 0.1


@dataclass(frozen=True)
class BalanceRow:
    variable: str
    mean_encouraged: float
    mean_unencouraged: float
    std_diff: float
    diagnostic: bool = False


def standardized_difference(mean_a: float, mean_b: float, sd: float) -> float:
    """|mean_a - mean_b| / sd; 0 for equal means and +inf for a zero sd otherwise."""
    diff = abs(mean_a - mean_b)
    if diff == 0:
        return 0.0
    if sd == 0:
        return math.inf
    return diff / sd


def pooled_sd(a: np.ndarray, b: np.ndarray) -> float:
    """Square root of the average of the two group variances (ddof=1)."""
    va = np.var(a, ddof=1) if len(a) > 1 else 0.0
    vb = np.var(b, ddof=1) if len(b) > 1 else 0.0
    return float(math.sqrt((va + vb) / 2))


def _pairs_of(match) -> list[MatchedPair]:
    if isinstance(match, Calibration):
        return list(match.summary.pairs)
    if isinstance(match, MatchResult):
        return list(match.pairs)
    out = []
    for item in match:
        out.extend(item.pairs if isinstance(item, MatchResult) else [item])
    return out


def _case_table(analysis: AnalysisSet, instrument: InstrumentTable) -> pd.DataFrame:
    df = analysis.frame.set_index("case_id")
    table = df[[col for _, col in BALANCE_ROWS if col != "severity"]].astype(float)
    table["severity"] = instrument.frame["severity"].reindex(table.index)
    return table


def prematch_sds(analysis: AnalysisSet, instrument: InstrumentTable) -> dict[str, float]:
    """Reference SDs from the eligible analysis sample before matching.

    The sample is split at the median severity into a stricter-judge half
    (below the median) and the rest, and the two group variances are pooled.
    If either half is empty the overall SD is used.
    """
    table = _case_table(analysis, instrument)
    table = table.loc[table["severity"].notna()]
    sev = table["severity"].to_numpy()
    if len(sev) == 0:
        return {col: 0.0 for _, col in BALANCE_ROWS}
    low = sev < np.median(sev)
    out = {}
    for _, col in BALANCE_ROWS:
        x = table[col].to_numpy()
        if low.all() or not low.any():
            out[col] = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        else:
            out[col] = pooled_sd(x[low], x[~low])
    return out


def balance_table(match: Union[MatchResult, Calibration, Iterable], analysis: AnalysisSet,
                  instrument: InstrumentTable, reference_sd: dict[str, float] | None = None
                  ) -> list[BalanceRow]:
    """Means by role and standardized differences, one row per variable in display order.

    ``reference_sd`` maps column names to denominators and defaults to
    :func:`prematch_sds`.
    """
    pairs = _pairs_of(match)
    if not pairs:
        raise ValueError("balance needs at least one pair")
    table = _case_table(analysis, instrument)
    enc = table.loc[[p.encouraged for p in pairs]]
    unenc = table.loc[[p.unencouraged for p in pairs]]
    sds = prematch_sds(analysis, instrument) if reference_sd is None else reference_sd
    rows = []
    for label, col in BALANCE_ROWS:
        ma, mb = float(enc[col].mean()), float(unenc[col].mean())
        rows.append(BalanceRow(label, ma, mb, standardized_difference(ma, mb, sds[col]),
                               label in DIAGNOSTIC_ROWS))
    return rows


def max_covariate_std_diff(rows: Sequence[BalanceRow]) -> float:
    return max(r.std_diff for r in rows if not r.diagnostic)


def balance_frame(rows: Sequence[BalanceRow]) -> pd.DataFrame:
    return pd.DataFrame({
        "variable": [r.variable for r in rows],
        "mean_encouraged": [r.mean_encouraged for r in rows],
        "mean_unencouraged": [r.mean_unencouraged for r in rows],
        "std_diff": [r.std_diff for r in rows],
    })


def render_balance(rows: Sequence[BalanceRow]) -> str:
    """Plain-text table: variable, encouraged mean, unencouraged mean, St Dif."""
    header = ("", "Encouraged", "Unencouraged", "St Dif")
    body = [(r.variable, f"{r.mean_encouraged:.2f}", f"{r.mean_unencouraged:.2f}",
             "Inf" if math.isinf(r.std_diff) else f"{r.std_diff:.2f}") for r in rows]
    widths = [max(len(line[k]) for line in [header, *body]) for k in range(4)]
    lines = []
    for line in [header, *body]:
        lines.append("  ".join([line[0].ljust(widths[0])]
                               + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]).rstrip())
    return "\n".join(lines) + "\n"


# generalizability ----------------------------------------------------------

DECILES = tuple(k / 10 for k in range(1, 10))


@dataclass(frozen=True)
class Comparison:
    variable: str
    mean_matched: float
    mean_full: float
    std_diff: float
    deciles_matched: tuple[float, ...]
    deciles_full: tuple[float, ...]

    @property
    def flagged(self) -> bool:
        return self.std_diff > GENERALIZABILITY_FLAG


@dataclass(frozen=True)
class GeneralizabilityReport:
    n_matched: int
    n_full: int
    comparisons: tuple[Comparison, ...]

    @property
    def flagged(self) -> tuple[str, ...]:
        return tuple(c.variable for c in self.comparisons if c.flagged)


def generalizability_report(match, analysis: AnalysisSet) -> GeneralizabilityReport:
    """Compare each covariate between the matched cases and the whole analysis sample."""
    pairs = _pairs_of(match)
    df = analysis.frame.set_index("case_id")
    matched_ids = [c for p in pairs for c in (p.encouraged, p.unencouraged)]
    comps = []
    for label in COVARIATE_ROWS:
        col = dict(BALANCE_ROWS)[label]
        # sorted so floating-point sums do not depend on record order
        full = np.sort(df[col].to_numpy(dtype=float))
        matched = np.sort(df.loc[matched_ids, col].to_numpy(dtype=float))
        if len(matched) == 0:
            comps.append(Comparison(label, math.nan, float(full.mean()) if len(full) else math.nan,
                                    math.nan, (), ()))
            continue
        sd = pooled_sd(matched, full)
        comps.append(Comparison(
            label, float(matched.mean()), float(full.mean()),
            standardized_difference(float(matched.mean()), float(full.mean()), sd),
            tuple(float(v) for v in np.quantile(matched, DECILES)),
            tuple(float(v) for v in np.quantile(full, DECILES)),
        ))
    return GeneralizabilityReport(len(matched_ids), len(df), tuple(comps))


def render_generalizability(report: GeneralizabilityReport) -> str:
    out = [f"Matched cases: {report.n_matched:,} of {report.n_full:,} analyzed",
           f"Flag threshold: standardized difference > {GENERALIZABILITY_FLAG}", ""]
    for c in report.comparisons:
        mark = "  FLAGGED" if c.flagged else ""
        out.append(f"{c.variable}: matched mean {c.mean_matched:.4g}, full mean {c.mean_full:.4g}, "
                   f"std diff {c.std_diff:.3f}{mark}")
        if c.deciles_matched:
            out.append("  deciles matched: " + " ".join(f"{v:.4g}" for v in c.deciles_matched))
            out.append("  deciles full:    " + " ".join(f"{v:.4g}" for v in c.deciles_full))
    return "\n".join(out) + "\n"


def generalizability_frame(report: GeneralizabilityReport) -> pd.DataFrame:
    rows = []
    for c in report.comparisons:
        row = {"variable": c.variable, "mean_matched": c.mean_matched, "mean_full": c.mean_full,
               "std_diff": c.std_diff, "flagged": int(c.flagged)}
        for q, vm, vf in zip(DECILES, c.deciles_matched, c.deciles_full):
            row[f"matched_q{int(q * 100)}"] = vm
            row[f"full_q{int(q * 100)}"] = vf
        rows.append(row)
    return pd.DataFrame(rows)

"""Leave-one-out judge severity instrument.

For case i seen by judge j in region b with top charge c, with T' = 1 - T
(1 when released without bail):

    S = (sum_jbc T' - T'_i) / (n_jbc - 1) - (sum_bc T' - T'_i) / (n_bc - 1)

Higher values mean a more lenient judge than the region average for that
charge. Cases with n_jbc = 1 or n_bc = 1 have no comparison and are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .data_model import AnalysisSet

CELL = ["judge_id", "region", "top_charge"]
REGION_CELL = ["region", "top_charge"]


@dataclass(frozen=True)
class InstrumentTable:
    """Per-case severities; ``frame`` is indexed by case_id in analysis order.

    Columns: judge_id, region, top_charge, severity (NaN when flagged),
    n_jbc, n_bc, flagged.
    """

    frame: pd.DataFrame

    def __len__(self) -> int:
        return len(self.frame)

    def severity(self, case_id: str) -> float:
        return float(self.frame.at[case_id, "severity"])

    @property
    def entries(self) -> dict[str, float]:
        return self.frame["severity"].to_dict()

    @property
    def judge_cell_counts(self) -> dict[tuple[str, str, str], int]:
        cells = self.frame.drop_duplicates(CELL)
        return {tuple(k): int(n) for k, n in zip(cells[CELL].itertuples(index=False), cells["n_jbc"])}

    @property
    def region_cell_counts(self) -> dict[tuple[str, str], int]:
        cells = self.frame.drop_duplicates(REGION_CELL)
        return {tuple(k): int(n) for k, n in zip(cells[REGION_CELL].itertuples(index=False), cells["n_bc"])}

    @property
    def eligible(self) -> pd.Series:
        return ~self.frame["flagged"]


def compute_severity(analysis: AnalysisSet) -> InstrumentTable:
    df = analysis.frame
    released = 1 - df["bail_set"].to_numpy(dtype=np.int64)
    keys = df[CELL].copy()
    keys["released"] = released
    judge = keys.groupby(CELL, sort=False)["released"]
    region = keys.groupby(REGION_CELL, sort=False)["released"]
    sum_j = judge.transform("sum").to_numpy(dtype=np.int64)
    n_j = judge.transform("size").to_numpy(dtype=np.int64)
    sum_b = region.transform("sum").to_numpy(dtype=np.int64)
    n_b = region.transform("size").to_numpy(dtype=np.int64)

    flagged = (n_j == 1) | (n_b == 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        severity = (sum_j - released) / (n_j - 1) - (sum_b - released) / (n_b - 1)
    severity[flagged] = np.nan

    frame = pd.DataFrame(
        {
            "judge_id": df["judge_id"].to_numpy(),
            "region": df["region"].to_numpy(),
            "top_charge": df["top_charge"].to_numpy(),
            "severity": severity,
            "n_jbc": n_j,
            "n_bc": n_b,
            "flagged": flagged,
        },
        index=pd.Index(df["case_id"].to_numpy(), name="case_id"),
    )
    return InstrumentTable(frame)


SUMMARY_QUANTILES = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)


def severity_summary(table: InstrumentTable) -> dict:
    """Per-region quantiles of the defined severities plus flag counts."""
    frame = table.frame
    ok = frame.loc[~frame["flagged"]]
    regions = {}
    for region, grp in sorted(ok.groupby("region", sort=False), key=lambda kv: str(kv[0])):
        qs = np.quantile(grp["severity"].to_numpy(), SUMMARY_QUANTILES)
        regions[str(region)] = {
            "n": int(len(grp)),
            **{f"q{int(round(q * 100)):02d}": float(v) for q, v in zip(SUMMARY_QUANTILES, qs)},
        }
    return {
        "n_cases": int(len(frame)),
        "n_flagged": int(frame["flagged"].sum()),
        "regions": regions,
    }


def write_instrument(table: InstrumentTable, path: str | Path) -> None:
    out = table.frame[["severity", "n_jbc", "n_bc", "flagged"]].reset_index()
    out["flagged"] = out["flagged"].astype(int)
    out.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


@dataclass(frozen=True)
class JudgeVariation:
    statistic: float
    df: int
    p_value: float
    cells: int


def judge_variation_test(analysis: AnalysisSet) -> JudgeVariation:
    """Test whether bail rates differ between judges within (region, charge) cells.

    Sums the Pearson chi-square of each judge-by-bail table, scaled by
    (n - 1)/n so that its permutation mean is exactly the degrees of freedom
    even for small cells. Unlike first-stage statistics built from the
    severities, it uses no case's own bail decision to place that case.
    """
    df = analysis.frame
    if len(df) == 0:
        return JudgeVariation(0.0, 0, 1.0, 0)
    t = df[CELL].copy()
    t["bail"] = df["bail_set"].to_numpy(dtype=np.int64)
    per_judge = t.groupby(CELL, sort=False)["bail"].agg(["sum", "size"]).reset_index()
    cell = per_judge.groupby(REGION_CELL, sort=False)
    n = cell["size"].transform("sum").to_numpy(dtype=float)
    b = cell["sum"].transform("sum").to_numpy(dtype=float)
    k = cell["size"].transform("size").to_numpy()
    p = b / n
    usable = (k > 1) & (p > 0) & (p < 1)
    nj = per_judge["size"].to_numpy(dtype=float)
    bj = per_judge["sum"].to_numpy(dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (bj - nj * p) ** 2 / (nj * p * (1 - p)) * (n - 1) / n
    stat = float(terms[usable].sum())
    cells = per_judge.loc[usable, REGION_CELL].drop_duplicates()
    dof = int(usable.sum() - len(cells))
    if dof <= 0:
        return JudgeVariation(stat, 0, 1.0, 0)
    return JudgeVariation(stat, dof, float(stats.chi2.sf(stat, dof)), int(len(cells)))

"""In-memory pipeline: filters, instrument, calibrated matching and the main estimate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import diagnostics, inference, matching
from .data_model import AnalysisSet, CaseRecord, apply_filters
from .instrument import InstrumentTable, compute_severity


@dataclass(frozen=True)
class Analysis:
    analysis: AnalysisSet
    instrument: InstrumentTable
    strata: tuple[matching.Stratum, ...]
    calibration: matching.Calibration
    pairs: inference.PairOutcomes

    @property
    def matched(self) -> matching.MatchResult:
        return self.calibration.summary

    def estimate(self, alpha: float = 0.05) -> inference.EffectEstimate:
        return inference.estimate(self.pairs, "Aggregate", alpha)

    def balance(self) -> list[diagnostics.BalanceRow]:
        return diagnostics.balance_table(self.matched, self.analysis, self.instrument)


def analyze(records: Sequence[CaseRecord] | AnalysisSet,
            grid: matching.SearchGrid = matching.SearchGrid(), threads: int = 1) -> Analysis:
    """Run everything up to the matched pairs; raises WeakInstrumentError from calibration."""
    analysis = records if isinstance(records, AnalysisSet) else apply_filters(records)
    instrument = compute_severity(analysis)
    strata = matching.stratify(analysis, instrument)
    calibration = matching.calibrate_and_match(strata, analysis, instrument, grid, threads)
    pairs = inference.PairOutcomes.from_pairs(calibration.summary.pairs, analysis, instrument)
    return Analysis(analysis, instrument, tuple(strata), calibration, pairs)

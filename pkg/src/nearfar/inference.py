"""Effect ratio, its test-inversion interval, stratified tables and sensitivity bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .data_model import AnalysisSet
from .instrument import InstrumentTable
from .matching import MatchedPair, _pooled_F

SCHEMES = ("aggregate", "region", "crime_type", "gender")
DEFAULT_GAMMAS = tuple(round(1 + 0.01 * k, 2) for k in range(0, 101))


class NoComplianceError(ValueError):
    """The encouragement produced no net difference in treatment."""


@dataclass(frozen=True)
class PairOutcomes:
    """Outcomes and treatments of the encouraged (1) and unencouraged (2) member of each pair."""

    g1: np.ndarray
    g2: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    region: tuple[str, ...] = ()
    crime_type: tuple[str, ...] = ()
    gender: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("g1", "g2", "t1", "t2"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
            object.__setattr__(self, name, arr)
        n = len(self.g1)
        if any(len(getattr(self, k)) != n for k in ("g2", "t1", "t2")):
            raise ValueError("pair arrays differ in length")
        for name in ("region", "crime_type", "gender"):
            tags = tuple(getattr(self, name))
            if tags and len(tags) != n:
                raise ValueError(f"{name} tags differ in length from the pairs")
            object.__setattr__(self, name, tags)

    def __len__(self) -> int:
        return len(self.g1)

    @property
    def dG(self) -> np.ndarray:
        return self.g1 - self.g2

    @property
    def dT(self) -> np.ndarray:
        return self.t1 - self.t2

    @classmethod
    def from_differences(cls, dG, dT) -> "PairOutcomes":
        """Pairs realizing the given differences (members coded 0/1)."""
        dG, dT = np.asarray(dG, dtype=np.int64), np.asarray(dT, dtype=np.int64)
        if not (np.isin(dG, (-1, 0, 1)).all() and np.isin(dT, (-1, 0, 1)).all()):
            raise ValueError("differences must lie in {-1, 0, 1}")
        return cls((dG > 0).astype(int), (dG < 0).astype(int),
                   (dT > 0).astype(int), (dT < 0).astype(int))

    @classmethod
    def from_pairs(cls, pairs: Sequence[MatchedPair], analysis: AnalysisSet,
                   instrument: Optional[InstrumentTable] = None) -> "PairOutcomes":
        """Look up both members of each pair; with an instrument, check the roles."""
        by_id = analysis.by_id
        if instrument is not None:
            for p in pairs:
                if instrument.severity(p.encouraged) > instrument.severity(p.unencouraged):
                    raise ValueError(
                        f"pair ({p.encouraged}, {p.unencouraged}): encouraged member has the "
                        "higher severity; roles are swapped")
        a = [by_id[p.encouraged] for p in pairs]
        b = [by_id[p.unencouraged] for p in pairs]
        tags = {}
        for name in ("region", "crime_type", "gender"):
            left = tuple(getattr(r, name) for r in a)
            right = tuple(getattr(r, name) for r in b)
            # pairs share region and gender by construction and crime_type through top_charge
            if left != right:
                raise ValueError(f"pair members disagree on {name}")
            tags[name] = left
        return cls(np.array([r.guilty for r in a], dtype=np.int64),
                   np.array([r.guilty for r in b], dtype=np.int64),
                   np.array([r.bail_set for r in a], dtype=np.int64),
                   np.array([r.bail_set for r in b], dtype=np.int64), **tags)

    def subset(self, mask) -> "PairOutcomes":
        mask = np.asarray(mask, dtype=bool)
        pick = lambda tags: tuple(t for t, m in zip(tags, mask) if m) if tags else ()
        return PairOutcomes(self.g1[mask], self.g2[mask], self.t1[mask], self.t2[mask],
                            pick(self.region), pick(self.crime_type), pick(self.gender))


def effect_ratio(pairs: PairOutcomes) -> float:
    """Sum of outcome differences over sum of treatment differences."""
    den = int(pairs.dT.sum())
    if den == 0:
        raise NoComplianceError("no induced compliance: treatment differences sum to zero")
    return float(pairs.dG.sum()) / den


@dataclass(frozen=True)
class ConfidenceInterval:
    """``kind`` is "bounded", "degenerate" (zero standard error) or "unbounded".

    An unbounded set is either the whole line (low=-inf, high=inf) or the
    complement of (high, low) when the quadratic opens upward outside a gap;
    ``low``/``high`` are NaN in that second case and ``gap`` holds the hole.
    """

    low: float
    high: float
    kind: str = "bounded"
    gap: Optional[tuple[float, float]] = None

    @property
    def bounded(self) -> bool:
        return self.kind in ("bounded", "degenerate")

    def __post_init__(self):
        object.__setattr__(self, "low", float(self.low))
        object.__setattr__(self, "high", float(self.high))
        if self.gap is not None:
            object.__setattr__(self, "gap", (float(self.gap[0]), float(self.gap[1])))

    def contains(self, value: float) -> bool:
        if self.kind == "unbounded":
            if self.gap is None:
                return True
            return not (self.gap[0] < value < self.gap[1])
        return self.low <= value <= self.high


def _moments(dG: np.ndarray, dT: np.ndarray):
    I = len(dG)
    a, b = dG.mean(), dT.mean()
    g, t = dG - a, dT - b
    return I, a, b, float(g @ g), float(t @ t), float(g @ t)


def studentized_statistic(pairs: PairOutcomes, lambda0: float) -> float:
    """Studentized mean of ΔG - λ0 ΔT; ±inf when its standard error vanishes."""
    v = pairs.dG - lambda0 * pairs.dT
    I = len(v)
    mean = v.mean()
    se = math.sqrt(((v - mean) ** 2).sum() / (I * (I - 1)))
    if se == 0:
        return 0.0 if mean == 0 else math.copysign(math.inf, mean)
    return float(mean / se)


def _bisect(f, lo: float, hi: float, iters: int = 200) -> float:
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        fm = f(mid)
        if (fm <= 0) == (flo <= 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def effect_ratio_ci(pairs: PairOutcomes, alpha: float = 0.05) -> ConfidenceInterval:
    """Invert the studentized test of H0: λ = λ0 at two-sided level ``alpha``.

    The acceptance region |T(λ0)| <= z is the quadratic inequality
    A λ0² + B λ0 + C <= 0, solved in closed form. Near-zero A falls back to
    bisection from the point estimate over an expanding bracket.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    est = effect_ratio(pairs)
    dG, dT = pairs.dG.astype(float), pairs.dT.astype(float)
    I, a, b, Sgg, Stt, Sgt = _moments(dG, dT)
    z = stats.norm.ppf(1 - alpha / 2)
    k = z * z / (I * (I - 1))
    A = b * b - k * Stt
    B = -2 * a * b + 2 * k * Sgt
    C = a * a - k * Sgg

    # zero residual variance at the estimate: V = ΔG - λ ΔT is constant
    resid = dG - est * dT
    if np.allclose(resid, resid.mean(), rtol=0, atol=1e-12):
        return ConfidenceInterval(est, est, "degenerate")

    scale = max(b * b, k * Stt, 1e-300)
    if A <= 0 and abs(A) > 1e-12 * scale:
        disc = B * B - 4 * A * C
        if disc <= 0:
            return ConfidenceInterval(-math.inf, math.inf, "unbounded")
        r1, r2 = sorted(_roots(A, B, C, disc))
        return ConfidenceInterval(math.nan, math.nan, "unbounded", gap=(r1, r2))
    if abs(A) <= 1e-12 * scale:
        return _ci_bisection(pairs, est, z)
    disc = B * B - 4 * A * C
    if disc < 0:
        # cannot happen with A > 0 because the estimate satisfies the inequality
        disc = 0.0
    lo, hi = sorted(_roots(A, B, C, disc))
    return ConfidenceInterval(min(lo, est), max(hi, est), "bounded")


def _roots(A: float, B: float, C: float, disc: float) -> tuple[float, float]:
    # cancellation-free pair of quadratic roots
    q = -0.5 * (B + math.copysign(math.sqrt(disc), B if B != 0 else 1.0))
    r1 = q / A
    r2 = C / q if q != 0 else r1
    return r1, r2


def _ci_bisection(pairs: PairOutcomes, est: float, z: float) -> ConfidenceInterval:
    f = lambda lam: abs(studentized_statistic(pairs, lam)) - z
    ends = []
    for direction in (-1.0, 1.0):
        step = 1.0
        far = est + direction * step
        while f(far) <= 0:
            step *= 2
            far = est + direction * step
            if step > 1e12:
                return ConfidenceInterval(-math.inf, math.inf, "unbounded")
        ends.append(_bisect(f, est, far))
    return ConfidenceInterval(min(ends), max(ends), "bounded")


def primary_p_value(pairs: PairOutcomes, lambda0: float = 0.0) -> float:
    """One-sided p-value of the randomization sign test of λ <= λ0.

    Under H0 each discordant pair is positive with probability 1/2.
    """
    pos, D = sign_scores(pairs, lambda0)
    if D == 0:
        return 1.0
    return float(stats.norm.sf((2 * pos - D) / math.sqrt(D)))


@dataclass(frozen=True)
class EffectEstimate:
    stratum_label: str
    lambda_hat: float
    ci_low: float
    ci_high: float
    n_cases: int
    significant: bool
    first_stage_F: float
    note: str = ""

    @property
    def n_pairs(self) -> int:
        return self.n_cases // 2


def estimate(pairs: PairOutcomes, label: str = "Aggregate", alpha: float = 0.05) -> EffectEstimate:
    """Point estimate and interval for one set of pairs; problems become notes, not errors."""
    n_cases = 2 * len(pairs)
    F = _pooled_F(pairs.t1.astype(float), pairs.t2.astype(float))
    try:
        lam = effect_ratio(pairs)
    except NoComplianceError:
        return EffectEstimate(label, math.nan, math.nan, math.nan, n_cases, False, F, "no compliance")
    if len(pairs) < 2:
        return EffectEstimate(label, lam, math.nan, math.nan, n_cases, False, F, "too few pairs")
    ci = effect_ratio_ci(pairs, alpha)
    if ci.kind == "unbounded":
        return EffectEstimate(label, lam, -math.inf, math.inf, n_cases, False, F, "unbounded")
    significant = not (ci.low <= 0 <= ci.high)
    return EffectEstimate(label, lam, ci.low, ci.high, n_cases, significant, F,
                          "degenerate" if ci.kind == "degenerate" else "")


def stratified_estimates(pairs: PairOutcomes, schemes: Iterable[str] = SCHEMES,
                         alpha: float = 0.05) -> list[EffectEstimate]:
    """Aggregate row first, then one row per level of each scheme (levels sorted)."""
    schemes = list(schemes)
    unknown = set(schemes) - set(SCHEMES)
    if unknown:
        raise ValueError(f"unknown stratification scheme(s): {sorted(unknown)}")
    rows = []
    if "aggregate" in schemes:
        rows.append(estimate(pairs, "Aggregate", alpha))
    for scheme in SCHEMES[1:]:
        if scheme not in schemes:
            continue
        tags = getattr(pairs, scheme)
        if not tags:
            raise ValueError(f"pairs carry no {scheme} tags")
        for level in sorted(set(tags)):
            mask = np.array([t == level for t in tags])
            rows.append(estimate(pairs.subset(mask), _level_label(scheme, level), alpha))
    return rows


def _level_label(scheme: str, level: str) -> str:
    if scheme == "crime_type":
        return str(level).capitalize()
    if scheme == "gender":
        return str(level).capitalize()
    return f"Region {level}"


def _fmt(x: float, digits: int = 2) -> str:
    if math.isnan(x):
        return "NA"
    if math.isinf(x):
        return "Inf" if x > 0 else "-Inf"
    return f"{x:.{digits}f}"


def estimates_frame(rows: Sequence[EffectEstimate]) -> pd.DataFrame:
    return pd.DataFrame({
        "stratum": [r.stratum_label for r in rows],
        "estimate": [r.lambda_hat for r in rows],
        "ci_low": [r.ci_low for r in rows],
        "ci_high": [r.ci_high for r in rows],
        "n": [r.n_cases for r in rows],
        "significant": [int(r.significant) for r in rows],
        "first_stage_F": [r.first_stage_F for r in rows],
        "note": [r.note for r in rows],
    })


def render_estimates(rows: Sequence[EffectEstimate]) -> str:
    """Plain-text table with columns Stratum, Est, Low, Hi, n and a star for significance."""
    header = ("Stratum", "Est", "Low", "Hi", "n", "")
    body = [(r.stratum_label, _fmt(r.lambda_hat), _fmt(r.ci_low), _fmt(r.ci_high),
             f"{r.n_cases:,}", "*" if r.significant else "") for r in rows]
    widths = [max(len(line[k]) for line in [header, *body]) for k in range(6)]
    out = []
    for line in [header, *body]:
        cells = [line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:5], widths[1:5])]
        out.append("  ".join(cells) + ("  " + line[5] if line[5] else ""))
    return "\n".join(s.rstrip() for s in out) + "\n"


# sensitivity ---------------------------------------------------------------

def sign_scores(pairs: PairOutcomes, lambda0: float = 0.0) -> tuple[int, int]:
    """(positive, discordant) counts of V = ΔG - λ0 ΔT over pairs with V != 0."""
    v = pairs.dG - lambda0 * pairs.dT
    return int((v > 0).sum()), int((v != 0).sum())


def sensitivity_bound(pairs: PairOutcomes, gamma: float, lambda0: float = 0.0) -> float:
    """Largest one-sided p-value for H0: λ <= λ0 when within-pair odds are biased by ``gamma``.

    Under the bias model, each discordant pair has a positive sign with
    probability at most Γ/(1+Γ); the sign count is bounded by a binomial,
    approximated here by the normal.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if len(pairs) == 0:
        raise ValueError("need at least 1 pair")
    pos, D = sign_scores(pairs, lambda0)
    if D == 0:
        return 1.0
    p_plus = gamma / (1 + gamma)
    mean = D * p_plus
    sd = math.sqrt(D * p_plus * (1 - p_plus))
    return float(stats.norm.sf((pos - mean) / sd))


@dataclass(frozen=True)
class SensitivityResult:
    gammas: tuple[float, ...]
    p_upper: tuple[float, ...]
    gamma_star: Optional[float]
    alpha: float = 0.05

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"gamma": self.gammas, "p_upper": self.p_upper})


def sensitivity_analysis(pairs: PairOutcomes, gammas: Sequence[float] = DEFAULT_GAMMAS,
                         alpha: float = 0.05, lambda0: float = 0.0) -> SensitivityResult:
    """Upper p-value bounds over the Γ grid; Γ* is the largest Γ still rejecting at ``alpha``."""
    gammas = tuple(float(g) for g in sorted(gammas))
    if not gammas:
        raise ValueError("gamma grid is empty")
    p = tuple(sensitivity_bound(pairs, g, lambda0) for g in gammas)
    rejected = [g for g, pv in zip(gammas, p) if pv < alpha]
    return SensitivityResult(gammas, p, max(rejected) if rejected else None, alpha)


DEFAULT_LAMBDAS = tuple(1 + k / 24 for k in range(1, 97))


def amplify(gamma: float, lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> list[tuple[float, float]]:
    """Points (Λ, Δ) with Γ = (ΛΔ + 1)/(Λ + Δ), skipping Λ <= Γ."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    out = []
    for lam in lambdas:
        if lam <= 1:
            raise ValueError("Λ sample points must exceed 1")
        if lam <= gamma:
            continue
        out.append((float(lam), (lam * gamma - 1) / (lam - gamma)))
    return out


def gamma_from(lam: float, delta: float) -> float:
    return (lam * delta + 1) / (lam + delta)

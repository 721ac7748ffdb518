"""Near-far matching within exact-match strata.

Cases are paired to be close on rank-based Mahalanobis distance and far apart
on the instrument: a pair whose severity gap falls inside the caliper pays a
penalty. Phantom "sink" vertices match any real case at zero cost, so the
hardest cases to pair are dropped. The sink share and caliper are chosen
jointly for all strata by maximizing the first-stage F statistic.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata

from numba import njit

from . import _blossom
from .data_model import AnalysisSet
from .instrument import InstrumentTable, judge_variation_test

log = logging.getLogger(__name__)

MATCH_COVARIATES = (
    "age", "race_white", "race_black", "non_hispanic", "prior_counts_2014",
    "weekly_income", "any_income", "has_employer", "has_phone", "has_address",
)
STRATUM_KEY = ("top_charge", "region", "gender")

DEFAULT_SINK_FRACTIONS = tuple(round(0.05 * k, 2) for k in range(10))
DEFAULT_DELTA_QUANTILES = tuple(round(0.1 * k, 1) for k in range(1, 10))

PENALTY_MULTIPLIER = 10.0
SINK_WEIGHT_MULTIPLIER = 100.0
# integer resolution of the matching weights (weight units per distance unit)
_RESOLUTION = 1e9
_MAX_WEIGHT = float(2**46)


class WeakInstrumentError(RuntimeError):
    """Calibration found no configuration with a usable first stage."""


@dataclass(frozen=True)
class Stratum:
    key: tuple[str, str, str]
    members: tuple[str, ...]

    @property
    def matchable(self) -> bool:
        return len(self.members) >= 2

    @property
    def label(self) -> str:
        return "|".join(self.key)


def stratify(analysis: AnalysisSet, instrument: InstrumentTable) -> list[Stratum]:
    """Exact-match strata on (top_charge, region, gender) among eligible cases.

    Strata are sorted by key; members keep analysis order. Singletons are
    returned too (``matchable`` is False).
    """
    df = analysis.frame
    flagged = instrument.frame["flagged"].reindex(df["case_id"]).to_numpy()
    if np.isnan(flagged.astype(float)).any():
        raise ValueError("instrument table does not cover every analysis case")
    eligible = df.loc[~flagged.astype(bool)]
    groups = eligible.groupby(list(STRATUM_KEY), sort=False)["case_id"]
    strata = [Stratum(tuple(str(k) for k in key), tuple(ids)) for key, ids in groups]
    return sorted(strata, key=lambda s: s.key)


def rank_mahalanobis(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise rank-based Mahalanobis distances between the rows of ``x``.

    Columns are replaced by their average ranks; the rank covariance is
    rescaled so tied columns carry the variance of untied ranks, then
    inverted (pseudo-inverse when singular). Constant columns are dropped;
    the returned mask marks the columns kept.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    keep = np.ptp(x, axis=0) > 0 if n else np.zeros(x.shape[1], dtype=bool)
    if n < 2 or not keep.any():
        return np.zeros((n, n)), keep
    ranks = rankdata(x[:, keep], axis=0)
    cov = np.atleast_2d(np.cov(ranks, rowvar=False))
    untied_var = np.var(np.arange(1, n + 1), ddof=1)
    scale = np.sqrt(untied_var / np.diag(cov))
    cov = cov * np.outer(scale, scale)
    # pseudo-inverse as a factor W W^T, so distances are Euclidean in ranks @ W
    vals, vecs = np.linalg.eigh(cov)
    tol = vals.max() * max(cov.shape) * np.finfo(float).eps
    inv_sqrt = np.where(vals > tol, 1.0 / np.sqrt(np.where(vals > tol, vals, 1.0)), 0.0)
    dist = squareform(pdist(ranks @ (vecs * inv_sqrt)))
    return dist, keep


@dataclass
class MatchProblem:
    """One stratum's inputs to the matcher."""

    key: tuple[str, ...]
    case_ids: tuple[str, ...]
    covariates: np.ndarray
    severities: np.ndarray
    covariate_names: tuple[str, ...] = MATCH_COVARIATES
    judges: Optional[np.ndarray] = None
    caliper: float = 0.0
    penalty: Optional[float] = None
    sink_fraction: float = 0.0

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=float)
        self.severities = np.asarray(self.severities, dtype=float)
        if self.covariates.ndim != 2 or self.covariates.shape[0] != len(self.severities):
            raise ValueError("covariate rows must match the severity vector")
        if len(self.case_ids) != len(self.severities):
            raise ValueError("case_ids must match the severity vector")
        if self.caliper < 0:
            raise ValueError("caliper must be >= 0")
        if self.penalty is not None and not self.penalty > 0:
            raise ValueError("penalty must be > 0")
        if not 0 <= self.sink_fraction < 1:
            raise ValueError("sink_fraction must lie in [0, 1)")

    @property
    def size(self) -> int:
        return len(self.case_ids)


def covariate_distance_matrix(problem: MatchProblem) -> tuple[np.ndarray, tuple[str, ...]]:
    """Rank-Mahalanobis matrix for the problem plus the names of constant columns dropped."""
    if problem.size < 2:
        raise ValueError("need at least 2 cases")
    dist, keep = rank_mahalanobis(problem.covariates)
    dropped = tuple(name for name, k in zip(problem.covariate_names, keep) if not k)
    return dist, dropped


def iv_gaps(severities: np.ndarray, judges: Optional[np.ndarray] = None) -> np.ndarray:
    """|S_i - S_j|, with pairs sharing a judge treated as having no gap.

    Two cases of one judge differ in leave-one-out severity only through
    their own bail decisions, so that difference carries no encouragement.
    """
    s = np.asarray(severities, dtype=float)
    gaps = np.abs(s[:, None] - s[None, :])
    if judges is not None:
        judges = np.asarray(judges)
        gaps[judges[:, None] == judges[None, :]] = 0.0
    return gaps


def default_penalty(covariate_distances: np.ndarray) -> float:
    finite = covariate_distances[np.isfinite(covariate_distances)]
    top = float(finite.max()) if finite.size else 0.0
    return PENALTY_MULTIPLIER * top if top > 0 else 1.0


def nearfar_adjusted_distance(covariate_distances, severities, caliper: float, penalty: float,
                              judges=None) -> np.ndarray:
    """Covariate distance plus ``penalty`` for each pair whose IV gap is below ``caliper``."""
    d = np.asarray(covariate_distances, dtype=float)
    gaps = iv_gaps(severities, judges)
    if d.shape != gaps.shape:
        raise ValueError("distance matrix and severity vector disagree in size")
    out = d + penalty * (gaps < caliper)
    np.fill_diagonal(out, 0.0)
    return out


def sink_count(n: int, sink_fraction: float) -> int:
    """Sinks for a stratum of ``n`` cases, raised by one when needed for even order."""
    k = int(math.floor(sink_fraction * n + 0.5))
    return k + (n + k) % 2


def _weight_scale(max_weight: float) -> float:
    if max_weight <= 0:
        return _RESOLUTION
    return min(_RESOLUTION, _MAX_WEIGHT / max_weight)


def build_match_graph(adjusted: np.ndarray, n_sinks: int, sink_weight: Optional[float] = None
                      ) -> np.ndarray:
    """Integer cost matrix over the real cases followed by ``n_sinks`` sinks.

    Real-sink edges cost 0; sink-sink edges cost ``sink_weight`` (default
    100 times the largest real edge) so sinks are not wasted on each other.
    """
    adjusted = np.asarray(adjusted, dtype=float)
    n = adjusted.shape[0]
    if sink_weight is None:
        top = float(adjusted.max()) if n else 0.0
        sink_weight = SINK_WEIGHT_MULTIPLIER * (top if top > 0 else 1.0)
    scale = _weight_scale(max(sink_weight, float(adjusted.max()) if n else 0.0))
    m = n + n_sinks
    cost = np.zeros((m, m), dtype=np.int64)
    cost[:n, :n] = np.rint(adjusted * scale).astype(np.int64)
    cost[n:, n:] = int(round(sink_weight * scale))
    np.fill_diagonal(cost, 0)
    return cost


class Pairing(NamedTuple):
    pairs: list[tuple[int, int]]
    sunk: list[int]
    total_weight: float
    n_sinks: int


def _decode(mate: np.ndarray, n: int) -> tuple[list[tuple[int, int]], list[int]]:
    pairs, sunk = [], []
    for i in range(n):
        j = int(mate[i])
        if j >= n:
            sunk.append(i)
        elif i < j:
            pairs.append((i, j))
    return pairs, sunk


def optimal_nonbipartite_match(adjusted: np.ndarray, n_sinks: int = 0,
                               sink_weight: Optional[float] = None) -> Pairing:
    """Minimum-weight perfect matching of the real cases plus sinks.

    Cases matched to a sink are returned in ``sunk``. An odd total order gets
    one extra sink.
    """
    adjusted = np.asarray(adjusted, dtype=float)
    n = adjusted.shape[0]
    if n_sinks < 0:
        raise ValueError("sink count must be >= 0")
    n_sinks += (n + n_sinks) % 2
    cost = build_match_graph(adjusted, n_sinks, sink_weight)
    mate = _blossom.min_weight_perfect_matching(cost)
    pairs, sunk = _decode(mate, n)
    total = float(sum(adjusted[i, j] for i, j in pairs))
    return Pairing(pairs, sunk, total, n_sinks)


def first_stage_F(pairs: Sequence[tuple[str, str]], treatments) -> float:
    """Squared pooled two-sample t statistic of T, encouraged vs unencouraged.

    ``treatments`` maps case_id to bail_set. Returns NaN for fewer than 2
    pairs, 0 for equal means and +inf for unequal means with zero variance.
    """
    if len(pairs) < 2:
        return math.nan
    t1 = np.array([treatments[a] for a, _ in pairs], dtype=float)
    t2 = np.array([treatments[b] for _, b in pairs], dtype=float)
    return _pooled_F(t1, t2)


def _pooled_F(t1: np.ndarray, t2: np.ndarray) -> float:
    n = len(t1)
    if n < 2:
        return math.nan
    diff = t1.mean() - t2.mean()
    if diff == 0:
        return 0.0
    pooled = (t1.var(ddof=1) + t2.var(ddof=1)) / 2
    if pooled == 0:
        return math.inf
    return float(diff**2 / (pooled * 2 / n))


@dataclass(frozen=True)
class MatchedPair:
    encouraged: str
    unencouraged: str
    stratum: tuple[str, ...]
    covariate_distance: float
    severity_gap: float


@dataclass(frozen=True)
class MatchResult:
    """Pairs for one stratum (or all strata, with ``key`` None)."""

    key: Optional[tuple[str, ...]]
    pairs: tuple[MatchedPair, ...]
    dropped: tuple[str, ...]
    total_distance: float
    first_stage_F: float
    drop_reasons: dict[str, str] = field(default_factory=dict)
    dropped_covariates: tuple[str, ...] = ()

    @property
    def pair_ids(self) -> list[tuple[str, str]]:
        return [(p.encouraged, p.unencouraged) for p in self.pairs]

    @property
    def matched_ids(self) -> list[str]:
        return [c for p in self.pairs for c in (p.encouraged, p.unencouraged)]


@dataclass(frozen=True)
class SearchGrid:
    """Calibration grid; explicit ``deltas`` override the quantile-based calipers."""

    sink_fractions: tuple[float, ...] = DEFAULT_SINK_FRACTIONS
    delta_quantiles: tuple[float, ...] = DEFAULT_DELTA_QUANTILES
    deltas: Optional[tuple[float, ...]] = None
    # level of the between-judge variation test that must reject before
    # matching; None skips the test and only requires two pairs
    weak_instrument_alpha: Optional[float] = 0.01

    def __post_init__(self):
        if not self.sink_fractions or not (self.deltas or self.delta_quantiles):
            raise ValueError("search grid must be non-empty")
        if any(not 0 <= f < 1 for f in self.sink_fractions):
            raise ValueError("sink fractions must lie in [0, 1)")
        if any(not 0 <= q <= 1 for q in self.delta_quantiles):
            raise ValueError("caliper quantiles must lie in [0, 1]")
        if self.deltas is not None and any(d < 0 for d in self.deltas):
            raise ValueError("calipers must be >= 0")


@dataclass(frozen=True)
class GridPoint:
    sink_fraction: float
    delta: float
    delta_quantile: Optional[float]
    pairs: int
    global_F: float


@dataclass(frozen=True)
class Calibration:
    strata: tuple[MatchResult, ...]
    summary: MatchResult
    trace: tuple[GridPoint, ...]
    selected: GridPoint
    ineligible: tuple[str, ...]

    @property
    def cases_matched(self) -> int:
        return 2 * len(self.summary.pairs)


@dataclass
class _Prepared:
    """Per-stratum data reused across grid points."""

    strata: list[Stratum]
    problems: list[MatchProblem]
    cov_dist: list[np.ndarray]
    dropped_cols: list[tuple[str, ...]]
    gaps: list[np.ndarray]
    dist_flat: np.ndarray
    gap_flat: np.ndarray
    offsets: np.ndarray
    sizes: np.ndarray
    penalty: np.ndarray
    sink_weight: np.ndarray
    penalty_int: np.ndarray
    sink_weight_int: np.ndarray
    treat: list[np.ndarray]
    # flat per-case arrays in stratum order, for the compiled first-stage pass
    judge_flat: np.ndarray
    sev_flat: np.ndarray
    treat_flat: np.ndarray
    id_rank_flat: np.ndarray


def stratum_problem(stratum: Stratum, analysis: AnalysisSet, instrument: InstrumentTable
                    ) -> MatchProblem:
    df = analysis.frame
    rows = df.set_index("case_id").loc[list(stratum.members)]
    names = list(MATCH_COVARIATES)
    x = rows[names].to_numpy(dtype=float)
    if rows["crime_type"].nunique() > 1:
        names.append("felony")
        x = np.column_stack([x, (rows["crime_type"] == "felony").to_numpy(dtype=float)])
    sev = instrument.frame.loc[list(stratum.members), "severity"].to_numpy(dtype=float)
    return MatchProblem(stratum.key, stratum.members, x, sev, tuple(names),
                        judges=rows["judge_id"].to_numpy())


def _prepare(strata: Sequence[Stratum], analysis: AnalysisSet, instrument: InstrumentTable
             ) -> _Prepared:
    df = analysis.frame
    pos = {cid: k for k, cid in enumerate(df["case_id"])}
    x_all = df[list(MATCH_COVARIATES)].to_numpy(dtype=float)
    felony = (df["crime_type"] == "felony").to_numpy(dtype=float)
    judges_all = df["judge_id"].to_numpy()
    bail_all = df["bail_set"].to_numpy(dtype=np.int64)
    sev_all = instrument.frame["severity"].reindex(df["case_id"]).to_numpy(dtype=float)

    matchable = [s for s in strata if s.matchable]
    judge_code = pd.factorize(judges_all)[0].astype(np.int64)
    id_rank = np.argsort(np.argsort(df["case_id"].to_numpy(dtype=str), kind="stable")).astype(np.int64)
    flat_idx = []
    problems, cov_dist, dropped_cols, gaps, treat = [], [], [], [], []
    penalty, sink_weight, penalty_int, sink_weight_int = [], [], [], []
    dist_parts, gap_parts, offsets, sizes = [], [], [], []
    offset = 0
    for s in matchable:
        idx = np.array([pos[c] for c in s.members], dtype=np.int64)
        names = list(MATCH_COVARIATES)
        x = x_all[idx]
        if np.ptp(felony[idx]) > 0:
            names.append("felony")
            x = np.column_stack([x, felony[idx]])
        prob = MatchProblem(s.key, s.members, x, sev_all[idx], tuple(names),
                            judges=judges_all[idx])
        d, keep = rank_mahalanobis(x)
        g = iv_gaps(prob.severities, prob.judges)
        p = default_penalty(d)
        w = SINK_WEIGHT_MULTIPLIER * p
        scale = _weight_scale(w)
        problems.append(prob)
        cov_dist.append(d)
        dropped_cols.append(tuple(nm for nm, k in zip(names, keep) if not k))
        gaps.append(g)
        treat.append(bail_all[idx])
        penalty.append(p)
        sink_weight.append(w)
        penalty_int.append(int(round(p * scale)))
        sink_weight_int.append(int(round(w * scale)))
        dist_parts.append(np.rint(d * scale).astype(np.int64).ravel())
        gap_parts.append(g.ravel())
        flat_idx.append(idx)
        offsets.append(offset)
        sizes.append(len(idx))
        offset += len(idx) ** 2
    fi = np.concatenate(flat_idx) if flat_idx else np.empty(0, dtype=np.int64)
    cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.empty(0, dt))
    return _Prepared(
        strata=matchable, problems=problems, cov_dist=cov_dist, dropped_cols=dropped_cols,
        gaps=gaps, dist_flat=cat(dist_parts, np.int64), gap_flat=cat(gap_parts, np.float64),
        offsets=np.array(offsets, dtype=np.int64), sizes=np.array(sizes, dtype=np.int64),
        penalty=np.array(penalty), sink_weight=np.array(sink_weight),
        penalty_int=np.array(penalty_int, dtype=np.int64),
        sink_weight_int=np.array(sink_weight_int, dtype=np.int64), treat=treat,
        judge_flat=judge_code[fi], sev_flat=sev_all[fi], treat_flat=bail_all[fi],
        id_rank_flat=id_rank[fi],
    )


def _caliper_values(prep: _Prepared, grid: SearchGrid) -> list[tuple[float, Optional[float]]]:
    if grid.deltas is not None:
        return [(float(d), None) for d in grid.deltas]
    # raw |S_i - S_j| over within-stratum pairs, same-judge pairs included
    upper = []
    for prob in prep.problems:
        s = prob.severities
        upper.append(np.abs(s[:, None] - s[None, :])[np.triu_indices(len(s), 1)])
    pooled = np.concatenate(upper) if upper else np.zeros(1)
    qs = np.quantile(pooled, grid.delta_quantiles) if pooled.size else np.zeros(len(grid.delta_quantiles))
    return [(float(v), float(q)) for v, q in zip(qs, grid.delta_quantiles)]


def _solve(prep: _Prepared, sink_fraction: float, delta: float) -> np.ndarray:
    sinks = np.array([sink_count(int(n), sink_fraction) for n in prep.sizes], dtype=np.int64)
    mates = _blossom.solve_batch(prep.dist_flat, prep.gap_flat, prep.offsets, prep.sizes,
                                 prep.penalty_int, prep.sink_weight_int, float(delta), sinks)
    return mates, sinks


def _split(prep: _Prepared, mates: np.ndarray, sinks: np.ndarray):
    """Yield (stratum index, real pairs, sunk, same-judge pairs) per stratum."""
    pos = 0
    for s, n in enumerate(prep.sizes):
        n = int(n)
        m = n + int(sinks[s])
        pairs, sunk = _decode(mates[pos:pos + m], n)
        pos += m
        judges = prep.problems[s].judges
        usable = [(i, j) for i, j in pairs if judges[i] != judges[j]]
        same = [(i, j) for i, j in pairs if judges[i] == judges[j]]
        yield s, usable, sunk, same, pairs


@njit(cache=True)
def _pair_treatments(mates, sinks, sizes, judge, sev, treat, id_rank):
    """Treatments of (encouraged, unencouraged) over usable pairs of every stratum."""
    t1 = np.empty(mates.shape[0] // 2 + 1, dtype=np.float64)
    t2 = np.empty_like(t1)
    k = 0
    pos = 0
    base = 0
    for s in range(sizes.shape[0]):
        n = sizes[s]
        for i in range(n):
            j = mates[pos + i]
            if j < n and i < j and judge[base + i] != judge[base + j]:
                a, b = base + i, base + j
                if sev[b] < sev[a] or (sev[b] == sev[a] and id_rank[b] < id_rank[a]):
                    a, b = b, a
                t1[k] = treat[a]
                t2[k] = treat[b]
                k += 1
        pos += n + sinks[s]
        base += n
    return t1[:k], t2[:k]


def _global_F(prep: _Prepared, mates: np.ndarray, sinks: np.ndarray) -> tuple[int, float]:
    t1, t2 = _pair_treatments(mates, sinks, prep.sizes, prep.judge_flat, prep.sev_flat,
                              prep.treat_flat, prep.id_rank_flat)
    return len(t1), _pooled_F(t1, t2)


def _orient(i: int, j: int, sev: np.ndarray, ids: Sequence[str]) -> tuple[int, int]:
    """(encouraged, unencouraged): lower severity means a stricter judge."""
    if sev[i] < sev[j] or (sev[i] == sev[j] and ids[i] <= ids[j]):
        return i, j
    return j, i


def _better(a: GridPoint, b: Optional[GridPoint]) -> bool:
    if b is None:
        return True
    if math.isnan(b.global_F):
        return not math.isnan(a.global_F)
    if math.isnan(a.global_F):
        return False
    if a.global_F != b.global_F:
        return a.global_F > b.global_F
    return (a.sink_fraction, a.delta) < (b.sink_fraction, b.delta)


def _assemble(prep: _Prepared, strata: Sequence[Stratum], mates, sinks, delta: float
              ) -> list[MatchResult]:
    results = {}
    for s, usable, sunk, same, all_pairs in _split(prep, mates, sinks):
        prob = prep.problems[s]
        ids, sev, tr = prob.case_ids, prob.severities, prep.treat[s]
        d, gaps = prep.cov_dist[s], prep.gaps[s]
        pairs, t1, t2 = [], [], []
        for i, j in usable:
            a, b = _orient(i, j, sev, ids)
            pairs.append(MatchedPair(ids[a], ids[b], prob.key, float(d[a, b]), float(sev[b] - sev[a])))
            t1.append(tr[a])
            t2.append(tr[b])
        order = sorted(range(len(pairs)), key=lambda k: (pairs[k].encouraged, pairs[k].unencouraged))
        reasons = {ids[i]: "sink" for i in sunk}
        for i, j in same:
            reasons[ids[i]] = reasons[ids[j]] = "same_judge"
        objective = sum(d[i, j] + (prep.penalty[s] if gaps[i, j] < delta else 0.0)
                        for i, j in all_pairs)
        results[prob.key] = MatchResult(
            key=prob.key,
            pairs=tuple(pairs[k] for k in order),
            dropped=tuple(c for c in ids if c in reasons),
            total_distance=float(objective),
            first_stage_F=_pooled_F(np.array(t1, dtype=float), np.array(t2, dtype=float)),
            drop_reasons=reasons,
            dropped_covariates=prep.dropped_cols[s],
        )
    out = []
    for st in strata:
        if st.key in results:
            out.append(results[st.key])
        else:
            out.append(MatchResult(st.key, (), st.members, 0.0, math.nan,
                                   {c: "singleton" for c in st.members}))
    return out


def _summarize(results: Sequence[MatchResult], treatments: dict[str, int]) -> MatchResult:
    pairs = tuple(p for r in results for p in r.pairs)
    reasons = {c: why for r in results for c, why in r.drop_reasons.items()}
    return MatchResult(
        key=None, pairs=pairs,
        dropped=tuple(c for r in results for c in r.dropped),
        total_distance=float(sum(r.total_distance for r in results)),
        first_stage_F=first_stage_F([(p.encouraged, p.unencouraged) for p in pairs], treatments),
        drop_reasons=reasons,
    )


def calibrate_and_match(strata: Sequence[Stratum], analysis: AnalysisSet,
                        instrument: InstrumentTable, grid: SearchGrid = SearchGrid(),
                        threads: int = 1) -> Calibration:
    """Grid-search one global (sink fraction, caliper) and match every stratum with it.

    The winner maximizes the first-stage F over all resulting pairs; ties go
    to fewer sinks, then the smaller caliper. Raises WeakInstrumentError when
    bail rates show no between-judge variation at ``grid.weak_instrument_alpha``
    or when no grid point leaves two pairs.
    """
    if grid.weak_instrument_alpha is not None:
        test = judge_variation_test(analysis)
        if not test.p_value < grid.weak_instrument_alpha:
            raise WeakInstrumentError(
                f"instrument too weak: no detectable between-judge variation in bail rates "
                f"(chi-square {test.statistic:.4g} on {test.df} df, p = {test.p_value:.3g})")
    prep = _prepare(strata, analysis, instrument)
    calipers = _caliper_values(prep, grid)
    points = [(f, d, q) for f in grid.sink_fractions for d, q in calipers]

    cache: dict[tuple[float, float], tuple] = {}

    def run(point):
        f, d, q = point
        key = (f, d)
        if key not in cache:
            mates, sinks = _solve(prep, f, d)
            n_pairs, F = _global_F(prep, mates, sinks)
            cache[key] = (mates, sinks, n_pairs, F)
        _m, _s, n_pairs, F = cache[key]
        return GridPoint(f, d, q, n_pairs, F)

    if threads > 1:
        unique = list({(f, d): (f, d, q) for f, d, q in points}.values())
        with ThreadPoolExecutor(threads) as pool:
            for pt, res in zip(unique, pool.map(lambda p: (_solve(prep, p[0], p[1])), unique)):
                mates, sinks = res
                n_pairs, F = _global_F(prep, mates, sinks)
                cache[(pt[0], pt[1])] = (mates, sinks, n_pairs, F)
    trace = [run(p) for p in points]

    best = None
    for pt in trace:
        if _better(pt, best):
            best = pt
    if best is None or best.pairs < 2 or math.isnan(best.global_F):
        raise WeakInstrumentError("instrument too weak / data too small: no grid point yields 2 pairs")

    mates, sinks, _n, _F = cache[(best.sink_fraction, best.delta)]
    results = _assemble(prep, strata, mates, sinks, best.delta)
    treatments = dict(zip(analysis.frame["case_id"], analysis.frame["bail_set"].astype(int)))
    summary = _summarize(results, treatments)
    ineligible = tuple(instrument.frame.index[instrument.frame["flagged"].to_numpy()])
    log.info("selected sink_fraction=%s delta=%.4g: %d pairs, F=%.4g",
             best.sink_fraction, best.delta, best.pairs, best.global_F)
    return Calibration(tuple(results), summary, tuple(trace), best, ineligible)


def match_stratum(problem: MatchProblem) -> MatchResult:
    """Match a single problem at its own caliper, penalty and sink fraction.

    Uses the same integer weights as :func:`calibrate_and_match`, so a stratum
    gets identical pairs either way.
    """
    d, dropped_cols = covariate_distance_matrix(problem)
    penalty = problem.penalty if problem.penalty is not None else default_penalty(d)
    gaps = iv_gaps(problem.severities, problem.judges)
    sink_weight = SINK_WEIGHT_MULTIPLIER * penalty
    scale = _weight_scale(sink_weight)
    n = problem.size
    sinks = np.array([sink_count(n, problem.sink_fraction)], dtype=np.int64)
    mate = _blossom.solve_batch(
        np.rint(d * scale).astype(np.int64).ravel(), gaps.ravel().astype(np.float64),
        np.zeros(1, dtype=np.int64), np.array([n], dtype=np.int64),
        np.array([int(round(penalty * scale))], dtype=np.int64),
        np.array([int(round(sink_weight * scale))], dtype=np.int64),
        float(problem.caliper), sinks)
    pairing, sunk = _decode(mate, n)
    ids, sev = problem.case_ids, problem.severities
    judges = problem.judges if problem.judges is not None else np.arange(n)
    pairs, reasons = [], {ids[i]: "sink" for i in sunk}
    objective = 0.0
    for i, j in pairing:
        objective += d[i, j] + (penalty if gaps[i, j] < problem.caliper else 0.0)
        if judges[i] == judges[j]:
            reasons[ids[i]] = reasons[ids[j]] = "same_judge"
            continue
        a, b = _orient(i, j, sev, ids)
        pairs.append(MatchedPair(ids[a], ids[b], tuple(problem.key), float(d[a, b]),
                                 float(sev[b] - sev[a])))
    pairs.sort(key=lambda p: (p.encouraged, p.unencouraged))
    return MatchResult(tuple(problem.key), tuple(pairs), tuple(c for c in ids if c in reasons),
                       float(objective), math.nan, reasons, dropped_cols)


def write_pairs(result: MatchResult, path) -> None:
    rows = [
        {
            "pair_id": k + 1,
            "stratum_key": "|".join(p.stratum),
            "encouraged_case_id": p.encouraged,
            "unencouraged_case_id": p.unencouraged,
            "covariate_distance": repr(p.covariate_distance),
            "severity_gap": repr(p.severity_gap),
        }
        for k, p in enumerate(result.pairs)
    ]
    cols = ["pair_id", "stratum_key", "encouraged_case_id", "unencouraged_case_id",
            "covariate_distance", "severity_gap"]
    pd.DataFrame(rows, columns=cols).to_csv(path, index=False, lineterminator="\n")


def read_pairs(path) -> list[MatchedPair]:
    # floats are read as text so repr() values come back bit-for-bit
    df = pd.read_csv(path, dtype={"stratum_key": str, "encouraged_case_id": str,
                                  "unencouraged_case_id": str, "covariate_distance": str,
                                  "severity_gap": str}, keep_default_na=False)
    return [
        MatchedPair(r.encouraged_case_id, r.unencouraged_case_id, tuple(r.stratum_key.split("|")),
                    float(r.covariate_distance), float(r.severity_gap))
        for r in df.itertuples(index=False)
    ]


def write_trace(trace: Iterable[GridPoint], path) -> None:
    rows = [{"sink_fraction": repr(p.sink_fraction), "delta": repr(p.delta),
             "pairs": p.pairs, "global_F": repr(p.global_F)} for p in trace]
    pd.DataFrame(rows, columns=["sink_fraction", "delta", "pairs", "global_F"]).to_csv(
        path, index=False, lineterminator="\n")

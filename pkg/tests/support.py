"""Independent oracles and record factories shared by the test modules.

Nothing here imports the code under test's internals; each oracle is written
from the definitions with plain loops so that it can disagree.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from nearfar.data_model import CaseRecord


def record(case_id="C1", judge_id="J1", region="A", top_charge="Assault 1", **kw) -> CaseRecord:
    base = dict(
        crime_type="misdemeanor", charge_class="A", gender="male", age=30.0,
        race_white=0, race_black=1, non_hispanic=1, prior_counts_2014=0,
        weekly_income=0.0, any_income=0, has_employer=0, has_phone=0, has_address=1,
        bail_set=0, guilty=0, disposed_at_arraignment=0, excluded_reason=None,
    )
    base.update(kw)
    return CaseRecord(case_id, judge_id, region, top_charge, **base)


def random_records(rng: np.random.Generator, n: int, n_judges=4, n_regions=2, n_charges=3,
                   prefix="C") -> list[CaseRecord]:
    out = []
    for i in range(n):
        income = float(rng.choice([0.0, 0.0, round(float(rng.uniform(50, 900)), 2)]))
        out.append(record(
            f"{prefix}{i:05d}", f"J{rng.integers(n_judges)}", "AB"[rng.integers(n_regions)],
            f"Charge {rng.integers(n_charges)}",
            crime_type="felony" if rng.random() < 0.3 else "misdemeanor",
            gender="male" if rng.random() < 0.7 else "female",
            age=float(rng.integers(18, 70)), race_white=int(rng.random() < 0.3),
            prior_counts_2014=int(rng.poisson(0.8)), weekly_income=income,
            any_income=int(income > 0), has_employer=int(rng.random() < 0.2),
            has_phone=int(rng.random() < 0.2), has_address=int(rng.random() < 0.8),
            bail_set=int(rng.random() < 0.4), guilty=int(rng.random() < 0.5),
        ))
    return out


# severity -------------------------------------------------------------------

def direct_severity(records) -> dict[str, float]:
    """Leave-one-out judge mean of (1 - T) minus leave-one-out region mean, by summation."""
    out = {}
    for r in records:
        judge_others = [1 - q.bail_set for q in records if q is not r and q.judge_id == r.judge_id
                        and q.region == r.region and q.top_charge == r.top_charge]
        region_others = [1 - q.bail_set for q in records if q is not r and q.region == r.region
                         and q.top_charge == r.top_charge]
        if not judge_others or not region_others:
            out[r.case_id] = math.nan
            continue
        judge_mean = 0.0
        for v in judge_others:
            judge_mean += v
        region_mean = 0.0
        for v in region_others:
            region_mean += v
        out[r.case_id] = judge_mean / len(judge_others) - region_mean / len(region_others)
    return out


# matching -------------------------------------------------------------------

def brute_force_min_matching(cost) -> int:
    """Minimum total weight over every perfect matching of a complete graph."""
    cost = np.asarray(cost)
    n = cost.shape[0]
    assert n % 2 == 0

    def rec(left):
        if not left:
            return 0
        first, rest = left[0], left[1:]
        best = None
        for k, other in enumerate(rest):
            w = int(cost[first, other]) + rec(rest[:k] + rest[k + 1:])
            best = w if best is None else min(best, w)
        return best

    return rec(tuple(range(n)))


def all_perfect_matchings(n: int):
    if n == 0:
        yield []
        return
    for k in range(1, n):
        rest = [i for i in range(1, n) if i != k]
        for m in all_perfect_matchings(len(rest)):
            yield [(0, k)] + [(rest[a], rest[b]) for a, b in m]


def matching_weight(cost, mate) -> int:
    return int(sum(int(cost[i, j]) for i, j in enumerate(mate) if i < j))


def textbook_rank_mahalanobis(x) -> np.ndarray:
    """sqrt((r_i - r_j)' pinv(S) (r_i - r_j)) on average ranks with tie-adjusted covariance."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    keep = [k for k in range(p) if x[:, k].max() > x[:, k].min()]
    ranks = np.empty((n, len(keep)))
    for c, k in enumerate(keep):
        col = x[:, k]
        for i in range(n):
            ranks[i, c] = (col < col[i]).sum() + ((col == col[i]).sum() + 1) / 2
    cov = np.cov(ranks, rowvar=False).reshape(len(keep), len(keep))
    untied = np.var(np.arange(1, n + 1), ddof=1)
    adj = np.diag(np.sqrt(untied / np.diag(cov)))
    inv = np.linalg.pinv(adj @ cov @ adj, hermitian=True)
    out = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        d = ranks[i] - ranks[j]
        out[i, j] = out[j, i] = math.sqrt(max(d @ inv @ d, 0.0))
    return out


# inference ------------------------------------------------------------------

def studentized(dG, dT, lam0) -> float:
    v = np.asarray(dG, dtype=float) - lam0 * np.asarray(dT, dtype=float)
    I = len(v)
    se = math.sqrt(((v - v.mean()) ** 2).sum() / (I * (I - 1)))
    if se == 0:
        return 0.0 if v.mean() == 0 else math.copysign(math.inf, v.mean())
    return v.mean() / se


def grid_ci(dG, dT, z, lo, hi, step=1e-4) -> tuple[float, float]:
    """Smallest and largest grid value accepted by the studentized test."""
    dG, dT = np.asarray(dG, dtype=float), np.asarray(dT, dtype=float)
    I = len(dG)
    grid = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    v = dG[None, :] - grid[:, None] * dT[None, :]
    mean = v.mean(axis=1)
    var = ((v - mean[:, None]) ** 2).sum(axis=1) / (I * (I - 1))
    accepted = mean**2 <= z * z * var
    if not accepted.any():
        return math.nan, math.nan
    idx = np.flatnonzero(accepted)
    return float(grid[idx[0]]), float(grid[idx[-1]])


def simulate_pairs(rng: np.random.Generator, n_pairs: int, effect: float, complier: float = 0.5,
                   always: float = 0.25, base: float = 0.3):
    """Pair-level encouragement design: one member of each pair is encouraged.

    Each member has a compliance type; compliers take treatment only when
    encouraged. Outcomes are Bernoulli with a shift of ``effect`` under treatment.
    """
    u = rng.random((n_pairs, 2))
    ctype = np.where(u < always, 0, np.where(u < always + complier, 2, 1))
    encouraged = np.array([1, 0])
    t = np.where(ctype == 0, 1, np.where(ctype == 1, 0, encouraged[None, :]))
    y0 = rng.random((n_pairs, 2)) < base
    y1 = rng.random((n_pairs, 2)) < base + effect
    g = np.where(t == 1, y1, y0).astype(int)
    return g[:, 0], g[:, 1], t[:, 0], t[:, 1]

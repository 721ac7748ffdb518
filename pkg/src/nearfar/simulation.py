"""Synthetic bail data with a known complier effect.

Defendants are spread uniformly over the judges of their region, so judge
assignment is independent of everything about the case. Each defendant has
a principal stratum: always bailed, never bailed, or a complier who is bailed
with the judge's strictness probability. A risk score built from observed and
unobserved traits raises both the chance of being an always-bail case and
the baseline chance of conviction, which confounds a naive comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_model import CaseRecord

OFFENSES = (
    "Assault", "Petit Larceny", "Grand Larceny", "Criminal Mischief", "Burglary",
    "Robbery", "Criminal Trespass", "Drug Possession", "Drug Sale", "Menacing",
    "Harassment", "Forgery", "Weapon Possession", "Resisting Arrest", "Fraud",
    "Theft of Services", "Criminal Contempt", "Stolen Property", "Reckless Endangerment",
    "Unauthorized Use of Vehicle",
)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class SimScenario:
    n_cases: int = 20_000
    n_judges: int = 30
    n_regions: int = 10
    charges_per_region: int = 60
    felony_share: float = 0.15
    male_share: float = 0.81
    # per-judge probability that a complier has bail set, drawn uniformly
    strictness_low: float = 0.05
    strictness_high: float = 0.95
    always_bail: float = 0.20
    never_bail: float = 0.20
    complier: float = 0.60
    confounding: float = 0.3
    lambda_true: float = 0.34
    base_guilt: float = 0.35
    # records that the inclusion filters must remove
    disposed_rate: float = 0.0
    excluded_rate: float = 0.0
    unresolved_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.n_cases < 2 or self.n_judges < 1 or self.n_regions < 1 or self.charges_per_region < 1:
            problems.append("counts must be positive (n_cases >= 2)")
        if self.n_judges < self.n_regions:
            problems.append("every region needs at least one judge")
        if not math.isclose(self.always_bail + self.never_bail + self.complier, 1.0, abs_tol=1e-9):
            problems.append("compliance fractions must sum to 1")
        for name in ("felony_share", "male_share", "strictness_low", "strictness_high",
                     "always_bail", "never_bail", "complier", "confounding", "base_guilt",
                     "disposed_rate", "excluded_rate", "unresolved_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                problems.append(f"{name} must lie in [0, 1]")
        if self.strictness_low > self.strictness_high:
            problems.append("strictness_low must not exceed strictness_high")
        if not -1 <= self.lambda_true <= 1:
            problems.append("lambda_true must lie in [-1, 1]")
        swing = self.confounding
        if self.always_bail < swing / 2 or self.never_bail < swing / 2:
            problems.append("always_bail and never_bail must be at least confounding/2")
        lo, hi = self.base_guilt - swing, self.base_guilt + swing
        if lo < 0 or hi > 1 or lo + self.lambda_true < 0 or hi + self.lambda_true > 1:
            problems.append("base_guilt +/- confounding (+ lambda_true) leaves [0, 1]")
        if problems:
            raise ScenarioError("; ".join(problems))


@dataclass(frozen=True)
class GroundTruth:
    lambda_true: float
    sample_complier_effect: float
    naive_difference: float
    n_compliers: int
    judge_strictness: dict[str, float] = field(default_factory=dict)
    seed: int = 0


def _charges(rng: np.random.Generator, n: int, felony_share: float):
    names, types, classes = [], [], []
    for k in range(n):
        offense = OFFENSES[k % len(OFFENSES)]
        degree = 1 + k // len(OFFENSES)
        felony = rng.random() < felony_share
        names.append(f"{offense} {degree}")
        types.append("felony" if felony else "misdemeanor")
        classes.append("ABCDE"[int(rng.integers(0, 5))] if felony else "AB"[int(rng.integers(0, 2))])
    return names, types, classes


def _region_name(k: int) -> str:
    name = ""
    k += 1
    while k:
        k, r = divmod(k - 1, 26)
        name = chr(ord("A") + r) + name
    return name


def generate(scenario: SimScenario) -> tuple[list[CaseRecord], GroundTruth]:
    """Draw one synthetic dataset; identical scenarios give identical output."""
    sc = scenario
    rng = np.random.default_rng(sc.seed)
    n = sc.n_cases

    regions = [_region_name(k) for k in range(sc.n_regions)]
    judges = [f"J{k + 1:02d}" for k in range(sc.n_judges)]
    judge_region = np.arange(sc.n_judges) % sc.n_regions
    strictness = rng.uniform(sc.strictness_low, sc.strictness_high, sc.n_judges)
    charge_names, charge_types, charge_classes = _charges(rng, sc.charges_per_region, sc.felony_share)
    popularity = 1.0 / (np.arange(sc.charges_per_region) + sc.charges_per_region)
    popularity /= popularity.sum()

    region = rng.integers(0, sc.n_regions, n)
    charge = rng.choice(sc.charges_per_region, n, p=popularity)
    # uniform judge within region: the pseudo-randomizer
    judge = np.empty(n, dtype=np.int64)
    for b in range(sc.n_regions):
        pool = np.flatnonzero(judge_region == b)
        idx = np.flatnonzero(region == b)
        judge[idx] = rng.choice(pool, idx.size)

    male = rng.random(n) < sc.male_share
    age = np.round(18 + rng.gamma(2.0, 7.3, n), 1)
    race = rng.choice(3, n, p=[0.28, 0.52, 0.20])
    non_hispanic = (rng.random(n) < 0.65).astype(int)
    hidden = rng.standard_normal(n)
    prior = rng.poisson(np.exp(-0.9 + 0.6 * hidden))
    has_address = (rng.random(n) < 1 / (1 + np.exp(-(2.4 - 0.5 * hidden)))).astype(int)
    has_employer = (rng.random(n) < 0.17).astype(int)
    has_phone = (rng.random(n) < 0.15).astype(int)
    any_income = (rng.random(n) < 0.12).astype(int)
    income = np.where(any_income == 1, np.round(rng.lognormal(6.0, 0.5, n), 2), 0.0)

    # risk score in (-1, 1): part observed, part hidden
    z_prior = (prior - prior.mean()) / (prior.std() or 1.0)
    risk = np.tanh(0.6 * z_prior + 0.8 * (1 - has_address) - 0.4 * has_employer
                   + 0.03 * (age - 32) + 0.5 * hidden)
    # the risk score moves the compliance type at half the strength it moves guilt
    swing = sc.confounding * risk
    p_always = sc.always_bail + swing / 2
    p_never = sc.never_bail - swing / 2
    u = rng.random(n)
    ctype = np.where(u < p_always, 0, np.where(u < p_always + p_never, 1, 2))  # 2 = complier

    comply_bail = rng.random(n) < strictness[judge]
    bail = np.where(ctype == 0, 1, np.where(ctype == 1, 0, comply_bail.astype(int)))

    p0 = sc.base_guilt + swing
    g0 = (rng.random(n) < p0).astype(int)
    g1 = (rng.random(n) < p0 + sc.lambda_true).astype(int)
    guilty = np.where(bail == 1, g1, g0)

    disposed = (rng.random(n) < sc.disposed_rate).astype(int)
    excl_draw = rng.random(n)
    excluded = np.where(excl_draw < sc.excluded_rate,
                        rng.choice(np.array(["extradited", "special_court", "irregular"]), n), "")
    unresolved = rng.random(n) < sc.unresolved_rate

    records = [
        CaseRecord(
            case_id=f"C{i + 1:06d}",
            judge_id=judges[judge[i]],
            region=regions[region[i]],
            top_charge=charge_names[charge[i]],
            crime_type=charge_types[charge[i]],
            charge_class=charge_classes[charge[i]],
            gender="male" if male[i] else "female",
            age=float(age[i]),
            race_white=int(race[i] == 0),
            race_black=int(race[i] == 1),
            non_hispanic=int(non_hispanic[i]),
            prior_counts_2014=int(prior[i]),
            weekly_income=float(income[i]),
            any_income=int(any_income[i]),
            has_employer=int(has_employer[i]),
            has_phone=int(has_phone[i]),
            has_address=int(has_address[i]),
            bail_set=int(bail[i]),
            guilty=None if unresolved[i] else int(guilty[i]),
            disposed_at_arraignment=int(disposed[i]),
            excluded_reason=excluded[i] or None,
        )
        for i in range(n)
    ]

    compliers = ctype == 2
    naive = guilty[bail == 1].mean() - guilty[bail == 0].mean() if 0 < bail.sum() < n else math.nan
    truth = GroundTruth(
        lambda_true=sc.lambda_true,
        sample_complier_effect=float((g1 - g0)[compliers].mean()) if compliers.any() else math.nan,
        naive_difference=float(naive),
        n_compliers=int(compliers.sum()),
        judge_strictness={j: float(s) for j, s in zip(judges, strictness)},
        seed=sc.seed,
    )
    return records, truth


def replicate_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-replicate seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(n)]


def naive_difference(records) -> float:
    """Conviction rate with bail minus conviction rate without, over resolved cases."""
    g = np.array([r.guilty for r in records if r.guilty is not None], dtype=float)
    t = np.array([r.bail_set for r in records if r.guilty is not None], dtype=float)
    return float(g[t == 1].mean() - g[t == 0].mean())


def write_truth(truth: GroundTruth, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(truth), indent=2, sort_keys=True) + "\n")


def read_truth(path: str | Path) -> GroundTruth:
    return GroundTruth(**json.loads(Path(path).read_text()))

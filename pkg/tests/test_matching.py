import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from nearfar import _blossom
from nearfar.data_model import apply_filters
from nearfar.instrument import compute_severity
from nearfar.matching import (
    MatchProblem, SearchGrid, WeakInstrumentError, build_match_graph, calibrate_and_match,
    covariate_distance_matrix, first_stage_F, match_stratum, nearfar_adjusted_distance,
    optimal_nonbipartite_match, rank_mahalanobis, read_pairs, sink_count, stratify,
    stratum_problem, write_pairs, write_trace,
)
from support import (
    all_perfect_matchings, brute_force_min_matching, matching_weight, random_records, record,
    textbook_rank_mahalanobis,
)


def _analysis(records):
    analysis = apply_filters(records)
    return analysis, compute_severity(analysis)


# strata ---------------------------------------------------------------------

def test_stratify_splits_by_gender():
    recs = [record(f"F{k}", f"J{k % 2}", gender="female") for k in range(2)]
    recs += [record(f"M{k}", f"J{k % 2}") for k in range(3)]
    strata = stratify(*_analysis(recs))
    assert [len(s.members) for s in strata] == [2, 3]
    assert strata[0].key == ("Assault 1", "A", "female")


def test_identical_keys_one_stratum():
    recs = [record(f"C{k}", f"J{k % 2}") for k in range(6)]
    assert len(stratify(*_analysis(recs))) == 1


def test_singleton_stratum_unmatched():
    recs = [record(f"C{k}", f"J{k % 2}") for k in range(4)] + [
        record("X1", "J0", region="B"), record("X2", "J0", region="B", gender="female")]
    strata = stratify(*_analysis(recs))
    lone = [s for s in strata if s.key[1] == "B"]
    assert all(not s.matchable for s in lone)


@given(st.integers(0, 2**32 - 1))
def test_strata_partition_eligible_cases(seed):
    recs = random_records(np.random.default_rng(seed), 60)
    analysis, table = _analysis(recs)
    strata = stratify(analysis, table)
    members = [c for s in strata for c in s.members]
    assert sorted(members) == sorted(table.frame.index[~table.frame["flagged"]])
    by_id = analysis.by_id
    for s in strata:
        assert all((by_id[c].top_charge, by_id[c].region, by_id[c].gender) == s.key
                   for c in s.members)


# distances ------------------------------------------------------------------

def test_identical_vectors_distance_zero():
    x = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 0.0]])
    d, _ = rank_mahalanobis(x)
    assert d[0, 1] == 0.0


def test_single_covariate_proportional_to_rank_gaps():
    d, keep = rank_mahalanobis(np.array([[1.0], [2.0], [3.0]]))
    oracle = textbook_rank_mahalanobis(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(d, oracle, atol=1e-12)
    # rank variance is 1, so distances are the raw rank gaps
    np.testing.assert_allclose(d, [[0, 1, 2], [1, 0, 1], [2, 1, 0]], atol=1e-12)
    assert keep.tolist() == [True]


@given(st.integers(0, 2**32 - 1), st.integers(2, 9), st.integers(1, 5))
def test_distance_matches_quadratic_form(seed, n, p):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, (n, p)).astype(float)  # plenty of ties and collinearity
    d, keep = rank_mahalanobis(x)
    if keep.any():
        np.testing.assert_allclose(d, textbook_rank_mahalanobis(x), atol=1e-8)
    assert np.array_equal(d, d.T)
    assert (np.diag(d) == 0).all() and (d >= 0).all()


def test_constant_column_dropped_and_named():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(size=6), np.ones(6), rng.normal(size=6)])
    prob = MatchProblem(("k",), tuple("abcdef"), x, np.zeros(6), ("age", "male", "income"))
    _d, dropped = covariate_distance_matrix(prob)
    assert dropped == ("male",)


def test_problem_validation():
    with pytest.raises(ValueError):
        MatchProblem(("k",), ("a", "b"), np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        MatchProblem(("k",), ("a", "b"), np.zeros((2, 1)), np.zeros(2), caliper=-1)
    with pytest.raises(ValueError):
        MatchProblem(("k",), ("a", "b"), np.zeros((2, 1)), np.zeros(2), penalty=0)


def test_zero_caliper_adds_nothing():
    d = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], dtype=float)
    out = nearfar_adjusted_distance(d, [0.1, 0.1, 0.5], 0.0, 50.0)
    np.testing.assert_array_equal(out, d)


def test_equal_severity_inside_caliper_pays_exactly_P():
    d = np.array([[0, 1], [1, 0]], dtype=float)
    out = nearfar_adjusted_distance(d, [0.2, 0.2], 0.01, 7.5)
    assert out[0, 1] == 8.5


def test_mixed_four_case_penalties():
    rng = np.random.default_rng(11)
    d = rng.uniform(0, 2, (4, 4))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0)
    sev = np.array([0.0, 0.05, 0.3, 0.31])
    out = nearfar_adjusted_distance(d, sev, 0.1, 10.0)
    for i in range(4):
        for j in range(4):
            expected = 0.0 if i == j else d[i, j] + (10.0 if abs(sev[i] - sev[j]) < 0.1 else 0.0)
            assert out[i, j] == expected
    # 0-1 and 2-3 sit inside the caliper, the cross pairs do not
    assert out[0, 1] == d[0, 1] + 10 and out[0, 2] == d[0, 2]


def test_same_judge_pairs_have_no_gap():
    out = nearfar_adjusted_distance(np.zeros((2, 2)), [0.0, 0.9], 0.1, 5.0, judges=["J1", "J1"])
    assert out[0, 1] == 5.0


# kernel ---------------------------------------------------------------------

def test_two_nodes():
    res = optimal_nonbipartite_match(np.array([[0.0, 3.0], [3.0, 0.0]]))
    assert res.pairs == [(0, 1)] and res.sunk == []


def test_four_nodes_against_all_three_matchings():
    d = np.array([[0, 4, 1, 7], [4, 0, 6, 2], [1, 6, 0, 5], [7, 2, 5, 0]], dtype=float)
    costs = {tuple(m): sum(d[i, j] for i, j in m) for m in all_perfect_matchings(4)}
    assert len(costs) == 3
    res = optimal_nonbipartite_match(d)
    assert sorted(res.pairs) == sorted(min(costs, key=costs.get))
    assert res.total_weight == min(costs.values())


def test_three_nodes_one_sink():
    d = np.array([[0, 1, 9], [1, 0, 8], [9, 8, 0]], dtype=float)
    res = optimal_nonbipartite_match(d, 1)
    assert res.pairs == [(0, 1)] and res.sunk == [2]
    cost = build_match_graph(d, 1)
    assert brute_force_min_matching(cost) == cost[0, 1]


def test_odd_order_gets_extra_sink():
    res = optimal_nonbipartite_match(np.ones((3, 3)) - np.eye(3))
    assert res.n_sinks == 1
    assert sink_count(5, 0.0) == 1 and sink_count(4, 0.25) == 2 and sink_count(4, 0.3) == 2


def test_kernel_rejects_bad_input():
    with pytest.raises(ValueError):
        _blossom.min_weight_perfect_matching(np.zeros((3, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        _blossom.min_weight_perfect_matching(np.array([[0, 1], [2, 0]]))
    with pytest.raises(ValueError):
        _blossom.min_weight_perfect_matching(np.array([[0, -1], [-1, 0]]))


def _odd_cycle_instance():
    # two triangles of cheap edges joined by expensive ones: the assignment
    # relaxation is two 3-cycles, so the warm-started blossom path runs
    big = 100
    c = np.full((6, 6), big, dtype=np.int64)
    for tri in ((0, 1, 2), (3, 4, 5)):
        for a in tri:
            for b in tri:
                c[a, b] = 1
    c[2, 3] = c[3, 2] = 50
    np.fill_diagonal(c, 0)
    return c


def test_odd_cycles_take_the_blossom_path():
    c = _odd_cycle_instance()
    sigma, _u, _v = _blossom._assignment(c)
    _mate, free = _blossom._split_cycles(sigma)
    assert free == 2
    mate = _blossom.min_weight_perfect_matching(c)
    assert matching_weight(c, mate) == brute_force_min_matching(c) == 52


@st.composite
def cost_matrices(draw, max_n=10):
    n = 2 * draw(st.integers(1, max_n // 2))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    kind = draw(st.sampled_from(["uniform", "small", "metric"]))
    if kind == "uniform":
        c = rng.integers(0, 10**6, (n, n))
    elif kind == "small":
        c = rng.integers(0, 4, (n, n))
    else:
        pts = rng.normal(size=(n, 2))
        c = np.rint(1000 * np.linalg.norm(pts[:, None] - pts[None], axis=2)).astype(np.int64)
    c = np.triu(c, 1)
    c = c + c.T
    return c.astype(np.int64)


@given(cost_matrices())
def test_kernel_is_optimal(c):
    mate = _blossom.min_weight_perfect_matching(c)
    assert sorted(mate) == list(range(len(c)))
    assert all(mate[mate[i]] == i and mate[i] != i for i in range(len(c)))
    assert matching_weight(c, mate) == brute_force_min_matching(c)


@given(cost_matrices(max_n=14))
def test_warm_start_agrees_with_plain_blossom(c):
    fast = _blossom.min_weight_perfect_matching(c)
    plain = _blossom._blossom_min_weight_perfect(c)
    assert matching_weight(c, fast) == matching_weight(c, plain)


# first-stage F --------------------------------------------------------------

def _treat(enc, unenc):
    pairs = [(f"e{k}", f"u{k}") for k in range(len(enc))]
    tr = {f"e{k}": v for k, v in enumerate(enc)} | {f"u{k}": v for k, v in enumerate(unenc)}
    return pairs, tr


def test_F_hand_example():
    pairs, tr = _treat([1, 1, 0, 1], [0, 1, 0, 0])
    t = stats.ttest_ind([1, 1, 0, 1], [0, 1, 0, 0], equal_var=True).statistic
    assert first_stage_F(pairs, tr) == pytest.approx(t**2, rel=1e-12)
    assert first_stage_F(pairs, tr) == pytest.approx(2.0, rel=1e-12)


def test_F_edge_cases():
    assert first_stage_F(*_treat([1, 0, 1], [1, 0, 1])) == 0.0
    assert first_stage_F(*_treat([1] * 5, [0] * 5)) == math.inf
    assert math.isnan(first_stage_F(*_treat([1], [0])))


# single stratum -------------------------------------------------------------

def _problem(seed, n=8, p=4, **kw):
    rng = np.random.default_rng(seed)
    return MatchProblem(("k",), tuple(f"c{i}" for i in range(n)), rng.normal(size=(n, p)),
                        rng.uniform(-0.5, 0.5, n), **kw)


@given(st.integers(0, 2**32 - 1), st.integers(2, 9), st.floats(0, 0.5), st.floats(0, 0.45))
def test_stratum_invariants(seed, n, caliper, sink_fraction):
    prob = _problem(seed, n=n, caliper=caliper, sink_fraction=sink_fraction)
    res = match_stratum(prob)
    sev = dict(zip(prob.case_ids, prob.severities))
    for pair in res.pairs:
        assert sev[pair.encouraged] <= sev[pair.unencouraged]
        assert pair.severity_gap == sev[pair.unencouraged] - sev[pair.encouraged]
    used = res.matched_ids + list(res.dropped)
    assert sorted(used) == sorted(prob.case_ids)
    assert len(set(used)) == len(used)
    assert match_stratum(prob) == res


def test_equal_severities_break_ties_by_case_id():
    prob = MatchProblem(("k",), ("b", "a"), np.array([[1.0], [2.0]]), np.array([0.1, 0.1]))
    pair = match_stratum(prob).pairs[0]
    assert (pair.encouraged, pair.unencouraged, pair.severity_gap) == ("a", "b", 0.0)


@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(1, 50), st.integers(1, 50))
def test_larger_penalty_never_adds_caliper_pairs(seed, n, p1, p2):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 20, (n, n)).astype(float)
    d = np.triu(d, 1) + np.triu(d, 1).T
    sev = rng.integers(0, 4, n) / 10
    lo, hi = sorted((p1, p2))

    def inside(P):
        res = optimal_nonbipartite_match(nearfar_adjusted_distance(d, sev, 0.15, P), 0,
                                         sink_weight=10_000.0)
        return sum(abs(sev[i] - sev[j]) < 0.15 for i, j in res.pairs)

    assert inside(hi) <= inside(lo)


def test_aberrant_unit_goes_to_a_sink():
    rng = np.random.default_rng(2)
    x = np.column_stack([rng.normal(size=7), rng.normal(size=7)])
    x = np.vstack([x, [40.0, -40.0]])
    sev = np.linspace(-0.3, 0.3, 8)
    d, _ = rank_mahalanobis(x)
    base = optimal_nonbipartite_match(d, 0)
    sunk = optimal_nonbipartite_match(d, 2)
    assert 7 in sunk.sunk
    assert sunk.total_weight < base.total_weight
    # brute force over every choice of two dropped cases and every pairing of the rest
    best = math.inf
    for drop in [(a, b) for a in range(8) for b in range(a + 1, 8)]:
        keep = [i for i in range(8) if i not in drop]
        for m in all_perfect_matchings(6):
            best = min(best, sum(d[keep[i], keep[j]] for i, j in m))
    assert sunk.total_weight == pytest.approx(best, abs=1e-6)
    del sev


# calibration ----------------------------------------------------------------

def _sim_analysis(seed=1, n=3000, **kw):
    from nearfar.simulation import SimScenario, generate
    recs, _ = generate(SimScenario(n_cases=n, n_judges=6, n_regions=2, charges_per_region=8,
                                   seed=seed, **kw))
    return _analysis(recs)


@pytest.fixture(scope="module")
def small_sim():
    analysis, table = _sim_analysis()
    return analysis, table, stratify(analysis, table)


def test_degenerate_grid_is_plain_matching(small_sim):
    analysis, table, strata = small_sim
    cal = calibrate_and_match(strata, analysis, table, SearchGrid((0.0,), deltas=(0.0,)))
    assert len(cal.trace) == 1
    for st_, res in zip(strata, cal.strata):
        if not st_.matchable:
            continue
        prob = stratum_problem(st_, analysis, table)
        d, _ = covariate_distance_matrix(prob)
        plain = optimal_nonbipartite_match(d, 0)
        got = {frozenset(p) for p in res.pair_ids}
        same_judge = {c for c, why in res.drop_reasons.items() if why == "same_judge"}
        ids = prob.case_ids
        want = {frozenset((ids[i], ids[j])) for i, j in plain.pairs
                if ids[i] not in same_judge}
        assert got == want


def test_batch_and_single_stratum_agree(small_sim):
    analysis, table, strata = small_sim
    grid = SearchGrid((0.0, 0.2), (0.3, 0.8))
    cal = calibrate_and_match(strata, analysis, table, grid)
    sel = cal.selected
    for st_, res in zip(strata, cal.strata):
        if not st_.matchable:
            continue
        prob = stratum_problem(st_, analysis, table)
        prob.caliper, prob.sink_fraction = sel.delta, sel.sink_fraction
        single = match_stratum(prob)
        assert single.pairs == res.pairs and single.dropped == res.dropped


def test_selection_is_the_best_F_and_threads_agree(small_sim):
    analysis, table, strata = small_sim
    grid = SearchGrid((0.0, 0.1), (0.2, 0.6, 0.9))
    cal = calibrate_and_match(strata, analysis, table, grid)
    assert cal.selected.global_F == max(p.global_F for p in cal.trace)
    assert cal.summary.first_stage_F == pytest.approx(cal.selected.global_F, rel=1e-12)
    assert len(cal.summary.pairs) == cal.selected.pairs
    threaded = calibrate_and_match(strata, analysis, table, grid, threads=3)
    assert threaded.selected == cal.selected and threaded.summary == cal.summary
    reordered = calibrate_and_match(list(reversed(strata)), analysis, table, grid)
    assert reordered.selected == cal.selected
    assert set(reordered.summary.pairs) == set(cal.summary.pairs)


def test_identical_judges_are_too_weak():
    analysis, table = _sim_analysis(seed=2, n=6000, strictness_low=0.5, strictness_high=0.5)
    with pytest.raises(WeakInstrumentError):
        calibrate_and_match(stratify(analysis, table), analysis, table)


def test_too_few_pairs_is_too_weak():
    recs = [record("C1", "J1", bail_set=1), record("C2", "J1"), record("C3", "J2"),
            record("C4", "J2", bail_set=1)]
    analysis, table = _analysis(recs)
    grid = SearchGrid((0.0,), deltas=(0.0,), weak_instrument_alpha=None)
    with pytest.raises(WeakInstrumentError):
        calibrate_and_match(stratify(analysis, table), analysis, table, grid)


def test_grid_validation():
    with pytest.raises(ValueError):
        SearchGrid(())
    with pytest.raises(ValueError):
        SearchGrid((1.0,))
    with pytest.raises(ValueError):
        SearchGrid(deltas=(-0.1,))


def test_pair_and_trace_files(tmp_path, small_sim):
    analysis, table, strata = small_sim
    cal = calibrate_and_match(strata, analysis, table, SearchGrid((0.0,), (0.5,)))
    write_pairs(cal.summary, tmp_path / "pairs.csv")
    assert tuple(read_pairs(tmp_path / "pairs.csv")) == cal.summary.pairs
    header = (tmp_path / "pairs.csv").read_text().splitlines()[0]
    assert header == ("pair_id,stratum_key,encouraged_case_id,unencouraged_case_id,"
                      "covariate_distance,severity_gap")
    write_trace(cal.trace, tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "sink_fraction,delta,pairs,global_F"

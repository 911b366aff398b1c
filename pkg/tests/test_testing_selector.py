"""Deviation estimator, Monte-Carlo oracle, cover solvers and file formats."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsel.errors import (BudgetExceededError, InfeasibleQueryError,
                           SizeGuardError)
from fedsel.testing import (Assignment, DeviationQuery, DistributionQuery,
                            min_makespan_assignment,
                            compile_representative_preference, duration_of,
                            estimate_participant_count, exact_milp,
                            greedy_cover, load_distribution_query,
                            read_capacity_file, read_client_table,
                            validate_assignment, verify_bound_montecarlo,
                            write_assignment_file)

REL = 1e-4


def dq(tolerance=10.0, population=1000, rng=(0.0, 100.0, ), confidence=0.95):
    return DeviationQuery(tolerance=tolerance, population=population,
                          sample_count_range=(rng[0], rng[1]),
                          confidence=confidence)


# -- participant-count estimator -------------------------------------------------

def test_estimator_worked_example():
    # (1001)/(1 + 2000*0.01/2.9957...) = 130.40 -> 131
    assert estimate_participant_count(dq()) == 131


def test_estimator_tiny_confidence_clamps_to_one():
    q = dq(confidence=1e-12)
    assert estimate_participant_count(q) == 1


def test_estimator_halving_tolerance_needs_more():
    n_wide = estimate_participant_count(dq(tolerance=10.0))
    n_tight = estimate_participant_count(dq(tolerance=5.0))
    assert n_tight > n_wide
    assert n_tight == 376  # hand-evaluated: 375.04 -> ceil


def test_estimator_tolerance_beyond_range_still_at_least_one():
    q = dq(tolerance=1e6, confidence=0.05)
    assert estimate_participant_count(q) == 1


def test_estimator_rejects_degenerate_confidence():
    with pytest.raises(ValueError):
        dq(confidence=1.0)
    with pytest.raises(ValueError):
        dq(confidence=0.0)


def test_estimator_never_exceeds_population():
    q = dq(tolerance=1e-9, confidence=0.999999)
    assert estimate_participant_count(q) == 1000


@given(st.floats(min_value=0.5, max_value=50),
       st.floats(min_value=0.01, max_value=0.99),
       st.integers(min_value=10, max_value=100_000))
def test_estimator_monotonicities(tolerance, confidence, population):
    base = dq(tolerance=tolerance, population=population, confidence=confidence)
    n = estimate_participant_count(base)
    assert 1 <= n <= population
    looser = estimate_participant_count(dq(tolerance=tolerance * 2,
                                           population=population,
                                           confidence=confidence))
    assert looser <= n
    surer = estimate_participant_count(dq(tolerance=tolerance,
                                          population=population,
                                          confidence=min(0.999, confidence + 0.005)))
    assert surer >= n
    wider = estimate_participant_count(dq(tolerance=tolerance,
                                          population=population,
                                          rng=(0.0, 200.0),
                                          confidence=confidence))
    assert wider >= n


# -- Monte-Carlo oracle ------------------------------------------------------------

def test_montecarlo_full_population_never_deviates():
    counts = np.linspace(0, 100, 50)
    q = dq(population=50)
    assert verify_bound_montecarlo(q, counts, n=50, trials=100) == 0.0


def test_montecarlo_zero_tolerance_always_deviates():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 101, size=200).astype(float)
    q = DeviationQuery(tolerance=1e-12, population=200,
                       sample_count_range=(0, 100))
    rate = verify_bound_montecarlo(q, counts, n=20, trials=200)
    assert rate > 0.95


def test_montecarlo_estimated_count_meets_confidence():
    rng = np.random.default_rng(7)
    counts = rng.integers(0, 101, size=1000).astype(float)
    q = dq()
    n = estimate_participant_count(q)
    rate = verify_bound_montecarlo(q, counts, n, trials=1000, seed=3)
    assert rate <= 1 - q.confidence


def test_montecarlo_rejects_oversized_sample():
    with pytest.raises(ValueError):
        verify_bound_montecarlo(dq(population=10),
                                np.zeros(10), n=11, trials=10)


def test_montecarlo_rejects_out_of_range_population():
    with pytest.raises(ValueError):
        verify_bound_montecarlo(dq(), np.full(1000, 150.0), n=10, trials=10)


# -- distribution queries ------------------------------------------------------------

def simple_query(caps, preference, budget=None, speeds=None, bandwidths=None,
                 transfers=None) -> DistributionQuery:
    caps = np.asarray(caps)
    n = caps.shape[0]
    ids = tuple(f"c{i}" for i in range(n))
    return DistributionQuery(
        client_ids=ids,
        capacities=caps,
        preference=np.asarray(preference),
        budget=budget if budget is not None else n,
        speeds=np.asarray(speeds if speeds is not None else [10.0] * n),
        bandwidths=np.asarray(bandwidths if bandwidths is not None else [1e6] * n),
        transfer_sizes=np.asarray(transfers if transfers is not None else [1e6] * n),
    )


def test_duration_of_hand_example():
    assert duration_of({"x": [20]}, {"x": 10.0}, {"x": 1e6}, {"x": 1e6}) == 3.0


def test_duration_of_takes_max():
    samples = {"a": [30], "b": [10]}
    speeds = {"a": 10.0, "b": 10.0}
    bw = {"a": 1e6, "b": 1e6}
    tr = {"a": 0.0, "b": 1e6}
    assert duration_of(samples, speeds, bw, tr) == 3.0


def test_duration_of_empty_assignment():
    assert duration_of({}, {}, {}, {}) == 0.0


def test_duration_of_zero_speed_errors():
    with pytest.raises(ValueError):
        duration_of({"a": [5]}, {"a": 0.0}, {"a": 1e6}, {"a": 1.0})


def test_exact_cover_two_disjoint_clients():
    q = simple_query([[5, 0], [0, 5]], [5, 5], budget=2)
    a = greedy_cover(q)
    validate_assignment(q, a)
    assert a.samples == {"c0": (5, 0), "c1": (0, 5)}


def test_greedy_picks_minimal_cover():
    q = simple_query([[5, 0], [5, 0], [3, 0]], [10, 0])
    a = greedy_cover(q)
    validate_assignment(q, a)
    assert set(a.samples) == {"c0", "c1"}


def test_single_client_shortfall_is_infeasible():
    q = simple_query([[5]], [10])
    with pytest.raises(InfeasibleQueryError) as exc:
        greedy_cover(q)
    assert exc.value.shortfalls == {0: 5}


def test_budget_exceeded_carries_required_count():
    q = simple_query([[4], [4], [4]], [12], budget=2)
    with pytest.raises(BudgetExceededError) as exc:
        greedy_cover(q)
    assert exc.value.required == 3
    assert exc.value.budget == 2


def test_single_client_duration_formula():
    q = simple_query([[20]], [20], speeds=[10.0], bandwidths=[1e6],
                     transfers=[1e6])
    a = exact_milp(q)
    assert a.objective_seconds == pytest.approx(20 / 10 + 1.0, rel=REL)


def test_exact_dominates_greedy_and_respects_guard():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n, i = rng.integers(2, 7), rng.integers(1, 4)
        caps = rng.integers(0, 8, size=(n, i))
        totals = caps.sum(axis=0)
        if totals.sum() == 0:
            continue
        preference = (totals * rng.uniform(0.2, 0.8)).astype(np.int64)
        if preference.sum() == 0:
            preference[int(np.argmax(totals))] = min(1, int(totals.max()))
        if preference.sum() == 0:
            continue
        q = simple_query(caps, preference,
                         speeds=rng.uniform(1, 20, n),
                         bandwidths=rng.uniform(1e5, 1e7, n),
                         transfers=rng.uniform(1e4, 1e6, n))
        g = greedy_cover(q)
        e = exact_milp(q)
        validate_assignment(q, g)
        validate_assignment(q, e)
        assert e.objective_seconds <= g.objective_seconds + 1e-9


def test_exact_matches_exhaustive_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n, i = int(rng.integers(2, 6)), int(rng.integers(1, 3))
        caps = rng.integers(0, 6, size=(n, i))
        totals = caps.sum(axis=0)
        preference = (totals * 0.5).astype(np.int64)
        if preference.sum() == 0:
            continue
        budget = int(rng.integers(1, n + 1))
        q = simple_query(caps, preference, budget=budget,
                         speeds=rng.uniform(1, 20, n),
                         bandwidths=rng.uniform(1e5, 1e7, n),
                         transfers=rng.uniform(1e4, 1e6, n))
        best = math.inf
        for size in range(1, budget + 1):
            for subset in itertools.combinations(range(n), size):
                sub_caps = q.capacities[list(subset)]
                if np.any(sub_caps.sum(axis=0) < q.preference):
                    continue
                cand = min_makespan_assignment(q, sorted(subset))
                best = min(best, cand.objective_seconds)
        try:
            e = exact_milp(q)
            assert best < math.inf
            assert e.objective_seconds == pytest.approx(best, rel=1e-9, abs=1e-9)
        except InfeasibleQueryError:
            assert best == math.inf


def test_single_category_saturated_instance_ratio_one():
    # preference equals total capacity: every client contributes fully, so
    # greedy and exact coincide
    q = simple_query([[4], [7], [2]], [13],
                     speeds=[5.0, 9.0, 2.0],
                     bandwidths=[1e5, 1e6, 1e7],
                     transfers=[1e5, 1e5, 1e5])
    g = greedy_cover(q)
    e = exact_milp(q)
    validate_assignment(q, g)
    assert g.objective_seconds == pytest.approx(e.objective_seconds, rel=1e-12)


def test_unusable_clients_cannot_carry_coverage():
    # a zero-speed client's capacity can never be drawn on
    q = simple_query([[10]], [5], speeds=[0.0])
    with pytest.raises(InfeasibleQueryError):
        greedy_cover(q)
    q2 = simple_query([[10], [10]], [5], speeds=[0.0, 10.0])
    a = greedy_cover(q2)
    validate_assignment(q2, a)
    assert set(a.samples) == {"c1"}
    # zero bandwidth is fine when there is nothing to transfer
    q3 = simple_query([[10]], [5], speeds=[10.0], bandwidths=[0.0],
                      transfers=[0.0])
    a3 = greedy_cover(q3)
    assert a3.objective_seconds == pytest.approx(0.5)


def test_exact_size_guard():
    caps = np.ones((25, 2), dtype=int)
    q = simple_query(caps, [5, 5])
    with pytest.raises(SizeGuardError):
        exact_milp(q)
    q2 = simple_query(np.ones((4, 6), dtype=int), [1] * 6)
    with pytest.raises(SizeGuardError):
        exact_milp(q2)


def test_exact_finds_budget_feasible_solution_greedy_misses():
    # greedy opens with the balanced client (score 10 beats 9), then needs
    # both specialists, blowing the budget; the exact solver covers with the
    # two specialists alone
    caps = [[9, 0], [0, 9], [5, 5]]
    q = simple_query(caps, [9, 9], budget=2)
    with pytest.raises(BudgetExceededError):
        greedy_cover(q)
    e = exact_milp(q)
    validate_assignment(q, e)
    assert e.participant_count == 2


def test_validator_catches_violations():
    q = simple_query([[5, 0], [0, 5]], [5, 5], budget=1)
    bad_budget = Assignment(samples={"c0": (5, 0), "c1": (0, 5)})
    with pytest.raises(ValueError, match="budget"):
        validate_assignment(q, bad_budget)
    q2 = simple_query([[5, 0], [0, 5]], [5, 5])
    with pytest.raises(ValueError, match="capacity"):
        validate_assignment(q2, Assignment(samples={"c0": (6, 0), "c1": (0, 4)}))
    with pytest.raises(ValueError, match="preference"):
        validate_assignment(q2, Assignment(samples={"c0": (5, 0)}))
    with pytest.raises(ValueError, match="unknown"):
        validate_assignment(q2, Assignment(samples={"zz": (5, 5)}))


# -- representative queries -----------------------------------------------------------

def test_representative_largest_remainder_sums_exactly():
    counts = [300, 200, 100, 1]
    pref = compile_representative_preference(counts, 100)
    assert pref.sum() == 100
    assert pref.tolist() == [50, 33, 17, 0]


def test_representative_preserves_proportions():
    counts = [100, 100, 100, 100]
    assert compile_representative_preference(counts, 10).tolist() == [3, 3, 2, 2]


@given(st.lists(st.integers(min_value=0, max_value=10_000), min_size=1,
                max_size=30).filter(lambda c: sum(c) > 0),
       st.integers(min_value=1, max_value=5000))
def test_representative_always_sums_to_total(counts, total):
    pref = compile_representative_preference(counts, total)
    assert pref.sum() == total
    assert np.all(pref >= 0)
    # categories with zero global mass get nothing
    for c, p in zip(counts, pref):
        if c == 0:
            assert p == 0


# -- files ------------------------------------------------------------------------------

def test_capacity_file_roundtrip(tmp_path):
    path = tmp_path / "caps.tsv"
    path.write_text("client_id\tcategory\tcount\n"
                    "b\t0\t3\n"
                    "a\t1\t2\n"
                    "a\t0\t1\n")
    ids, caps = read_capacity_file(str(path))
    assert ids == ["a", "b"]
    assert caps.tolist() == [[1, 2], [3, 0]]


def test_capacity_file_rejects_bad_header(tmp_path):
    path = tmp_path / "caps.tsv"
    path.write_text("who\twhat\thow\na\t0\t1\n")
    with pytest.raises(ValueError, match="header"):
        read_capacity_file(str(path))


def test_query_descriptor_with_representative_samples(tmp_path):
    caps_path = tmp_path / "caps.tsv"
    caps_path.write_text("client_id\tcategory\tcount\n"
                         "a\t0\t60\nb\t1\t40\n")
    ids, caps = read_capacity_file(str(caps_path))
    query = load_distribution_query({"representative_samples": 50, "budget": 2},
                                    ids, caps)
    assert query.preference.tolist() == [30, 20]
    a = greedy_cover(query)
    validate_assignment(query, a)
    out = tmp_path / "assign.tsv"
    write_assignment_file(str(out), a)
    body = out.read_text().splitlines()
    assert body[0] == "client_id\tcategory\tsamples"
    assert len(body) == 3


def test_client_table_feeds_durations(tmp_path):
    caps_path = tmp_path / "caps.tsv"
    caps_path.write_text("client_id\tcategory\tcount\na\t0\t10\n")
    clients_path = tmp_path / "clients.tsv"
    clients_path.write_text("client_id\tspeed\tbandwidth\ttransfer_bytes\n"
                            "a\t5.0\t1000000\t2000000\n")
    ids, caps = read_capacity_file(str(caps_path))
    table = read_client_table(str(clients_path))
    query = load_distribution_query({"preference": [10], "budget": 1}, ids,
                                    caps, table)
    a = greedy_cover(query)
    assert a.objective_seconds == pytest.approx(10 / 5.0 + 2.0)

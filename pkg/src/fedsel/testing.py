"""Participant selection for federated testing.

Serves two query shapes: a deviation bound ("how many participants keep the
sample mean within a tolerance of the population mean") answered from a
finite-population concentration bound, and a categorical preference vector
answered by a greedy cover plus a makespan-minimizing assignment. A
branch-and-bound exact solver doubles as the correctness oracle on small
instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import BudgetExceededError, InfeasibleQueryError, SizeGuardError

_BISECT_STEPS = 80


@dataclass(frozen=True)
class DeviationQuery:
    """Deviation-bound request: tolerance and confidence over N clients.

    ``sample_count_range`` is the global (min, max) number of samples a
    client can hold, in the same units as the tolerance.
    """

    tolerance: float
    population: int
    sample_count_range: tuple[float, float]
    confidence: float = 0.95

    def __post_init__(self):
        lo, hi = self.sample_count_range
        if not hi > lo:
            raise ValueError("sample_count_range max must exceed min")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.population < 1:
            raise ValueError("population must be >= 1")


def estimate_participant_count(query: DeviationQuery) -> int:
    """Smallest participant count meeting the deviation bound, in [1, N].

    The bound is (N+1) / (1 - (2N / ln(1-delta)) * (eps/range)^2); the log is
    natural and negative for delta in (0, 1), so the denominator exceeds 1.
    """
    n_total = query.population
    lo, hi = query.sample_count_range
    spread = hi - lo
    denom = 1.0 - (2.0 * n_total / math.log(1.0 - query.confidence)) \
        * (query.tolerance / spread) ** 2
    needed = (n_total + 1) / denom
    return min(n_total, max(1, math.ceil(needed)))


def verify_bound_montecarlo(query: DeviationQuery,
                            population_counts: Sequence[float],
                            n: int, trials: int, seed: int = 0) -> float:
    """Empirical violation rate of the deviation bound.

    Draws ``trials`` simple random samples of ``n`` clients without
    replacement and reports the fraction whose sample mean deviates from the
    population mean by at least the query tolerance.
    """
    counts = np.asarray(population_counts, dtype=float)
    if counts.shape != (query.population,):
        raise ValueError("population_counts must have one entry per client")
    lo, hi = query.sample_count_range
    if counts.min() < lo or counts.max() > hi:
        raise ValueError("population counts fall outside the declared range")
    if not 1 <= n <= query.population:
        raise ValueError("n must be in [1, population]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    pop_mean = counts.mean()
    violations = 0
    for _ in range(trials):
        sample = counts[rng.choice(counts.size, size=n, replace=False)]
        if abs(sample.mean() - pop_mean) >= query.tolerance:
            violations += 1
    return violations / trials


@dataclass
class DistributionQuery:
    """Preference-vector request over clients with known capacities.

    ``capacities[n][i]`` is how many category-``i`` samples client ``n`` can
    contribute; ``speeds`` are samples/second, ``bandwidths`` bytes/second and
    ``transfer_sizes`` bytes.
    """

    client_ids: tuple[str, ...]
    capacities: np.ndarray
    preference: np.ndarray
    budget: int
    speeds: np.ndarray
    bandwidths: np.ndarray
    transfer_sizes: np.ndarray

    def __post_init__(self):
        self.client_ids = tuple(self.client_ids)
        if len(set(self.client_ids)) != len(self.client_ids):
            raise ValueError("client_ids must be unique")
        self.capacities = np.asarray(self.capacities, dtype=np.int64)
        self.preference = np.asarray(self.preference, dtype=np.int64)
        self.speeds = np.asarray(self.speeds, dtype=float)
        self.bandwidths = np.asarray(self.bandwidths, dtype=float)
        self.transfer_sizes = np.asarray(self.transfer_sizes, dtype=float)
        n = len(self.client_ids)
        i = self.preference.size
        if self.capacities.shape != (n, i):
            raise ValueError("capacities must be (clients, categories)")
        for name, arr in (("speeds", self.speeds),
                          ("bandwidths", self.bandwidths),
                          ("transfer_sizes", self.transfer_sizes)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per client")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and nonnegative")
        if np.any(self.capacities < 0):
            raise ValueError("capacities must be nonnegative")
        if np.any(self.preference < 0) or self.preference.sum() <= 0:
            raise ValueError("preference must be nonnegative with a positive total")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @property
    def n_clients(self) -> int:
        return len(self.client_ids)

    @property
    def n_categories(self) -> int:
        return int(self.preference.size)


@dataclass
class Assignment:
    """Per-client per-category sample counts plus the resulting makespan."""

    samples: dict[str, tuple[int, ...]] = field(default_factory=dict)
    objective_seconds: float = 0.0

    @property
    def participant_count(self) -> int:
        return sum(1 for counts in self.samples.values() if any(c > 0 for c in counts))


def duration_of(samples: Mapping[str, Sequence[int]],
                speeds: Mapping[str, float],
                bandwidths: Mapping[str, float],
                transfer_sizes: Mapping[str, float]) -> float:
    """Makespan: the slowest participant's compute plus transfer time."""
    worst = 0.0
    for cid, counts in samples.items():
        total = int(sum(counts))
        if total <= 0:
            continue
        speed = speeds[cid]
        bandwidth = bandwidths[cid]
        if speed <= 0 or bandwidth <= 0:
            raise ValueError(f"client {cid!r} needs positive speed and bandwidth")
        worst = max(worst, total / speed + transfer_sizes[cid] / bandwidth)
    return worst


def validate_assignment(query: DistributionQuery, assignment: Assignment) -> None:
    """Check the preference, capacity and budget constraints exactly."""
    index = {cid: i for i, cid in enumerate(query.client_ids)}
    totals = np.zeros(query.n_categories, dtype=np.int64)
    active = 0
    for cid, counts in assignment.samples.items():
        if cid not in index:
            raise ValueError(f"assignment references unknown client {cid!r}")
        vec = np.asarray(counts, dtype=np.int64)
        if vec.shape != (query.n_categories,):
            raise ValueError(f"client {cid!r} has a malformed count vector")
        if np.any(vec < 0):
            raise ValueError(f"client {cid!r} has negative counts")
        if np.any(vec > query.capacities[index[cid]]):
            raise ValueError(f"client {cid!r} exceeds its capacity")
        if vec.sum() > 0:
            active += 1
        totals += vec
    if not np.array_equal(totals, query.preference):
        raise ValueError(
            f"preference not met exactly: got {totals.tolist()}, "
            f"want {query.preference.tolist()}")
    if active > query.budget:
        raise ValueError(f"{active} participants exceed budget {query.budget}")


def compile_representative_preference(global_counts: Sequence[int],
                                      total_samples: int) -> np.ndarray:
    """Scale the global categorical distribution to a fixed total.

    Largest-remainder rounding, so the result sums to ``total_samples``.
    """
    counts = np.asarray(global_counts, dtype=float)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("global_counts must be nonnegative with a positive total")
    if total_samples < 1:
        raise ValueError("total_samples must be >= 1")
    shares = counts / counts.sum() * total_samples
    base = np.floor(shares).astype(np.int64)
    leftover = total_samples - int(base.sum())
    if leftover > 0:
        order = np.lexsort((np.arange(counts.size), -(shares - base)))
        base[order[:leftover]] += 1
    return base


# -- query and assignment files ------------------------------------------------


def read_capacity_file(path: str) -> tuple[list[str], np.ndarray]:
    """Tabular capacity matrix: one (client_id, category, count) row per cell."""
    entries: dict[str, dict[int, int]] = {}
    max_cat = -1
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty capacity file")
    sep = "\t" if "\t" in lines[0] else ","
    header = tuple(col.strip() for col in lines[0].split(sep))
    if header != ("client_id", "category", "count"):
        raise ValueError(f"{path}: expected header client_id,category,count")
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(sep)]
        if len(parts) != 3:
            raise ValueError(f"{path}:{line_no}: expected 3 columns")
        cid, cat_s, count_s = parts
        try:
            cat, count = int(cat_s), int(count_s)
        except ValueError as exc:
            raise ValueError(f"{path}:{line_no}: bad integer: {exc}") from exc
        if cat < 0 or count < 0:
            raise ValueError(f"{path}:{line_no}: category and count must be >= 0")
        entries.setdefault(cid, {})[cat] = count
        max_cat = max(max_cat, cat)
    ids = sorted(entries)
    caps = np.zeros((len(ids), max_cat + 1), dtype=np.int64)
    for i, cid in enumerate(ids):
        for cat, count in entries[cid].items():
            caps[i, cat] = count
    return ids, caps


def read_client_table(path: str) -> dict[str, tuple[float, float, float]]:
    """Per-client (speed, bandwidth, transfer_bytes) rows."""
    out: dict[str, tuple[float, float, float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return out
    sep = "\t" if "\t" in lines[0] else ","
    header = tuple(col.strip() for col in lines[0].split(sep))
    if header != ("client_id", "speed", "bandwidth", "transfer_bytes"):
        raise ValueError(
            f"{path}: expected header client_id,speed,bandwidth,transfer_bytes")
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(sep)]
        if len(parts) != 4:
            raise ValueError(f"{path}:{line_no}: expected 4 columns")
        try:
            out[parts[0]] = (float(parts[1]), float(parts[2]), float(parts[3]))
        except ValueError as exc:
            raise ValueError(f"{path}:{line_no}: bad number: {exc}") from exc
    return out


def load_distribution_query(descriptor: dict, client_ids: list[str],
                            capacities: np.ndarray,
                            client_table: Mapping[str, tuple[float, float, float]]
                            | None = None,
                            default_speed: float = 10.0,
                            default_bandwidth: float = 1e6,
                            default_transfer: float = 1e6) -> DistributionQuery:
    """Assemble a query from a descriptor dict plus the capacity matrix.

    The descriptor carries either an explicit ``preference`` vector or a
    ``representative_samples`` total to be spread like the global
    distribution, plus the participant ``budget``.
    """
    if "budget" not in descriptor:
        raise ValueError("query descriptor needs a budget")
    budget = int(descriptor["budget"])
    if "preference" in descriptor:
        preference = np.asarray(descriptor["preference"], dtype=np.int64)
        if preference.size != capacities.shape[1]:
            raise ValueError("preference length does not match capacity categories")
    elif "representative_samples" in descriptor:
        preference = compile_representative_preference(
            capacities.sum(axis=0), int(descriptor["representative_samples"]))
    else:
        raise ValueError("query descriptor needs preference or representative_samples")
    table = client_table or {}
    speeds, bandwidths, transfers = [], [], []
    for cid in client_ids:
        speed, bandwidth, transfer = table.get(
            cid, (default_speed, default_bandwidth, default_transfer))
        speeds.append(speed)
        bandwidths.append(bandwidth)
        transfers.append(transfer)
    return DistributionQuery(
        client_ids=tuple(client_ids),
        capacities=capacities,
        preference=preference,
        budget=budget,
        speeds=np.asarray(speeds),
        bandwidths=np.asarray(bandwidths),
        transfer_sizes=np.asarray(transfers),
    )


def write_assignment_file(path: str, assignment: Assignment) -> None:
    """Tabular assignment: one (client_id, category, samples) row per positive cell."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("client_id\tcategory\tsamples\n")
        for cid in sorted(assignment.samples):
            for cat, count in enumerate(assignment.samples[cid]):
                if count > 0:
                    fh.write(f"{cid}\t{cat}\t{count}\n")


# -- solvers -----------------------------------------------------------------


def greedy_cover(query: DistributionQuery) -> Assignment:
    """Two-phase heuristic: greedy subset cover, then makespan optimization.

    Phase 1 repeatedly picks the client contributing the most samples toward
    the not-yet-satisfied categories. Phase 2 minimizes the makespan over the
    chosen subset (budget constraint dropped) by bisecting the makespan with
    an exact flow feasibility check.
    """
    caps = _effective_capacities(query)
    _check_capacity(query, caps)
    remaining = query.preference.copy()
    picked: list[int] = []
    picked_mask = np.zeros(query.n_clients, dtype=bool)
    order = sorted(range(query.n_clients), key=lambda i: query.client_ids[i])
    id_rank = np.empty(query.n_clients, dtype=np.int64)
    id_rank[order] = np.arange(query.n_clients)
    while remaining.sum() > 0:
        contrib = np.minimum(caps, remaining[None, :]).sum(axis=1)
        contrib[picked_mask] = -1
        top = contrib.max()
        if top <= 0:
            short = {int(i): int(remaining[i])
                     for i in np.flatnonzero(remaining > 0)}
            raise InfeasibleQueryError(short)
        ties = np.flatnonzero(contrib == top)
        best = int(ties[np.argmin(id_rank[ties])])  # client-id order
        picked.append(best)
        picked_mask[best] = True
        remaining = remaining - np.minimum(caps[best], remaining)
    if len(picked) > query.budget:
        raise BudgetExceededError(required=len(picked), budget=query.budget)
    return min_makespan_assignment(query, sorted(picked))


def exact_milp(query: DistributionQuery, max_clients: int = 20,
               max_categories: int = 5) -> Assignment:
    """Globally optimal makespan by branch-and-bound over client inclusion.

    Each node is bounded by the budget-free optimum over its still-allowed
    clients (a relaxation, since dropping clients never helps); when that
    relaxed solution already uses no more participants than the budget, the
    node is solved outright. Exhaustion certifies optimality. Guarded to
    small instances; use :func:`greedy_cover` beyond the guard.
    """
    if query.n_clients > max_clients or query.n_categories > max_categories:
        raise SizeGuardError(
            f"instance {query.n_clients} clients x {query.n_categories} "
            f"categories exceeds the exact-solver guard "
            f"({max_clients} x {max_categories})")
    caps = _effective_capacities(query)
    _check_capacity(query, caps)

    budget = min(query.budget, query.n_clients)
    order = sorted(range(query.n_clients),
                   key=lambda i: (-int(caps[i].sum()), query.client_ids[i]))
    best: dict[str, object] = {"value": math.inf, "assignment": None}
    try:
        seed_assign = greedy_cover(query)
        best["value"] = seed_assign.objective_seconds
        best["assignment"] = seed_assign
    except BudgetExceededError:
        pass

    def capacity_ok(indices: list[int]) -> bool:
        if not indices:
            return bool(query.preference.sum() == 0)
        total = caps[indices].sum(axis=0)
        return bool(np.all(total >= query.preference))

    def recurse(pos: int, included: list[int]) -> None:
        if len(included) > budget:
            return
        avail = included + order[pos:]
        if not capacity_ok(avail):
            return
        relaxed = min_makespan_assignment(query, sorted(avail))
        if relaxed.objective_seconds >= best["value"] - 1e-12:
            return
        if relaxed.participant_count <= budget:
            best["value"] = relaxed.objective_seconds
            best["assignment"] = relaxed
            return
        if pos == len(order):
            # avail == included and its relaxed optimum respects the budget
            # by construction of the guard above, so it was handled already.
            return
        recurse(pos + 1, included + [order[pos]])
        recurse(pos + 1, included)

    recurse(0, [])
    assignment = best["assignment"]
    if assignment is None:
        raise InfeasibleQueryError(
            {int(i): int(query.preference[i]) for i in range(query.n_categories)})
    return assignment  # type: ignore[return-value]


# -- internals ----------------------------------------------------------------


def _effective_capacities(query: DistributionQuery) -> np.ndarray:
    """Capacities with unusable clients zeroed.

    A client with zero speed, or a positive transfer over zero bandwidth,
    can never finish, so its capacity can never be drawn on.
    """
    usable = (query.speeds > 0) & ((query.transfer_sizes == 0)
                                   | (query.bandwidths > 0))
    caps = query.capacities.copy()
    caps[~usable] = 0
    return caps


def _check_capacity(query: DistributionQuery, caps: np.ndarray) -> None:
    totals = caps.sum(axis=0)
    short = {int(i): int(query.preference[i] - totals[i])
             for i in range(query.n_categories) if totals[i] < query.preference[i]}
    if short:
        raise InfeasibleQueryError(short)


def _transfer_times(query: DistributionQuery, subset: Sequence[int]) -> np.ndarray:
    out = np.empty(len(subset))
    for j, idx in enumerate(subset):
        size = query.transfer_sizes[idx]
        b = query.bandwidths[idx]
        if size == 0:
            out[j] = 0.0
        else:
            out[j] = size / b if b > 0 else math.inf
    return out


def _feasible_flow(caps_sub: np.ndarray, totals: np.ndarray,
                   preference: np.ndarray) -> np.ndarray | None:
    """Assignment matrix meeting per-client totals and category demands, or None.

    Transportation feasibility solved as max-flow: source -> client (total
    cap), client -> category (cell cap), category -> sink (demand).
    """
    n, i = caps_sub.shape
    demand = int(preference.sum())
    if demand == 0:
        return np.zeros((n, i), dtype=np.int64)
    src, sink = 0, 1 + n + i
    rows, cols, vals = [], [], []
    for c in range(n):
        if totals[c] > 0:
            rows.append(src)
            cols.append(1 + c)
            vals.append(int(totals[c]))
    cl, ct = np.nonzero(caps_sub)
    for c, k in zip(cl, ct):
        rows.append(1 + int(c))
        cols.append(1 + n + int(k))
        vals.append(int(caps_sub[c, k]))
    for k in range(i):
        if preference[k] > 0:
            rows.append(1 + n + k)
            cols.append(sink)
            vals.append(int(preference[k]))
    if vals and max(vals) >= 2 ** 31:
        raise ValueError("sample counts too large for the flow solver")
    graph = csr_matrix((np.asarray(vals, dtype=np.int32), (rows, cols)),
                       shape=(sink + 1, sink + 1))
    result = maximum_flow(graph, src, sink)
    if result.flow_value < demand:
        return None
    flow = result.flow.toarray()
    assign = np.zeros((n, i), dtype=np.int64)
    for c in range(n):
        assign[c] = np.maximum(flow[1 + c, 1 + n:1 + n + i], 0)
    return assign


def min_makespan_assignment(query: DistributionQuery,
                            subset: list[int]) -> Assignment:
    """Budget-free minimum makespan over the given clients.

    Bisects the makespan with a flow feasibility check at every probe. Small
    instances bisect the exact discrete set of achievable completion times;
    large ones bisect the continuum, which converges to the same assignment
    up to a negligible interval.
    """
    caps_sub = _effective_capacities(query)[subset]
    preference = query.preference
    speeds = query.speeds[subset]
    transfers = _transfer_times(query, subset)
    row_caps = caps_sub.sum(axis=1)
    demand = int(preference.sum())

    def caps_at(makespan: float) -> np.ndarray:
        slack = makespan - transfers
        usable = (slack > 0) & (speeds > 0)
        totals = np.zeros(len(subset), dtype=np.int64)
        totals[usable] = np.floor(slack[usable] * speeds[usable] + 1e-9).astype(np.int64)
        return np.minimum(totals, row_caps)

    baseline = _feasible_flow(caps_sub, row_caps, preference)
    if baseline is None:
        col_caps = caps_sub.sum(axis=0)
        short = {int(i): int(preference[i] - col_caps[i])
                 for i in range(query.n_categories)
                 if col_caps[i] < preference[i]}
        raise InfeasibleQueryError(short or {0: 0})
    hi = _makespan(baseline, speeds, transfers)
    if demand == 0 or hi == 0.0:
        return _to_assignment(query, subset, baseline, speeds, transfers)

    best_flow = baseline
    sizes = np.minimum(row_caps, demand)
    if int(sizes.sum()) <= 50_000:
        # Exact: the optimum is one of the per-client completion times.
        candidates: set[float] = set()
        for j in range(len(subset)):
            if speeds[j] > 0 and math.isfinite(transfers[j]):
                ks = np.arange(1, int(sizes[j]) + 1, dtype=float)
                candidates.update((ks / speeds[j] + transfers[j]).tolist())
        points = sorted(c for c in candidates if c <= hi + 1e-12)
        lo_i, hi_i = 0, len(points) - 1
        while lo_i < hi_i:
            mid_i = (lo_i + hi_i) // 2
            flow = _feasible_flow(caps_sub, caps_at(points[mid_i]), preference)
            if flow is not None:
                best_flow, hi_i = flow, mid_i
            else:
                lo_i = mid_i + 1
        return _to_assignment(query, subset, best_flow, speeds, transfers)

    lo = 0.0
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        flow = _feasible_flow(caps_sub, caps_at(mid), preference)
        if flow is not None:
            best_flow, hi = flow, mid
        else:
            lo = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return _to_assignment(query, subset, best_flow, speeds, transfers)


def _makespan(assign: np.ndarray, speeds: np.ndarray,
              transfers: np.ndarray) -> float:
    totals = assign.sum(axis=1)
    active = totals > 0
    if not np.any(active):
        return 0.0
    return float(np.max(totals[active] / speeds[active] + transfers[active]))


def _to_assignment(query: DistributionQuery, subset: list[int],
                   assign: np.ndarray, speeds: np.ndarray,
                   transfers: np.ndarray) -> Assignment:
    samples = {}
    for j, idx in enumerate(subset):
        if assign[j].sum() > 0:
            samples[query.client_ids[idx]] = tuple(int(v) for v in assign[j])
    return Assignment(samples=samples,
                      objective_seconds=_makespan(assign, speeds, transfers))

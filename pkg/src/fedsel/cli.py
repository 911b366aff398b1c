"""Operator command line: experiments, testing queries and solver benchmarks.

All randomness flows from ``--seed`` (or the seed list in the run config);
rerunning a command with the same inputs rewrites byte-identical outputs.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import testing
from .errors import BudgetExceededError, InfeasibleQueryError, SizeGuardError
from .experiments import summarize, write_summary_table
from .simulation import POLICIES, TrainingSession, write_metrics_table
from .training import SelectorConfig
from .workload import PopulationSpec, apply_trace, generate_population, load_trace


def _thread_count() -> int:
    raw = os.environ.get("FEDSEL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@click.group()
def main():
    """Participant selection engine for federated training and testing."""


@main.command("simulate-train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True, help="JSON run config (population, selector, run).")
@click.option("--policy", "policies", multiple=True,
              type=click.Choice(POLICIES), help="Override config policies.")
@click.option("--seed", "seeds", multiple=True, type=int,
              help="Override config seeds (repeatable).")
@click.option("--k", type=int, default=None, help="Completions per round.")
@click.option("--target", type=float, default=None, help="Target accuracy.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--verbose", is_flag=True, help="Emit per-client utility tables.")
def simulate_train(config_path, policies, seeds, k, target, out_dir, verbose):
    """Run time-to-accuracy experiments and write metric tables."""
    cfg = _load_run_config(config_path)
    policies = list(policies) or cfg["policies"]
    seeds = list(seeds) or cfg["seeds"]
    k = k if k is not None else cfg["k"]
    target = target if target is not None else cfg["target"]
    max_rounds = cfg["max_rounds"]
    if k < 1:
        raise click.UsageError("k must be >= 1")
    if not seeds:
        raise click.UsageError("seeds must be non-empty")
    if not 0.0 <= target < 1.0:
        raise click.UsageError("target must be in [0, 1)")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one_run(policy: str, seed: int):
        spec = PopulationSpec.from_dict({**cfg["population"], "seed": seed})
        world = generate_population(spec)
        if cfg.get("trace_path"):
            unmatched = apply_trace(world, load_trace(cfg["trace_path"]))
            if unmatched:
                click.echo(f"trace: {len(unmatched)} rows did not match any client")
        sink = None
        if verbose:
            sink = open(out / f"utilities_{policy}_seed{seed}.tsv", "w",
                        encoding="utf-8")
        try:
            session = TrainingSession(world, policy,
                                      SelectorConfig(**cfg["selector"]), k, seed,
                                      metrics_sink=sink)
            record = session.train_to_target(target, max_rounds)
        finally:
            if sink is not None:
                sink.close()
        write_metrics_table(str(out / f"run_{policy}_seed{seed}.tsv"), record)
        return record

    jobs = [(policy, seed) for policy in policies for seed in seeds]
    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        records = list(pool.map(lambda job: one_run(*job), jobs))

    rows = summarize(records)
    write_summary_table(str(out / "summary.tsv"), rows)
    for row in rows:
        click.echo(
            f"{row['policy']}: reached {row['reached']}/{row['runs']}, "
            f"rounds {row['rounds_mean']:.1f}±{row['rounds_std']:.1f}, "
            f"wall clock {row['wall_clock_mean']:.1f}±{row['wall_clock_std']:.1f} s")


@main.command("estimate-count")
@click.option("--epsilon", type=float, required=True, help="Deviation tolerance.")
@click.option("--delta", type=float, default=0.95, show_default=True,
              help="Confidence level.")
@click.option("--population", type=int, required=True, help="Total clients N.")
@click.option("--range-min", type=float, required=True)
@click.option("--range-max", type=float, required=True)
@click.option("--validate", "trials", type=int, default=0,
              help="Monte-Carlo trials to check the bound empirically.")
@click.option("--seed", type=int, default=0, show_default=True)
def estimate_count(epsilon, delta, population, range_min, range_max, trials, seed):
    """Participant count that caps data deviation at the given tolerance."""
    try:
        query = testing.DeviationQuery(tolerance=epsilon, confidence=delta,
                                       population=population,
                                       sample_count_range=(range_min, range_max))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    n = testing.estimate_participant_count(query)
    click.echo(f"n = {n}")
    if trials > 0:
        rng = np.random.default_rng(seed)
        counts = rng.uniform(range_min, range_max, size=population)
        rate = testing.verify_bound_montecarlo(query, counts, n, trials,
                                               seed=seed + 1)
        click.echo(f"violation rate = {rate:.4f} (allowed {1 - delta:.4f})")
        if rate > 1 - delta:
            raise click.ClickException("empirical violation rate exceeds 1-delta")


@main.command("compose-testset")
@click.option("--query", "query_path", type=click.Path(exists=True), required=True,
              help="JSON query descriptor (preference or representative_samples).")
@click.option("--capacities", "capacities_path", type=click.Path(exists=True),
              required=True, help="Tabular capacity matrix.")
@click.option("--clients", "clients_path", type=click.Path(exists=True),
              default=None, help="Optional per-client speed/bandwidth table.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--exact", is_flag=True, help="Also solve with the exact oracle.")
def compose_testset(query_path, capacities_path, clients_path, out_path, exact):
    """Pick participants and per-category sample counts for a testing query."""
    with open(query_path, "r", encoding="utf-8") as fh:
        descriptor = json.load(fh)
    ids, caps = testing.read_capacity_file(capacities_path)
    table = testing.read_client_table(clients_path) if clients_path else None
    query = testing.load_distribution_query(descriptor, ids, caps, table)

    start = time.perf_counter()
    try:
        assignment = testing.greedy_cover(query)
    except InfeasibleQueryError as exc:
        raise click.ClickException(f"infeasible query: {exc}") from exc
    except BudgetExceededError as exc:
        raise click.ClickException(str(exc)) from exc
    greedy_time = time.perf_counter() - start
    testing.validate_assignment(query, assignment)
    testing.write_assignment_file(out_path, assignment)
    click.echo(f"greedy: makespan = {assignment.objective_seconds:.4f} s, "
               f"participants = {assignment.participant_count}, "
               f"solver time = {greedy_time:.3f} s")

    if exact:
        start = time.perf_counter()
        try:
            optimal = testing.exact_milp(query)
        except SizeGuardError as exc:
            raise click.ClickException(str(exc)) from exc
        exact_time = time.perf_counter() - start
        testing.validate_assignment(query, optimal)
        click.echo(f"exact: makespan = {optimal.objective_seconds:.4f} s, "
                   f"participants = {optimal.participant_count}, "
                   f"solver time = {exact_time:.3f} s")


@main.command("bench-cover")
@click.option("--sizes", required=True, help="Comma-separated client counts.")
@click.option("--seeds", default="0", show_default=True,
              help="Comma-separated seeds.")
@click.option("--categories", type=int, default=3, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def bench_cover(sizes, seeds, categories, out_path):
    """Compare greedy and exact cover solvers across instance sizes."""
    size_list = [int(s) for s in sizes.split(",") if s.strip()]
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    rows = []
    for n in size_list:
        for seed in seed_list:
            query = _random_query(n, categories, seed)
            start = time.perf_counter()
            greedy = testing.greedy_cover(query)
            greedy_time = time.perf_counter() - start
            testing.validate_assignment(query, greedy)
            exact_time = math.nan
            ratio = math.nan
            try:
                start = time.perf_counter()
                optimal = testing.exact_milp(query)
                exact_time = time.perf_counter() - start
                testing.validate_assignment(query, optimal)
                if optimal.objective_seconds > 0:
                    ratio = greedy.objective_seconds / optimal.objective_seconds
            except SizeGuardError:
                pass
            rows.append((n, seed, greedy_time, exact_time, ratio))
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("n_clients\tseed\tgreedy_seconds\texact_seconds\tmakespan_ratio\n")
        for n, seed, gt, et, ratio in rows:
            et_s = f"{et:.6f}" if not math.isnan(et) else "guarded"
            ratio_s = f"{ratio:.6f}" if not math.isnan(ratio) else "n/a"
            fh.write(f"{n}\t{seed}\t{gt:.6f}\t{et_s}\t{ratio_s}\n")
    for n, seed, gt, et, ratio in rows:
        suffix = f", ratio {ratio:.3f}" if not math.isnan(ratio) else " (exact guarded)"
        click.echo(f"N={n} seed={seed}: greedy {gt * 1e3:.1f} ms"
                   + (f", exact {et * 1e3:.1f} ms" if not math.isnan(et) else "")
                   + suffix)


def _random_query(n_clients: int, categories: int, seed: int) -> testing.DistributionQuery:
    rng = np.random.default_rng(seed)
    caps = rng.integers(0, 20, size=(n_clients, categories))
    totals = caps.sum(axis=0)
    preference = np.maximum((totals * 0.4).astype(np.int64), 1)
    preference = np.minimum(preference, totals)
    return testing.DistributionQuery(
        client_ids=tuple(f"n{i:06d}" for i in range(n_clients)),
        capacities=caps,
        preference=preference,
        budget=n_clients,
        speeds=rng.uniform(5.0, 50.0, size=n_clients),
        bandwidths=rng.uniform(1e5, 1e7, size=n_clients),
        transfer_sizes=np.full(n_clients, 1e6),
    )


def _load_run_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    for key in ("population", "selector", "k", "target", "max_rounds",
                "seeds", "policies"):
        if key not in cfg:
            raise click.UsageError(f"run config is missing {key!r}")
    return cfg


if __name__ == "__main__":
    main()

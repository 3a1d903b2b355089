"""Bootstrap analysis of ranking stability.

Cases are resampled with replacement (a case carries every algorithm's
metrics with it); each iteration recomputes per-algorithm mean metrics,
ranks them, and the rank tallies are summarized per (algorithm, metric)
as mean/std/median rank, a +-1.96 sigma interval, and the
rank-frequency distribution behind bubble plots.

Reproducibility: iteration i draws its indices from numpy's PCG64
seeded with SeedSequence((seed, i)), so serial and parallel runs agree
bit-exactly and any other implementation of the same scheme can match
the numbers.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError
from .metrics import METRIC_NAMES, CaseMetrics
from .ranking import METRIC_DIRECTIONS, rank_metric


@dataclass(frozen=True)
class RankStats:
    mean_rank: float
    std_rank: float
    median_rank: float
    ci_low: float
    ci_high: float
    rank_frequency: dict[float, float]  # occupied rank -> fraction of iterations


@dataclass(frozen=True)
class BootstrapSummary:
    iterations: int
    rng_seed: int
    algorithms: tuple[str, ...]
    metrics: tuple[str, ...]
    stats: dict[str, dict[str, RankStats]]  # metric -> algorithm -> stats


def _metric_matrix(case_metrics: list[CaseMetrics], metric: str):
    """-> (algorithms, case_ids, values[algo, case]) with coverage checks."""
    case_ids = sorted({m.case_id for m in case_metrics})
    algorithms = sorted({m.algorithm for m in case_metrics})
    index: dict[tuple[str, str], CaseMetrics] = {}
    for m in case_metrics:
        key = (m.case_id, m.algorithm)
        if key in index:
            raise ValidationError(f"duplicate metrics for case {m.case_id!r}, algorithm {m.algorithm!r}")
        index[key] = m
    values = np.empty((len(algorithms), len(case_ids)))
    for i, a in enumerate(algorithms):
        for j, c in enumerate(case_ids):
            m = index.get((c, a))
            if m is None:
                raise ValidationError(f"algorithm {a!r} has no metrics for case {c!r}")
            values[i, j] = m.metric_mean(metric)
    if not np.isfinite(values).all():
        i, j = np.unravel_index(int(np.argmin(np.isfinite(values))), values.shape)
        raise ValidationError(
            f"non-finite {metric} value for algorithm {algorithms[i]!r}, case {case_ids[j]!r}"
        )
    return algorithms, case_ids, values


def _iteration_ranks(values: dict[str, np.ndarray], algorithms, idx) -> dict[str, np.ndarray]:
    out = {}
    for metric, mat in values.items():
        means = mat[:, idx].mean(axis=1)
        ranks = rank_metric(dict(zip(algorithms, means)), METRIC_DIRECTIONS[metric])
        out[metric] = np.array([ranks[a] for a in algorithms])
    return out


def bootstrap_ranks(
    case_metrics: list[CaseMetrics],
    iterations: int = 500,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapSummary:
    """Resample cases with replacement and tally the per-metric ranks.

    Deterministic for a given seed regardless of ``workers``: each
    iteration derives its own RNG stream and results are merged in
    iteration order.
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    if not case_metrics:
        raise ValidationError("no case metrics to bootstrap")

    matrices = {}
    for metric in METRIC_NAMES:
        algorithms, case_ids, values = _metric_matrix(case_metrics, metric)
        matrices[metric] = values
    n_cases = len(case_ids)

    def run(i: int) -> dict[str, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, i))))
        idx = rng.integers(0, n_cases, size=n_cases)
        return _iteration_ranks(matrices, algorithms, idx)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_iteration = list(pool.map(run, range(iterations)))
    else:
        per_iteration = [run(i) for i in range(iterations)]

    stats: dict[str, dict[str, RankStats]] = {}
    for metric in METRIC_NAMES:
        ranks = np.vstack([r[metric] for r in per_iteration])  # (iterations, n_alg)
        stats[metric] = {}
        for j, a in enumerate(algorithms):
            column = ranks[:, j]
            mean = float(column.mean())
            std = float(column.std())
            occupied, counts = np.unique(column, return_counts=True)
            freq = {float(r): float(c) / iterations for r, c in zip(occupied, counts)}
            stats[metric][a] = RankStats(
                mean_rank=mean,
                std_rank=std,
                median_rank=float(np.median(column)),
                ci_low=mean - 1.96 * std,
                ci_high=mean + 1.96 * std,
                rank_frequency=freq,
            )
    return BootstrapSummary(
        iterations=iterations,
        rng_seed=seed,
        algorithms=tuple(algorithms),
        metrics=METRIC_NAMES,
        stats=stats,
    )


def bubble_export(summary: BootstrapSummary) -> list[dict]:
    """Plot-ready rows: one per (metric, algorithm, occupied rank).

    Frequencies are percentages. Within each metric, algorithms are
    ordered by ascending median rank (mean rank, then name, break ties),
    so each panel of a downstream bubble plot is sorted by typical rank
    independently.
    """
    rows = []
    for metric in summary.metrics:
        per_alg = summary.stats[metric]
        order = sorted(
            summary.algorithms,
            key=lambda a: (per_alg[a].median_rank, per_alg[a].mean_rank, a),
        )
        for position, a in enumerate(order):
            s = per_alg[a]
            for rank in sorted(s.rank_frequency):
                rows.append(
                    {
                        "metric": metric,
                        "algorithm": a,
                        "x_order": position,
                        "rank": rank,
                        "frequency_pct": 100.0 * s.rank_frequency[rank],
                        "median_rank": s.median_rank,
                        "ci_low": s.ci_low,
                        "ci_high": s.ci_high,
                    }
                )
    return rows


def rank_sum_identity(n_algorithms: int) -> float:
    """Every iteration's ranks for one metric sum to K(K+1)/2."""
    return n_algorithms * (n_algorithms + 1) / 2.0


def expected_rank_spread(std_rank: float, iterations: int) -> float:
    """Sanity band for comparing mean ranks across different seeds."""
    return 3.0 * std_rank / math.sqrt(iterations)

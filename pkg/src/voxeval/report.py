"""Aggregation into group tables, metric correlations, and file emission.

CSV tables carry display units matching the usual leaderboard
convention (Dice and confidence as percentages, calibration error
x 10^-3); the JSON twins always store raw unscaled values. The pinned
ranking.csv schema (algorithm, dsc, dsc_rank, ..., composite,
final_rank) keeps values in whatever units they were supplied in.

Everything written here is byte-deterministic for fixed inputs: sorted
JSON keys, repr-formatted floats, no timestamps.
"""

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .grid import CLASS_NAMES
from .manifest import DatasetManifest
from .metrics import METRIC_NAMES, CaseMetrics
from .ranking import RankingTable
from .stability import BootstrapSummary

SCHEMA_VERSION = 1

#: CSV display scaling per metric: (header suffix, factor)
_DISPLAY = {
    "dsc": ("pct", 100.0),
    "confidence": ("pct", 100.0),
    "ece": ("x1e3", 1000.0),
    "crps": ("cm3", 1.0),
}


@dataclass(frozen=True)
class GroupRow:
    group: str  # A | B | C | overall
    algorithm: str
    n_cases: int
    means: dict[str, float | None]
    flag_counts: dict[str, int]


@dataclass(frozen=True)
class GroupReport:
    rows: tuple[GroupRow, ...]


def _case_group_index(manifest: DatasetManifest) -> dict[str, str]:
    return {c.case_id: c.group for c in manifest.cases}


def _mean_or_none(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(case_metrics: list[CaseMetrics], manifest: DatasetManifest) -> GroupReport:
    """Per-group and overall case-weighted metric means per algorithm.

    The overall row averages over all included cases directly (never a
    mean of group means). Classes skipped by flags already contributed
    their remaining-class means at the case level; flag totals are
    carried along so the skipping is visible.
    """
    groups = _case_group_index(manifest)
    for cm in case_metrics:
        if cm.case_id not in groups:
            raise ValidationError(f"case {cm.case_id!r} not present in manifest")

    by_key: dict[tuple[str, str], list[CaseMetrics]] = {}
    for cm in case_metrics:
        by_key.setdefault((groups[cm.case_id], cm.algorithm), []).append(cm)
        by_key.setdefault(("overall", cm.algorithm), []).append(cm)

    rows = []
    for (group, algorithm), items in sorted(by_key.items()):
        means: dict[str, float | None] = {}
        for m in METRIC_NAMES:
            vals = [cm.metric_mean(m) for cm in items]
            means[m] = _mean_or_none([v for v in vals if not math.isnan(v)])
        flags = {
            "empty_consensus_fg": sum(sum(cm.empty_consensus_fg.values()) for cm in items),
            "empty_consensus_bg": sum(sum(cm.empty_consensus_bg.values()) for cm in items),
            "sigma_zero": sum(sum(cm.sigma_zero.values()) for cm in items),
        }
        rows.append(GroupRow(group, algorithm, len(items), means, flags))
    return GroupReport(tuple(rows))


@dataclass(frozen=True)
class CorrelationMatrix:
    metrics: tuple[str, ...]
    pearson: list[list[float | None]]
    spearman: list[list[float | None]]
    n_points: int
    pooling: str  # "case" | "case-organ"


def _corr_from_columns(columns: np.ndarray) -> list[list[float | None]]:
    k = columns.shape[0]
    degenerate = [bool(np.ptp(columns[i]) == 0) for i in range(k)]
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.corrcoef(columns)
    out: list[list[float | None]] = [[None] * k for _ in range(k)]
    for i in range(k):
        out[i][i] = 1.0
        for j in range(i + 1, k):
            if not (degenerate[i] or degenerate[j]):
                # mirror one triangle: corrcoef is only symmetric up to rounding
                out[i][j] = out[j][i] = float(raw[i, j])
    return out


def correlations(case_metrics: list[CaseMetrics], per_organ: bool = False) -> CorrelationMatrix:
    """Pearson and Spearman between the four metrics, pooled across
    (case, algorithm) points (or per-organ points with ``per_organ``).

    A metric with zero variance gets None off-diagonal entries instead
    of propagating NaN; diagonals are 1 by definition.
    """
    points: list[list[float]] = []
    if per_organ:
        for cm in case_metrics:
            for c in cm.dsc:
                row = [cm.dsc[c], cm.c_seg[c], cm.cece[c], cm.crps[c]]
                if all(v is not None for v in row):
                    points.append([float(v) for v in row])
    else:
        for cm in case_metrics:
            row = [cm.metric_mean(m) for m in METRIC_NAMES]
            if all(not math.isnan(v) for v in row):
                points.append(row)
    if len(points) < 3:
        raise ValidationError(f"need at least 3 pooled points for correlations, got {len(points)}")
    columns = np.array(points, dtype=np.float64).T  # (4, n)
    ranked = np.vstack([rankdata(c, method="average") for c in columns])
    return CorrelationMatrix(
        metrics=METRIC_NAMES,
        pearson=_corr_from_columns(columns),
        spearman=_corr_from_columns(ranked),
        n_points=len(points),
        pooling="case-organ" if per_organ else "case",
    )


# --- serialization -------------------------------------------------------


def _scaled(metric: str, value: float | None) -> float | None:
    return None if value is None else value * _DISPLAY[metric][1]


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _class_columns(metric_key: str) -> list[str]:
    suffix = _DISPLAY[metric_key][0]
    names = [CLASS_NAMES[c] for c in (1, 2, 3)]
    return [f"{metric_key}_{suffix}_{n}" for n in names] + [f"{metric_key}_{suffix}_mean"]


def case_record(cm: CaseMetrics, group: str) -> dict:
    """Raw-valued JSON record for one (case, algorithm) pair."""

    def by_name(d):
        return {CLASS_NAMES[c]: d[c] for c in sorted(d)}

    return {
        "case_id": cm.case_id,
        "algorithm": cm.algorithm,
        "group": group,
        "dsc": by_name(cm.dsc),
        "c_seg": by_name(cm.c_seg),
        "cece": by_name(cm.cece),
        "crps_cm3": by_name(cm.crps),
        "mean_dsc": cm.mean_dsc,
        "mean_c_seg": cm.mean_c_seg,
        "mean_cece": cm.mean_cece,
        "mean_crps_cm3": cm.mean_crps,
        "flags": {
            "empty_consensus_fg": [CLASS_NAMES[c] for c, v in sorted(cm.empty_consensus_fg.items()) if v],
            "empty_consensus_bg": [CLASS_NAMES[c] for c, v in sorted(cm.empty_consensus_bg.items()) if v],
            "sigma_zero": [CLASS_NAMES[c] for c, v in sorted(cm.sigma_zero.items()) if v],
        },
    }


def _case_rows(case_metrics: list[CaseMetrics], groups: dict[str, str]):
    metric_dicts = {
        "dsc": lambda cm: (cm.dsc, cm.mean_dsc),
        "confidence": lambda cm: (cm.c_seg, cm.mean_c_seg),
        "ece": lambda cm: (cm.cece, cm.mean_cece),
        "crps": lambda cm: (cm.crps, cm.mean_crps),
    }
    header = ["case_id", "algorithm", "group"]
    for m in METRIC_NAMES:
        header += _class_columns(m)
    header.append("flags")
    rows = []
    for cm in sorted(case_metrics, key=lambda x: (x.case_id, x.algorithm)):
        row: list = [cm.case_id, cm.algorithm, groups[cm.case_id]]
        for m in METRIC_NAMES:
            per_class, mean = metric_dicts[m](cm)
            for c in (1, 2, 3):
                row.append(_scaled(m, per_class.get(c)))
            row.append(_scaled(m, mean))
        flags = []
        for c in sorted(cm.dsc):
            for flag_name, flag_map in (
                ("empty_fg", cm.empty_consensus_fg),
                ("empty_bg", cm.empty_consensus_bg),
                ("sigma_zero", cm.sigma_zero),
            ):
                if flag_map.get(c):
                    flags.append(f"{CLASS_NAMES[c]}:{flag_name}")
        row.append(";".join(flags))
        rows.append(row)
    return header, rows


def ranking_records(table: RankingTable) -> list[dict]:
    records = []
    for r in table.rows:
        rec = {"algorithm": r.algorithm}
        for m in METRIC_NAMES:
            rec[m] = r.values[m]
            rec[f"{m}_rank"] = r.ranks[m]
        rec["composite"] = r.composite
        rec["final_rank"] = r.final_rank
        records.append(rec)
    return records


RANKING_COLUMNS = [
    "algorithm",
    "dsc",
    "dsc_rank",
    "confidence",
    "confidence_rank",
    "ece",
    "ece_rank",
    "crps",
    "crps_rank",
    "composite",
    "final_rank",
]


def bootstrap_records(summary: BootstrapSummary) -> list[dict]:
    records = []
    for metric in summary.metrics:
        for a in summary.algorithms:
            s = summary.stats[metric][a]
            records.append(
                {
                    "metric": metric,
                    "algorithm": a,
                    "mean_rank": s.mean_rank,
                    "std_rank": s.std_rank,
                    "median_rank": s.median_rank,
                    "ci_low": s.ci_low,
                    "ci_high": s.ci_high,
                    "rank_frequency": {repr(k): v for k, v in sorted(s.rank_frequency.items())},
                }
            )
    return records


def manifest_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def emit(
    out_dir,
    *,
    case_metrics: list[CaseMetrics],
    manifest: DatasetManifest,
    ranking: RankingTable,
    bootstrap: BootstrapSummary,
    bubbles: list[dict],
    groups: GroupReport,
    correlation: CorrelationMatrix | None,
    run_meta: dict,
) -> list[Path]:
    """Write the full artifact set; returns the created paths.

    Fails fast (before creating any file) if there is nothing to report.
    """
    if not case_metrics or not ranking.rows:
        raise ValidationError("refusing to emit an empty report: no algorithms/cases evaluated")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    group_of = _case_group_index(manifest)
    written: list[Path] = []

    def csv_path(name, header, rows):
        p = out / name
        _write_csv(p, header, rows)
        written.append(p)

    def json_path(name, payload):
        p = out / name
        _write_json(p, payload)
        written.append(p)

    header, rows = _case_rows(case_metrics, group_of)
    csv_path("cases.csv", header, rows)
    json_path(
        "cases.json",
        [case_record(cm, group_of[cm.case_id]) for cm in sorted(case_metrics, key=lambda x: (x.case_id, x.algorithm))],
    )

    rank_records = ranking_records(ranking)
    csv_path("ranking.csv", RANKING_COLUMNS, [[r[c] for c in RANKING_COLUMNS] for r in rank_records])
    json_path("ranking.json", rank_records)

    group_header = ["group", "algorithm", "n_cases"]
    for m in METRIC_NAMES:
        group_header.append(f"{m}_{_DISPLAY[m][0]}_mean")
    group_header += ["flags_empty_fg", "flags_empty_bg", "flags_sigma_zero"]
    group_rows = []
    for g in groups.rows:
        row = [g.group, g.algorithm, g.n_cases]
        row += [_scaled(m, g.means[m]) for m in METRIC_NAMES]
        row += [
            g.flag_counts["empty_consensus_fg"],
            g.flag_counts["empty_consensus_bg"],
            g.flag_counts["sigma_zero"],
        ]
        group_rows.append(row)
    csv_path("groups.csv", group_header, group_rows)
    json_path(
        "groups.json",
        [
            {
                "group": g.group,
                "algorithm": g.algorithm,
                "n_cases": g.n_cases,
                "means": g.means,
                "flag_counts": g.flag_counts,
            }
            for g in groups.rows
        ],
    )

    boot_records = bootstrap_records(bootstrap)
    boot_cols = ["metric", "algorithm", "mean_rank", "std_rank", "median_rank", "ci_low", "ci_high"]
    csv_path("bootstrap.csv", boot_cols, [[r[c] for c in boot_cols] for r in boot_records])
    json_path(
        "bootstrap.json",
        {
            "iterations": bootstrap.iterations,
            "rng_seed": bootstrap.rng_seed,
            "rng": "numpy PCG64, stream i seeded with SeedSequence((seed, i))",
            "records": boot_records,
        },
    )

    bubble_cols = ["metric", "algorithm", "x_order", "rank", "frequency_pct", "median_rank", "ci_low", "ci_high"]
    csv_path("bubbles.csv", bubble_cols, [[b[c] for c in bubble_cols] for b in bubbles])

    if correlation is None:
        json_path(
            "correlations.json",
            {
                "metrics": list(METRIC_NAMES),
                "pearson": None,
                "spearman": None,
                "n_points": len({cm.case_id for cm in case_metrics}),
                "note": "fewer than 3 pooled points; correlations undefined",
            },
        )
    else:
        json_path(
            "correlations.json",
            {
                "metrics": list(correlation.metrics),
                "pearson": correlation.pearson,
                "spearman": correlation.spearman,
                "n_points": correlation.n_points,
                "pooling": correlation.pooling,
            },
        )

    json_path("run_meta.json", {"schema_version": SCHEMA_VERSION, **run_meta})
    return written

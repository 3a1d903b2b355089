"""Group aggregation, correlations, and deterministic file emission."""

import csv
import json
import math

import pytest

from conftest import make_case_metrics, pearson_by_formula, average_ranks
from voxeval.errors import ValidationError
from voxeval.manifest import CaseEntry, DatasetManifest
from voxeval.metrics import METRIC_NAMES
from voxeval.ranking import rank_cases
from voxeval.report import aggregate, correlations, emit
from voxeval.stability import bootstrap_ranks, bubble_export


def manifest_stub(tmp_path, groups_by_case):
    cases = tuple(
        CaseEntry(case_id, group, (tmp_path / "r.nii",), {"alg": tmp_path / "p.nii"})
        for case_id, group in groups_by_case.items()
    )
    return DatasetManifest(tmp_path / "manifest.json", cases)


def test_single_group_overall_equals_group_row(tmp_path):
    cms = [
        make_case_metrics("c1", "alg", 0.9, 0.9, 0.01, 1.0),
        make_case_metrics("c2", "alg", 0.7, 0.8, 0.03, 3.0),
    ]
    report = aggregate(cms, manifest_stub(tmp_path, {"c1": "B", "c2": "B"}))
    rows = {(r.group, r.algorithm): r for r in report.rows}
    assert rows[("B", "alg")].means == rows[("overall", "alg")].means
    assert rows[("overall", "alg")].n_cases == 2


def test_overall_is_case_weighted_mean(tmp_path):
    # group A: 2 cases of dsc 0.9; group C: 3 cases of dsc 0.6
    cms = [make_case_metrics(f"a{i}", "alg", 0.9, 0.9, 0.01, 1.0) for i in range(2)]
    cms += [make_case_metrics(f"c{i}", "alg", 0.6, 0.7, 0.02, 2.0) for i in range(3)]
    groups = {f"a{i}": "A" for i in range(2)} | {f"c{i}": "C" for i in range(3)}
    report = aggregate(cms, manifest_stub(tmp_path, groups))
    rows = {(r.group, r.algorithm): r for r in report.rows}
    expected = (2 * 0.9 + 3 * 0.6) / 5  # not the mean of group means (0.75)
    assert math.isclose(rows[("overall", "alg")].means["dsc"], expected, rel_tol=1e-12)
    assert rows[("A", "alg")].means["dsc"] == 0.9
    assert math.isclose(rows[("C", "alg")].means["dsc"], 0.6, rel_tol=1e-12)


def test_aggregate_matches_independent_tabulation(tmp_path, rng):
    cms, groups = [], {}
    for i in range(12):
        case = f"c{i:02d}"
        groups[case] = "ABC"[i % 3]
        for alg in ("x", "y"):
            cms.append(
                make_case_metrics(
                    case, alg,
                    dsc=float(rng.random()),
                    confidence=float(rng.random()),
                    ece=float(rng.random()) / 10,
                    crps=float(rng.random()) * 5,
                )
            )
    report = aggregate(cms, manifest_stub(tmp_path, groups))
    # spreadsheet-style oracle: plain dict accumulation
    sums, ns = {}, {}
    for cm in cms:
        for g in (groups[cm.case_id], "overall"):
            key = (g, cm.algorithm)
            ns[key] = ns.get(key, 0) + 1
            for m in METRIC_NAMES:
                sums[(key, m)] = sums.get((key, m), 0.0) + cm.metric_mean(m)
    for row in report.rows:
        key = (row.group, row.algorithm)
        assert row.n_cases == ns[key]
        for m in METRIC_NAMES:
            assert math.isclose(row.means[m], sums[(key, m)] / ns[key], rel_tol=1e-12)


def test_unknown_case_rejected(tmp_path):
    cms = [make_case_metrics("ghost", "alg", 0.9, 0.9, 0.01, 1.0)]
    with pytest.raises(ValidationError, match="ghost"):
        aggregate(cms, manifest_stub(tmp_path, {"c1": "A"}))


def corr_fixture(rng, n=20):
    cms = []
    for i in range(n):
        dsc = float(rng.random())
        cms.append(
            make_case_metrics(
                f"c{i}", "alg",
                dsc=dsc,
                confidence=dsc,  # duplicated metric
                ece=1.0 - dsc,  # exact negation (up to affine shift)
                crps=float(rng.random()),
            )
        )
    return cms


def test_correlation_extremes(rng):
    cm = correlations(corr_fixture(rng))
    i_dsc, i_conf, i_ece = 0, 1, 2
    assert math.isclose(cm.pearson[i_dsc][i_conf], 1.0, abs_tol=1e-12)
    assert math.isclose(cm.pearson[i_dsc][i_ece], -1.0, abs_tol=1e-12)
    assert math.isclose(cm.spearman[i_dsc][i_conf], 1.0, abs_tol=1e-12)
    for i in range(4):
        assert cm.pearson[i][i] == 1.0


def test_correlations_match_textbook_formulas(rng):
    cms = [
        make_case_metrics(
            f"c{i}", "alg",
            dsc=float(rng.random()),
            confidence=float(rng.random()),
            ece=float(rng.random()),
            crps=float(rng.random()),
        )
        for i in range(20)
    ]
    cm = correlations(cms)
    columns = {
        0: [m.mean_dsc for m in cms],
        1: [m.mean_c_seg for m in cms],
        2: [m.mean_cece for m in cms],
        3: [m.mean_crps for m in cms],
    }
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            assert math.isclose(cm.pearson[i][j], pearson_by_formula(columns[i], columns[j]), abs_tol=1e-12)
            assert math.isclose(
                cm.spearman[i][j],
                pearson_by_formula(average_ranks(columns[i]), average_ranks(columns[j])),
                abs_tol=1e-12,
            )
    assert cm.n_points == 20
    # symmetry and range
    for i in range(4):
        for j in range(4):
            assert cm.pearson[i][j] == cm.pearson[j][i]
            assert -1.0 - 1e-12 <= cm.pearson[i][j] <= 1.0 + 1e-12


def test_zero_variance_metric_marked_undefined(rng):
    cms = [
        make_case_metrics(f"c{i}", "alg", dsc=float(rng.random()), confidence=0.5, ece=float(rng.random()), crps=1.0)
        for i in range(5)
    ]
    cm = correlations(cms)
    i_conf = 1
    assert cm.pearson[i_conf][i_conf] == 1.0
    assert all(cm.pearson[i_conf][j] is None for j in range(4) if j != i_conf)
    assert all(cm.pearson[j][i_conf] is None for j in range(4) if j != i_conf)


def test_per_organ_pooling_triples_the_points(rng):
    cms = [
        make_case_metrics(f"c{i}", "alg", float(rng.random()), float(rng.random()), float(rng.random()), float(rng.random()))
        for i in range(4)
    ]
    assert correlations(cms, per_organ=True).n_points == 12


def test_too_few_points_rejected(rng):
    cms = [make_case_metrics("c1", "alg", 0.5, 0.5, 0.1, 1.0)]
    with pytest.raises(ValidationError, match="at least 3"):
        correlations(cms)


def full_artifact_inputs(tmp_path, rng):
    cms, groups = [], {}
    for i in range(6):
        case = f"c{i}"
        groups[case] = "AB"[i % 2]
        for j, alg in enumerate(("x", "y", "z")):
            cms.append(
                make_case_metrics(
                    case, alg,
                    dsc=0.9 - 0.1 * j + 0.01 * float(rng.random()),
                    confidence=0.9 - 0.05 * j,
                    ece=0.01 * (j + 1),
                    crps=1.0 + j + 0.1 * float(rng.random()),
                )
            )
    manifest = manifest_stub(tmp_path, groups)
    boot = bootstrap_ranks(cms, iterations=40, seed=7)
    return dict(
        case_metrics=cms,
        manifest=manifest,
        ranking=rank_cases(cms),
        bootstrap=boot,
        bubbles=bubble_export(boot),
        groups=aggregate(cms, manifest),
        correlation=correlations(cms),
        run_meta={"tool": "voxeval", "version": "test", "config": {"seed": 7}},
    )


EXPECTED_FILES = {
    "cases.csv", "cases.json", "ranking.csv", "ranking.json", "groups.csv", "groups.json",
    "bootstrap.csv", "bootstrap.json", "bubbles.csv", "correlations.json", "run_meta.json",
}


def test_emit_writes_deterministic_artifact_set(tmp_path, rng):
    inputs = full_artifact_inputs(tmp_path, rng)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    written = emit(out1, **inputs)
    emit(out2, **inputs)
    assert {p.name for p in written} == EXPECTED_FILES
    for name in sorted(EXPECTED_FILES):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_cases_csv_round_trips_raw_values(tmp_path, rng):
    inputs = full_artifact_inputs(tmp_path, rng)
    out = tmp_path / "o"
    emit(out, **inputs)
    with open(out / "cases.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    by_key = {(cm.case_id, cm.algorithm): cm for cm in inputs["case_metrics"]}
    assert len(rows) == len(by_key)
    for row in rows:
        cm = by_key[(row["case_id"], row["algorithm"])]
        assert math.isclose(float(row["dsc_pct_mean"]) / 100.0, cm.mean_dsc, rel_tol=1e-9)
        assert math.isclose(float(row["ece_x1e3_mean"]) / 1000.0, cm.mean_cece, rel_tol=1e-9)
        assert math.isclose(float(row["crps_cm3_mean"]), cm.mean_crps, rel_tol=1e-9)
    # JSON twin stores raw values exactly
    records = json.loads((out / "cases.json").read_text())
    for rec in records:
        cm = by_key[(rec["case_id"], rec["algorithm"])]
        assert rec["mean_dsc"] == cm.mean_dsc


def test_groups_csv_unit_scaling(tmp_path, rng):
    inputs = full_artifact_inputs(tmp_path, rng)
    out = tmp_path / "o"
    emit(out, **inputs)
    with open(out / "groups.csv", newline="") as f:
        rows = {(r["group"], r["algorithm"]): r for r in csv.DictReader(f)}
    g = {(row.group, row.algorithm): row for row in inputs["groups"].rows}
    for key, row in rows.items():
        assert math.isclose(float(row["dsc_pct_mean"]), g[key].means["dsc"] * 100.0, rel_tol=1e-9)
        assert math.isclose(float(row["ece_x1e3_mean"]), g[key].means["ece"] * 1000.0, rel_tol=1e-9)


def test_emit_fails_fast_on_empty_input(tmp_path, rng):
    inputs = full_artifact_inputs(tmp_path, rng)
    inputs["case_metrics"] = []
    out = tmp_path / "never"
    with pytest.raises(ValidationError, match="refusing to emit"):
        emit(out, **inputs)
    assert not out.exists()

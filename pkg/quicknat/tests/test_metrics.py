import json
from itertools import combinations

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from quicknat.core.exceptions import DataError, ShapeError
from quicknat.models.metrics import SubjectInfo
from quicknat.models.volumes import LabelSpace, LabelVolume
from quicknat.services.metrics_service import (
    build_report,
    combined_structure_volume,
    consistency_report,
    cv_gap,
    cv_intra_session,
    cv_total,
    dice_score,
    glass_delta,
    group_statistics,
    hedges_correction,
    hedges_g,
    icc,
    linear_model,
    mean_dice,
    mean_foreground_dice,
    summary,
    volume_distance,
    volume_of,
    wilcoxon_ranksum,
    worst_subjects,
    write_report_csv,
    write_report_json,
)


def _brute_force_ranksum(x, y):
    pooled = np.concatenate([x, y])
    ranks = stats.rankdata(pooled)
    observed = ranks[: len(x)].sum()
    sums = np.array([ranks[list(c)].sum() for c in combinations(range(len(pooled)), len(x))])
    lower = np.mean(sums <= observed + 1e-9)
    upper = np.mean(sums >= observed - 1e-9)
    return min(1.0, 2 * min(lower, upper))


def test_dice_counting_example():
    a = np.zeros(20, dtype=int)
    b = np.zeros(20, dtype=int)
    a[:4] = 1
    b[1:7] = 1
    assert dice_score(a, b, 1) == pytest.approx(0.6)
    assert dice_score(a, a, 1) == 1.0
    assert dice_score(a, b, 5) == 1.0
    assert dice_score(np.array([1, 0]), np.array([0, 1]), 1) == 0.0
    assert dice_score(a, b, 1) == dice_score(b, a, 1)
    with pytest.raises(ShapeError):
        dice_score(a, b[:10], 1)


def test_volume_of_uses_spacing():
    labels = np.zeros((10, 10, 10), dtype=int)
    assert volume_of(labels, 1) == 0.0
    assert volume_of(labels, 0) == pytest.approx(1.0)
    labels[:2] = 1
    labels[2, :5, :10] = 1
    volume = LabelVolume(data=labels, spacing=(2.0, 1.0, 1.0))
    assert (labels == 1).sum() == 250
    assert volume_of(volume, 1) == pytest.approx(0.5)


def test_volume_distance():
    assert volume_distance(2.0, 2.0) == 0.0
    assert volume_distance(3.0, 1.0) == pytest.approx(1.0)
    assert volume_distance(0.0, 5.0) == pytest.approx(2.0)
    assert volume_distance(0.0, 0.0) == 0.0
    rng = np.random.default_rng(0)
    for a, b in rng.uniform(0.1, 10, size=(20, 2)):
        assert volume_distance(a, b) == volume_distance(b, a)
        assert 0 <= volume_distance(a, b) < 2


def test_coefficients_of_variation():
    assert cv_total([5.0, 5.0, 5.0]) == 0.0
    assert cv_total([9.0, 11.0]) == pytest.approx(0.1)
    assert cv_intra_session([[4.0, 4.0], [7.0, 7.0]]) == 0.0
    sessions = [[0.97, 1.03], [0.96, 1.04]]
    assert cv_intra_session(sessions) == pytest.approx(np.sqrt((0.03 ** 2 + 0.04 ** 2) / 2))
    assert cv_intra_session(sessions) == pytest.approx(0.03536, abs=1e-5)
    assert cv_gap(0.03, 0.05) == pytest.approx(0.02)
    with pytest.raises(DataError):
        cv_total([-1.0, 1.0])
    with pytest.raises(DataError):
        cv_total([1.0])


def test_hedges_correction_and_zero_difference():
    assert hedges_correction(15, 15) == pytest.approx(1 - 3 / 111)
    assert hedges_correction(15, 15) == pytest.approx(0.97297, abs=1e-5)
    same = [1.0, 2.0, 3.0, 4.0]
    assert hedges_g(same, same).value == 0.0
    assert glass_delta(same, same).value == 0.0
    with pytest.raises(DataError):
        hedges_g([1.0, 1.0], [2.0, 2.0])


def test_hedges_g_hand_value():
    a, b = np.array([5.0, 6.0, 7.0]), np.array([1.0, 2.0, 3.0])
    g = hedges_g(a, b)
    assert g.value == pytest.approx((1 - 3 / (4 * 6 - 9)) * 4.0 / 1.0)
    se = np.sqrt(6 / 9 + g.value ** 2 / 12)
    assert g.ci_high - g.ci_low == pytest.approx(2 * 1.959963984540054 * se)
    delta = glass_delta(a, np.array([1.0, 3.0, 5.0]))
    assert delta.value == pytest.approx((6.0 - 3.0) / 2.0)


def test_hedges_g_interval_coverage():
    rng = np.random.default_rng(42)
    covered = 0
    for _ in range(2000):
        g = hedges_g(rng.normal(1.0, 1.0, 15), rng.normal(0.0, 1.0, 14))
        covered += g.contains(1.0)
    assert covered / 2000 >= 0.93


def test_effect_sizes_are_scale_invariant(rng):
    a, b = rng.normal(2, 1, 10), rng.normal(0, 1, 12)
    assert hedges_g(3 * a, 3 * b).value == pytest.approx(hedges_g(a, b).value)
    assert glass_delta(3 * a, 3 * b).value == pytest.approx(glass_delta(a, b).value)
    assert cv_total(3 * np.abs(a)) == pytest.approx(cv_total(np.abs(a)))


def test_ranksum_exact_examples():
    assert wilcoxon_ranksum([1, 2, 3], [10, 11, 12]) == pytest.approx(0.1)
    assert wilcoxon_ranksum([4, 5, 6], [4, 5, 6]) == pytest.approx(1.0)
    assert wilcoxon_ranksum([2, 2, 2], [2, 2]) == 1.0


def test_ranksum_matches_enumeration_with_ties(rng):
    for _ in range(5):
        x = rng.integers(0, 6, size=4).astype(float)
        y = rng.integers(0, 6, size=5).astype(float)
        if np.all(np.concatenate([x, y]) == x[0]):
            continue
        assert wilcoxon_ranksum(x, y, method="exact") == pytest.approx(_brute_force_ranksum(x, y))


def test_ranksum_approximation_close_to_exact():
    rng = np.random.default_rng(7)
    for _ in range(5):
        x, y = rng.normal(0, 1, 12), rng.normal(0.5, 1, 12)
        exact = wilcoxon_ranksum(x, y, method="exact")
        assert wilcoxon_ranksum(x, y) == pytest.approx(exact, abs=0.01)


def test_linear_model_perfect_predictor():
    rng = np.random.default_rng(3)
    diagnosis = np.array([0, 1] * 10)
    result = linear_model(diagnosis.astype(float), rng.normal(60, 5, 20), rng.choice(["F", "M"], 20), diagnosis)
    assert result.coefficient == pytest.approx(1.0, abs=1e-8)
    assert result.p_value < 0.01
    assert result.n == 20


def test_linear_model_matches_normal_equations():
    volume = np.array([3.1, 2.4, 4.0, 3.3, 2.2, 3.9])
    age = np.array([61.0, 70.0, 55.0, 66.0, 74.0, 58.0])
    sex = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 0.0])
    diagnosis = np.array([0.0, 1.0, 0.0, 1.0, 1.0, 0.0])
    result = linear_model(volume, age, sex, diagnosis)

    def z(v):
        return (v - v.mean()) / v.std()

    X = np.column_stack([np.ones(6), z(age), z(sex), z(diagnosis)])
    beta = np.linalg.solve(X.T @ X, X.T @ z(volume))
    assert result.coefficients["const"] == pytest.approx(beta[0], abs=1e-10)
    assert result.coefficients["age"] == pytest.approx(beta[1], abs=1e-10)
    assert result.coefficients["sex"] == pytest.approx(beta[2], abs=1e-10)
    assert result.coefficient == pytest.approx(beta[3], abs=1e-10)


def test_linear_model_rejects_degenerate_designs():
    with pytest.raises(DataError):
        linear_model([1, 2, 3, 4], [1, 2, 3, 4], [0, 1, 0, 1], [0, 0, 1, 1])
    with pytest.raises(DataError, match="collinear"):
        linear_model([1, 2, 3, 4, 5, 6], [0, 0, 0, 1, 1, 1], [0, 1, 0, 1, 0, 1], [0, 0, 0, 1, 1, 1])
    with pytest.raises(DataError, match="constant"):
        linear_model([1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6], [0, 0, 0, 0, 0, 0], [0, 0, 0, 1, 1, 1])


def test_linear_model_null_p_values_are_uniform():
    rng = np.random.default_rng(11)
    p_values = []
    for _ in range(500):
        diagnosis = rng.permutation([0, 1] * 15)
        p_values.append(linear_model(rng.normal(size=30), rng.normal(size=30), rng.integers(0, 2, 30), diagnosis).p_value)
    assert stats.kstest(p_values, "uniform").pvalue > 0.01


def test_icc_textbook_table():
    assert icc([9, 6, 8, 7, 10, 6], [2, 1, 4, 1, 5, 2]) == pytest.approx(0.125654, abs=1e-6)
    assert icc([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]) == pytest.approx(1.0)
    with pytest.raises(DataError):
        icc([3.0, 3.0, 3.0], [3.0, 3.0, 3.0])


def test_icc_falls_with_noise():
    rng = np.random.default_rng(5)
    truth = rng.normal(50, 10, 50)
    noise = rng.normal(size=50)
    values = [icc(truth, truth + s * noise) for s in (0.01, 1.0, 100.0)]
    assert values[0] > values[1] > values[2]
    assert values[2] < 0.5
    assert icc(4 * truth, 4 * (truth + noise)) == pytest.approx(icc(truth, truth + noise))


def test_report_rows_csv_and_json(tmp_path):
    space = LabelSpace.phantom(4)
    truth = np.zeros((4, 4, 4), dtype=int)
    truth[:2] = 1
    truth[2:, :2] = 2
    pred = truth.copy()
    pred[3] = 0
    report = build_report(pred, truth, space, "s01", SubjectInfo(subject="s01", age=70, sex="F", diagnosis="AD"))
    assert [r.structure for r in report.rows] == ["Shell", "Lobe Left"]
    assert report.rows[0].dice == 1.0
    assert report.rows[1].dice == pytest.approx(2 * 8 / (8 + 16))

    csv_path = write_report_csv(report, tmp_path / "report.csv")
    frame = pd.read_csv(csv_path)
    assert len(frame) == 2
    assert {"subject", "structure", "dice", "volume_distance"} <= set(frame.columns)
    report.group_statistics.append(group_statistics("Shell", [1.0, 1.2, 1.4], [2.0, 2.2, 2.5]))
    payload = json.loads(write_report_json(report, tmp_path / "report.json").read_text())
    assert payload["rows"] == []
    assert payload["subjects"][0]["diagnosis"] == "AD"
    assert payload["group_statistics"][0]["structure"] == "Shell"


def test_summary_and_rankings():
    space = LabelSpace.phantom(4)
    truth = np.array([[[1, 1, 2, 2]]])
    good = build_report(truth, truth, space, "good")
    bad = build_report(np.array([[[1, 0, 2, 0]]]), truth, space, "bad")
    good.extend(bad)
    table = summary(good)
    assert list(table["n"]) == [2, 2]
    mean, _ = mean_dice(good)
    assert mean == pytest.approx((1.0 + 2 / 3) / 2)
    assert worst_subjects(good, k=1) == [("bad", pytest.approx(2 / 3))]


def test_consistency_and_combined_volumes():
    space = LabelSpace.phantom(4)
    a = np.zeros((10, 10, 10), dtype=int)
    a[:5] = 1
    a[5:, :2] = 2
    a[5:, 2:4] = 3
    b = a.copy()
    b[5:, 2:4] = 0
    distances = consistency_report(a, b, space)
    assert distances["Shell"] == 0.0
    assert distances["Lobe Right"] == pytest.approx(2.0)
    volumes = combined_structure_volume(a, space)
    assert volumes["Lobe"] == pytest.approx(0.2)
    assert volumes["Shell"] == pytest.approx(0.5)
    assert volumes["Whole Brain"] == pytest.approx(0.7)


def test_mean_foreground_dice_skips_background():
    truth = np.array([0, 1, 2, 2])
    assert mean_foreground_dice(truth, truth, 3) == 1.0
    assert mean_foreground_dice(np.array([1, 1, 2, 2]), truth, 3) == pytest.approx((2 / 3 + 1.0) / 2)

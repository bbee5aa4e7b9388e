import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ocularage.dataman import AgeGroup
from ocularage.errors import EmptyInput, NoConvLayer, SubjectLeakage
from ocularage.evaluation import (AGE_BINS, CROSS_SENSOR_SCHEMA, REPORT_SCHEMA, age_bin_report,
                                  classification_metrics, confidence_curve, cross_sensor_eval,
                                  evaluate, grad_cam, regression_metrics, report_from_outputs,
                                  saliency_map, svg_line_chart, write_report)
from ocularage.multitask import MultiTaskOutput, SampleSet
from ocularage.nnet.checkpoint import Checkpoint
from ocularage.nnet.layers import Dense, DualHead
from ocularage.nnet.network import Network, build_ocularnet

Y, O = AgeGroup.YOUNG, AgeGroup.OLD


# -- brute-force oracles ----------------------------------------------------------

def oracle_classification(preds, truths):
    cm = [[0, 0], [0, 0]]
    for p, t in zip(preds, truths):
        cm[int(t)][int(p)] += 1
    out = {"accuracy": (cm[0][0] + cm[1][1]) / len(preds)}
    f1s = []
    for c in (0, 1):
        tp = cm[c][c]
        predicted = cm[0][c] + cm[1][c]
        actual = cm[c][0] + cm[c][1]
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[f"p{c}"], out[f"r{c}"], out[f"f{c}"] = prec, rec, f1
        f1s.append(f1)
    out["macro"] = (f1s[0] + f1s[1]) / 2
    out["cm"] = cm
    return out


def oracle_regression(pred, true):
    n = len(pred)
    abs_sum = sq_sum = 0.0
    w1 = w2 = 0
    for p, t in zip(pred, true):
        d = abs(float(p) - float(t))
        abs_sum += d
        sq_sum += d * d
        w1 += d <= 1.0
        w2 += d <= 2.0
    return abs_sum / n, math.sqrt(sq_sum / n), w1 / n, w2 / n


def test_metrics_match_oracles_on_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        truths = [AgeGroup(int(v)) for v in rng.integers(0, 2, n)]
        preds = [AgeGroup(int(v)) for v in rng.integers(0, 2, n)]
        rep = classification_metrics(preds, truths)
        ref = oracle_classification(preds, truths)
        assert abs(rep.accuracy - ref["accuracy"]) <= 1e-9
        assert abs(rep.macro_f1 - ref["macro"]) <= 1e-9
        for c in (0, 1):
            assert abs(rep.precision[c] - ref[f"p{c}"]) <= 1e-9
            assert abs(rep.recall[c] - ref[f"r{c}"]) <= 1e-9
            assert abs(rep.f1[c] - ref[f"f{c}"]) <= 1e-9
        assert [list(r) for r in rep.confusion] == ref["cm"]
        assert sum(map(sum, rep.confusion)) == n

        true_ages = rng.integers(4, 17, n).astype(float)
        pred_ages = true_ages + rng.normal(0, rng.uniform(0.1, 4), n)
        reg = regression_metrics(pred_ages, true_ages)
        mae, rmse, w1, w2 = oracle_regression(pred_ages, true_ages)
        assert abs(reg.mae - mae) <= 1e-9 and abs(reg.rmse - rmse) <= 1e-9
        assert reg.within_1yr == w1 and reg.within_2yr == w2
        assert reg.rmse >= reg.mae - 1e-12
        assert reg.within_1yr <= reg.within_2yr


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50),
       st.randoms())
def test_confusion_is_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = classification_metrics([AgeGroup(p) for p, _ in pairs], [AgeGroup(t) for _, t in pairs])
    b = classification_metrics([AgeGroup(p) for p, _ in shuffled], [AgeGroup(t) for _, t in shuffled])
    assert a.confusion == b.confusion


@given(st.lists(st.tuples(st.floats(0, 30), st.integers(4, 16)), min_size=1, max_size=50))
def test_rmse_dominates_mae(pairs):
    r = regression_metrics([p for p, _ in pairs], [t for _, t in pairs])
    assert r.rmse >= r.mae - 1e-12 >= -1e-12


# -- classification ---------------------------------------------------------------

def test_classification_perfect():
    rep = classification_metrics([Y, O, O], [Y, O, O])
    assert rep.accuracy == 1.0 and rep.f1 == (1.0, 1.0) and rep.macro_f1 == 1.0


def test_classification_symmetric_confusion():
    rep = classification_metrics([Y, Y, O, O], [Y, O, Y, O])
    assert rep.accuracy == 0.5
    assert rep.precision == rep.recall == rep.f1 == (0.5, 0.5)


def test_classification_all_old():
    rep = classification_metrics([O] * 4, [Y, Y, O, O])
    assert rep.recall[0] == 0.0 and rep.f1[0] == 0.0
    assert rep.macro_f1 == pytest.approx(1 / 3)


def test_classification_errors():
    with pytest.raises(EmptyInput):
        classification_metrics([], [])
    with pytest.raises(ValueError):
        classification_metrics([Y], [Y, O])


# -- regression -------------------------------------------------------------------

def test_regression_example():
    r = regression_metrics([5.0, 7.4, 10.2], [5, 9, 10])
    assert r.mae == pytest.approx(0.6)
    assert r.rmse == pytest.approx(0.9309493, abs=1e-6)
    assert r.within_1yr == pytest.approx(2 / 3) and r.within_2yr == 1.0


def test_regression_identical_and_inclusive_boundary():
    r = regression_metrics([4, 8, 12], [4, 8, 12])
    assert (r.mae, r.rmse, r.within_1yr, r.within_2yr) == (0.0, 0.0, 1.0, 1.0)
    assert regression_metrics([6.0], [5]).within_1yr == 1.0
    assert regression_metrics([7.0], [5]).within_2yr == 1.0
    with pytest.raises(EmptyInput):
        regression_metrics([], [])


# -- age bins and confidence ------------------------------------------------------

def test_age_bins_single_bin():
    rep = age_bin_report([5.5, 4.0], [5, 5])
    assert rep.bins["4-6"].n == 2
    for label in ("7-9", "10-12", "13-16"):
        assert rep.bins[label].n == 0 and rep.bins[label].mae is None


def test_age_bins_hand_fixture():
    true = [4, 6, 7, 9, 10, 12, 13, 16]
    pred = [5, 6, 7.5, 8, 12, 12, 14.5, 13]
    rep = age_bin_report(pred, true)
    maes = {k: v.mae for k, v in rep.bins.items()}
    assert maes == pytest.approx({"4-6": 0.5, "7-9": 0.75, "10-12": 1.0, "13-16": 2.25})
    assert sum(v.n for v in rep.bins.values()) == len(true)


def test_age_bins_partition_study_range():
    covered = [a for lo, hi in AGE_BINS for a in range(lo, hi + 1)]
    assert covered == list(range(4, 17))


def test_confidence_uniform_logits():
    outs = [MultiTaskOutput((0.0, 0.0), 8.0) for _ in range(13)]
    curve = confidence_curve(outs, list(range(4, 17)))
    assert curve.mean_confidence == (0.5,) * 13
    assert sum(curve.counts) == 13


def test_confidence_single_age():
    rng = np.random.default_rng(3)
    outs = [MultiTaskOutput(tuple(rng.normal(size=2)), 9.0) for _ in range(7)]
    curve = confidence_curve(outs, [11] * 7)
    assert curve.counts[11 - 4] == 7 and sum(curve.counts) == 7
    defined = [m for m in curve.mean_confidence if m is not None]
    assert len(defined) == 1 and 0.5 <= defined[0] <= 1.0


# -- Grad-CAM ---------------------------------------------------------------------

def test_grad_cam_single_map():
    a = np.array([[[-1.0, 2.0], [4.0, 1.0]]])
    cam = grad_cam(a, np.full_like(a, 0.3))
    np.testing.assert_allclose(cam, np.maximum(a[0], 0) / 4.0, atol=1e-7)


def test_grad_cam_zero_gradients():
    a = np.random.default_rng(0).random((3, 4, 4))
    cam = grad_cam(a, np.zeros_like(a), (8, 8))
    assert cam.shape == (8, 8) and not cam.any()


def test_grad_cam_two_channel_hand_fixture():
    a = np.array([[[1.0, 2.0], [3.0, 4.0]], [[4.0, 0.0], [0.0, -8.0]]])
    g = np.array([[[0.5, 0.5], [0.5, 0.5]], [[1.0, -1.0], [2.0, 0.0]]])
    # weights 0.5 and 0.5 -> [[2.5, 1], [1.5, -2]] -> ReLU -> / 2.5
    np.testing.assert_allclose(grad_cam(a, g), [[1.0, 0.4], [0.6, 0.0]], atol=1e-7)


def toy_net():
    return build_ocularnet(1, (16, 32), widths=(4, 8), hidden=4, stem_kernel=2, stem_stride=2,
                           seed=5).astype(np.float64)


def test_saliency_shape_and_range():
    x = np.random.default_rng(1).standard_normal((1, 16, 32))
    cam = saliency_map(toy_net(), x, O)
    assert cam.shape == (16, 32)
    assert cam.min() >= 0.0 and cam.max() <= 1.0


def test_saliency_ignores_non_target_bias():
    net = toy_net()
    x = np.random.default_rng(1).standard_normal((1, 16, 32))
    before = saliency_map(net, x, O)
    net.named_params()[f"{len(net.layers) - 1}.cls_bias"][0] += 3.0
    np.testing.assert_array_equal(saliency_map(net, x, O), before)


def test_saliency_accepts_checkpoint():
    net = toy_net()
    x = np.random.default_rng(2).standard_normal((1, 16, 32))
    np.testing.assert_array_equal(saliency_map(Checkpoint(net), x, Y), saliency_map(net, x, Y))


def test_saliency_needs_conv_layers():
    net = Network([Dense(6, 4), DualHead(4)], (6,))
    with pytest.raises(NoConvLayer):
        saliency_map(net, np.zeros(6), O)


# -- full evaluation and cross-sensor --------------------------------------------

def sample_set(subjects, seed=0, n=26):
    rng = np.random.default_rng(seed)
    ages = np.tile(np.arange(4, 17), n // 13 + 1)[:n]
    subj = [subjects[i % len(subjects)] for i in range(n)]
    return SampleSet(rng.random((n, 16, 32)).astype(np.float32), ages, subj,
                     [f"{s}_{i}" for i, s in enumerate(subj)])


def checkpoint(train_subjects=("T1", "T2")):
    return Checkpoint(toy_net(), metadata={"norm_mean": 0.5, "norm_std": 0.25, "modality": "eye",
                                           "train_subjects": sorted(train_subjects)})


def test_evaluate_report_validates_against_schema():
    rep = evaluate(checkpoint(), sample_set(["E1", "E2"]), "toy")
    doc = rep.to_json()
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["regression"]["n"] == 26 and doc["model"] == "toy"


def test_cross_sensor_zero_delta_on_identical_sets():
    data = sample_set(["E1", "E2"])
    rep = cross_sensor_eval(checkpoint(), data, data)
    assert rep.delta == {"accuracy_drop": 0.0, "mae_increase": 0.0, "macro_f1_drop": 0.0}
    jsonschema.validate(rep.to_json(), CROSS_SENSOR_SCHEMA)


def test_cross_sensor_rejects_leakage():
    clean, leaky = sample_set(["E1"]), sample_set(["E2", "T2"], seed=1)
    with pytest.raises(SubjectLeakage):
        cross_sensor_eval(checkpoint(), clean, leaky)
    with pytest.raises(SubjectLeakage):
        evaluate(checkpoint(), leaky)


def test_report_from_outputs_groups_by_age_ten():
    raw = np.array([[2.0, -2.0, 5.0], [-1.0, 1.0, 12.0], [0.5, 0.0, 9.0], [0.0, 3.0, 10.0]])
    rep = report_from_outputs(raw, [5, 12, 9, 10])
    assert rep.classification.accuracy == 1.0
    assert rep.regression.mae == 0.0


def test_write_report_files(tmp_path):
    raw = np.random.default_rng(4).normal(size=(30, 3)) + [0, 0, 10]
    ages = np.random.default_rng(5).integers(4, 17, 30)
    rep = report_from_outputs(raw, ages, "m", "eye")
    paths = write_report(rep, tmp_path, "test")
    names = sorted(p.name for p in paths)
    assert names == sorted(["test.json", "test_metrics.csv", "test_age_bins.csv",
                            "test_confidence.csv", "test_confidence.svg", "test_age_bin_mae.svg"])
    jsonschema.validate(json.loads((tmp_path / "test.json").read_text()), REPORT_SCHEMA)
    metrics = dict(line.split(",") for line in (tmp_path / "test_metrics.csv").read_text().split()[1:])
    assert float(metrics["mae"]) == rep.regression.mae
    svg = (tmp_path / "test_confidence.svg").read_text()
    assert svg.startswith("<svg") and "mean confidence" in svg and "age (years)" in svg


def test_svg_breaks_line_on_missing_points():
    svg = svg_line_chart({"a": [(0, 1.0), (1, None), (2, 2.0), (3, 3.0)]}, "t", "x", "y")
    assert svg.count("<polyline") == 2
    assert "&lt;b&gt;" in svg_line_chart({"<b>": [(0, 1.0)]}, "t", "x", "y")

"""Acceptance suite: one test per criterion, summarized at the end of the run.

The desk-scale run (criteria 6 to 9) drives the real CLI over ~2,000
rendered eyes and takes roughly a quarter of an hour on one core.
"""

import json
import math
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import test_dataman
import test_evaluation
import test_preproc
from ocularage.cli import load_samples, load_split, main
from ocularage.config import load_config
from ocularage.dataman import AgeGroup, Modality, subject_exclusive_split
from ocularage.errors import SubjectLeakage
from ocularage.evaluation import (CROSS_SENSOR_SCHEMA, REPORT_SCHEMA, classification_metrics,
                                  cross_sensor_eval, evaluate, regression_metrics)
from ocularage.multitask import focal_loss_batch, inverse_frequency_weights, total_loss
from ocularage.nnet.checkpoint import load_checkpoint
from ocularage.nnet.network import quantize_fp16
from ocularage.preproc import rubber_sheet

ROOT = Path(__file__).resolve().parents[1]

# [DERIVED] mean |a - 10| over the uniform integer ages 4..16
CONSTANT_MEAN_BASELINE = sum(abs(a - 10) for a in range(4, 17)) / 13


@pytest.fixture
def detail(record_property):
    def note(text):
        record_property("detail", text)
    return note


def cli(*argv):
    code = main([*map(str, argv), "-q"])
    assert code == 0, f"ocularage {' '.join(map(str, argv))} exited {code}"


# -- 1 to 5: oracle and property criteria ----------------------------------------

@pytest.mark.criterion(1, "gradient correctness (rel. error < 1e-4, < 60 s)")
def test_criterion_1_gradients(detail):
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
           "tests/test_nnet.py", "tests/test_multitask.py", "-k", "gradient or every_parameter"]
    t0 = time.perf_counter()
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    passed = re.search(r"(\d+) passed", proc.stdout)
    detail(f"{passed.group(1) if passed else 0} gradient checks in {elapsed:.1f} s")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert int(passed.group(1)) >= 15
    assert elapsed < 60


@pytest.mark.criterion(2, "rubber-sheet oracle (<= 1e-6, masks exact, 100 annuli)")
def test_criterion_2_rubber_sheet(detail):
    rng = np.random.default_rng(2024)
    img = rng.random((90, 120))
    worst = 0.0
    for _ in range(100):
        a = test_preproc.random_annulus(rng)
        got = rubber_sheet(img, a)
        ref_strip, ref_mask = test_preproc.oracle_rubber_sheet(img, a)
        np.testing.assert_array_equal(got.mask, ref_mask)
        worst = max(worst, float(np.max(np.abs(got.strip - ref_strip))))
    detail(f"max |diff| {worst:.2e}")
    assert worst <= 1e-6


@pytest.mark.criterion(3, "metric oracles (<= 1e-9 on 1,000 fixtures, RMSE >= MAE)")
def test_criterion_3_metrics(detail):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        truths = [AgeGroup(int(v)) for v in rng.integers(0, 2, n)]
        preds = [AgeGroup(int(v)) for v in rng.integers(0, 2, n)]
        rep = classification_metrics(preds, truths)
        ref = test_evaluation.oracle_classification(preds, truths)
        got = [rep.accuracy, rep.macro_f1, *rep.precision, *rep.recall, *rep.f1]
        want = [ref["accuracy"], ref["macro"], ref["p0"], ref["p1"], ref["r0"], ref["r1"],
                ref["f0"], ref["f1"]]
        assert [list(r) for r in rep.confusion] == ref["cm"]

        true_ages = rng.integers(4, 17, n).astype(float)
        pred_ages = true_ages + rng.normal(0, rng.uniform(0.1, 4), n)
        reg = regression_metrics(pred_ages, true_ages)
        got += [reg.mae, reg.rmse, reg.within_1yr, reg.within_2yr]
        want += list(test_evaluation.oracle_regression(pred_ages, true_ages))
        worst = max(worst, max(abs(g - w) for g, w in zip(got, want)))
        assert reg.rmse >= reg.mae
    detail(f"max |diff| {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(4, "loss identities (focal == BCE, total exact, N/(2 N_c))")
def test_criterion_4_losses(detail):
    rng = np.random.default_rng(4)
    z = rng.normal(0, 3, (2000, 2))
    y = rng.integers(0, 2, 2000)
    focal, _ = focal_loss_batch(z, y, gamma=0.0, class_weights=(1.0, 1.0), smoothing=0.0)
    ref = 0.0
    for row, t in zip(z, y):
        for c, zc in enumerate(row):
            p = 1.0 / (1.0 + math.exp(-zc))
            ref -= math.log(p) if c == t else math.log(1.0 - p)
    ref /= z.size
    assert abs(focal - ref) <= 1e-9

    for _ in range(1000):
        cls, reg, alpha = rng.uniform(0, 5), rng.uniform(0, 50), rng.uniform(0.01, 10)
        assert total_loss(cls, reg, alpha) == cls + alpha * reg

    for _ in range(200):
        n_young, n_old = rng.integers(1, 500, 2)
        labels = [AgeGroup.YOUNG] * int(n_young) + [AgeGroup.OLD] * int(n_old)
        n = n_young + n_old
        w = inverse_frequency_weights(labels)
        assert w[0] == pytest.approx(n / (2 * n_young), rel=1e-12)
        assert w[1] == pytest.approx(n / (2 * n_old), rel=1e-12)
    detail(f"|focal - BCE| {abs(focal - ref):.1e}")


@pytest.mark.criterion(5, "split exclusivity (1,000 manifests, within 3 points of 80/10/10)")
def test_criterion_5_split(detail):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(1000):
        manifest = test_dataman.make_manifest(rng.integers(8, 17, int(rng.integers(20, 151))), rng=rng)
        split = subject_exclusive_split(manifest, seed=k)
        a, b, c = split.sets()
        assert not (a & b or a & c or b & c)
        assert a | b | c == {r.subject_id for r in manifest}
        fr = test_dataman.image_fractions(manifest, split)
        worst = max(worst, max(abs(f - t) for f, t in zip(fr, (0.8, 0.1, 0.1))))
    detail(f"worst fraction deviation {100 * worst:.2f} points")
    assert worst <= 0.03


# -- 6 to 9: the desk-scale run ----------------------------------------------------

DESK_TOML = """
[paths]
workspace = "{ws}"

[synth]
subject_count = 140
sessions_per_subject = 8
sensor_b_fraction = {b_fraction!r}

[train]
epochs = 15
"""


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Render, preprocess, split and train eye and iris models through the CLI.

    20 of the 140 subjects are captured on sensor B and held out, leaving
    120 sensor-A subjects (1,920 images) for the split.
    """
    root = tmp_path_factory.mktemp("desk")
    cfg_path = root / "desk.toml"
    cfg_path.write_text(DESK_TOML.format(ws=(root / "ws").as_posix(), b_fraction=20 / 140))
    times = {}
    for step in ("synth", "preprocess", "split"):
        t0 = time.perf_counter()
        cli(step, "--config", cfg_path)
        times[step] = time.perf_counter() - t0
    for modality in ("eye", "iris"):
        t0 = time.perf_counter()
        cli("train", "--config", cfg_path, "--modality", modality)
        times[f"train_{modality}"] = time.perf_counter() - t0
    cli("eval", "--config", cfg_path, "--modality", "eye", "--cross-sensor")
    cli("eval", "--config", cfg_path, "--modality", "iris")
    return load_config(cfg_path), times


@pytest.mark.criterion(6, "synthetic learnability (val MAE <= 2.0, acc >= 85%, < 30 min)")
def test_criterion_6_learnability(desk_run, detail):
    cfg, times = desk_run
    split, _ = load_split(cfg.workspace)
    train_set = load_samples(cfg, split.train, Modality.EYE)
    val = load_samples(cfg, split.val, Modality.EYE)
    assert 1800 <= len(train_set) + len(val) + len(load_samples(cfg, split.test, Modality.EYE)) <= 2100
    ckpt = load_checkpoint(cfg.with_modality(Modality.EYE).checkpoint_path)
    rep = evaluate(ckpt, val, "eye_val")
    mean_age = float(np.mean(train_set.ages))
    baseline = regression_metrics(np.full(len(val), mean_age), val.ages).mae
    runtime = times["synth"] + times["preprocess"] + times["split"] + times["train_eye"]
    epochs = len((cfg.workspace / "history_eye.csv").read_text().splitlines()) - 1
    detail(f"MAE {rep.regression.mae:.3f} y, accuracy {100 * rep.classification.accuracy:.1f}%, "
           f"constant-mean MAE {baseline:.2f} y, {epochs} epochs, {runtime / 60:.1f} min")
    assert epochs <= 15
    assert rep.regression.mae <= 2.0
    assert rep.classification.accuracy >= 0.85
    assert rep.regression.mae < CONSTANT_MEAN_BASELINE and rep.regression.mae < baseline
    assert runtime < 30 * 60


@pytest.mark.criterion(7, "modality gap direction (eye MAE <= iris MAE)")
def test_criterion_7_modality_gap(desk_run, detail):
    cfg, _ = desk_run
    mae = {m: json.loads((cfg.workspace / "reports" / m / "test.json").read_text())["regression"]["mae"]
           for m in ("eye", "iris")}
    detail(f"test MAE eye {mae['eye']:.3f} y, iris {mae['iris']:.3f} y")
    assert mae["eye"] <= mae["iris"]


@pytest.mark.criterion(8, "cross-sensor harness (paired reports, finite deltas, leakage rejected)")
def test_criterion_8_cross_sensor(desk_run, detail):
    import jsonschema

    cfg, _ = desk_run
    out = cfg.workspace / "reports" / "eye"
    doc = json.loads((out / "cross_sensor.json").read_text())
    jsonschema.validate(doc, CROSS_SENSOR_SCHEMA)
    for stem in ("same_sensor", "other_sensor"):
        jsonschema.validate(json.loads((out / f"{stem}.json").read_text()), REPORT_SCHEMA)
        for suffix in ("_metrics.csv", "_age_bins.csv", "_confidence.csv", "_confidence.svg",
                       "_age_bin_mae.svg"):
            assert (out / f"{stem}{suffix}").exists()
    for side in ("same_sensor", "other_sensor"):
        reg = doc[side]["regression"]
        assert all(math.isfinite(reg[k]) for k in ("mae", "rmse"))
        assert math.isfinite(doc[side]["classification"]["accuracy"])
    assert all(math.isfinite(v) for v in doc["delta"].values())

    split, other = load_split(cfg.workspace)
    ckpt = load_checkpoint(cfg.with_modality(Modality.EYE).checkpoint_path)
    leaky = load_samples(cfg, sorted(split.train)[:2], Modality.EYE)
    with pytest.raises(SubjectLeakage):
        cross_sensor_eval(ckpt, leaky, load_samples(cfg, other[:2], Modality.EYE))
    d = doc["delta"]
    detail(f"accuracy drop {100 * d['accuracy_drop']:+.1f} pts, MAE increase {d['mae_increase']:+.3f} y")


@pytest.mark.criterion(9, "FP16 fidelity (max |logit diff| < 1e-2, bytes halve)")
def test_criterion_9_fp16(desk_run, detail):
    cfg, _ = desk_run
    net = load_checkpoint(cfg.with_modality(Modality.EYE).checkpoint_path).network
    half = quantize_fp16(net)
    x = np.random.default_rng(9).standard_normal((100, *net.input_shape)).astype(np.float32)
    diff = np.abs(net.predict(x, 20)[:, :2] - half.predict(x, 20)[:, :2]).max()
    detail(f"max |logit diff| {diff:.2e}, {net.size_bytes('fp32')} -> {half.size_bytes()} bytes")
    assert diff < 1e-2
    assert half.size_bytes() * 2 == net.size_bytes("fp32")


# -- 10: determinism ----------------------------------------------------------------

SMALL_TOML = """
workers = 1

[paths]
workspace = "{ws}"

[synth]
subject_count = 12
sessions_per_subject = 2
image_size = [320, 240]

[train]
epochs = 3
batch_size = 16
widths = [8, 16, 32]
hidden = 16
seed = 42
"""


@pytest.mark.criterion(10, "determinism (bit-identical metric JSON and checkpoints)")
def test_criterion_10_determinism(tmp_path, detail):
    outputs = []
    for run in ("a", "b"):
        cfg = tmp_path / f"{run}.toml"
        cfg.write_text(SMALL_TOML.format(ws=(tmp_path / run).as_posix()))
        for step in ("synth", "preprocess", "split", "train", "eval"):
            cli(step, "--config", cfg)
        ws = tmp_path / run
        outputs.append(((ws / "reports" / "eye" / "test.json").read_bytes(),
                        (ws / "checkpoints" / "eye.ocag").read_bytes()))
    (json_a, ckpt_a), (json_b, ckpt_b) = outputs
    detail(f"{len(json_a)} JSON bytes, {len(ckpt_a)} checkpoint bytes compared")
    assert json_a == json_b
    assert ckpt_a == ckpt_b

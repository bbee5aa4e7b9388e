"""Metrics, grouped analyses, the cross-sensor protocol, saliency and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataman import MAX_AGE, MIN_AGE, AgeGroup
from .errors import EmptyInput, NoConvLayer, SubjectLeakage
from .multitask import MultiTaskOutput, SampleSet, outputs_from_array, predict
from .nnet.checkpoint import Checkpoint
from .nnet.network import Network
from .preproc import resize

SCHEMA_VERSION = 1
AGE_BINS = ((4, 6), (7, 9), (10, 12), (13, 16))


def _bin_label(lo, hi):
    return f"{lo}-{hi}"


@dataclass(frozen=True)
class ClassReport:
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    macro_f1: float
    confusion: tuple  # confusion[truth][prediction]
    n: int

    def to_json(self) -> dict:
        names = [g.name.lower() for g in AgeGroup]
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {names[c]: {"precision": self.precision[c], "recall": self.recall[c],
                                     "f1": self.f1[c]} for c in range(2)},
            "confusion": [list(r) for r in self.confusion],
        }


@dataclass(frozen=True)
class RegReport:
    mae: float | None
    rmse: float | None
    within_1yr: float | None
    within_2yr: float | None
    n: int

    def to_json(self) -> dict:
        return asdict(self)


def _ratio(a, b):
    return a / b if b else 0.0


def classification_metrics(predictions: Sequence, truths: Sequence) -> ClassReport:
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if not len(truths):
        raise EmptyInput("classification_metrics needs at least one sample")
    p = np.asarray([int(x) for x in predictions])
    t = np.asarray([int(x) for x in truths])
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    prec, rec, f1 = [], [], []
    for c in range(2):
        tp = cm[c, c]
        pc = _ratio(tp, cm[:, c].sum())
        rc = _ratio(tp, cm[c, :].sum())
        prec.append(float(pc))
        rec.append(float(rc))
        f1.append(float(_ratio(2 * pc * rc, pc + rc)))
    return ClassReport(float(np.trace(cm) / cm.sum()), tuple(prec), tuple(rec), tuple(f1),
                       float((f1[0] + f1[1]) / 2), tuple(tuple(int(v) for v in r) for r in cm),
                       int(cm.sum()))


def regression_metrics(pred_ages, true_ages) -> RegReport:
    p = np.asarray(pred_ages, dtype=np.float64).ravel()
    t = np.asarray(true_ages, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("prediction and truth lengths differ")
    if p.size == 0:
        raise EmptyInput("regression_metrics needs at least one sample")
    d = np.abs(p - t)
    return RegReport(float(d.mean()), float(math.sqrt(np.mean(d * d))),
                     float(np.mean(d <= 1.0)), float(np.mean(d <= 2.0)), int(d.size))


@dataclass(frozen=True)
class AgeBinReport:
    bins: dict  # label -> RegReport

    def to_json(self) -> dict:
        return {k: v.to_json() for k, v in self.bins.items()}


def age_bin_report(pred_ages, true_ages) -> AgeBinReport:
    p = np.asarray(pred_ages, dtype=np.float64).ravel()
    t = np.asarray(true_ages).ravel()
    bins = {}
    for lo, hi in AGE_BINS:
        sel = (t >= lo) & (t <= hi)
        if sel.any():
            bins[_bin_label(lo, hi)] = regression_metrics(p[sel], t[sel])
        else:
            bins[_bin_label(lo, hi)] = RegReport(None, None, None, None, 0)
    return AgeBinReport(bins)


@dataclass(frozen=True)
class ConfidenceCurve:
    ages: tuple
    mean_confidence: tuple  # None where no samples
    counts: tuple

    def to_json(self) -> dict:
        return {"ages": list(self.ages), "mean_confidence": list(self.mean_confidence),
                "counts": list(self.counts)}


def confidence_curve(outputs: Sequence[MultiTaskOutput], true_ages) -> ConfidenceCurve:
    ages = tuple(range(MIN_AGE, MAX_AGE + 1))
    conf = np.array([o.confidence for o in outputs], dtype=np.float64)
    t = np.asarray(true_ages).ravel()
    means, counts = [], []
    for a in ages:
        sel = t == a
        counts.append(int(sel.sum()))
        means.append(float(conf[sel].mean()) if sel.any() else None)
    return ConfidenceCurve(ages, tuple(means), tuple(counts))


# -- full evaluation --------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    classification: ClassReport
    regression: RegReport
    age_bins: AgeBinReport
    confidence: ConfidenceCurve
    model: str = ""
    modality: str = ""

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model,
            "modality": self.modality,
            "classification": self.classification.to_json(),
            "regression": self.regression.to_json(),
            "age_bins": self.age_bins.to_json(),
            "confidence_curve": self.confidence.to_json(),
        }


def check_disjoint(checkpoint: Checkpoint, data: SampleSet) -> None:
    train_subjects = set(checkpoint.metadata.get("train_subjects", ()))
    leaked = sorted(train_subjects & set(data.subjects))
    if leaked:
        raise SubjectLeakage(f"{len(leaked)} evaluation subjects were used in training, "
                             f"e.g. {leaked[:3]}")


def report_from_outputs(raw: np.ndarray, ages, model: str = "", modality: str = "") -> EvalReport:
    raw = np.asarray(raw, dtype=np.float64)
    ages = np.asarray(ages)
    outs = outputs_from_array(raw)
    preds = [o.predicted_group for o in outs]
    truths = [AgeGroup.OLD if a >= 10 else AgeGroup.YOUNG for a in ages]
    return EvalReport(classification_metrics(preds, truths),
                      regression_metrics(raw[:, 2], ages),
                      age_bin_report(raw[:, 2], ages),
                      confidence_curve(outs, ages), model, modality)


def evaluate(checkpoint: Checkpoint, data: SampleSet, model: str = "") -> EvalReport:
    check_disjoint(checkpoint, data)
    if len(data) == 0:
        raise EmptyInput("evaluation set is empty")
    meta = checkpoint.metadata
    raw = predict(checkpoint.network, data, meta["norm_mean"], meta["norm_std"])
    return report_from_outputs(raw, data.ages, model, meta.get("modality", data.modality.value))


@dataclass(frozen=True)
class CrossSensorReport:
    same: EvalReport
    other: EvalReport

    @property
    def delta(self) -> dict:
        return {
            "accuracy_drop": self.same.classification.accuracy - self.other.classification.accuracy,
            "mae_increase": self.other.regression.mae - self.same.regression.mae,
            "macro_f1_drop": self.same.classification.macro_f1 - self.other.classification.macro_f1,
        }

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "same_sensor": self.same.to_json(),
                "other_sensor": self.other.to_json(), "delta": self.delta}


def cross_sensor_eval(checkpoint: Checkpoint, test_same_sensor: SampleSet,
                      test_other_sensor: SampleSet) -> CrossSensorReport:
    check_disjoint(checkpoint, test_same_sensor)
    check_disjoint(checkpoint, test_other_sensor)
    return CrossSensorReport(evaluate(checkpoint, test_same_sensor, "same_sensor"),
                             evaluate(checkpoint, test_other_sensor, "other_sensor"))


# -- saliency ---------------------------------------------------------------

def grad_cam(activations: np.ndarray, gradients: np.ndarray, out_hw: tuple | None = None) -> np.ndarray:
    """Heatmap from ``(C, h, w)`` feature maps and the target-logit gradients on them."""
    w = gradients.reshape(gradients.shape[0], -1).mean(axis=1)
    cam = np.maximum(np.tensordot(w, activations, axes=1), 0.0)
    if out_hw is not None and cam.shape != tuple(out_hw):
        cam = resize(cam.astype(np.float32), out_hw[1], out_hw[0]).astype(np.float64)
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    elif hi > 0:
        cam = np.ones_like(cam)
    else:
        cam = np.zeros_like(cam)
    return cam.astype(np.float32)


def saliency_map(network: Network | Checkpoint, x: np.ndarray, target_class: AgeGroup) -> np.ndarray:
    """Grad-CAM over the last convolutional feature maps for one ``(C, H, W)`` input."""
    net = network.network if isinstance(network, Checkpoint) else network
    split = net.feature_layer_index()
    if split is None or split == 0:
        raise NoConvLayer("network has no convolutional feature maps before pooling")
    dtype = next(iter(net.named_params().values())).dtype
    x = np.asarray(x, dtype=dtype)[None]
    feats, _ = net.forward(x, stop=split)
    out, cache = net.forward(feats, start=split)
    dy = np.zeros_like(out)
    dy[0, int(target_class)] = 1.0
    _, dfeats = net.backward(cache, dy)
    net.zero_grad()
    return grad_cam(feats[0].astype(np.float64), dfeats[0].astype(np.float64), x.shape[2:])


# -- report files -----------------------------------------------------------

def _num(v):
    return "" if v is None else repr(v)


def flat_rows(report: EvalReport) -> list[tuple[str, str]]:
    c, r = report.classification, report.regression
    rows = [("accuracy", c.accuracy), ("macro_f1", c.macro_f1), ("n", c.n)]
    for i, g in enumerate(AgeGroup):
        name = g.name.lower()
        rows += [(f"{name}_precision", c.precision[i]), (f"{name}_recall", c.recall[i]),
                 (f"{name}_f1", c.f1[i])]
    rows += [(f"confusion_{a.name.lower()}_{b.name.lower()}", c.confusion[a][b])
             for a in AgeGroup for b in AgeGroup]
    rows += [("mae", r.mae), ("rmse", r.rmse), ("within_1yr", r.within_1yr),
             ("within_2yr", r.within_2yr)]
    return [(k, _num(v)) for k, v in rows]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_report(report: EvalReport, out_dir, stem: str = "eval") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        f"{stem}.json": json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
        f"{stem}_metrics.csv": _csv(("metric", "value"), flat_rows(report)),
        f"{stem}_age_bins.csv": _csv(("bin", "n", "mae", "rmse", "within_1yr", "within_2yr"),
                                     [(k, v.n, _num(v.mae), _num(v.rmse), _num(v.within_1yr),
                                       _num(v.within_2yr)) for k, v in report.age_bins.bins.items()]),
        f"{stem}_confidence.csv": _csv(("age", "count", "mean_confidence"),
                                       [(a, n, _num(m)) for a, m, n in zip(*(
                                           report.confidence.ages, report.confidence.mean_confidence,
                                           report.confidence.counts))]),
    }
    label = report.model or stem
    paths[f"{stem}_confidence.svg"] = svg_line_chart(
        {label: list(zip(report.confidence.ages, report.confidence.mean_confidence))},
        "Mean confidence by age", "age (years)", "mean confidence")
    paths[f"{stem}_age_bin_mae.svg"] = svg_line_chart(
        {label: [(i, v.mae) for i, v in enumerate(report.age_bins.bins.values())]},
        "MAE by age bin", "age bin", "MAE (years)",
        x_labels=list(report.age_bins.bins))
    written = []
    for name, text in paths.items():
        p = out / name
        p.write_text(text)
        written.append(p)
    return written


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str,
                   x_labels: list | None = None, width: int = 480, height: int = 320) -> str:
    """A minimal SVG line chart; ``None`` y-values break the line."""
    pts = [(x, y) for s in series.values() for x, y in s if y is not None]
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [x for s in series.values() for x, _ in s]
    x0, x1 = (min(xs), max(xs)) if xs else (0, 1)
    y0, y1 = (min(y for _, y in pts), max(y for _, y in pts)) if pts else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
             f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}</text>',
             f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
             f'transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(ylabel)}</text>']
    ticks = sorted(set(xs))
    for i, x in enumerate(ticks):
        lab = x_labels[i] if x_labels and i < len(x_labels) else f"{x:g}"
        parts.append(f'<text x="{sx(x):.1f}" y="{top + ph + 16}" text-anchor="middle">{_esc(str(lab))}</text>')
    for k in range(5):
        y = y0 + (y1 - y0) * k / 4
        parts.append(f'<text x="{left - 6}" y="{sy(y) + 4:.1f}" text-anchor="end">{y:.3g}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        segs, cur = [], []
        for x, y in s:
            if y is None:
                if cur:
                    segs.append(cur)
                cur = []
            else:
                cur.append(f"{sx(x):.1f},{sy(y):.1f}")
        if cur:
            segs.append(cur)
        for seg in segs:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(seg)}"/>')
        parts.append(f'<text x="{left + pw - 4}" y="{top + 14 + 14 * i}" text-anchor="end" '
                     f'fill="{color}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


_REG = {"type": "object", "required": ["mae", "rmse", "within_1yr", "within_2yr", "n"],
        "properties": {"mae": {"type": ["number", "null"], "minimum": 0},
                       "rmse": {"type": ["number", "null"], "minimum": 0},
                       "within_1yr": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                       "within_2yr": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                       "n": {"type": "integer", "minimum": 0}}}
_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}
_PER_CLASS = {"type": "object", "required": ["precision", "recall", "f1"],
              "properties": {k: _FRACTION for k in ("precision", "recall", "f1")}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "model", "modality", "classification", "regression",
                 "age_bins", "confidence_curve"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "model": {"type": "string"},
        "modality": {"type": "string"},
        "classification": {
            "type": "object",
            "required": ["n", "accuracy", "macro_f1", "per_class", "confusion"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "accuracy": _FRACTION,
                "macro_f1": _FRACTION,
                "per_class": {"type": "object", "required": ["young", "old"],
                              "properties": {"young": _PER_CLASS, "old": _PER_CLASS}},
                "confusion": {"type": "array", "minItems": 2, "maxItems": 2,
                              "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                        "items": {"type": "integer", "minimum": 0}}},
            },
        },
        "regression": _REG,
        "age_bins": {"type": "object", "required": [_bin_label(*b) for b in AGE_BINS],
                     "additionalProperties": _REG},
        "confidence_curve": {
            "type": "object", "required": ["ages", "mean_confidence", "counts"],
            "properties": {
                "ages": {"type": "array", "items": {"type": "integer"}},
                "mean_confidence": {"type": "array",
                                    "items": {"type": ["number", "null"], "minimum": 0.5, "maximum": 1}},
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
    },
}

CROSS_SENSOR_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "same_sensor", "other_sensor", "delta"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "same_sensor": REPORT_SCHEMA,
        "other_sensor": REPORT_SCHEMA,
        "delta": {"type": "object", "required": ["accuracy_drop", "mae_increase"],
                  "additionalProperties": {"type": "number"}},
    },
}

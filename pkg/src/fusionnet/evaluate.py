"""Classification metrics, one-vs-rest ROC, Grad-CAM and report files."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import _logit_node, backprop, forward
from .graph import GraphError, ModelGraph

SCHEMA = 1


def _int_labels(labels, name) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be integers")
    return arr.astype(np.int64)


def predict_labels(probs) -> np.ndarray:
    """Argmax per row; ties go to the lowest class id."""
    return np.asarray(probs).argmax(axis=1)


def confusion(pred, true, k: int) -> np.ndarray:
    """K x K counts, rows = actual class, columns = predicted class."""
    pred = _int_labels(pred, "pred")
    true = _int_labels(true, "true")
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(true)} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (true, pred), 1)
    return m


@dataclass
class ClassMetrics:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    accuracy: float
    flags: list[str] = field(default_factory=list)


def prf1(matrix) -> ClassMetrics:
    """Per-class precision, recall and F1 plus accuracy.

    Zero denominators give 0.0 and add a flag naming the class.
    """
    m = np.asarray(matrix, dtype=np.int64)
    k = m.shape[0]
    precision, recall, f1, flags = [], [], [], []
    for c in range(k):
        tp = int(m[c, c])
        col, row = int(m[:, c].sum()), int(m[c, :].sum())
        if col:
            p = tp / col
        else:
            p = 0.0
            flags.append(f"precision_undefined:{c}")
        if row:
            r = tp / row
        else:
            r = 0.0
            flags.append(f"recall_undefined:{c}")
        if p + r > 0:
            f = 2 * p * r / (p + r)
        else:
            f = 0.0
            flags.append(f"f1_undefined:{c}")
        precision.append(p)
        recall.append(r)
        f1.append(f)
    total = int(m.sum())
    acc = int(np.trace(m)) / total if total else 0.0
    return ClassMetrics(precision, recall, f1, acc, flags)


@dataclass
class RocCurve:
    fpr: list[float]
    tpr: list[float]
    auc: float


def roc_curve(scores, positives) -> RocCurve:
    """Staircase ROC with equal scores grouped into one step; AUC by trapezoid."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr.tolist(), tpr.tolist(), auc)


def roc_auc(scores, true) -> tuple[list[RocCurve | None], float | None, list[str]]:
    """One-vs-rest curves per class and their macro-average AUC.

    Classes with no positives (or no negatives) are skipped: their entry is
    ``None`` and a flag is returned.
    """
    scores = np.asarray(scores, dtype=np.float64)
    true = _int_labels(true, "true")
    if scores.ndim != 2 or scores.shape[0] != len(true):
        raise ValueError(f"scores must be (N, K) with N={len(true)}, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    curves, flags = [], []
    for c in range(scores.shape[1]):
        pos = true == c
        if not pos.any() or pos.all():
            curves.append(None)
            flags.append(f"roc_skipped:{c}")
            continue
        curves.append(roc_curve(scores[:, c], pos))
    aucs = [cv.auc for cv in curves if cv is not None]
    macro = float(np.mean(aucs)) if aucs else None
    return curves, macro, flags


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    classes: list[str]
    confusion: list[list[int]]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    accuracy: float
    roc: list[dict | None]
    macro: dict
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {"schema": SCHEMA}
        for name in ("classes", "confusion", "precision", "recall", "f1", "accuracy", "roc", "macro",
                     "flags", "extra"):
            doc[name] = getattr(self, name)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
        fields = {k: v for k, v in doc.items() if k != "schema"}
        return cls(**fields)


def build_report(probs, true, classes: Sequence[str] | None = None, extra: dict | None = None) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[1]
    classes = list(classes) if classes is not None else [str(i) for i in range(k)]
    if len(classes) != k:
        raise ValueError(f"{len(classes)} class names for {k} score columns")
    m = confusion(predict_labels(probs), true, k)
    met = prf1(m)
    curves, macro_auc, roc_flags = roc_auc(probs, true)
    roc = [None if cv is None else {"fpr": cv.fpr, "tpr": cv.tpr, "auc": cv.auc} for cv in curves]
    macro = {
        "precision": float(np.mean(met.precision)),
        "recall": float(np.mean(met.recall)),
        "f1": float(np.mean(met.f1)),
        "auc": macro_auc,
    }
    return EvalReport(classes, m.tolist(), met.precision, met.recall, met.f1, met.accuracy, roc, macro,
                      met.flags + roc_flags, dict(extra or {}))


def _svg(width, height, body: list[str]) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n')
    return head + "\n".join(body) + "\n</svg>\n"


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
_PAD, _SIZE = 50, 300


def _axes(x0, y0, label_x, label_y, xmax="1", ymax="1") -> list[str]:
    return [
        f'<rect x="{x0}" y="{y0}" width="{_SIZE}" height="{_SIZE}" fill="none" stroke="black"/>',
        f'<text x="{x0}" y="{y0 + _SIZE + 15}" font-size="10">0</text>',
        f'<text x="{x0 + _SIZE - 6}" y="{y0 + _SIZE + 15}" font-size="10">{xmax}</text>',
        f'<text x="{x0 - 15}" y="{y0 + 4}" font-size="10">{ymax}</text>',
        f'<text x="{x0 + _SIZE / 2 - 20}" y="{y0 + _SIZE + 30}" font-size="12">{label_x}</text>',
        f'<text x="{x0 - 35}" y="{y0 + _SIZE / 2}" font-size="12" '
        f'transform="rotate(-90 {x0 - 35} {y0 + _SIZE / 2})">{label_y}</text>',
    ]


def _polyline(xs, ys, color, cls, dashed=False, x0=_PAD) -> str:
    pts = " ".join(f"{x0 + x * _SIZE:.3f},{_PAD + (1 - y) * _SIZE:.3f}" for x, y in zip(xs, ys))
    dash = ' stroke-dasharray="4 3"' if dashed else ""
    return f'<polyline class="{cls}" fill="none" stroke="{color}"{dash} points="{pts}"/>'


def roc_svg(report: EvalReport) -> str:
    body = _axes(_PAD, _PAD, "False positive rate", "True positive rate")
    body.append(f'<line x1="{_PAD}" y1="{_PAD + _SIZE}" x2="{_PAD + _SIZE}" y2="{_PAD}" '
                f'stroke="#999" stroke-dasharray="2 2"/>')
    for i, (name, rec) in enumerate(zip(report.classes, report.roc)):
        if rec is None:
            continue
        color = _COLORS[i % len(_COLORS)]
        body.append(_polyline(rec["fpr"], rec["tpr"], color, "roc"))
        body.append(f'<text x="{_PAD + _SIZE + 10}" y="{_PAD + 15 * (i + 1)}" font-size="11" fill="{color}">'
                    f'{name} (AUC {rec["auc"]:.3f})</text>')
    return _svg(2 * _PAD + _SIZE + 140, 2 * _PAD + _SIZE, body)


def curves_svg(history: Sequence[dict]) -> str:
    """Accuracy (left) and loss (right) per epoch, train solid and val dashed."""
    n = len(history)
    xs = [i / max(n - 1, 1) for i in range(n)]
    body = []
    for panel, (metric, label) in enumerate((("acc", "Accuracy"), ("loss", "Loss"))):
        x0 = _PAD + panel * (_SIZE + 2 * _PAD)
        vals = [h[f"{part}_{metric}"] for h in history for part in ("train", "val")
                if h.get(f"{part}_{metric}") is not None]
        top = 1.0 if metric == "acc" else max(max(vals, default=1.0), 1e-12)
        body += _axes(x0, _PAD, "Epoch", label, xmax=str(n), ymax=f"{top:.3g}")
        for part, dashed in (("train", False), ("val", True)):
            ys = [h.get(f"{part}_{metric}") for h in history]
            if any(y is None for y in ys):
                continue
            body.append(_polyline(xs, [y / top for y in ys], "#1f77b4" if part == "train" else "#d62728",
                                  f"{part}_{metric}", dashed, x0))
    return _svg(2 * (_SIZE + 2 * _PAD), 2 * _PAD + _SIZE, body)


def emit_report(report: EvalReport, out_dir, history: Sequence[dict] | None = None) -> list[Path]:
    """Write report.json, confusion.csv, roc.svg and (with history) curves.svg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    put("report.json", json.dumps(report.to_json(), sort_keys=True, indent=1) + "\n")
    with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in report.confusion:
            w.writerow(row)
    written.append(out / "confusion.csv")
    put("roc.svg", roc_svg(report))
    if history:
        put("curves.svg", curves_svg(history))
    elif (out / "curves.svg").exists():
        os.remove(out / "curves.svg")
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# inference and Grad-CAM


def predict_proba(graph: ModelGraph, params, images, batch_size: int = 64) -> np.ndarray:
    """Inference-mode output probabilities, evaluated in fixed-size chunks."""
    images = np.asarray(images, dtype=np.float64)
    outs = []
    for start in range(0, len(images), batch_size):
        _, (p,) = forward(graph, params, images[start:start + batch_size], training=False)
        outs.append(p)
    if not outs:
        return np.zeros((0, graph.shapes()[graph.outputs[0]][-1]))
    return np.concatenate(outs)


def _normalize(cam: np.ndarray) -> np.ndarray:
    lo = cam.min(axis=(-2, -1), keepdims=True)
    hi = cam.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (cam - lo) / safe, 0.0)


def grad_cam_batch(graph: ModelGraph, params, images, class_ids, node: str | None = None,
                   normalize: bool = True) -> np.ndarray:
    """Grad-CAM maps ``(N, h, w)`` for a batch, one target class per image.

    The score is the pre-softmax logit; inference mode keeps the samples
    independent so one backward pass serves the whole batch.
    """
    node = node or graph.cam_node
    if node is None:
        raise GraphError("graph has no designated final conv node for Grad-CAM")
    if node not in graph:
        raise GraphError(f"Grad-CAM node {node!r} is not in the graph")
    images = np.asarray(images, dtype=np.float64)
    class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (len(images),))
    logit, _ = _logit_node(graph)
    tape, _ = forward(graph, params, images, training=False, outputs=[logit])
    z = tape.values[logit]
    seed = np.zeros_like(z)
    seed[np.arange(len(images)), class_ids] = 1.0
    _, node_grads = backprop(tape, {logit: seed}, want_nodes=[node], skip_params=True)
    acts = tape.values[node]
    grads = node_grads.get(node, np.zeros_like(acts))
    weights = grads.mean(axis=(1, 2))  # (N, C)
    cam = np.maximum(np.einsum("nhwc,nc->nhw", acts, weights), 0.0)
    return _normalize(cam) if normalize else cam


def grad_cam(graph: ModelGraph, params, image, class_id: int, node: str | None = None) -> np.ndarray:
    """Normalized ``(h, w)`` Grad-CAM heatmap for a single image."""
    image = np.asarray(image, dtype=np.float64)
    batch = image if image.ndim == 4 else image[None]
    if len(batch) != 1:
        raise ValueError("grad_cam takes one image; use grad_cam_batch for several")
    return grad_cam_batch(graph, params, batch, [class_id], node)[0]

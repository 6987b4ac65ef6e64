"""Run configuration, dataset assembly and the mini-batch training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .autodiff import (AdamState, Params, adam_step, apply_batch_stats, cce_loss, init_params, loss_and_grads,
                       params_from_json, params_to_json)
from .evaluate import EvalReport, build_report, emit_report, predict_proba
from .graph import ModelGraph
from .models import SCALES, VARIANTS, build

log = logging.getLogger(__name__)

TOY_INPUT = (32, 32, 1)
FULL_INPUT = (224, 224, 3)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    variant: str = "m4"
    scale: str = "toy"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.001
    dropout: float = 0.3
    seed: int = 0
    data_dir: str | None = None
    synth: int | None = None  # samples per class for training; val gets n//4, test n//2
    layout: str = "fixed"
    augment: bool = False
    out: str = "runs/latest"
    allow_untrained_full: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.synth is not None and self.synth < 1:
            raise ValueError("synth must be >= 1 samples per class")
        if self.layout not in ("fixed", "quadrant"):
            raise ValueError(f"layout must be fixed or quadrant, got {self.layout!r}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @property
    def input_shape(self):
        return TOY_INPUT if self.scale == "toy" else FULL_INPUT


@dataclass
class Splits:
    classes: tuple[str, ...]
    x: tuple[np.ndarray, np.ndarray, np.ndarray]
    y: tuple[np.ndarray, np.ndarray, np.ndarray]
    quadrants: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _resize_set(images, shape):
    if images.shape[1:] == tuple(shape):
        return images
    return np.stack([D.preprocess_array((img + 1.0) * 127.5, shape) for img in images])


def load_splits(cfg: RunConfig) -> Splits:
    """Synthetic (train n, val n//4, test n//2 per class) or directory-backed splits."""
    if cfg.synth is not None:
        sizes = (cfg.synth, max(cfg.synth // 4, 1), max(cfg.synth // 2, 1))
        sets = [D.synthesize(n, seed=_sub_seed(cfg.seed, k), layout=cfg.layout) for k, n in enumerate(sizes)]
        xs = tuple(_resize_set(s.images, cfg.input_shape) for s in sets)
        return Splits(sets[0].manifest.classes, xs, tuple(s.labels for s in sets),
                      tuple(s.quadrants for s in sets))
    if cfg.data_dir is None:
        raise D.DataError("no data source: give a data directory or a synthetic size")
    manifest = D.scan_directory(cfg.data_dir)
    if len(manifest) == 0:
        raise D.DataError(f"empty dataset at {cfg.data_dir}")
    idx = D.split(manifest, D.SplitSpec(seed=cfg.seed))
    images = D.load_images(manifest, cfg.input_shape)
    labels = manifest.labels
    return Splits(manifest.classes, tuple(images[i] for i in idx), tuple(labels[i] for i in idx))


def _epoch_images(x, cfg: RunConfig, epoch: int):
    if not cfg.augment:
        return x
    base = _sub_seed(cfg.seed, 1000 + epoch)
    return np.stack([D.augment(img, base + i) for i, img in enumerate(x)])


def evaluate_split(graph: ModelGraph, params, x, y, batch_size=64) -> tuple[float, float, np.ndarray]:
    probs = predict_proba(graph, params, x, batch_size)
    return cce_loss(probs, y), float(np.mean(probs.argmax(axis=1) == y)), probs


@dataclass
class TrainResult:
    graph: ModelGraph
    params: Params
    best_epoch: int
    history: list[dict]
    report: EvalReport


def train_loop(cfg: RunConfig, splits: Splits | None = None, out_dir=None) -> TrainResult:
    """Adam on mean cross-entropy; keeps the best validation checkpoint.

    With ``lr == 0`` the update is skipped entirely, BatchNorm moving
    statistics included, so the parameters stay at their initial values.
    """
    started = time.time()
    cfg.validate()
    if cfg.scale == "full" and not cfg.allow_untrained_full:
        raise TrainingError("full-scale backbones have no pretrained weights; "
                            "pass --allow-untrained-full to train them from scratch anyway")
    splits = splits or load_splits(cfg)
    (xtr, xva, xte), (ytr, yva, yte) = splits.x, splits.y
    if len(xtr) == 0:
        raise D.DataError("training split is empty")
    graph = build(cfg.variant, cfg.scale, classes=len(splits.classes), dropout=cfg.dropout)
    params = init_params(graph, seed=cfg.seed)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(_sub_seed(cfg.seed, 99))

    _, init_val_acc, _ = evaluate_split(graph, params, xva, yva) if len(xva) else (None, None, None)
    best = (-np.inf, -np.inf)
    best_params, best_epoch = params, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(xtr))
        xe = _epoch_images(xtr, cfg, epoch)
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, tape = loss_and_grads(graph, params, xe[idx], ytr[idx], training=True, rng=rng)
            if not np.isfinite(loss):
                bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                                    f"non-finite gradients in {bad[:5]}")
            loss_sum += loss * len(idx)
            correct += int(np.sum(tape.values[graph.outputs[0]].argmax(axis=1) == ytr[idx]))
            if cfg.lr > 0:
                params, state = adam_step(params, grads, state)
                params = apply_batch_stats(graph, params, tape)
        rec = {"epoch": epoch, "train_loss": loss_sum / len(xtr), "train_acc": correct / len(xtr),
               "val_loss": None, "val_acc": None}
        if len(xva):
            rec["val_loss"], rec["val_acc"], _ = evaluate_split(graph, params, xva, yva)
            key = (rec["val_acc"], -rec["val_loss"])
            if key > best:
                best, best_params, best_epoch = key, params, epoch
        else:
            best_params, best_epoch = params, epoch
        history.append(rec)
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %s val_acc %s", epoch, cfg.epochs,
                 rec["train_loss"], rec["train_acc"], rec["val_loss"], rec["val_acc"])

    xr, yr = (xte, yte) if len(xte) else (xva, yva)
    _, _, probs = evaluate_split(graph, best_params, xr, yr)
    extra = {"variant": cfg.variant, "scale": cfg.scale, "seed": cfg.seed, "epochs": cfg.epochs,
             "best_epoch": best_epoch, "initial_val_acc": init_val_acc,
             "split": "test" if len(xte) else "val", "n_eval": int(len(yr))}
    report = build_report(probs, yr, splits.classes, extra)
    result = TrainResult(graph, best_params, best_epoch, history, report)
    if out_dir is not None:
        write_run(result, cfg, out_dir, started)
    return result


def write_run(result: TrainResult, cfg: RunConfig, out_dir, started: float | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.json").write_text(params_to_json(result.params) + "\n", encoding="utf-8")
    (out / "history.json").write_text(json.dumps(result.history, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    emit_report(result.report, out, result.history)
    # wall-clock data lives only here so every other file is reproducible
    meta = {"finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    if started is not None:
        meta["seconds"] = round(time.time() - started, 3)
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Params:
    return params_from_json(Path(path).read_text(encoding="utf-8"))

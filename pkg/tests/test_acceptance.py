"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import io
import json
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from fusionnet.autodiff import cce_loss, grad_check, init_params, softmax
from fusionnet.cli import main
from fusionnet.data import (DatasetManifest, SplitSpec, augment, bilinear_resize, preprocess_array, split)
from fusionnet.evaluate import confusion, grad_cam_batch, predict_proba, prf1, roc_curve
from fusionnet.fdsfm import plan_pool
from fusionnet.graph import summarize
from fusionnet.models import build_backbone_shape, build_gradcheck_graph, build_toy
from fusionnet.training import RunConfig, load_splits, train_loop

TOY_ARGS = ["train", "--scale", "toy", "--variant", "m4", "--synth", "200", "--seed", "7"]


def _cli(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(list(argv))
    return code, buf.getvalue()


@pytest.fixture(scope="module")
def toy_m4_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_m4_a")
    start = time.perf_counter()
    code, _ = _cli(*TOY_ARGS, "--out", str(out))
    return code, out, time.perf_counter() - start


def test_01_table_ledger(criterion):
    start = time.perf_counter()
    code, out = _cli("verify-table", "--variant", "m4", "--scale", "full")
    elapsed = time.perf_counter() - start
    rows = {line.split()[0]: line for line in out.splitlines() if line.strip()}
    expected = {
        "concatenate_18": "(7,7,1920)", "concatenate_24": "(5,5,1664)", "concatenate_19": "(7,7,3968)",
        "concatenate_25": "(5,5,3584)", "global_avg_pool2d_4": "(2048)", "dense_2": "(256)", "dense_3": "(3)",
        "batch_norm_112": "15872", "batch_norm_115": "14336", "conv2d_102": "8128512",
        "conv2d_105": "7342080", "trainable_params": "16011011",
    }
    shown = all(name in rows and rows[name].endswith("PASS") and rows[name].count(value) == 2
                for name, value in expected.items())
    ok = code == 0 and shown and "FAIL" not in out and elapsed < 1.0
    assert criterion(1, ok, f"verify-table exit {code}, every fusion-head row and trainable total match, "
                            f"{elapsed:.2f}s"), out


def test_02_backbone_parameter_sum(criterion):
    resnet = summarize(build_backbone_shape("resnet50v2")).totals.total
    inception = summarize(build_backbone_shape("inceptionv3")).totals.total
    total = resnet + inception
    head_stats = 2 * 3968 + 2 * 3584
    ok = total == 45_367_584 and total + head_stats == 45_382_688 and total + head_stats + 16_011_011 == 61_393_699
    assert criterion(2, ok, f"ResNet50V2 {resnet:,} + InceptionV3 {inception:,} = {total:,}; "
                            f"grand total {total + head_stats + 16_011_011:,}")


def test_03_pool_planner(criterion):
    start = time.perf_counter()
    plans = {(w, t): plan_pool(w, t) for w in range(1, 65) for t in range(1, w + 1)}
    elapsed = time.perf_counter() - start
    bad = []
    for w in range(1, 65):
        f, s = np.meshgrid(np.arange(1, w + 1), np.arange(1, w + 1), indexing="ij")
        t_of = (w - f) // s + 1
        covers = s * (t_of - 1) + f == w
        for t in range(1, w + 1):
            choice = plans[(w, t)]
            if choice.identity:
                if w != t:
                    bad.append((w, t))
                continue
            valid = set(zip(f[(t_of == t) & covers].tolist(), s[(t_of == t) & covers].tolist()))
            if (choice.f, choice.s) not in valid:
                bad.append((w, t))
    table = plans[(28, 7)] == type(plans[(28, 7)])(4, 4) and plans[(14, 7)] == type(plans[(14, 7)])(2, 2)
    ok = not bad and table and elapsed < 1.0
    assert criterion(3, ok, f"{len(plans)} (W,T) pairs vs exhaustive search, {len(bad)} mismatches, "
                            f"28->7 and 14->7 {'match' if table else 'differ'}, {elapsed:.3f}s")


def test_04_gradient_check(criterion):
    start = time.perf_counter()
    g = build_gradcheck_graph()
    rng = np.random.default_rng(0)
    small = max(grad_check(g, init_params(g, seed), rng.standard_normal((4, 8, 8, 2)), np.arange(4) % 3)
                for seed in range(3))
    toy = build_toy("m4")
    sampled = grad_check(toy, init_params(toy, 0), rng.standard_normal((4, 32, 32, 1)), np.arange(4) % 3,
                         max_coords=4)
    elapsed = time.perf_counter() - start
    ok = small < 1e-4 and sampled < 1e-4 and elapsed < 120
    assert criterion(4, ok, f"all-coordinate check {small:.2e}, toy M4 sampled check {sampled:.2e} "
                            f"(h=1e-5, float64, dropout off), {elapsed:.1f}s")


def test_05_softmax_and_loss(criterion):
    rng = np.random.default_rng(0)
    z = rng.standard_normal((200, 5)) * 30
    p = softmax(z)
    row_err = float(np.max(np.abs(p.sum(axis=1) - 1)))
    loss_err = abs(cce_loss([[0.5, 0.25, 0.25]], [0]) - math.log(2))
    # max-subtraction makes a shift by the row max an exact no-op
    shifted = softmax(z - z.max(axis=1, keepdims=True))
    shift_exact = np.array_equal(shifted, p)
    ok = row_err <= 1e-12 and loss_err <= 1e-12 and shift_exact
    assert criterion(5, ok, f"row-sum error {row_err:.1e}, |loss - ln2| {loss_err:.1e}, "
                            f"shift invariance {'exact' if shift_exact else 'inexact'}")


def test_06_toy_end_to_end(criterion, toy_m4_run):
    code, out, elapsed = toy_m4_run
    report = json.loads((out / "report.json").read_text()) if code == 0 else {}
    history = json.loads((out / "history.json").read_text()) if code == 0 else []
    acc = report.get("accuracy", 0.0)
    others = {}
    for variant in ("m1", "m2", "m3"):
        res = train_loop(RunConfig(variant=variant, synth=200, seed=7))
        others[variant] = (len(res.history), res.report.accuracy)
    ok = (code == 0 and acc >= 0.90 and elapsed < 300 and len(history) == 30
          and history[-1]["train_acc"] >= 0.95 and all(n == 30 for n, _ in others.values()))
    detail = ", ".join(f"{v} test acc {a:.3f}" for v, (_, a) in others.items())
    assert criterion(6, ok, f"toy M4 test acc {acc:.3f} after 30 epochs in {elapsed:.0f}s "
                            f"(train acc {history[-1]['train_acc'] if history else 0:.3f}); {detail}")


def _mann_whitney(scores, positives):
    pos, neg = scores[positives], scores[~positives]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def test_07_metrics_oracle(criterion):
    rng = np.random.default_rng(7)
    exact, auc_err = True, 0.0
    for _ in range(100):
        k, n = int(rng.integers(2, 5)), int(rng.integers(5, 150))
        pred, true = rng.integers(0, k, n), rng.integers(0, k, n)
        m = confusion(pred, true, k)
        brute = np.zeros((k, k), int)
        for a, b in zip(true, pred):
            brute[a, b] += 1
        met = prf1(m)
        for c in range(k):
            tp, col, row = brute[c, c], brute[:, c].sum(), brute[c].sum()
            p = tp / col if col else 0.0
            r = tp / row if row else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            exact &= (met.precision[c], met.recall[c], met.f1[c]) == (p, r, f)
        exact &= np.array_equal(m, brute) and met.accuracy == np.sum(pred == true) / n
        y = rng.random(n) < 0.5
        y[:2] = [True, False]
        s = np.round(rng.random(n), 2)
        auc_err = max(auc_err, abs(roc_curve(s, y).auc - _mann_whitney(s, y)))
    y = np.array([True, False] * 10)
    perfect = roc_curve(y.astype(float), y).auc
    inverted = roc_curve(1.0 - y, y).auc
    ok = exact and auc_err <= 1e-9 and perfect == 1.0 and inverted == 0.0
    assert criterion(7, ok, f"100 random sets exact={exact}, max AUC vs Mann-Whitney {auc_err:.1e}, "
                            f"perfect {perfect}, inverted {inverted}")


def test_08_split_arithmetic(criterion):
    counts = (4_296, 5_824, 11_152)
    samples = [(f"{k}/{i}", k) for k, n in enumerate(counts) for i in range(n)]
    parts = split(DatasetManifest("", ("covid", "pneumonia", "normal"), samples), SplitSpec())
    sizes = tuple(len(p) for p in parts)
    ok = sizes == (12_157, 3_219, 5_896)
    assert criterion(8, ok, f"21,272 samples -> {sizes}")


def test_09_preprocessing(criterion):
    black = preprocess_array(np.zeros((40, 30), np.uint8), (224, 224, 3))
    white = preprocess_array(np.full((40, 30), 255, np.uint8), (224, 224, 3))
    endpoints = np.all(black == -1.0) and np.all(white == 1.0)
    img = np.random.default_rng(0).uniform(0, 255, (9, 7, 3))
    identity = float(np.max(np.abs(bilinear_resize(img, 9, 7) - img)))
    oracle = np.array([[0, 63.75, 191.25, 255], [63.75, 95.625, 159.375, 191.25],
                       [191.25, 159.375, 95.625, 63.75], [255, 191.25, 63.75, 0]])
    up = float(np.max(np.abs(bilinear_resize(np.array([[0.0, 255.0], [255.0, 0.0]])[:, :, None], 4, 4)[..., 0]
                             - oracle)))
    x = np.random.default_rng(1).standard_normal((32, 32, 1))
    same = augment(x, 99).tobytes() == augment(x, 99).tobytes()
    ok = endpoints and identity <= 1e-12 and up <= 1e-12 and same
    assert criterion(9, ok, f"endpoints exact={endpoints}, same-size error {identity:.1e}, "
                            f"2x2->4x4 error {up:.1e}, augmentation byte-identical={same}")


def test_10_grad_cam_localization(criterion):
    cfg = RunConfig(variant="m4", synth=200, layout="quadrant", seed=3)
    splits = load_splits(cfg)
    res = train_loop(cfg, splits)
    x, y, quadrant = splits.x[2], splits.y[2], splits.quadrants[2]
    pred = predict_proba(res.graph, res.params, x).argmax(axis=1)
    chosen = (pred == y) & (quadrant >= 0)
    cams = grad_cam_batch(res.graph, res.params, x[chosen], y[chosen])
    h, w = cams.shape[1:]
    rows, cols = np.unravel_index(cams.reshape(len(cams), -1).argmax(axis=1), (h, w))
    hit = (2 * (rows >= h // 2) + (cols >= w // 2)) == quadrant[chosen]
    shape_ok = (h, w) == res.graph.shapes()[res.graph.cam_node][:2]
    range_ok = cams.min() >= 0 and cams.max() <= 1
    rate = float(hit.mean()) if len(hit) else 0.0
    ok = shape_ok and range_ok and rate >= 0.80
    assert criterion(10, ok, f"heatmaps {h}x{w} at {res.graph.cam_node}, values in [0,1]={range_ok}, "
                             f"argmax in evidence quadrant for {rate:.1%} of {len(hit)} correct samples")


def test_11_determinism(criterion, toy_m4_run, tmp_path):
    code_a, first, _ = toy_m4_run
    code_b, _ = _cli(*TOY_ARGS, "--out", str(tmp_path))
    same = {name: (first / name).read_bytes() == (tmp_path / name).read_bytes()
            for name in ("report.json", "checkpoint.json")}
    ok = code_a == code_b == 0 and all(same.values())
    assert criterion(11, ok, "two identical train runs: " + ", ".join(
        f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))

"""Command-line entry point.

Exit codes: 0 success, 1 verification or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .autodiff import grad_check, init_params
from .evaluate import build_report, emit_report, grad_cam_batch, predict_proba
from .fdsfm import emit_subgraph, plan_fusion
from .graph import GraphError, ShapeError, load_ledger, parse_ledger, summarize, verify_against_expected
from .models import SCALES, VARIANTS, build, build_gradcheck_graph
from .training import RunConfig, TrainingError, load_checkpoint, load_splits, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

RUN_FIELDS = ("variant", "scale", "epochs", "batch_size", "lr", "dropout", "seed", "data_dir", "synth",
              "layout", "augment", "out", "allow_untrained_full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected e.g. 28,28,128") from None


def _model_args(p, default_scale="full"):
    p.add_argument("--variant", choices=VARIANTS, default="m4")
    p.add_argument("--scale", choices=SCALES, default=default_scale)
    p.add_argument("--classes", type=int, default=3)


def _run_args(p):
    """RunConfig flags; defaults are None so a --config file can fill them."""
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--scale", choices=SCALES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--synth", type=int, metavar="N", help="synthetic data, N training samples per class")
    p.add_argument("--layout", choices=("fixed", "quadrant"))
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--allow-untrained-full", dest="allow_untrained_full", action="store_true", default=None)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusionnet", description="Feature-map fusion networks: build, verify, train, evaluate.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("summary", help="print the layer table of a model")
    _model_args(p)
    p.add_argument("--all", action="store_true", help="include backbone layers")

    p = sub.add_parser("verify-table", help="check a model against an expected-rows ledger")
    _model_args(p)
    p.add_argument("--ledger", help="CSV with name,out_shape,params (default: bundled M4 ledger)")

    p = sub.add_parser("plan-fdsfm", help="plan pooling for feature maps of different sizes")
    p.add_argument("--map", dest="maps", action="append", type=_shape, required=True,
                   help="feature-map shape W,W,C (repeat for each map)")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--filters", type=int, default=2048)
    p.add_argument("--trunk", type=_shape)

    p = sub.add_parser("synth-data", help="write a synthetic PNG dataset")
    p.add_argument("--n", type=int, default=200, help="images per class")
    p.add_argument("--seed", type=int)
    p.add_argument("--layout", choices=("fixed", "quadrant"), default="fixed")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, history and report")
    _run_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _run_args(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcam", help="Grad-CAM heatmaps for test images")
    _run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8, help="number of test images")
    p.add_argument("--class-id", dest="class_id", type=int, help="target class (default: predicted)")

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("--graph", choices=("small", "toy-m1", "toy-m2", "toy-m3", "toy-m4"), default="small")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--max-coords", dest="max_coords", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    return parser


def _env_seed() -> int | None:
    raw = os.environ.get("FUSIONNET_SEED")
    if raw in (None, ""):
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FUSIONNET_SEED must be an integer, got {raw!r}") from None


def resolve_run_config(args) -> RunConfig:
    """Defaults, then the --config file, then explicit flags; seed falls back to FUSIONNET_SEED."""
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    for name in RUN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    if "seed" not in doc:
        env = _env_seed()
        if env is not None:
            doc["seed"] = env
    try:
        return RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run configuration: {exc}") from exc


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    return 0 if env is None else env


# --------------------------------------------------------------------------
# commands


def cmd_summary(args) -> int:
    graph = build(args.variant, args.scale, classes=args.classes)
    print(summarize(graph).format(collapse=not args.all))
    return EXIT_OK


def cmd_verify_table(args) -> int:
    if args.ledger:
        try:
            expected = parse_ledger(Path(args.ledger).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read ledger: {exc}") from exc
    elif args.variant == "m4" and args.scale == "full" and args.classes == 3:
        expected = load_ledger()
    else:
        raise UsageError("the bundled ledger describes the full-scale 3-class M4 model; "
                         "pass --ledger for other configurations")
    graph = build(args.variant, args.scale, classes=args.classes)
    report = verify_against_expected(summarize(graph), expected, graph)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_plan_fdsfm(args) -> int:
    try:
        plan = plan_fusion(args.maps, args.target, args.filters, trunk=args.trunk)
        emit_subgraph(plan)
    except (ValueError, GraphError) as exc:
        raise UsageError(f"plan-fdsfm: {exc}") from exc
    print(json.dumps(plan.to_json(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_synth_data(args) -> int:
    ds = D.synthesize(args.n, size=args.size, seed=_seed(args), layout=args.layout)
    manifest = D.write_png_dataset(ds, args.out)
    print(f"wrote {len(manifest)} images to {args.out}")
    return EXIT_OK


def _write_config(cfg: RunConfig, out):
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "config.json").write_text(cfg.to_json(), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    result = train_loop(cfg, out_dir=cfg.out)
    last = result.history[-1]
    print(f"trained {cfg.variant}/{cfg.scale} for {cfg.epochs} epochs; "
          f"final train acc {last['train_acc']:.4f}, best epoch {result.best_epoch}, "
          f"test acc {result.report.accuracy:.4f}; outputs in {cfg.out}")
    return EXIT_OK


def _load_model(cfg: RunConfig, checkpoint, classes):
    graph = build(cfg.variant, cfg.scale, classes=len(classes), dropout=cfg.dropout)
    params = load_checkpoint(checkpoint)
    missing = [k for k in init_params(graph) if k not in params]
    if missing:
        raise UsageError(f"checkpoint does not match {cfg.variant}/{cfg.scale}: missing {missing[:3]}")
    return graph, params


def cmd_eval(args) -> int:
    cfg = resolve_run_config(args)
    splits = load_splits(cfg)
    graph, params = _load_model(cfg, args.checkpoint, splits.classes)
    x, y = splits.x[2], splits.y[2]
    report = build_report(predict_proba(graph, params, x), y, splits.classes,
                          {"variant": cfg.variant, "scale": cfg.scale, "seed": cfg.seed, "split": "test",
                           "n_eval": int(len(y))})
    emit_report(report, cfg.out)
    _write_config(cfg, cfg.out)
    print(f"accuracy {report.accuracy:.4f}, macro AUC {report.macro['auc']}; report in {cfg.out}")
    return EXIT_OK


def _heatmap_png(cam, path, scale=16):
    from PIL import Image

    pixels = np.rint(np.kron(cam, np.ones((scale, scale))) * 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)


def cmd_gradcam(args) -> int:
    cfg = resolve_run_config(args)
    splits = load_splits(cfg)
    graph, params = _load_model(cfg, args.checkpoint, splits.classes)
    x = splits.x[2][: args.count]
    probs = predict_proba(graph, params, x)
    targets = probs.argmax(axis=1) if args.class_id is None else np.full(len(x), args.class_id)
    if np.any((targets < 0) | (targets >= len(splits.classes))):
        raise UsageError(f"class id must lie in [0, {len(splits.classes)})")
    cams = grad_cam_batch(graph, params, x, targets)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, cam in enumerate(cams):
        _heatmap_png(cam, out / f"gradcam_{i:03d}.png")
        records.append({"index": i, "label": int(splits.y[2][i]), "target": int(targets[i]),
                        "argmax": [int(v) for v in np.unravel_index(int(cam.argmax()), cam.shape)],
                        "heatmap": cam.tolist()})
    doc = {"node": graph.cam_node, "shape": list(cams.shape[1:]), "maps": records}
    (out / "gradcam.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_config(cfg, cfg.out)
    print(f"wrote {len(cams)} heatmaps of shape {cams.shape[1:]} from {graph.cam_node} to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _seed(args)
    if args.graph == "small":
        graph = build_gradcheck_graph()
    else:
        graph = build(args.graph.split("-")[1], "toy")
    rng = np.random.default_rng(seed)
    shape = graph.node(graph.inputs[0]).layer.shape
    x = rng.standard_normal((args.batch,) + tuple(shape))
    y = np.arange(args.batch) % graph.shapes()[graph.outputs[0]][-1]
    worst, errors = grad_check(graph, init_params(graph, seed), x, y, h=args.h, max_coords=args.max_coords,
                               seed=seed, per_param=True)
    for name in sorted(errors):
        print(f"{name:48s} {errors[name]:.3e}")
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "summary": cmd_summary,
    "verify-table": cmd_verify_table,
    "plan-fdsfm": cmd_plan_fdsfm,
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=os.environ.get("FUSIONNET_LOG", "WARNING"), format="%(levelname)s %(message)s")
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, D.DataError, ShapeError, GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

"""Backbone graphs, the fusion network and its variants, plus desk-scale toys.

Full-scale graphs reproduce the canonical ResNet50V2 / InceptionV3 layer
stacks (without classification tops) at 224x224x3 so that shapes and
parameter counts can be checked; they are never given weights.  Explicit
zero-padding layers of the reference implementations are folded into
``same`` convolutions, which yields identical output sizes.

Toy graphs keep the same fusion head on two small trainable backbones with
a 32x32x1 input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

from .fdsfm import emit_subgraph, plan_fusion
from .graph import (Add, AvgPool2D, BatchNorm, Concat, Conv2D, Dense, Dropout, GlobalAvgPool2D, GraphBuilder,
                    GraphError, Input, MaxPool2D, ModelGraph, ReLU, Softmax)
from .tensor import Shape

VARIANTS = ("m1", "m2", "m3", "m4")
SCALES = ("full", "toy")


# --------------------------------------------------------------------------
# full-scale backbones


def _resnet_block(b: GraphBuilder, x: str, filters: int, name: str, stride: int = 1,
                  conv_shortcut: bool = False) -> str:
    preact = b.add(BatchNorm(epsilon=1.001e-5), x, name=f"{name}_preact_bn")
    preact = b.add(ReLU(), preact, name=f"{name}_preact_relu")
    if conv_shortcut:
        shortcut = b.add(Conv2D(4 * filters, 1, stride, "valid"), preact, name=f"{name}_0_conv")
    elif stride > 1:
        shortcut = b.add(MaxPool2D(1, stride), x, name=f"{name}_0_max")
    else:
        shortcut = x
    y = b.add(Conv2D(filters, 1, 1, "valid", use_bias=False), preact, name=f"{name}_1_conv")
    y = b.add(BatchNorm(epsilon=1.001e-5), y, name=f"{name}_1_bn")
    y = b.add(ReLU(), y, name=f"{name}_1_relu")
    y = b.add(Conv2D(filters, 3, stride, "same", use_bias=False), y, name=f"{name}_2_conv")
    y = b.add(BatchNorm(epsilon=1.001e-5), y, name=f"{name}_2_bn")
    y = b.add(ReLU(), y, name=f"{name}_2_relu")
    y = b.add(Conv2D(4 * filters, 1, 1, "valid"), y, name=f"{name}_3_conv")
    return b.add(Add(), shortcut, y, name=f"{name}_out")


def resnet50v2_layers(b: GraphBuilder, x: str, prefix: str = "resnet50v2/") -> str:
    x = b.add(Conv2D(64, 7, 2, "same"), x, name=prefix + "conv1_conv")
    x = b.add(MaxPool2D(3, 2, "same"), x, name=prefix + "pool1_pool")
    for stage, filters, blocks, last_stride in ((2, 64, 3, 2), (3, 128, 4, 2), (4, 256, 6, 2), (5, 512, 3, 1)):
        stem = f"{prefix}conv{stage}"
        x = _resnet_block(b, x, filters, f"{stem}_block1", conv_shortcut=True)
        for i in range(2, blocks):
            x = _resnet_block(b, x, filters, f"{stem}_block{i}")
        x = _resnet_block(b, x, filters, f"{stem}_block{blocks}", stride=last_stride)
    x = b.add(BatchNorm(epsilon=1.001e-5), x, name=prefix + "post_bn")
    return b.add(ReLU(), x, name=prefix + "post_relu")


def _cbr(b: GraphBuilder, x: str, filters: int, kh: int, kw: int, name: str,
         strides: int = 1, padding: str = "same") -> str:
    """Bias-free conv, shift-only BN, ReLU: InceptionV3's basic unit."""
    x = b.add(Conv2D(filters, (kh, kw), strides, padding, use_bias=False), x, name=f"{name}/conv")
    x = b.add(BatchNorm(scale=False), x, name=f"{name}/bn")
    return b.add(ReLU(), x, name=name)


def inceptionv3_layers(b: GraphBuilder, x: str, prefix: str = "inception_v3/") -> str:
    p = prefix
    x = _cbr(b, x, 32, 3, 3, p + "stem1", strides=2, padding="valid")
    x = _cbr(b, x, 32, 3, 3, p + "stem2", padding="valid")
    x = _cbr(b, x, 64, 3, 3, p + "stem3")
    x = b.add(MaxPool2D(3, 2), x, name=p + "stem_pool1")
    x = _cbr(b, x, 80, 1, 1, p + "stem4", padding="valid")
    x = _cbr(b, x, 192, 3, 3, p + "stem5", padding="valid")
    x = b.add(MaxPool2D(3, 2), x, name=p + "stem_pool2")

    for i, pool_filters in enumerate((32, 64, 64)):
        m = f"{p}mixed{i}"
        b1 = _cbr(b, x, 64, 1, 1, m + "/branch1x1")
        b5 = _cbr(b, x, 48, 1, 1, m + "/branch5x5_reduce")
        b5 = _cbr(b, b5, 64, 5, 5, m + "/branch5x5")
        bd = _cbr(b, x, 64, 1, 1, m + "/branch3x3dbl_reduce")
        bd = _cbr(b, bd, 96, 3, 3, m + "/branch3x3dbl_1")
        bd = _cbr(b, bd, 96, 3, 3, m + "/branch3x3dbl_2")
        bp = b.add(AvgPool2D(3, 1, "same"), x, name=m + "/branch_pool_avg")
        bp = _cbr(b, bp, pool_filters, 1, 1, m + "/branch_pool")
        x = b.add(Concat(), b1, b5, bd, bp, name=m)

    m = p + "mixed3"
    b3 = _cbr(b, x, 384, 3, 3, m + "/branch3x3", strides=2, padding="valid")
    bd = _cbr(b, x, 64, 1, 1, m + "/branch3x3dbl_reduce")
    bd = _cbr(b, bd, 96, 3, 3, m + "/branch3x3dbl_1")
    bd = _cbr(b, bd, 96, 3, 3, m + "/branch3x3dbl_2", strides=2, padding="valid")
    bp = b.add(MaxPool2D(3, 2), x, name=m + "/branch_pool")
    x = b.add(Concat(), b3, bd, bp, name=m)

    for i, c7 in zip((4, 5, 6, 7), (128, 160, 160, 192)):
        m = f"{p}mixed{i}"
        b1 = _cbr(b, x, 192, 1, 1, m + "/branch1x1")
        b7 = _cbr(b, x, c7, 1, 1, m + "/branch7x7_reduce")
        b7 = _cbr(b, b7, c7, 1, 7, m + "/branch7x7_1")
        b7 = _cbr(b, b7, 192, 7, 1, m + "/branch7x7_2")
        bd = _cbr(b, x, c7, 1, 1, m + "/branch7x7dbl_reduce")
        bd = _cbr(b, bd, c7, 7, 1, m + "/branch7x7dbl_1")
        bd = _cbr(b, bd, c7, 1, 7, m + "/branch7x7dbl_2")
        bd = _cbr(b, bd, c7, 7, 1, m + "/branch7x7dbl_3")
        bd = _cbr(b, bd, 192, 1, 7, m + "/branch7x7dbl_4")
        bp = b.add(AvgPool2D(3, 1, "same"), x, name=m + "/branch_pool_avg")
        bp = _cbr(b, bp, 192, 1, 1, m + "/branch_pool")
        x = b.add(Concat(), b1, b7, bd, bp, name=m)

    m = p + "mixed8"
    b3 = _cbr(b, x, 192, 1, 1, m + "/branch3x3_reduce")
    b3 = _cbr(b, b3, 320, 3, 3, m + "/branch3x3", strides=2, padding="valid")
    b7 = _cbr(b, x, 192, 1, 1, m + "/branch7x7x3_reduce")
    b7 = _cbr(b, b7, 192, 1, 7, m + "/branch7x7x3_1")
    b7 = _cbr(b, b7, 192, 7, 1, m + "/branch7x7x3_2")
    b7 = _cbr(b, b7, 192, 3, 3, m + "/branch7x7x3_3", strides=2, padding="valid")
    bp = b.add(MaxPool2D(3, 2), x, name=m + "/branch_pool")
    x = b.add(Concat(), b3, b7, bp, name=m)

    for i in (9, 10):
        m = f"{p}mixed{i}"
        b1 = _cbr(b, x, 320, 1, 1, m + "/branch1x1")
        b3 = _cbr(b, x, 384, 1, 1, m + "/branch3x3_reduce")
        b3a = _cbr(b, b3, 384, 1, 3, m + "/branch3x3_1")
        b3b = _cbr(b, b3, 384, 3, 1, m + "/branch3x3_2")
        b3 = b.add(Concat(), b3a, b3b, name=m + "/branch3x3")
        bd = _cbr(b, x, 448, 1, 1, m + "/branch3x3dbl_reduce")
        bd = _cbr(b, bd, 384, 3, 3, m + "/branch3x3dbl_1")
        bda = _cbr(b, bd, 384, 1, 3, m + "/branch3x3dbl_2a")
        bdb = _cbr(b, bd, 384, 3, 1, m + "/branch3x3dbl_2b")
        bd2 = b.add(Concat(), bda, bdb, name=m + "/branch3x3dbl")
        bp = b.add(AvgPool2D(3, 1, "same"), x, name=m + "/branch_pool_avg")
        bp = _cbr(b, bp, 192, 1, 1, m + "/branch_pool")
        x = b.add(Concat(), b1, b3, bd2, bp, name=m)
    # 1920-channel 5x5 trunk consumed by the fusion head: both 768-wide
    # branch concatenations of mixed10 plus the 384-wide middle 3x3 conv.
    b.add(Concat(), p + "mixed10/branch3x3", p + "mixed10/branch3x3dbl", p + "mixed10/branch3x3dbl_1",
          name=p + "trunk")
    return x


# --------------------------------------------------------------------------
# toy backbones


def toy_resnet_layers(b: GraphBuilder, x: str, prefix: str = "toy_resnet/") -> str:
    p = prefix
    x = b.add(Conv2D(8, 3, 2, use_bias=False), x, name=p + "stem_conv")
    x = b.add(BatchNorm(), x, name=p + "stem_bn")
    x = b.add(ReLU(), x, name=p + "stem_relu")
    # block1: identity shortcut at 16x16
    y = b.add(Conv2D(8, 3, use_bias=False), x, name=p + "block1_1_conv")
    y = b.add(BatchNorm(), y, name=p + "block1_1_bn")
    y = b.add(ReLU(), y, name=p + "block1_1_relu")
    y = b.add(Conv2D(8, 3, use_bias=False), y, name=p + "block1_2_conv")
    x = b.add(Add(), x, y, name=p + "block1_out")
    # block2, block3: pre-activation, strided projection shortcut.  Every
    # consumer of a block output is batch-normalized, so convs feeding the
    # residual sums carry no bias.
    for i, filters in ((2, 16), (3, 32)):
        pre = b.add(BatchNorm(), x, name=f"{p}block{i}_preact_bn")
        pre = b.add(ReLU(), pre, name=f"{p}block{i}_preact_relu")
        sc = b.add(Conv2D(filters, 1, 2, "valid", use_bias=False), pre, name=f"{p}block{i}_0_conv")
        y = b.add(Conv2D(filters, 3, 2, use_bias=False), pre, name=f"{p}block{i}_1_conv")
        y = b.add(BatchNorm(), y, name=f"{p}block{i}_1_bn")
        y = b.add(ReLU(), y, name=f"{p}block{i}_1_relu")
        y = b.add(Conv2D(filters, 3, use_bias=False), y, name=f"{p}block{i}_2_conv")
        x = b.add(Add(), sc, y, name=f"{p}block{i}_out")
    x = b.add(BatchNorm(), x, name=p + "post_bn")
    return b.add(ReLU(), x, name=p + "post_relu")


def _toy_cbr(b, x, filters, k, name, strides=1):
    x = b.add(Conv2D(filters, k, strides, use_bias=False), x, name=f"{name}/conv")
    x = b.add(BatchNorm(scale=False), x, name=f"{name}/bn")
    return b.add(ReLU(), x, name=name)


def toy_inception_layers(b: GraphBuilder, x: str, prefix: str = "toy_inception/") -> str:
    p = prefix
    x = _toy_cbr(b, x, 8, 3, p + "stem1", strides=2)
    x = b.add(MaxPool2D(2, 2), x, name=p + "stem_pool")
    x = _toy_cbr(b, x, 16, 3, p + "stem2", strides=2)
    for m in ("mixedA", "mixedB"):
        m = p + m
        b1 = _toy_cbr(b, x, 8, 1, m + "/branch1x1")
        b3 = _toy_cbr(b, x, 8, 1, m + "/branch3x3_reduce")
        b3 = _toy_cbr(b, b3, 8, 3, m + "/branch3x3")
        bd = _toy_cbr(b, x, 8, 1, m + "/branch3x3dbl_reduce")
        bd = _toy_cbr(b, bd, 8, 3, m + "/branch3x3dbl_1")
        bd = _toy_cbr(b, bd, 8, 3, m + "/branch3x3dbl_2")
        bp = b.add(AvgPool2D(3, 1, "same"), x, name=m + "/branch_pool_avg")
        bp = _toy_cbr(b, bp, 8, 1, m + "/branch_pool")
        x = b.add(Concat(), b1, b3, bd, bp, name=m)
    return x


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Tap:
    label: str
    node: str
    shape: Shape


@dataclass(frozen=True)
class SideConfig:
    """One backbone's fusion inputs and the names its head nodes receive."""

    taps: tuple[Tap, ...]
    trunk: Tap
    output: Tap  # canonical final feature map, used by the single-layer variant
    head_names: dict = field(default_factory=dict)
    gap_name: str = "global_avg_pool2d"


RESNET_HEAD = {"pools": ["max_pooling2d_36", "max_pooling2d_39", "max_pooling2d_37"],
               "concat": "concatenate_18", "concat_trunk": "concatenate_19",
               "batch_norm": "batch_norm_112", "projection": "conv2d_102"}
INCEPTION_HEAD = {"pools": ["max_pooling2d_40", "max_pooling2d_41", "max_pooling2d_42", "max_pooling2d_43"],
                  "concat": "concatenate_24", "concat_trunk": "concatenate_25",
                  "batch_norm": "batch_norm_115", "projection": "conv2d_105"}


def _resnet_side() -> SideConfig:
    p = "resnet50v2/"
    return SideConfig(
        taps=(Tap("ResNet_Layer_FM1", p + "conv3_block1_2_relu", (28, 28, 128)),
              Tap("ResNet_Layer_FM2", p + "conv4_block6_out", (7, 7, 1024)),
              Tap("ResNet_Layer_FM3", p + "conv3_block4_out", (14, 14, 512)),
              Tap("ResNet_Layer_FM4", p + "conv2_block3_out", (28, 28, 256))),
        trunk=Tap("ResNet_trunk", p + "post_relu", (7, 7, 2048)),
        output=Tap("ResNet_output", p + "post_relu", (7, 7, 2048)),
        head_names=RESNET_HEAD, gap_name="global_avg_pool2d_4")


def _inception_side() -> SideConfig:
    p = "inception_v3/"
    return SideConfig(
        taps=(Tap("Inception_Layer_FM1", p + "mixed9/branch3x3_reduce", (5, 5, 384)),
              Tap("Inception_Layer_FM2", p + "mixed9/branch3x3dbl_reduce", (5, 5, 448)),
              Tap("Inception_Layer_FM3", p + "mixed10/branch3x3_reduce", (5, 5, 384)),
              Tap("Inception_Layer_FM4", p + "mixed10/branch3x3dbl_reduce", (5, 5, 448))),
        trunk=Tap("Inception_trunk", p + "trunk", (5, 5, 1920)),
        output=Tap("Inception_output", p + "mixed10", (5, 5, 2048)),
        head_names=INCEPTION_HEAD, gap_name="global_avg_pool2d_7")


def _toy_resnet_side() -> SideConfig:
    p = "toy_resnet/"
    return SideConfig(
        taps=(Tap("ResNet_Layer_FM1", p + "block1_1_relu", (16, 16, 8)),
              Tap("ResNet_Layer_FM2", p + "block3_out", (4, 4, 32)),
              Tap("ResNet_Layer_FM3", p + "block2_out", (8, 8, 16)),
              Tap("ResNet_Layer_FM4", p + "block1_out", (16, 16, 8))),
        trunk=Tap("ResNet_trunk", p + "post_relu", (4, 4, 32)),
        output=Tap("ResNet_output", p + "post_relu", (4, 4, 32)),
        head_names=RESNET_HEAD, gap_name="global_avg_pool2d_4")


def _toy_inception_side() -> SideConfig:
    p = "toy_inception/"
    return SideConfig(
        taps=(Tap("Inception_Layer_FM1", p + "mixedA/branch3x3_reduce", (4, 4, 8)),
              Tap("Inception_Layer_FM2", p + "mixedA/branch3x3dbl_reduce", (4, 4, 8)),
              Tap("Inception_Layer_FM3", p + "mixedB/branch3x3_reduce", (4, 4, 8)),
              Tap("Inception_Layer_FM4", p + "mixedB/branch3x3dbl_reduce", (4, 4, 8))),
        trunk=Tap("Inception_trunk", p + "mixedB", (4, 4, 32)),
        output=Tap("Inception_output", p + "mixedB", (4, 4, 32)),
        head_names=INCEPTION_HEAD, gap_name="global_avg_pool2d_7")


@dataclass(frozen=True)
class FusionConfig:
    resnet: SideConfig = field(default_factory=_resnet_side)
    inception: SideConfig = field(default_factory=_inception_side)
    input_shape: Shape = (224, 224, 3)
    projection_filters: int = 2048
    dense_units: int = 256
    classes: int = 3
    dropout: float = 0.3
    freeze_backbones: bool = True
    scale: str = "full"

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        for side in (self.resnet, self.inception):
            for tap in side.taps + (side.trunk, side.output):
                if len(tap.shape) != 3 or tap.shape[0] != tap.shape[1]:
                    raise ValueError(f"tap {tap.label} must be square (W, W, C), got {tap.shape}")

    @classmethod
    def toy(cls, classes: int = 3, dropout: float = 0.3, input_shape: Shape = (32, 32, 1)) -> "FusionConfig":
        return cls(_toy_resnet_side(), _toy_inception_side(), input_shape, projection_filters=16,
                   dense_units=16, classes=classes, dropout=dropout, freeze_backbones=False, scale="toy")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FusionConfig":
        doc = json.loads(text)

        def side(d):
            return SideConfig(tuple(Tap(t["label"], t["node"], tuple(t["shape"])) for t in d["taps"]),
                              Tap(**{**d["trunk"], "shape": tuple(d["trunk"]["shape"])}),
                              Tap(**{**d["output"], "shape": tuple(d["output"]["shape"])}),
                              d.get("head_names", {}), d.get("gap_name", "global_avg_pool2d"))

        doc["resnet"] = side(doc["resnet"])
        doc["inception"] = side(doc["inception"])
        doc["input_shape"] = tuple(doc["input_shape"])
        return cls(**doc)


BACKBONES: dict[tuple[str, str], Callable[[GraphBuilder, str], str]] = {
    ("resnet", "full"): resnet50v2_layers,
    ("inception", "full"): inceptionv3_layers,
    ("resnet", "toy"): toy_resnet_layers,
    ("inception", "toy"): toy_inception_layers,
}


# --------------------------------------------------------------------------
# builders


def build_backbone_shape(kind: str) -> ModelGraph:
    """Stand-alone full-scale backbone on a 224x224x3 input (no weights)."""
    if kind not in ("resnet50v2", "inceptionv3"):
        raise ValueError(f"unknown backbone {kind!r}")
    b = GraphBuilder()
    x = b.add(Input((224, 224, 3)), name="input_1")
    side = "resnet" if kind == "resnet50v2" else "inception"
    out = BACKBONES[(side, "full")](b, x)
    if side == "inception":
        b.aliases.update({t.label: t.node for t in _inception_side().taps})
    else:
        b.aliases.update({t.label: t.node for t in _resnet_side().taps})
    return b.build([out])


def _check_tap(shapes, tap: Tap):
    if tap.node not in shapes:
        raise GraphError(f"tap {tap.label}: no node named {tap.node!r}")
    if shapes[tap.node] != tuple(tap.shape):
        raise GraphError(f"tap {tap.label}: node {tap.node} has shape {shapes[tap.node]}, "
                         f"config declares {tuple(tap.shape)}")


def _fusion_side(b: GraphBuilder, side: SideConfig, cfg: FusionConfig) -> str:
    """FDSFM over the side's taps plus trunk, then GAP. Returns the GAP node."""
    target = side.trunk.shape[0]
    plan = plan_fusion([t.shape for t in side.taps], target, cfg.projection_filters, trunk=side.trunk.shape)
    names = dict(side.head_names)
    pools = iter(names.get("pools", []))
    names["pools"] = [None if choice.identity else next(pools, None) for _, choice in plan.per_map]
    fragment = emit_subgraph(plan, names)
    bindings = {f"source_{i}": t.node for i, t in enumerate(side.taps)}
    bindings["trunk"] = side.trunk.node
    rename = b.splice(fragment, bindings)
    return b.add(GlobalAvgPool2D(), rename[fragment.outputs[0]], name=side.gap_name)


def _head(b: GraphBuilder, x: str, cfg: FusionConfig) -> str:
    x = b.add(Dropout(cfg.dropout), x, name="dropout")
    x = b.add(Dense(cfg.dense_units), x, name="dense_2")
    x = b.add(ReLU(), x, name="dense_2_relu")
    x = b.add(Dense(cfg.classes), x, name="dense_3")
    return b.add(Softmax(), x, name="softmax")


def build_model(variant: str, cfg: FusionConfig | None = None) -> ModelGraph:
    """Assemble M1 (ResNet-side multilayer), M2 (Inception-side multilayer),
    M3 (single-layer multimodal) or M4 (multilayer multimodal)."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = cfg or FusionConfig()
    b = GraphBuilder()
    x = b.add(Input(cfg.input_shape), name="input_1")
    sides = {"m1": ("resnet",), "m2": ("inception",), "m3": ("resnet", "inception"),
             "m4": ("resnet", "inception")}[variant]
    b.frozen = cfg.freeze_backbones
    for side in sides:
        BACKBONES[(side, cfg.scale)](b, x)
    b.frozen = False
    shapes = b.shapes()

    features = []
    for side_name in sides:
        side: SideConfig = getattr(cfg, side_name)
        if variant == "m3":
            _check_tap(shapes, side.output)
            b.aliases[side.output.label] = side.output.node
            features.append(b.add(GlobalAvgPool2D(), side.output.node, name=side.gap_name))
            continue
        for tap in side.taps + (side.trunk,):
            _check_tap(shapes, tap)
            b.aliases[tap.label] = tap.node
        features.append(_fusion_side(b, side, cfg))
    fused = b.add(Add(), *features, name="lambda") if len(features) > 1 else features[0]
    out = _head(b, fused, cfg)
    if variant == "m2":
        cam = cfg.inception.head_names.get("projection")
    elif variant == "m3":
        cam = cfg.resnet.output.node
    else:
        cam = cfg.resnet.head_names.get("projection")
    return b.build([out], cam_node=cam)


def build_multifusionnet(cfg: FusionConfig | None = None) -> ModelGraph:
    return build_model("m4", cfg)


def build_subsidiary(variant: str, cfg: FusionConfig | None = None) -> ModelGraph:
    if variant.lower() not in ("m1", "m2", "m3"):
        raise ValueError(f"subsidiary variants are m1, m2, m3; got {variant!r}")
    return build_model(variant, cfg)


def build_toy(variant: str = "m4", classes: int = 3, dropout: float = 0.3) -> ModelGraph:
    return build_model(variant, FusionConfig.toy(classes=classes, dropout=dropout))


def build(variant: str, scale: str = "full", classes: int = 3, dropout: float = 0.3) -> ModelGraph:
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}")
    if scale == "toy":
        return build_toy(variant, classes, dropout)
    return build_model(variant, replace(FusionConfig(), classes=classes, dropout=dropout))


def head_nodes(graph: ModelGraph) -> list:
    """Nodes outside both backbones, in topological order."""
    return [n for n in graph.topological_order()
            if "/" not in n.name and not isinstance(n.layer, Input)]


def build_gradcheck_graph(classes: int = 3) -> ModelGraph:
    """Small graph touching every trainable layer type, cheap enough to
    finite-difference on every coordinate."""
    b = GraphBuilder()
    x = b.add(Input((8, 8, 2)), name="input_1")
    a = b.add(Conv2D(3, 3, use_bias=False), x, name="conv_a")
    a = b.add(BatchNorm(), a, name="bn_a")
    a = b.add(ReLU(), a, name="relu_a")
    a = b.add(MaxPool2D(2), a, name="pool_a")
    c = b.add(Conv2D(3, 3, 2, use_bias=False), x, name="conv_b")
    c = b.add(BatchNorm(scale=False), c, name="bn_b")
    s = b.add(Add(), a, c, name="add")
    p = b.add(AvgPool2D(3, 1, "same"), s, name="avg")
    m = b.add(Concat(), s, p, name="concat")
    m = b.add(Conv2D(4, 1, padding="valid"), m, name="project")
    g = b.add(GlobalAvgPool2D(), m, name="gap")
    d = b.add(Dense(5), g, name="dense_1")
    d = b.add(ReLU(), d, name="dense_1_relu")
    d = b.add(Dense(classes), d, name="dense_2")
    out = b.add(Softmax(), d, name="softmax")
    return b.build([out], cam_node="project")

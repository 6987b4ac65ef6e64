import dataclasses

import pytest

from fusionnet.graph import GraphError, count_params, kind, summarize
from fusionnet.models import (FusionConfig, Tap, VARIANTS, build, build_backbone_shape, build_model,
                              build_multifusionnet, build_subsidiary, build_toy, head_nodes)


@pytest.fixture(scope="module")
def m4():
    return build_multifusionnet()


def test_backbone_parameter_totals():
    resnet = summarize(build_backbone_shape("resnet50v2")).totals
    inception = summarize(build_backbone_shape("inceptionv3")).totals
    assert (resnet.total, resnet.trainable, resnet.non_trainable) == (23_564_800, 23_519_360, 45_440)
    assert (inception.total, inception.trainable, inception.non_trainable) == (21_802_784, 21_768_352, 34_432)
    # 45,382,688 non-trainable in the full model minus 2*3968 + 2*3584 fusion-head statistics
    assert resnet.total + inception.total == 45_382_688 - 15_104 == 45_367_584


def test_backbone_tap_shapes():
    g = build_backbone_shape("resnet50v2")
    assert g.shapes()[g.aliases["ResNet_Layer_FM2"]] == (7, 7, 1024)
    g = build_backbone_shape("inceptionv3")
    assert g.shapes()[g.aliases["Inception_Layer_FM1"]] == (5, 5, 384)


def test_m4_totals(m4):
    t = summarize(m4).totals
    assert (t.total, t.trainable, t.non_trainable) == (61_393_699, 16_011_011, 45_382_688)


def test_m4_trainable_set_is_fusion_head(m4):
    owners = {name.rsplit("/", 1)[0] for name, _, optimizable in m4.param_table() if optimizable}
    assert owners == {"conv2d_102", "conv2d_105", "batch_norm_112", "batch_norm_115", "dense_2", "dense_3"}
    assert sum(count_params(n.layer, m4.shapes()[n.inputs[0]], n.frozen).trainable
               for n in m4.nodes if n.name in owners) == 16_011_011


def test_two_class_head():
    g = build("m4", "full", classes=2)
    assert summarize(g).row("dense_3").params.total == 2 * 256 + 2 == 514


def test_subsidiary_widths():
    assert build_subsidiary("m1").shapes()["concatenate_19"] == (7, 7, 3968)
    assert build_subsidiary("m2").shapes()["concatenate_25"] == (5, 5, 3584)
    assert build_subsidiary("m3").shapes()["lambda"] == (2048,)
    with pytest.raises(ValueError):
        build_subsidiary("m4")


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("scale", ["full", "toy"])
def test_every_variant_summarizes_deterministically(variant, scale):
    a, b = summarize(build(variant, scale)), summarize(build(variant, scale))
    assert a == b
    assert a.totals.total > 0


@pytest.mark.parametrize("variant", VARIANTS)
def test_toy_models_small_and_unfrozen(variant):
    g = build_toy(variant)
    assert summarize(g).totals.total < 100_000
    assert not any(n.frozen for n in g.nodes)
    assert g.cam_node is not None


def _signature(graph):
    return [(kind(n.layer), len(n.inputs)) for n in head_nodes(graph)]


def test_toy_and_full_heads_are_isomorphic(m4):
    toy = build_toy("m4")
    assert _signature(toy) == _signature(m4)
    assert [n.name for n in head_nodes(toy)] == [n.name for n in head_nodes(m4)]


def test_config_round_trip_and_tap_validation():
    cfg = FusionConfig.toy()
    assert FusionConfig.from_json(cfg.to_json()) == cfg
    bad_tap = Tap("ResNet_Layer_FM1", cfg.resnet.taps[0].node, (8, 8, 8))
    bad = dataclasses.replace(cfg, resnet=dataclasses.replace(cfg.resnet, taps=(bad_tap,) + cfg.resnet.taps[1:]))
    with pytest.raises(GraphError):
        build_model("m4", bad)
    with pytest.raises(ValueError):
        build_model("m5")

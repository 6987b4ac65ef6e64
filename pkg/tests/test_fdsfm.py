import pytest
from hypothesis import given, strategies as st

from fusionnet.fdsfm import IDENTITY, PoolChoice, emit_subgraph, plan_fusion, plan_pool
from fusionnet.graph import GraphError, summarize


def brute_force(w, t):
    """Every (f, s) in [1, W]^2 with floor((W - f) / s) + 1 == T and full coverage."""
    return [(f, s) for f in range(1, w + 1) for s in range(1, w + 1)
            if (w - f) // s + 1 == t and s * (t - 1) + f == w]


def test_plan_pool_exhaustive():
    for w in range(1, 65):
        for t in range(1, w + 1):
            choice = plan_pool(w, t)
            if w == t:
                assert choice.identity
                continue
            f, s = choice.f, choice.s
            assert 1 <= f <= w and 1 <= s <= w
            assert (w - f) // s + 1 == t
            assert s * (t - 1) + f == w
            candidates = brute_force(w, t)
            assert (f, s) in candidates
            # tie-break: stride W // T, window takes the remainder
            assert s == w // t and f == w - s * (t - 1)
            # windows touch or overlap, so no pixel between them is skipped
            assert f >= s


@pytest.mark.parametrize("w,t,expected", [(28, 7, PoolChoice(4, 4)), (14, 7, PoolChoice(2, 2)),
                                          (7, 7, IDENTITY), (10, 3, PoolChoice(4, 3))])
def test_plan_pool_examples(w, t, expected):
    assert plan_pool(w, t) == expected


def test_plan_pool_rejects_upsampling():
    with pytest.raises(ValueError):
        plan_pool(5, 7)


RESNET_MAPS = [(28, 28, 128), (7, 7, 1024), (14, 14, 512), (28, 28, 256)]
INCEPTION_MAPS = [(5, 5, 384), (5, 5, 448), (5, 5, 384), (5, 5, 448)]


def test_plan_fusion_examples():
    plan = plan_fusion(RESNET_MAPS, 7, 2048)
    assert plan.concat_channels == 1920
    assert [c for _, c in plan.per_map] == [PoolChoice(4, 4), IDENTITY, PoolChoice(2, 2), PoolChoice(4, 4)]
    plan = plan_fusion(INCEPTION_MAPS, 5, 2048)
    assert plan.concat_channels == 1664
    assert all(c.identity for _, c in plan.per_map)
    plan = plan_fusion([(4, 4, 8), (4, 4, 8)], 4, 2)
    assert plan.concat_channels == 16 and all(c.identity for _, c in plan.per_map)


def test_plan_fusion_errors():
    with pytest.raises(ValueError):
        plan_fusion([(28, 28, 3)], 7, 8)
    with pytest.raises(ValueError):
        plan_fusion([(28, 28, 3), (5, 5, 3)], 7, 8)
    with pytest.raises(ValueError):
        plan_fusion([(28, 14, 3), (7, 7, 3)], 7, 8)


@given(st.lists(st.tuples(st.integers(4, 40), st.integers(1, 32)), min_size=2, max_size=5),
       st.integers(1, 4), st.randoms(use_true_random=False))
def test_plan_fusion_properties(maps, t, rnd):
    shapes = [(w, w, c) for w, c in maps]
    plan = plan_fusion(shapes, t, 3)
    assert plan.concat_channels == sum(c for _, c in maps)
    for shape, choice in plan.per_map:
        assert choice.output_size(shape[0]) == t
    permuted = list(shapes)
    rnd.shuffle(permuted)
    other = plan_fusion(permuted, t, 3)
    assert other.concat_channels == plan.concat_channels
    assert sorted(other.per_map, key=repr) == sorted(plan.per_map, key=repr)


def _fragment_rows(plan, names):
    s = summarize(emit_subgraph(plan, names))
    return {r.name: (r.shape, r.params.total) for r in s.rows}


def test_resnet_fragment_reproduces_head_rows():
    plan = plan_fusion(RESNET_MAPS, 7, 2048, trunk=(7, 7, 2048))
    rows = _fragment_rows(plan, {"concat": "concatenate_18", "concat_trunk": "concatenate_19",
                                 "batch_norm": "batch_norm_112", "projection": "conv2d_102"})
    assert rows["concatenate_18"] == ((7, 7, 1920), 0)
    assert rows["concatenate_19"] == ((7, 7, 3968), 0)
    assert rows["batch_norm_112"] == ((7, 7, 3968), 15872)
    assert rows["conv2d_102"] == ((7, 7, 2048), 8128512)


def test_inception_fragment_reproduces_head_rows():
    plan = plan_fusion(INCEPTION_MAPS, 5, 2048, trunk=(5, 5, 1920))
    rows = _fragment_rows(plan, {"concat": "concatenate_24", "concat_trunk": "concatenate_25",
                                 "batch_norm": "batch_norm_115", "projection": "conv2d_105"})
    assert rows["concatenate_24"] == ((5, 5, 1664), 0)
    assert rows["concatenate_25"] == ((5, 5, 3584), 0)
    assert rows["batch_norm_115"] == ((5, 5, 3584), 14336)
    assert rows["conv2d_105"] == ((5, 5, 2048), 7342080)


def test_single_source_fragment_fails():
    from fusionnet.fdsfm import FusionPlan
    plan = FusionPlan(7, (((28, 28, 3), PoolChoice(4, 4)),), 3, 8)
    with pytest.raises(GraphError):
        emit_subgraph(plan)

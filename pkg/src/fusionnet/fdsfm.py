"""Fusion of different-sized feature maps.

Each source map is max-pooled down to a shared ``T x T`` grid, the pooled
maps are concatenated along channels (optionally followed by a second
concatenation with a backbone trunk already at ``T x T``), batch-normalized
and projected by a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .graph import BatchNorm, Concat, Conv2D, GraphBuilder, Input, MaxPool2D, ModelGraph
from .tensor import Shape, check_shape


@dataclass(frozen=True)
class PoolChoice:
    """A max-pool window ``f`` and stride ``s``; ``f == s == None`` is identity."""

    f: int | None = None
    s: int | None = None

    @property
    def identity(self) -> bool:
        return self.f is None

    def output_size(self, w: int) -> int:
        return w if self.identity else (w - self.f) // self.s + 1

    def to_json(self):
        return "identity" if self.identity else {"f": self.f, "s": self.s}


IDENTITY = PoolChoice()


def plan_pool(w: int, t: int) -> PoolChoice:
    """Pick ``(f, s)`` so that ``floor((w - f) / s) + 1 == t``.

    The stride is ``floor(w / t)`` and the window absorbs the remainder,
    ``f = w - s * (t - 1)``, so the windows tile the input with no dropped
    border: 28 -> 7 gives 4/4, 14 -> 7 gives 2/2, 10 -> 3 gives f=4, s=3.
    """
    if t < 1 or w < 1:
        raise ValueError(f"sizes must be positive, got W={w}, T={t}")
    if w < t:
        raise ValueError(f"cannot upsample {w} -> {t}")
    if w == t:
        return IDENTITY
    s = w // t
    return PoolChoice(w - s * (t - 1), s)


@dataclass(frozen=True)
class FusionPlan:
    target: int
    per_map: tuple[tuple[Shape, PoolChoice], ...]
    concat_channels: int
    projection_filters: int
    batch_norm: bool = True
    trunk: Shape | None = None

    @property
    def fused_channels(self) -> int:
        """Channels entering the projection (taps plus trunk)."""
        return self.concat_channels + (self.trunk[-1] if self.trunk else 0)

    def to_json(self) -> dict:
        return {
            "target_spatial": self.target,
            "per_map": [{"source": list(shape), "pool": pool.to_json()} for shape, pool in self.per_map],
            "concat_channels": self.concat_channels,
            "trunk": list(self.trunk) if self.trunk else None,
            "fused_channels": self.fused_channels,
            "projection_filters": self.projection_filters,
            "batch_norm": self.batch_norm,
        }


def _square(shape: Shape) -> int:
    shape = check_shape(shape)
    if len(shape) != 3:
        raise ValueError(f"feature maps are (W, L, C), got {shape}")
    if shape[0] != shape[1]:
        raise ValueError(f"non-square feature map {shape} is not supported")
    return shape[0]


def plan_fusion(shapes: Sequence[Shape], target: int, projection_filters: int,
                trunk: Shape | None = None, batch_norm: bool = True) -> FusionPlan:
    if len(shapes) < 2:
        raise ValueError(f"fusion needs at least 2 feature maps, got {len(shapes)}")
    if projection_filters < 1:
        raise ValueError("projection_filters must be >= 1")
    per_map = []
    for shape in shapes:
        w = _square(shape)
        if w < target:
            raise ValueError(f"map {tuple(shape)} is smaller than target {target}")
        per_map.append((tuple(shape), plan_pool(w, target)))
    if trunk is not None and _square(trunk) != target:
        raise ValueError(f"trunk {tuple(trunk)} must already be {target}x{target}")
    return FusionPlan(target, tuple(per_map), sum(s[-1] for s in shapes), projection_filters,
                      batch_norm, tuple(trunk) if trunk is not None else None)


def emit_subgraph(plan: FusionPlan, names: dict | None = None) -> ModelGraph:
    """Graph fragment realizing ``plan``.

    Inputs are placeholders ``source_0 .. source_{n-1}`` (and ``trunk``);
    bind them with :meth:`GraphBuilder.splice`.  ``names`` may override node
    names with keys ``pools`` (list, ``None`` for identity entries),
    ``concat``, ``concat_trunk``, ``batch_norm`` and ``projection``.
    """
    names = names or {}
    pool_names = names.get("pools") or [None] * len(plan.per_map)
    b = GraphBuilder()
    pooled = []
    for i, (shape, choice) in enumerate(plan.per_map):
        src = b.add(Input(shape), name=f"source_{i}")
        if not choice.identity:
            src = b.add(MaxPool2D((choice.f, choice.f), (choice.s, choice.s)), src, name=pool_names[i])
        pooled.append(src)
    x = b.add(Concat(), *pooled, name=names.get("concat"))
    if plan.trunk is not None:
        trunk = b.add(Input(plan.trunk), name="trunk")
        x = b.add(Concat(), x, trunk, name=names.get("concat_trunk"))
    if plan.batch_norm:
        x = b.add(BatchNorm(), x, name=names.get("batch_norm"))
    x = b.add(Conv2D(plan.projection_filters, (1, 1), padding="valid"), x, name=names.get("projection"))
    return b.build([x])


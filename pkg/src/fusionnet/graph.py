"""Layer vocabulary, model DAGs, shape inference and parameter accounting.

Shapes here are per-sample (no batch axis), channels-last.  Spatial output
sizes follow the usual conventions::

    valid:  floor((W - k) / s) + 1
    same:   ceil(W / s)
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence, Union

from .tensor import Shape, check_shape

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """Structural problem with a model graph."""


class ShapeError(GraphError):
    """Shape inference failed; ``node`` names the offending node when known."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(f"{node}: {message}" if node else message)
        self.node = node


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


# --------------------------------------------------------------------------
# layer vocabulary


@dataclass(frozen=True)
class Input:
    shape: Shape

    def __post_init__(self):
        object.__setattr__(self, "shape", check_shape(self.shape))


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple[int, int] = (3, 3)
    strides: tuple[int, int] = (1, 1)
    padding: str = "same"
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "strides", _pair(self.strides))
        if self.filters < 1 or min(self.kernel) < 1 or min(self.strides) < 1:
            raise ValueError(f"invalid Conv2D config {self}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be same|valid, got {self.padding!r}")


@dataclass(frozen=True)
class MaxPool2D:
    pool: tuple[int, int] = (2, 2)
    strides: tuple[int, int] | None = None
    padding: str = "valid"

    def __post_init__(self):
        object.__setattr__(self, "pool", _pair(self.pool))
        object.__setattr__(self, "strides", _pair(self.strides if self.strides is not None else self.pool))
        if min(self.pool) < 1 or min(self.strides) < 1:
            raise ValueError(f"invalid pooling config {self}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be same|valid, got {self.padding!r}")


@dataclass(frozen=True)
class AvgPool2D(MaxPool2D):
    """Average pooling; padded positions are excluded from the mean."""


@dataclass(frozen=True)
class BatchNorm:
    scale: bool = True
    epsilon: float = 1e-3
    momentum: float = 0.99


@dataclass(frozen=True)
class Dense:
    units: int
    use_bias: bool = True

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("Dense units must be >= 1")


@dataclass(frozen=True)
class GlobalAvgPool2D:
    pass


@dataclass(frozen=True)
class Concat:
    pass


@dataclass(frozen=True)
class Add:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Union[Input, Conv2D, MaxPool2D, AvgPool2D, BatchNorm, Dense,
                  GlobalAvgPool2D, Concat, Add, ReLU, Dropout, Softmax]

_AUTO_PREFIX = {
    Input: "input", Conv2D: "conv2d", MaxPool2D: "max_pooling2d", AvgPool2D: "average_pooling2d",
    BatchNorm: "batch_norm", Dense: "dense", GlobalAvgPool2D: "global_avg_pool2d",
    Concat: "concatenate", Add: "add", ReLU: "relu", Dropout: "dropout", Softmax: "softmax",
}


def kind(layer: LayerSpec) -> str:
    return type(layer).__name__


# --------------------------------------------------------------------------
# shape inference and parameter counting


def _spatial(size: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-size // s)
    return (size - k) // s + 1


def infer_output_shape(layer: LayerSpec, input_shapes: Sequence[Shape]) -> Shape:
    """Output shape of ``layer`` applied to inputs of ``input_shapes``."""
    shapes = [tuple(s) for s in input_shapes]
    if isinstance(layer, Input):
        if shapes:
            raise ShapeError("Input takes no inputs")
        return layer.shape
    if isinstance(layer, (Concat, Add)):
        if len(shapes) < 2:
            raise ShapeError(f"{kind(layer)} needs >= 2 inputs, got {len(shapes)}")
    elif len(shapes) != 1:
        raise ShapeError(f"{kind(layer)} takes exactly one input, got {len(shapes)}")

    if isinstance(layer, (Conv2D, MaxPool2D)):
        (shape,) = shapes
        if len(shape) != 3:
            raise ShapeError(f"{kind(layer)} expects (W, L, C), got {shape}")
        w, l, c = shape
        k = layer.kernel if isinstance(layer, Conv2D) else layer.pool
        ow = _spatial(w, k[0], layer.strides[0], layer.padding)
        ol = _spatial(l, k[1], layer.strides[1], layer.padding)
        if ow < 1 or ol < 1:
            raise ShapeError(f"{kind(layer)} window {k} does not fit input {shape}")
        return (ow, ol, layer.filters if isinstance(layer, Conv2D) else c)
    if isinstance(layer, Concat):
        if any(len(s) != len(shapes[0]) for s in shapes) or any(s[:-1] != shapes[0][:-1] for s in shapes):
            raise ShapeError(f"Concat inputs disagree outside the channel axis: {shapes}")
        return shapes[0][:-1] + (sum(s[-1] for s in shapes),)
    if isinstance(layer, Add):
        if any(s != shapes[0] for s in shapes):
            raise ShapeError(f"Add inputs must have identical shapes: {shapes}")
        return shapes[0]
    if isinstance(layer, GlobalAvgPool2D):
        (shape,) = shapes
        if len(shape) != 3:
            raise ShapeError(f"GlobalAvgPool2D expects (W, L, C), got {shape}")
        return (shape[2],)
    if isinstance(layer, Dense):
        (shape,) = shapes
        if len(shape) != 1:
            raise ShapeError(f"Dense expects a flat vector, got {shape}")
        return (layer.units,)
    if isinstance(layer, (BatchNorm, ReLU, Dropout, Softmax)):
        return shapes[0]
    raise ShapeError(f"unknown layer {layer!r}")


@dataclass(frozen=True)
class ParamCount:
    trainable: int = 0
    non_trainable: int = 0

    def __post_init__(self):
        if self.trainable < 0 or self.non_trainable < 0:
            raise ValueError("parameter counts must be non-negative")

    @property
    def total(self) -> int:
        return self.trainable + self.non_trainable

    def __add__(self, other: "ParamCount") -> "ParamCount":
        return ParamCount(self.trainable + other.trainable, self.non_trainable + other.non_trainable)


@dataclass(frozen=True)
class ParamSpec:
    suffix: str
    shape: Shape
    trainable: bool  # False for statistics, which are never optimized


def param_specs(layer: LayerSpec, input_shape: Shape) -> list[ParamSpec]:
    """Parameters ``layer`` owns, in creation order."""
    if isinstance(layer, Conv2D):
        kh, kw = layer.kernel
        specs = [ParamSpec("kernel", (kh, kw, input_shape[-1], layer.filters), True)]
        if layer.use_bias:
            specs.append(ParamSpec("bias", (layer.filters,), True))
        return specs
    if isinstance(layer, Dense):
        specs = [ParamSpec("kernel", (input_shape[-1], layer.units), True)]
        if layer.use_bias:
            specs.append(ParamSpec("bias", (layer.units,), True))
        return specs
    if isinstance(layer, BatchNorm):
        c = (input_shape[-1],)
        specs = [ParamSpec("gamma", c, True)] if layer.scale else []
        specs += [ParamSpec("beta", c, True),
                  ParamSpec("moving_mean", c, False),
                  ParamSpec("moving_variance", c, False)]
        return specs
    return []


def count_params(layer: LayerSpec, input_shape: Shape | None, frozen: bool = False) -> ParamCount:
    """Trainable / non-trainable split for one layer.

    Depends only on channel counts, units and kernel sizes, never on spatial
    size.  BatchNorm moving statistics are always non-trainable.
    """
    if input_shape is None:
        return ParamCount()
    trainable = non_trainable = 0
    for spec in param_specs(layer, tuple(input_shape)):
        n = math.prod(spec.shape)
        if spec.trainable and not frozen:
            trainable += n
        else:
            non_trainable += n
    return ParamCount(trainable, non_trainable)


# --------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class Node:
    name: str
    layer: LayerSpec
    inputs: tuple[str, ...] = ()
    frozen: bool = False


@dataclass(frozen=True)
class ModelGraph:
    """Immutable DAG of layer nodes.

    ``aliases`` maps display labels (e.g. tap names from a published table)
    to node names; ``cam_node`` designates the final convolution used for
    class-activation maps.
    """

    nodes: tuple[Node, ...]
    outputs: tuple[str, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)
    cam_node: str | None = None

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise GraphError(f"duplicate node names: {dupes}")
        known = set(names)
        for node in self.nodes:
            if isinstance(node.layer, Input):
                if node.inputs:
                    raise GraphError(f"{node.name}: Input nodes take no inputs")
            elif not node.inputs:
                raise GraphError(f"{node.name}: non-Input node needs at least one input")
            if isinstance(node.layer, (Concat, Add)) and len(node.inputs) < 2:
                raise GraphError(f"{node.name}: {kind(node.layer)} needs >= 2 inputs")
            for src in node.inputs:
                if src not in known:
                    raise GraphError(f"{node.name}: unknown input {src!r}")
        for out in self.outputs:
            if out not in known:
                raise GraphError(f"unknown output {out!r}")
        for label, target in self.aliases.items():
            if target not in known:
                raise GraphError(f"alias {label!r} points at unknown node {target!r}")
        if self.cam_node is not None and self.cam_node not in known:
            raise GraphError(f"cam node {self.cam_node!r} not in graph")

    def node(self, name: str) -> Node:
        return self._index()[name]

    def _index(self) -> dict[str, Node]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {n.name: n for n in self.nodes}
            object.__setattr__(self, "_idx", idx)
        return idx

    def __contains__(self, name: str) -> bool:
        return name in self._index()

    @property
    def inputs(self) -> list[str]:
        return [n.name for n in self.nodes if isinstance(n.layer, Input)]

    def topological_order(self) -> list[Node]:
        """Kahn's algorithm, stable with respect to declaration order."""
        idx = self._index()
        indeg = {n.name: len(n.inputs) for n in self.nodes}
        consumers: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                consumers[src].append(n.name)
        position = {n.name: i for i, n in enumerate(self.nodes)}
        order: list[Node] = []
        heap = [(position[name], name) for name, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        while heap:
            _, name = heapq.heappop(heap)
            order.append(idx[name])
            for c in consumers[name]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, (position[c], c))
        if len(order) != len(self.nodes):
            stuck = sorted(name for name, d in indeg.items() if d > 0)
            raise GraphError(f"cycle detected among nodes: {stuck}")
        return order

    def shapes(self) -> dict[str, Shape]:
        out: dict[str, Shape] = {}
        for node in self.topological_order():
            try:
                out[node.name] = infer_output_shape(node.layer, [out[s] for s in node.inputs])
            except ShapeError as exc:
                raise ShapeError(str(exc), node=node.name) from exc
        return out

    def ancestors(self, targets: Iterable[str]) -> set[str]:
        """Nodes that ``targets`` depend on, including the targets themselves."""
        idx = self._index()
        seen: set[str] = set()
        stack = list(targets)
        while stack:
            name = stack.pop()
            if name in seen:
                continue
            seen.add(name)
            stack.extend(idx[name].inputs)
        return seen

    def param_table(self) -> list[tuple[str, ParamSpec, bool]]:
        """(full name, spec, optimizable) for every parameter in graph order."""
        shapes = self.shapes()
        rows = []
        for node in self.nodes:
            if not node.inputs:
                continue
            for spec in param_specs(node.layer, shapes[node.inputs[0]]):
                rows.append((f"{node.name}/{spec.suffix}", spec, spec.trainable and not node.frozen))
        return rows


class GraphBuilder:
    """Incremental construction of a :class:`ModelGraph`.

    ``add`` returns the new node's name so layers can be chained::

        b = GraphBuilder()
        x = b.add(Input((32, 32, 1)))
        y = b.add(Conv2D(8), x)
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._names: set[str] = set()
        self._counters: dict[str, int] = {}
        self.aliases: dict[str, str] = {}
        self.frozen = False

    def _auto_name(self, layer: LayerSpec, prefix: str = "") -> str:
        base = prefix + _AUTO_PREFIX[type(layer)]
        while True:
            n = self._counters.get(base, 0)
            self._counters[base] = n + 1
            name = base if n == 0 else f"{base}_{n}"
            if name not in self._names:
                return name

    def add(self, layer: LayerSpec, *inputs: str, name: str | None = None, frozen: bool | None = None) -> str:
        name = name or self._auto_name(layer)
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        for src in inputs:
            if src not in self._names:
                raise GraphError(f"{name}: unknown input {src!r}")
        self._nodes.append(Node(name, layer, tuple(inputs), self.frozen if frozen is None else frozen))
        self._names.add(name)
        return name

    def splice(self, fragment: ModelGraph, bindings: Mapping[str, str], prefix: str = "") -> dict[str, str]:
        """Copy ``fragment`` into this builder.

        Fragment Input nodes listed in ``bindings`` are replaced by existing
        nodes; all others are copied under ``prefix``.  Returns the mapping
        from fragment node names to new names.
        """
        rename: dict[str, str] = {}
        for node in fragment.topological_order():
            if node.name in bindings:
                if not isinstance(node.layer, Input):
                    raise GraphError(f"only Input placeholders can be bound, not {node.name!r}")
                rename[node.name] = bindings[node.name]
                continue
            rename[node.name] = self.add(node.layer, *(rename[s] for s in node.inputs),
                                         name=prefix + node.name, frozen=node.frozen)
        return rename

    def shapes(self) -> dict[str, Shape]:
        return ModelGraph(tuple(self._nodes), ()).shapes()

    def build(self, outputs: Sequence[str], cam_node: str | None = None) -> ModelGraph:
        graph = ModelGraph(tuple(self._nodes), tuple(outputs), dict(self.aliases), cam_node)
        graph.shapes()
        return graph


# --------------------------------------------------------------------------
# summaries and ledger verification


@dataclass(frozen=True)
class SummaryRow:
    name: str
    layer: str
    shape: Shape
    params: ParamCount


@dataclass(frozen=True)
class Summary:
    rows: tuple[SummaryRow, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)

    @property
    def totals(self) -> ParamCount:
        total = ParamCount()
        for r in self.rows:
            total = total + r.params
        return total

    def row(self, name: str) -> SummaryRow:
        name = self.aliases.get(name, name)
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def format(self, collapse: bool = False) -> str:
        """Text table; ``collapse`` folds every ``prefix/...`` group into one line."""
        lines = [f"{'Layer':<44} {'Type':<16} {'Output':<24} {'#Param':>12}"]
        groups: dict[str, ParamCount] = {}
        for r in self.rows:
            if collapse and "/" in r.name:
                prefix = r.name.split("/", 1)[0]
                if prefix not in groups:
                    groups[prefix] = ParamCount()
                    lines.append(prefix)  # placeholder, filled below
                groups[prefix] = groups[prefix] + r.params
                continue
            shape = "(None, " + ", ".join(str(d) for d in r.shape) + ")"
            lines.append(f"{r.name:<44} {r.layer:<16} {shape:<24} {r.params.total:>12,}")
        for i, line in enumerate(lines):
            if line in groups:
                lines[i] = f"{line:<44} {'backbone':<16} {'-':<24} {groups[line].total:>12,}"
        t = self.totals
        lines += [f"Total params: {t.total:,}",
                  f"Trainable params: {t.trainable:,}",
                  f"Non-trainable params: {t.non_trainable:,}"]
        return "\n".join(lines)


def summarize(graph: ModelGraph) -> Summary:
    """Rows in topological order; every node counts, reachable or not."""
    if not graph.inputs:
        raise GraphError("graph has no Input node")
    shapes = graph.shapes()
    rows = []
    for node in graph.topological_order():
        in_shape = shapes[node.inputs[0]] if node.inputs else None
        rows.append(SummaryRow(node.name, kind(node.layer), shapes[node.name],
                               count_params(node.layer, in_shape, node.frozen)))
    return Summary(tuple(rows), dict(graph.aliases))


@dataclass(frozen=True)
class ExpectedRow:
    name: str
    out_shape: str  # "(7,7,1920)", "K:4x4" or "-"
    params: int | None


@dataclass(frozen=True)
class RowCheck:
    name: str
    expected: str
    actual: str
    ok: bool


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple[RowCheck, ...]
    warning: str | None = None

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def mismatches(self) -> list[RowCheck]:
        return [c for c in self.checks if not c.ok]

    def format(self) -> str:
        lines = [f"{'row':<28} {'expected':<28} {'actual':<28} result"]
        for c in self.checks:
            lines.append(f"{c.name:<28} {c.expected:<28} {c.actual:<28} {'PASS' if c.ok else 'FAIL'}")
        if self.warning:
            lines.append(f"warning: {self.warning}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"({len(self.checks) - len(self.mismatches)}/{len(self.checks)} rows)")
        return "\n".join(lines)


TOTAL_ROWS = {"total_params": "total", "trainable_params": "trainable", "non_trainable_params": "non_trainable"}


def parse_ledger(text: str) -> list[ExpectedRow]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = []
    for rec in csv.DictReader(io.StringIO("\n".join(lines))):
        params = rec["params"].strip()
        rows.append(ExpectedRow(rec["name"].strip(), rec["out_shape"].strip(),
                                None if params in ("", "-") else int(params)))
    return rows


def load_ledger(name: str = "table1_m4.csv") -> list[ExpectedRow]:
    """Load a ledger shipped inside the package."""
    text = resources.files("fusionnet").joinpath("data", name).read_text(encoding="utf-8")
    return parse_ledger(text)


def _fmt_shape(shape: Shape) -> str:
    return "(" + ",".join(str(d) for d in shape) + ")"


def _norm(s: str) -> str:
    return s.replace(" ", "").replace("None,", "").lower()


def verify_against_expected(summary: Summary, expected: Sequence[ExpectedRow],
                            graph: ModelGraph | None = None) -> VerificationReport:
    """Compare summary rows with a ledger; mismatches are report content.

    ``K:fxf`` entries check the window of a pooling/conv node and need
    ``graph``.  Special names ``total_params``, ``trainable_params`` and
    ``non_trainable_params`` check the summary totals.
    """
    if not expected:
        msg = "expected ledger is empty; verification is vacuous"
        warnings.warn(msg, stacklevel=2)
        return VerificationReport((), warning=msg)
    totals = summary.totals
    checks = []
    for exp in expected:
        if exp.name in TOTAL_ROWS:
            actual = getattr(totals, TOTAL_ROWS[exp.name])
            checks.append(RowCheck(exp.name, str(exp.params), str(actual), actual == exp.params))
            continue
        try:
            row = summary.row(exp.name)
        except KeyError:
            checks.append(RowCheck(exp.name, f"{exp.out_shape} {exp.params}", "missing", False))
            continue
        ok = True
        actual_desc = []
        if exp.out_shape.upper().startswith("K:"):
            layer = graph.node(row.name).layer if graph is not None else None
            window = getattr(layer, "kernel", None) or getattr(layer, "pool", None)
            got = f"K:{window[0]}x{window[1]}" if window else "K:?"
            ok &= _norm(got) == _norm(exp.out_shape)
            actual_desc.append(got)
        elif exp.out_shape not in ("", "-"):
            got = _fmt_shape(row.shape)
            ok &= _norm(got) == _norm(exp.out_shape)
            actual_desc.append(got)
        if exp.params is not None:
            ok &= row.params.total == exp.params
            actual_desc.append(str(row.params.total))
        checks.append(RowCheck(exp.name, f"{exp.out_shape} {'' if exp.params is None else exp.params}".strip(),
                               " ".join(actual_desc), bool(ok)))
    return VerificationReport(tuple(checks))

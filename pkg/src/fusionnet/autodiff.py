"""Graph execution, reverse-mode gradients, loss, Adam and gradient checking.

Parameters live outside the (immutable) graph in a flat ``dict`` keyed
``"<node>/<suffix>"``; BatchNorm moving statistics are stored there as well
but never receive gradients.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels as K
from .graph import (Add, AvgPool2D, BatchNorm, Concat, Conv2D, Dense, Dropout, GlobalAvgPool2D, Input,
                    MaxPool2D, ModelGraph, ReLU, ShapeError, Softmax)

Params = dict[str, np.ndarray]

LOSS_CLAMP = 1e-12


class StaleTapeError(RuntimeError):
    """A tape was replayed against a graph or parameter set it was not recorded with."""


def init_params(graph: ModelGraph, seed: int = 0) -> Params:
    """He-normal kernels, zero biases, unit BN scale, zero-mean/unit-variance statistics."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, spec, _ in graph.param_table():
        if spec.suffix == "kernel":
            fan_in = math.prod(spec.shape[:-1])
            params[name] = rng.standard_normal(spec.shape) * math.sqrt(2.0 / fan_in)
        elif spec.suffix in ("gamma", "moving_variance"):
            params[name] = np.ones(spec.shape)
        else:
            params[name] = np.zeros(spec.shape)
    return params


def trainable_names(graph: ModelGraph) -> list[str]:
    return [name for name, _, optimizable in graph.param_table() if optimizable]


@dataclass
class ActivationTape:
    """Per-node outputs and backward caches from one forward pass."""

    graph: ModelGraph
    params: Mapping[str, np.ndarray]
    training: bool
    values: dict[str, np.ndarray] = field(default_factory=dict)
    caches: dict[str, object] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)

    def batch_stats(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """BatchNorm (mean, variance) observed in training mode, by node."""
        out = {}
        for name, cache in self.caches.items():
            if isinstance(self.graph.node(name).layer, BatchNorm) and self.training:
                out[name] = (cache[4], cache[5])
        return out


def _p(params, node, suffix, required=False):
    key = f"{node}/{suffix}"
    if required and key not in params:
        raise KeyError(f"missing parameter {key!r}")
    return params.get(key)


def forward(graph: ModelGraph, params: Mapping[str, np.ndarray], batch, training: bool = False,
            rng: np.random.Generator | None = None, outputs=None):
    """Run the graph on a batch; returns ``(tape, [output arrays])``.

    Only nodes needed for ``outputs`` (default: graph outputs) are evaluated.
    Dropout is active only when ``training`` is set and then draws its masks
    from ``rng``.
    """
    targets = tuple(outputs) if outputs is not None else graph.outputs
    needed = graph.ancestors(targets)
    feeds = batch if isinstance(batch, Mapping) else {graph.inputs[0]: batch}
    tape = ActivationTape(graph, params, training)
    for node in graph.topological_order():
        if node.name not in needed:
            continue
        layer = node.layer
        xs = [tape.values[s] for s in node.inputs]
        try:
            y, cache = _forward_node(node.name, layer, xs, params, feeds, training, rng)
        except ShapeError:
            raise
        except ValueError as exc:  # numpy broadcasting / concatenation failures
            raise ShapeError(str(exc), node=node.name) from exc
        tape.values[node.name] = y
        tape.caches[node.name] = cache
        tape.order.append(node.name)
    return tape, [tape.values[o] for o in targets]


def _forward_node(name, layer, xs, params, feeds, training, rng):
    if isinstance(layer, Input):
        x = np.asarray(feeds[name], dtype=np.float64)
        if x.shape[1:] != layer.shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input {layer.shape}", node=name)
        return x, None
    (x, *rest) = xs
    if isinstance(layer, Conv2D):
        kernel = _p(params, name, "kernel", required=True)
        if x.ndim != 4 or x.shape[-1] != kernel.shape[2]:
            raise ShapeError(f"conv input {x.shape} incompatible with kernel {kernel.shape}", node=name)
        return K.conv2d_forward(x, kernel, _p(params, name, "bias"),
                                layer.strides, layer.padding)
    if isinstance(layer, AvgPool2D):
        return K.avgpool_forward(x, layer.pool, layer.strides, layer.padding)
    if isinstance(layer, MaxPool2D):
        return K.maxpool_forward(x, layer.pool, layer.strides, layer.padding)
    if isinstance(layer, BatchNorm):
        return K.batchnorm_forward(x, _p(params, name, "gamma"), _p(params, name, "beta", True),
                                   _p(params, name, "moving_mean", True),
                                   _p(params, name, "moving_variance", True),
                                   layer.epsilon, training)
    if isinstance(layer, Dense):
        kernel = _p(params, name, "kernel", required=True)
        if x.ndim != 2 or x.shape[-1] != kernel.shape[0]:
            raise ShapeError(f"dense input {x.shape} incompatible with kernel {kernel.shape}", node=name)
        return K.dense_forward(x, kernel, _p(params, name, "bias"))
    if isinstance(layer, GlobalAvgPool2D):
        return K.gap_forward(x)
    if isinstance(layer, Concat):
        return np.concatenate(xs, axis=-1), [a.shape[-1] for a in xs]
    if isinstance(layer, Add):
        if any(a.shape != x.shape for a in rest):
            raise ShapeError("Add inputs differ in shape", node=name)
        y = x.copy()
        for a in rest:
            y += a
        return y, len(xs)
    if isinstance(layer, ReLU):
        mask = x > 0
        return np.maximum(x, 0.0), mask  # np.maximum keeps NaN visible
    if isinstance(layer, Dropout):
        if not training or layer.rate == 0.0:
            return x, None
        if rng is None:
            raise RuntimeError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
        return x * mask, mask
    if isinstance(layer, Softmax):
        y = K.softmax_rows(x)
        return y, y
    raise ShapeError(f"no kernel for {layer!r}", node=name)


def backprop(tape: ActivationTape, seeds: Mapping[str, np.ndarray],
             want_nodes=(), skip_params: bool = False):
    """Propagate ``seeds`` (node -> dL/d output) back through the tape.

    Returns ``(param_grads, node_grads)``.  Gradients from several consumers
    are summed in reverse topological order, so results are reproducible.
    Frozen nodes and statistics get no entry.
    """
    graph = tape.graph
    grads: dict[str, np.ndarray] = {}
    for k, v in seeds.items():
        grads[k] = np.array(v, dtype=np.float64)
    pgrads: dict[str, np.ndarray] = {}
    node_grads = {}
    wanted = set(want_nodes)

    def acc(node, g):
        if node in grads:
            grads[node] = grads[node] + g
        else:
            grads[node] = g

    for name in reversed(tape.order):
        if name not in grads:
            continue
        dy = grads.pop(name) if name not in wanted else grads[name]
        if name in wanted:
            node_grads[name] = dy
        node = graph.node(name)
        layer, cache = node.layer, tape.caches[name]
        learn = not node.frozen and not skip_params
        if isinstance(layer, Input):
            continue
        if isinstance(layer, Conv2D):
            dx, dk, db = K.conv2d_backward(dy, cache)
            if learn:
                pgrads[f"{name}/kernel"] = dk
                if db is not None:
                    pgrads[f"{name}/bias"] = db
        elif isinstance(layer, AvgPool2D):
            dx = K.avgpool_backward(dy, cache)
        elif isinstance(layer, MaxPool2D):
            dx = K.maxpool_backward(dy, cache)
        elif isinstance(layer, BatchNorm):
            dx, dgamma, dbeta = K.batchnorm_backward(dy, cache)
            if learn:
                if dgamma is not None:
                    pgrads[f"{name}/gamma"] = dgamma
                pgrads[f"{name}/beta"] = dbeta
        elif isinstance(layer, Dense):
            dx, dk, db = K.dense_backward(dy, cache)
            if learn:
                pgrads[f"{name}/kernel"] = dk
                if db is not None:
                    pgrads[f"{name}/bias"] = db
        elif isinstance(layer, GlobalAvgPool2D):
            dx = K.gap_backward(dy, cache)
        elif isinstance(layer, Concat):
            splits = np.cumsum(cache)[:-1]
            for src, part in zip(node.inputs, np.split(dy, splits, axis=-1)):
                acc(src, part)
            continue
        elif isinstance(layer, Add):
            for src in node.inputs:
                acc(src, dy)
            continue
        elif isinstance(layer, ReLU):
            dx = np.where(cache, dy, 0.0)
        elif isinstance(layer, Dropout):
            dx = dy if cache is None else dy * cache
        elif isinstance(layer, Softmax):
            dx = K.softmax_backward(dy, cache)
        else:
            raise ShapeError(f"no backward for {layer!r}", node=name)
        acc(node.inputs[0], dx)
    return pgrads, node_grads


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax needs finite logits")
    return K.softmax_rows(z)


def _labels(labels, k):
    t = np.asarray(labels, dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    return t


def cce_loss(probs, labels) -> float:
    """Mean categorical cross-entropy, probabilities clamped at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    t = _labels(labels, p.shape[-1])
    if len(t) != p.shape[0]:
        raise ValueError("probs and labels differ in length")
    picked = np.maximum(p[np.arange(len(t)), t], LOSS_CLAMP)
    return float(-np.log(picked).mean())


def _logit_node(graph: ModelGraph) -> tuple[str, bool]:
    out = graph.outputs[0]
    node = graph.node(out)
    if isinstance(node.layer, Softmax):
        return node.inputs[0], True
    return out, False


def loss_and_seed(graph: ModelGraph, tape: ActivationTape, labels):
    """(loss, node, dL/d node) for the softmax + cross-entropy head."""
    logit_node, has_softmax = _logit_node(graph)
    z = tape.values[logit_node]
    probs = tape.values[graph.outputs[0]] if has_softmax else K.softmax_rows(z)
    t = _labels(labels, z.shape[-1])
    loss = cce_loss(probs, t)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(t)), t] = 1.0
    return loss, logit_node, (probs - onehot) / len(t)


def backward(graph: ModelGraph, tape: ActivationTape, labels) -> dict[str, np.ndarray]:
    """dL/dparam for every trainable parameter, L = mean CCE of softmax(logits)."""
    if tape.graph is not graph:
        raise StaleTapeError("tape was recorded on a different graph")
    missing = [o for o in graph.outputs if o not in tape.values]
    if missing:
        raise StaleTapeError(f"tape has no values for outputs {missing}")
    _, node, seed = loss_and_seed(graph, tape, labels)
    pgrads, _ = backprop(tape, {node: seed})
    return pgrads


def loss_and_grads(graph, params, batch, labels, training=True, rng=None):
    tape, _ = forward(graph, params, batch, training=training, rng=rng)
    loss, node, seed = loss_and_seed(graph, tape, labels)
    pgrads, _ = backprop(tape, {node: seed})
    return loss, pgrads, tape


def apply_batch_stats(graph: ModelGraph, params: Params, tape: ActivationTape) -> Params:
    """Fold the tape's batch statistics into the moving averages."""
    out = dict(params)
    for name, (mean, var) in tape.batch_stats().items():
        mom = graph.node(name).layer.momentum
        out[f"{name}/moving_mean"] = mom * params[f"{name}/moving_mean"] + (1 - mom) * mean
        out[f"{name}/moving_variance"] = mom * params[f"{name}/moving_variance"] + (1 - mom) * var
    return out


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m[name] = state.beta1 * m.get(name, 0.0) + (1 - state.beta1) * g
        v[name] = state.beta2 * v.get(name, 0.0) + (1 - state.beta2) * g * g
        new_params[name] = p - state.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + state.eps)
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)


# --------------------------------------------------------------------------
# finite-difference verification


def _loss(graph, params, batch, labels):
    tape, _ = forward(graph, params, batch, training=True, rng=None)
    return loss_and_seed(graph, tape, labels)[0]


def _without_dropout(graph: ModelGraph) -> ModelGraph:
    if not any(isinstance(n.layer, Dropout) for n in graph.nodes):
        return graph
    nodes = tuple(type(n)(n.name, Dropout(0.0), n.inputs, n.frozen) if isinstance(n.layer, Dropout) else n
                  for n in graph.nodes)
    return ModelGraph(nodes, graph.outputs, dict(graph.aliases), graph.cam_node)


def grad_check(graph: ModelGraph, params: Params, batch, labels, h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, per_param: bool = False):
    """Largest relative error between analytic and central-difference gradients.

    For each trainable tensor the error is
    ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, 1e-8)`` with
    Euclidean norms over the checked coordinates.  ``max_coords`` samples
    that many coordinates per tensor (all when ``None``).  BatchNorm uses
    batch statistics and dropout is disabled.
    """
    graph = _without_dropout(graph)
    _, analytic, _ = loss_and_grads(graph, params, batch, labels, training=True)
    rng = np.random.default_rng(seed)
    errors = {}
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    for name in trainable_names(graph):
        p = work[name]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = _loss(graph, work, batch, labels)
            flat[c] = orig - h
            down = _loss(graph, work, batch, labels)
            flat[c] = orig
            numeric[i] = (up - down) / (2 * h)
        a = analytic[name].reshape(-1)[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        errors[name] = float(np.linalg.norm(a - numeric) / denom)
    worst = max(errors.values(), default=0.0)
    return (worst, errors) if per_param else worst


# --------------------------------------------------------------------------
# checkpoints


def params_to_json(params: Mapping[str, np.ndarray]) -> str:
    doc = {"version": 1, "params": {}}
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        doc["params"][name] = {"shape": list(arr.shape),
                               "data_b64": base64.b64encode(arr.tobytes()).decode("ascii")}
    return json.dumps(doc, sort_keys=True, indent=1)


def params_from_json(text: str) -> Params:
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    out = {}
    for name, rec in doc["params"].items():
        data = np.frombuffer(base64.b64decode(rec["data_b64"]), dtype="<f8")
        out[name] = data.astype(np.float64).reshape(rec["shape"])
    return out

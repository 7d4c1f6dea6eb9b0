"""Composable layer graph: named nodes, topological forward/backward,
and transfer-learning freeze policies.

Node ids are unique strings; parameter names are ``<node id>.<local name>``.
The builder inserts nodes in topological order, so execution is a single
pass over insertion order. Backward prunes everything below the earliest
node that still needs a gradient (frozen prefixes cost nothing), unless an
input gradient is explicitly requested.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import MobIncError, ShapeError, ValidationError
from .ops import Input, Op


@dataclass
class LayerNode:
    id: str
    op: Op
    inputs: list[str]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if not self.trainable:
            self.trainable = {name: True for name in self.op.param_arrays()}


@dataclass(frozen=True)
class FreezePolicy:
    """Which trunk parameters stay trainable.

    mode: "train_all" | "freeze_all_trunk" | "freeze_trunk_except_last_k".
    k counts parameterized layers (conv / depthwise / batchnorm / fc);
    activations and pools never count. boundary overrides the graph's
    recorded trunk boundary when set.
    """

    mode: str
    k: int = 0
    boundary: str | None = None

    def __post_init__(self):
        if self.mode not in ("train_all", "freeze_all_trunk", "freeze_trunk_except_last_k"):
            raise ValidationError(f"unknown freeze mode {self.mode!r}")
        if self.k < 0:
            raise ValidationError("freeze k must be non-negative")


class ModelGraph:
    """Ordered acyclic graph of layer ops with named parameters."""

    def __init__(self, input_channels: int | None = None,
                 input_hw: tuple[int, int] | None = None):
        self.nodes: dict[str, LayerNode] = {}
        self.input_id = "input"
        self.output_id = self.input_id
        self.trunk_boundary: str | None = None
        self.input_channels = input_channels
        self.input_hw = input_hw
        self.output_channels: int | None = None
        self.nodes[self.input_id] = LayerNode(self.input_id, Input(), [])

    def add(self, node_id: str, op: Op, inputs: list[str] | str) -> str:
        if isinstance(inputs, str):
            inputs = [inputs]
        if node_id in self.nodes:
            raise ValidationError(f"duplicate node id {node_id!r}")
        for dep in inputs:
            if dep not in self.nodes:
                raise ValidationError(f"node {node_id!r} references unknown input {dep!r}")
        self.nodes[node_id] = LayerNode(node_id, op, list(inputs))
        self.output_id = node_id
        return node_id

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def parameterized_ids(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.op.param_arrays()]

    def trunk_ids(self, boundary: str | None = None) -> list[str]:
        """Node ids up to and including the trunk boundary, in graph order."""
        boundary = boundary or self.trunk_boundary
        if boundary is None or boundary not in self.nodes:
            raise ValidationError(f"trunk boundary {boundary!r} not present in graph")
        out = []
        for node_id in self.nodes:
            out.append(node_id)
            if node_id == boundary:
                return out
        raise ValidationError(f"trunk boundary {boundary!r} not reached in graph order")

    def parameters(self, trainable_only: bool = False):
        """Yield (param_name, array, trainable) over all nodes in graph order."""
        for node in self.nodes.values():
            for local, arr in node.op.param_arrays().items():
                trainable = node.trainable[local]
                if trainable_only and not trainable:
                    continue
                yield f"{node.id}.{local}", arr, trainable

    def buffers(self):
        for node in self.nodes.values():
            for local, arr in node.op.buffer_arrays().items():
                yield f"{node.id}.{local}", arr

    def param_dict(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        return {name: arr for name, arr, _ in self.parameters(trainable_only)}

    def state_entries(self):
        """(name, kind, array) for every parameter and buffer, in graph order."""
        for node in self.nodes.values():
            for local, arr in node.op.param_arrays().items():
                yield f"{node.id}.{local}", node.op.kind, arr
            for local, arr in node.op.buffer_arrays().items():
                yield f"{node.id}.{local}", node.op.kind, arr


class ForwardTrace(Mapping):
    """Activations of one forward pass, keyed by node id."""

    def __init__(self, outputs: dict[str, np.ndarray], caches: dict[str, object],
                 mode: str, output_id: str):
        self.outputs = outputs
        self.caches = caches
        self.mode = mode
        self.output_id = output_id

    @property
    def output(self) -> np.ndarray:
        return self.outputs[self.output_id]

    def __getitem__(self, key):
        return self.outputs[key]

    def __iter__(self):
        return iter(self.outputs)

    def __len__(self):
        return len(self.outputs)


class Gradients(Mapping):
    """Parameter-name -> gradient map, plus the input gradient if requested."""

    def __init__(self, params: dict[str, np.ndarray], input_grad: np.ndarray | None = None):
        self.params = params
        self.input_grad = input_grad

    def __getitem__(self, key):
        return self.params[key]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)


def _nodes_needing_grad(graph: ModelGraph, wrt_input: bool) -> set[str]:
    """Ids whose output gradient matters: nodes holding a trainable parameter
    and every node a gradient must flow through to reach one (or to reach the
    input, when the input gradient was requested)."""
    needed: set[str] = {graph.input_id} if wrt_input else set()
    for node in graph.nodes.values():
        if any(node.trainable.get(p, False) for p in node.op.param_arrays()):
            needed.add(node.id)
    # one forward sweep suffices: inputs precede their consumers
    for node in graph.nodes.values():
        if node.id not in needed and any(dep in needed for dep in node.inputs):
            needed.add(node.id)
    return needed


def forward(graph: ModelGraph, x: np.ndarray, mode: str = "infer",
            keep_caches: bool | None = None) -> ForwardTrace:
    """Evaluate every node once, in topological order.

    keep_caches defaults to True in train mode (needed by backward) and
    False in infer mode. In train mode, caches are kept only for nodes a
    later backward can reach; pass keep_caches=True to retain all of them
    (required before backward(..., wrt_input=True)).
    """
    if mode not in ("train", "infer"):
        raise ValidationError(f"unknown mode {mode!r}")
    if x.ndim not in (2, 4):
        raise ShapeError(f"graph input must be (n, d) or NHWC, got {x.shape}")
    if graph.input_channels is not None and x.ndim == 4 and x.shape[3] != graph.input_channels:
        raise ShapeError(
            f"graph expects {graph.input_channels} input channels, got input shape {x.shape}"
        )
    if graph.input_hw is not None and x.ndim == 4 and (x.shape[1], x.shape[2]) != graph.input_hw:
        raise ShapeError(
            f"graph expects {graph.input_hw} spatial input, got input shape {x.shape}"
        )
    if keep_caches is None:
        needed = _nodes_needing_grad(graph, wrt_input=False) if mode == "train" else set()
    else:
        needed = set(graph.nodes) if keep_caches else set()

    outputs: dict[str, np.ndarray] = {}
    caches: dict[str, object] = {}
    for node in graph.nodes.values():
        xs = [x] if node.id == graph.input_id else [outputs[d] for d in node.inputs]
        try:
            y, cache = node.op.forward(xs, mode)
        except MobIncError as exc:
            raise type(exc)(f"node {node.id!r}: {exc}") from exc
        outputs[node.id] = y
        if node.id in needed:
            caches[node.id] = cache
    return ForwardTrace(outputs, caches, mode, graph.output_id)


def backward(graph: ModelGraph, trace: ForwardTrace, loss_grad: np.ndarray,
             wrt_input: bool = False) -> Gradients:
    """Reverse-topological gradient accumulation.

    Returns gradients for trainable parameters only; frozen parameters get
    no entry. Fan-out nodes sum their incoming gradients. With wrt_input,
    the gradient w.r.t. the graph input is also produced (the forward pass
    must have kept all caches).
    """
    needed = _nodes_needing_grad(graph, wrt_input)
    out_grads: dict[str, np.ndarray] = {graph.output_id: loss_grad}
    param_grads: dict[str, np.ndarray] = {}
    input_grad = None
    for node in reversed(list(graph.nodes.values())):
        grad = out_grads.pop(node.id, None)
        if grad is None:
            continue
        if node.id == graph.input_id:
            input_grad = grad
            continue
        trainables = [p for p in node.op.param_arrays() if node.trainable[p]]
        need_params = bool(trainables)
        need_input = tuple(dep in needed for dep in node.inputs)
        if not need_params and not any(need_input):
            continue
        if node.id not in trace.caches:
            raise ValidationError(
                f"missing activation cache for node {node.id!r}; "
                "run forward in train mode (keep_caches=True for input gradients)"
            )
        in_grads, p_grads = node.op.backward(
            grad, trace.caches[node.id], need_input, need_params
        )
        for local in trainables:
            param_grads[f"{node.id}.{local}"] = p_grads[local]
        for dep, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            if dep in out_grads:
                out_grads[dep] = out_grads[dep] + g
            else:
                out_grads[dep] = g
    return Gradients(param_grads, input_grad)


def apply_freeze(graph: ModelGraph, policy: FreezePolicy) -> ModelGraph:
    """Set per-parameter trainable flags according to the policy.

    Freezing only affects gradients; forward outputs are untouched.
    Returns the same graph for chaining.
    """
    for node in graph.nodes.values():
        for local in node.trainable:
            node.trainable[local] = True
    if policy.mode == "train_all":
        return graph
    trunk = set(graph.trunk_ids(policy.boundary))
    trunk_param_ids = [nid for nid in graph.parameterized_ids() if nid in trunk]
    if policy.mode == "freeze_all_trunk":
        keep = 0
    else:
        keep = policy.k
        if keep > len(trunk_param_ids):
            raise ValidationError(
                f"freeze k={keep} exceeds the {len(trunk_param_ids)} parameterized trunk layers"
            )
    frozen = trunk_param_ids[: len(trunk_param_ids) - keep] if keep else trunk_param_ids
    for nid in frozen:
        node = graph.nodes[nid]
        for local in node.trainable:
            node.trainable[local] = False
    return graph

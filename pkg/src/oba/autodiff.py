"""Graph-level differentiation: forward with activation caching, exact
reverse-mode gradients, per-layer forward tangents, and the one-sweep tangent
propagation that accumulates every layer's input perturbation.

All passes are pure functions of (graph, batch); a cache belongs to exactly
one (graph, batch) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import INPUT_ID, NetworkGraph
from .layers import GraphValidationError


@dataclass
class ForwardCache:
    inputs: dict[str, tuple]  # node -> tuple of input activations (batched)
    outputs: dict[str, np.ndarray]
    ctx: dict[str, dict | None]
    batch: np.ndarray
    targets: np.ndarray | None
    loss: float
    batch_size: int


@dataclass
class GradientRecord:
    output_grads: dict[str, np.ndarray]  # d loss / d node-output
    param_grads: dict[str, dict[str, np.ndarray]]


@dataclass
class TangentRecord:
    input_tangents: dict[str, tuple]  # node -> tangent per input slot
    output_tangents: dict[str, np.ndarray]
    loss_tangent: float
    rule: object = None


def _node_inputs(g: NetworkGraph, nid: str, outputs, batch) -> tuple:
    return tuple(
        batch if src == INPUT_ID else outputs[src] for src in g.producers[nid]
    )


def forward(
    g: NetworkGraph,
    batch: np.ndarray,
    targets: np.ndarray | None = None,
    zero_outputs: dict[str, np.ndarray] | None = None,
) -> ForwardCache:
    """Run the network on a batch, caching every activation.

    ``zero_outputs`` maps node ids to ``(axis, indices)`` pairs (axis counted
    on the batched activation) whose output slices are forced to zero; used
    for neuron-masking evaluations.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != g.input_shape:
        raise GraphValidationError(
            f"batch per-sample shape {batch.shape[1:]} != network input {g.input_shape}"
        )
    inputs: dict[str, tuple] = {}
    outputs: dict[str, np.ndarray] = {}
    ctxs: dict[str, dict | None] = {}
    loss = None
    for nid in g.topo:
        nd = g.node(nid)
        xs = _node_inputs(g, nid, outputs, batch)
        inputs[nid] = xs
        if nd.is_loss():
            loss, ctx = nd.ops.forward_loss(nd, xs, targets)
            outputs[nid] = np.asarray(loss)
        else:
            y, ctx = nd.ops.forward(nd, xs, nd.params)
            if zero_outputs and nid in zero_outputs:
                axis, idx = zero_outputs[nid]
                y = y.copy()
                sl = [slice(None)] * y.ndim
                sl[axis] = idx
                y[tuple(sl)] = 0.0
            outputs[nid] = y
        ctxs[nid] = ctx
    return ForwardCache(
        inputs, outputs, ctxs, batch, targets, float(loss), batch.shape[0]
    )


def backward(g: NetworkGraph, cache: ForwardCache) -> GradientRecord:
    """Exact reverse-mode gradients of the scalar loss for every node output
    and every parameter tensor."""
    out_grads: dict[str, np.ndarray] = {}
    param_grads: dict[str, dict[str, np.ndarray]] = {}
    acc = {nid: None for nid in g.topo}
    loss_nd = g.node(g.loss_id)
    seed_list = loss_nd.ops.vjp_loss(loss_nd, cache.inputs[g.loss_id], cache.ctx[g.loss_id])
    out_grads[g.loss_id] = np.asarray(1.0)
    for src, gin in zip(g.producers[g.loss_id], seed_list):
        if src != INPUT_ID:
            acc[src] = gin.copy()

    for nid in reversed(g.topo):
        if nid == g.loss_id:
            continue
        nd = g.node(nid)
        gout = acc[nid]
        if gout is None:
            gout = np.zeros_like(cache.outputs[nid])
        out_grads[nid] = gout
        gins, gparams = nd.ops.vjp(nd, gout, cache.inputs[nid], nd.params, cache.ctx[nid])
        if gparams is not None:
            param_grads[nid] = gparams
        for src, gin in zip(g.producers[nid], gins):
            if src == INPUT_ID:
                continue
            if acc[src] is None:
                acc[src] = gin.copy()
            else:
                acc[src] = acc[src] + gin
    return GradientRecord(out_grads, param_grads)


def backward_from_seeds(
    g: NetworkGraph, cache: ForwardCache, seeds: dict[tuple[str, int], np.ndarray]
) -> dict[str, dict[str, np.ndarray]]:
    """Reverse sweep from cotangents seeded on input edges.

    ``seeds[(consumer_id, slot)]`` is a cotangent on the activation flowing
    into that edge.  Returns accumulated parameter cotangents for every layer
    the sweep reaches; the loss node is never traversed.
    """
    acc = {nid: None for nid in g.topo}
    for (dst, slot), cot in seeds.items():
        src = g.producers[dst][slot]
        if src == INPUT_ID:
            continue
        if acc[src] is None:
            acc[src] = cot.copy()
        else:
            acc[src] = acc[src] + cot
    param_grads: dict[str, dict[str, np.ndarray]] = {}
    for nid in reversed(g.topo):
        nd = g.node(nid)
        gout = acc[nid]
        if gout is None or nd.is_loss():
            continue
        gins, gparams = nd.ops.vjp(nd, gout, cache.inputs[nid], nd.params, cache.ctx[nid])
        if gparams is not None:
            param_grads[nid] = gparams
        for src, gin in zip(g.producers[nid], gins):
            if src == INPUT_ID:
                continue
            if acc[src] is None:
                acc[src] = gin.copy()
            else:
                acc[src] = acc[src] + gin
    return param_grads


def layer_jvp(node, x, x_tangent, theta_tangent=None, targets=None):
    """Forward tangent through a single layer.

    ``x``/``x_tangent`` are a tensor or tuple matching the node's arity. The
    primal forward is evaluated internally to populate whatever cache the
    kind needs (ReLU mask, softmax output, pooling argmax).  Loss kinds
    return the scalar loss tangent and require ``targets`` when applicable.
    """
    xs = x if isinstance(x, tuple) else (x,)
    tans = x_tangent if isinstance(x_tangent, tuple) else (x_tangent,)
    if node.is_param() and theta_tangent is None:
        raise ValueError(f"{node.id}: parameter layer needs theta_tangent")
    if not node.is_param() and theta_tangent is not None:
        raise ValueError(f"{node.id}: {node.kind} carries no parameters")
    if node.is_loss():
        _, ctx = node.ops.forward_loss(node, xs, targets)
        return node.ops.jvp_loss(node, xs, tans, ctx)
    _, ctx = node.ops.forward(node, xs, node.params)
    return node.ops.jvp(node, xs, tans, node.params, theta_tangent, ctx)


def jvpf_run(g: NetworkGraph, cache: ForwardCache, rule) -> TangentRecord:
    """One topological sweep propagating all parameter perturbations at once.

    Each parameter layer seeds its own contribution at its output; every node
    maps incoming tangents through its Jacobian (reusing the primal cache).
    The tangent arriving at a node's input is therefore the sum of weight
    Jacobian columns times perturbations over every parameter layer below.
    """
    from .scoring import resolve_rule  # local import: scoring depends on this module

    deltas = resolve_rule(g, rule)
    in_tans: dict[str, tuple] = {}
    out_tans: dict[str, np.ndarray] = {}
    loss_tan = 0.0
    for nid in g.topo:
        nd = g.node(nid)
        tans = tuple(
            np.zeros_like(cache.batch) if src == INPUT_ID else out_tans[src]
            for src in g.producers[nid]
        )
        in_tans[nid] = tans
        if nd.is_loss():
            loss_tan = float(
                nd.ops.jvp_loss(nd, cache.inputs[nid], tans, cache.ctx[nid])
            )
            out_tans[nid] = np.asarray(loss_tan)
            continue
        p_tan = deltas.get(nid) if nd.is_param() else None
        out_tans[nid] = nd.ops.jvp(
            nd, cache.inputs[nid], tans, nd.params, p_tan, cache.ctx[nid]
        )
    return TangentRecord(in_tans, out_tans, loss_tan, rule)


def vjp_with_surrogate_weights(node, upstream, surrogate, x=None, ctx=None):
    """Cotangent at the layer input of the bias-free input map with the
    weights replaced by ``surrogate`` (zero surrogate gives a zero tensor)."""
    if not node.is_param():
        raise ValueError(f"{node.id}: {node.kind} has no weight Jacobian")
    xs = x if isinstance(x, tuple) else (x,)
    if ctx is None:
        if x is None and node.kind != "Linear":
            raise ValueError(f"{node.id}: need the primal input or its cache")
        if x is not None:
            _, ctx = node.ops.forward(node, xs, node.params)
    return node.ops.input_map_vjp_with_weights(node, upstream, surrogate, xs, ctx)

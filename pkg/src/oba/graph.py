"""Layer DAG: construction from the JSON network schema, validation, static
shape inference, deterministic parameter initialisation, and FLOPs/parameter
counting.

Schema (see README): ``{"input_shape": [...], "seed": int, "loss": "<id>",
"nodes": [{"id", "kind", "attrs", "init"}], "edges": [[src, dst, slot]]}``.
The reserved id ``"input"`` names the network input and may appear only as an
edge source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import KINDS, LOSS_KINDS, PARAM_KINDS, GraphValidationError

INPUT_ID = "input"


@dataclass
class LayerNode:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    params: dict | None = None  # {"weight": array, "bias": array} for parameter kinds

    @property
    def ops(self):
        return KINDS[self.kind]

    def is_param(self) -> bool:
        return self.kind in PARAM_KINDS

    def is_loss(self) -> bool:
        return self.kind in LOSS_KINDS


@dataclass
class NetworkGraph:
    nodes: dict[str, LayerNode]
    edges: list[tuple[str, str, int]]
    input_shape: tuple[int, ...]
    loss_id: str
    topo: list[str] = field(default_factory=list)
    producers: dict[str, list[str]] = field(default_factory=dict)  # node -> src per slot
    consumers: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    out_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def node(self, nid: str) -> LayerNode:
        return self.nodes[nid]

    def param_layers(self) -> list[str]:
        return [nid for nid in self.topo if self.nodes[nid].is_param()]

    def in_shapes(self, nid: str) -> list[tuple[int, ...]]:
        return [
            self.input_shape if src == INPUT_ID else self.out_shapes[src]
            for src in self.producers[nid]
        ]

    def copy_with_params(self, params: dict[str, dict[str, np.ndarray]]) -> "NetworkGraph":
        """Shallow structural copy with fresh parameter arrays."""
        nodes = {}
        for nid, nd in self.nodes.items():
            p = None
            if nd.params is not None:
                src = params.get(nid, nd.params)
                p = {k: np.array(v, dtype=np.float64) for k, v in src.items()}
            nodes[nid] = LayerNode(nd.id, nd.kind, dict(nd.attrs), p)
        return NetworkGraph(
            nodes,
            list(self.edges),
            self.input_shape,
            self.loss_id,
            list(self.topo),
            {k: list(v) for k, v in self.producers.items()},
            {k: list(v) for k, v in self.consumers.items()},
            dict(self.out_shapes),
        )

    def clone(self) -> "NetworkGraph":
        return self.copy_with_params({})

    def to_spec(self) -> dict:
        """Structure-only document (parameters travel in checkpoints)."""
        return {
            "input_shape": list(self.input_shape),
            "loss": self.loss_id,
            "nodes": [
                {"id": nd.id, "kind": nd.kind, "attrs": dict(nd.attrs)}
                for nd in (self.nodes[i] for i in self.topo)
            ],
            "edges": [list(e) for e in self.edges],
        }


def _toposort(node_ids, edges) -> list[str]:
    indeg = {nid: 0 for nid in node_ids}
    adj: dict[str, list[str]] = {nid: [] for nid in node_ids}
    for src, dst, _ in edges:
        if src == INPUT_ID:
            continue
        adj[src].append(dst)
        indeg[dst] += 1
    ready = sorted(nid for nid, d in indeg.items() if d == 0)
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        changed = False
        for nxt in adj[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
                changed = True
        if changed:
            ready.sort()  # stable-by-id deterministic order
    if len(order) != len(node_ids):
        cyclic = sorted(set(node_ids) - set(order))
        raise GraphValidationError(f"graph contains a cycle through nodes {cyclic}")
    return order


def _init_array(shape, scheme: str, rng: np.random.Generator, attrs: dict, is_bias: bool):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    if scheme == "zeros":
        return np.zeros(shape, dtype=np.float64)
    if scheme == "ones":
        return np.ones(shape, dtype=np.float64)
    if scheme == "he_normal":
        if is_bias:
            return np.zeros(shape, dtype=np.float64)
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if scheme == "xavier_uniform":
        if is_bias:
            return np.zeros(shape, dtype=np.float64)
        fan_out = shape[0]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)
    if scheme == "normal":
        std = float(attrs.get("std", 0.1))
        return rng.normal(0.0, std, size=shape)
    raise GraphValidationError(f"unknown init scheme {scheme!r}")


def _init_params(node: LayerNode, shapes: dict, rng: np.random.Generator, init: dict | None):
    init = dict(init or {})
    if "weight" in init or "bias" in init:  # explicit values
        out = {}
        for name, shp in shapes.items():
            if name not in init:
                raise GraphValidationError(f"{node.id}: explicit init missing {name!r}")
            arr = np.asarray(init[name], dtype=np.float64)
            if arr.shape != tuple(shp):
                raise GraphValidationError(
                    f"{node.id}: init {name} shape {arr.shape} != expected {tuple(shp)}"
                )
            out[name] = arr
        return out
    scheme = init.get("scheme", "he_normal")
    if node.kind == "LayerNorm" and "scheme" not in init:
        return {
            "weight": np.ones(shapes["weight"], dtype=np.float64),
            "bias": np.zeros(shapes["bias"], dtype=np.float64),
        }
    return {
        name: _init_array(shp, scheme, rng, init, is_bias=(name == "bias"))
        for name, shp in shapes.items()
    }


def parse_network(spec_document: dict | str, seed: int | None = None) -> NetworkGraph:
    """Validate the network document and return an initialised graph.

    ``seed`` overrides the document's ``seed`` field for parameter init.
    Raises :class:`GraphValidationError` on cycles, unknown kinds, dangling
    nodes, arity violations, or shape inconsistencies.
    """
    doc = json.loads(spec_document) if isinstance(spec_document, str) else spec_document
    for key in ("input_shape", "loss", "nodes", "edges"):
        if key not in doc:
            raise GraphValidationError(f"network document missing {key!r}")

    nodes: dict[str, LayerNode] = {}
    for entry in doc["nodes"]:
        nid = entry["id"]
        if nid == INPUT_ID:
            raise GraphValidationError(f"node id {INPUT_ID!r} is reserved")
        if nid in nodes:
            raise GraphValidationError(f"duplicate node id {nid!r}")
        kind = entry["kind"]
        if kind not in KINDS:
            raise GraphValidationError(f"{nid}: unknown kind {kind!r}")
        nodes[nid] = LayerNode(nid, kind, dict(entry.get("attrs", {})))

    edges: list[tuple[str, str, int]] = []
    seen_slots = set()
    for e in doc["edges"]:
        src, dst, slot = e[0], e[1], int(e[2]) if len(e) > 2 else 0
        if src != INPUT_ID and src not in nodes:
            raise GraphValidationError(f"edge source {src!r} is not a node")
        if dst not in nodes:
            raise GraphValidationError(f"edge target {dst!r} is not a node")
        if (dst, slot) in seen_slots:
            raise GraphValidationError(f"duplicate edge into {dst!r} slot {slot}")
        seen_slots.add((dst, slot))
        edges.append((src, dst, slot))

    producers: dict[str, list[str]] = {}
    for nid, nd in nodes.items():
        incoming = sorted(((s, d, sl) for s, d, sl in edges if d == nid), key=lambda t: t[2])
        slots = [sl for _, _, sl in incoming]
        if slots != list(range(len(slots))):
            raise GraphValidationError(f"{nid}: input slots must be 0..n-1, got {slots}")
        arity = nd.ops.n_inputs
        if arity == "many":
            if len(slots) < 2:
                raise GraphValidationError(f"{nid}: {nd.kind} needs >=2 inputs")
        elif len(slots) != arity:
            raise GraphValidationError(
                f"{nid}: {nd.kind} takes exactly {arity} input(s), got {len(slots)}"
            )
        producers[nid] = [s for s, _, _ in incoming]

    loss_id = doc["loss"]
    if loss_id not in nodes or not nodes[loss_id].is_loss():
        raise GraphValidationError(f"loss node {loss_id!r} missing or not a loss kind")
    for nid, nd in nodes.items():
        if nd.is_loss() and nid != loss_id:
            raise GraphValidationError(f"{nid}: extra loss node; only {loss_id!r} allowed")

    consumers: dict[str, list[tuple[str, int]]] = {nid: [] for nid in nodes}
    for src, dst, slot in edges:
        if src != INPUT_ID:
            consumers[src].append((dst, slot))
    for nid in consumers:
        consumers[nid].sort()
    if consumers[loss_id]:
        raise GraphValidationError(f"loss node {loss_id!r} must be the sink")

    topo = _toposort(list(nodes), edges)

    # reachability: input -> everything -> loss
    reach_fwd = {INPUT_ID}
    for nid in topo:
        if any(src in reach_fwd for src in producers[nid]):
            reach_fwd.add(nid)
    reach_back = {loss_id}
    for nid in reversed(topo):
        if nid in reach_back:
            reach_back.update(s for s in producers[nid] if s != INPUT_ID)
    dead = sorted(set(nodes) - (reach_fwd & reach_back))
    if dead:
        raise GraphValidationError(
            f"dangling nodes (unreachable from input or not feeding the loss): {dead}"
        )

    g = NetworkGraph(nodes, edges, tuple(doc["input_shape"]), loss_id, topo, producers, consumers)

    # static per-sample shape inference
    for nid in topo:
        nd = nodes[nid]
        g.out_shapes[nid] = nd.ops.infer(nd, g.in_shapes(nid))

    # deterministic parameter init: one child stream per node, by document order
    base_seed = int(doc.get("seed", 0) if seed is None else seed)
    doc_order = [entry["id"] for entry in doc["nodes"]]
    streams = np.random.SeedSequence(base_seed).spawn(len(doc_order))
    init_by_id = {entry["id"]: entry.get("init") for entry in doc["nodes"]}
    for idx, nid in enumerate(doc_order):
        nd = nodes[nid]
        if not nd.is_param():
            if init_by_id[nid]:
                raise GraphValidationError(f"{nid}: {nd.kind} carries no parameters")
            continue
        shapes = nd.ops.init_params(nd, g.in_shapes(nid), None)
        rng = np.random.default_rng(streams[idx])
        nd.params = _init_params(nd, shapes, rng, init_by_id[nid])
    return g


def count_flops(g: NetworkGraph, mask=None) -> tuple[int, int]:
    """Per-sample FLOPs and parameter count.

    Convention: 2 x multiply-accumulate for Linear/Conv2d/MatMul (bias adds
    folded in), one op per output value for elementwise kinds, zero for
    Flatten and loss sinks.  A structured mask is applied physically first;
    an unstructured mask removes masked entries from both counts.
    """
    if mask is not None and getattr(mask, "mode", None) == "structured":
        from .pruning import apply_mask  # deferred: pruning depends on this module

        return count_flops(apply_mask(g, mask), None)

    keep = None
    if mask is not None:
        if getattr(mask, "mode", None) != "unstructured":
            raise GraphValidationError("count_flops: unknown mask type")
        keep = mask.masks

    flops = 0
    params = 0
    for nid in g.topo:
        nd = g.node(nid)
        in_shapes = g.in_shapes(nid)
        out_shape = g.out_shapes[nid]
        node_flops = nd.ops.flops(nd, in_shapes, out_shape)
        if nd.params is not None:
            if keep is not None and nid in keep:
                kept_w = int(keep[nid]["weight"].sum())
                kept_b = int(keep[nid]["bias"].sum())
                total_w = g.node(nid).params["weight"].size
                if nd.kind in ("Linear", "Conv2d") and total_w:
                    # each weight entry participates in node_flops/total MACs
                    node_flops = int(round(node_flops * kept_w / total_w))
                params += kept_w + kept_b
            else:
                params += sum(p.size for p in nd.params.values())
        flops += node_flops
    return flops, params

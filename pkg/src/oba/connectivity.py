"""Connectivity analysis over the layer DAG.

Series connectivity is directed reachability between parameter layers (every
supported kind is differentiable almost everywhere, so a directed path is a
differentiable map).  Parallel connectivity tracks, per matrix-multiplication
node, which parameter layers feed each operand.  Group discovery aliases
neuron dimensions across layers (union-find) so structured pruning removes
consistent slices everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import INPUT_ID, NetworkGraph
from .layers import GraphValidationError


class WeightSharingError(GraphValidationError):
    """A parameter layer reaches both operands of one matrix multiplication;
    such graphs are rejected rather than silently mishandled."""


@dataclass
class ConnectivityMap:
    l_up: dict[str, frozenset[str]] = field(default_factory=dict)
    l_low: dict[str, frozenset[str]] = field(default_factory=dict)
    left: dict[str, frozenset[str]] = field(default_factory=dict)
    right: dict[str, frozenset[str]] = field(default_factory=dict)


def _ancestor_params(g: NetworkGraph) -> dict[str, set[str]]:
    """Parameter layers strictly upstream of each node."""
    anc: dict[str, set[str]] = {}
    for nid in g.topo:
        s: set[str] = set()
        for src in g.producers[nid]:
            if src == INPUT_ID:
                continue
            s |= anc[src]
            if g.node(src).is_param():
                s.add(src)
        anc[nid] = s
    return anc


def series_sets(g: NetworkGraph, cmap: ConnectivityMap | None = None) -> ConnectivityMap:
    cmap = cmap or ConnectivityMap()
    anc = _ancestor_params(g)
    params = g.param_layers()
    cmap.l_low = {p: frozenset(anc[p]) for p in params}
    ups: dict[str, set[str]] = {p: set() for p in params}
    for p in params:
        for low in cmap.l_low[p]:
            ups[low].add(p)
    cmap.l_up = {p: frozenset(ups[p]) for p in params}
    return cmap


def parallel_sets(g: NetworkGraph, cmap: ConnectivityMap | None = None) -> ConnectivityMap:
    cmap = cmap or ConnectivityMap()
    anc = _ancestor_params(g)

    def reach_incl(nid: str) -> frozenset[str]:
        if nid == INPUT_ID:
            return frozenset()
        s = set(anc[nid])
        if g.node(nid).is_param():
            s.add(nid)
        return frozenset(s)

    for nid in g.topo:
        if g.node(nid).kind != "MatMul":
            continue
        left_src, right_src = g.producers[nid]
        lset, rset = reach_incl(left_src), reach_incl(right_src)
        shared = lset & rset
        if shared:
            raise WeightSharingError(
                f"{nid}: parameter layer(s) {sorted(shared)} reach both operands "
                "of one matrix multiplication (unsupported weight sharing)"
            )
        cmap.left[nid] = lset
        cmap.right[nid] = rset
    return cmap


def connectivity_map(g: NetworkGraph) -> ConnectivityMap:
    cmap = series_sets(g)
    return parallel_sets(g, cmap)


# ---------------------------------------------------------------------------
# dependency-group discovery
# ---------------------------------------------------------------------------


@dataclass
class MemberSlice:
    layer: str
    param: str  # "weight" | "bias"
    axis: int
    role: str  # "producer" | "consumer"
    idx: list  # idx[j]: index array along `axis` owned by neuron j


@dataclass
class GroupSpec:
    gid: str
    size: int
    members: list[MemberSlice]

    @property
    def producers(self) -> list[MemberSlice]:
        return [m for m in self.members if m.role == "producer"]

    @property
    def consumers(self) -> list[MemberSlice]:
        return [m for m in self.members if m.role == "consumer"]

    def layer_for_neuron_axis(self) -> list[str]:
        return sorted({m.layer for m in self.members})


class _UnionFind:
    def __init__(self):
        self.parent: dict[int, int] = {}

    def make(self, v: int):
        self.parent[v] = v

    def find(self, v: int) -> int:
        while self.parent[v] != v:
            self.parent[v] = self.parent[self.parent[v]]
            v = self.parent[v]
        return v

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _identity_idx(n: int) -> list:
    return [np.array([j]) for j in range(n)]


def _same_idx(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def discover_groups(g: NetworkGraph) -> list[GroupSpec]:
    """Partition prunable neuron dimensions into dependency groups.

    Each parameter layer's output dimension opens a fresh dimension variable;
    elementwise kinds pass variables through, Add unifies them, Flatten maps a
    channel variable onto flat index sets, and matrix multiplication unifies
    the two contracted variables.  Variables reaching the loss, or mixed with
    an unprunable dimension, are frozen and excluded.
    """
    uf = _UnionFind()
    owner_size: dict[int, int] = {}
    frozen: set[int] = set()
    slices: dict[int, list[MemberSlice]] = {}
    var_order: dict[int, int] = {}  # creation order for deterministic gids
    next_var = [0]

    def new_var(n: int) -> int:
        v = next_var[0]
        next_var[0] += 1
        uf.make(v)
        owner_size[v] = n
        slices[v] = []
        var_order[v] = v
        return v

    def freeze(ann):
        if ann is not None:
            frozen.add(ann[0])  # resolved to roots only after all unions

    def add_slice(var: int, sl: MemberSlice):
        slices[var].append(sl)

    # annotation per node output: tuple over per-sample axes of None | (var, idx)
    anns: dict[str, tuple] = {INPUT_ID: tuple([None] * len(g.input_shape))}

    def unify(a, b):
        """Unify two (var, idx) annotations; returns merged ann or None (frozen)."""
        if a is None and b is None:
            return None
        if a is None or b is None:
            freeze(a)
            freeze(b)
            return None
        va, ia = a
        vb, ib = b
        if owner_size[uf.find(va)] != owner_size[uf.find(vb)] or not _same_idx(ia, ib):
            freeze(a)
            freeze(b)
            return None
        uf.union(va, vb)
        return (va, ia)

    for nid in g.topo:
        nd = g.node(nid)
        in_anns = [anns[src] for src in g.producers[nid]]
        kind = nd.kind

        if kind == "Linear":
            ann = in_anns[0][-1]
            if ann is not None:
                v, idx = ann
                add_slice(uf.find(v), MemberSlice(nid, "weight", 1, "consumer", idx))
            n = nd.attrs["out_features"]
            v = new_var(n)
            ident = _identity_idx(n)
            add_slice(v, MemberSlice(nid, "weight", 0, "producer", ident))
            add_slice(v, MemberSlice(nid, "bias", 0, "producer", ident))
            anns[nid] = tuple(in_anns[0][:-1]) + ((v, ident),)

        elif kind == "Conv2d":
            ann = in_anns[0][0]
            if ann is not None:
                v, idx = ann
                add_slice(uf.find(v), MemberSlice(nid, "weight", 1, "consumer", idx))
            n = nd.attrs["out_channels"]
            v = new_var(n)
            ident = _identity_idx(n)
            add_slice(v, MemberSlice(nid, "weight", 0, "producer", ident))
            add_slice(v, MemberSlice(nid, "bias", 0, "producer", ident))
            anns[nid] = ((v, ident), None, None)

        elif kind == "LayerNorm":
            ann = in_anns[0][-1]
            if ann is not None:
                v, idx = ann
                root = uf.find(v)
                add_slice(root, MemberSlice(nid, "weight", 0, "producer", idx))
                add_slice(root, MemberSlice(nid, "bias", 0, "producer", idx))
            anns[nid] = in_anns[0]

        elif kind in ("ReLU", "Softmax", "Scale"):
            anns[nid] = in_anns[0]

        elif kind in ("AvgPool", "MaxPool"):
            anns[nid] = (in_anns[0][0], None, None)

        elif kind == "Add":
            merged = []
            for axis in range(len(in_anns[0])):
                cur = in_anns[0][axis]
                for other in in_anns[1:]:
                    cur = unify(cur, other[axis])
                    if cur is None:
                        # freeze stragglers on this axis
                        for oo in in_anns:
                            freeze(oo[axis])
                        break
                merged.append(cur)
            anns[nid] = tuple(merged)

        elif kind == "Flatten":
            in_ann = in_anns[0]
            vared = [a for a, ann in enumerate(in_ann) if ann is not None]
            if len(vared) == 0:
                anns[nid] = (None,)
            elif len(vared) == 1:
                axis = vared[0]
                v, idx = in_ann[axis]
                shape = g.in_shapes(nid)[0]
                full = np.arange(int(np.prod(shape))).reshape(shape)
                flat_idx = [np.sort(full.take(ij, axis=axis).ravel()) for ij in idx]
                anns[nid] = ((v, flat_idx),)
            else:
                for a in vared:
                    freeze(in_ann[a])
                anns[nid] = (None,)

        elif kind == "MatMul":
            left, right = in_anns
            tr = bool(nd.attrs.get("transpose_right", False))
            r_eff = (right[1], right[0]) if tr else right
            unify(left[1], r_eff[0])  # contracted dims prune together
            anns[nid] = (left[0], r_eff[1])

        elif kind in ("CrossEntropyLoss", "LinearLoss"):
            for ann in in_anns[0]:
                freeze(ann)
            anns[nid] = ()

        else:  # pragma: no cover - all kinds handled above
            raise GraphValidationError(f"{nid}: no grouping rule for kind {kind}")

    # resolve roots, merge member slices, drop frozen
    roots: dict[int, list[MemberSlice]] = {}
    for v, sls in slices.items():
        root = uf.find(v)
        roots.setdefault(root, []).extend(sls)
    frozen_roots = {uf.find(v) for v in frozen}
    groups = []
    live = sorted(r for r in roots if r not in frozen_roots)
    for i, root in enumerate(live):
        members = roots[root]
        members.sort(key=lambda m: (m.layer, m.param, m.axis))
        sizes = {len(m.idx) for m in members}
        if len(sizes) != 1:
            raise GraphValidationError(
                f"group over layers {sorted({m.layer for m in members})} has "
                f"inconsistent neuron counts {sorted(sizes)}"
            )
        groups.append(GroupSpec(f"g{i:02d}", sizes.pop(), members))
    return groups

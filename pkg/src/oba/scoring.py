"""Importance criteria.

``oba_score_batch`` assembles, per parameter entry, the first-order term plus
three second-order pieces of the loss perturbation under ``theta -> theta +
delta``:

* upper-series: for every parameter layer, the recorded output gradient is
  pulled through that layer's bias-free input map with the perturbation as
  weights, and the resulting cotangent is backpropagated into every parameter
  layer below (one fused reverse sweep for all layers at once);
* lower-series: the layer's own weight-gradient computation evaluated with
  its input replaced by the accumulated tangent from layers below (biases
  take no such term: their gradient does not involve the input);
* parallel: for every matrix multiplication, the output gradient contracted
  with one operand's accumulated tangent is backpropagated down the other
  operand's side.

Baseline criteria (taylor / weight / obd / random) share the table format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, backward_from_seeds, forward, jvpf_run
from .connectivity import parallel_sets
from .graph import NetworkGraph
from .tensor import conv_out_hw

SECOND_ORDER = ("upper_series", "lower_series", "parallel")
COMPONENTS = ("first_order",) + SECOND_ORDER

# fault-injection hook for the verification command; production value is 1.0
_PARALLEL_SIGN = 1.0


class DatasetExhaustedError(RuntimeError):
    pass


class ParameterCapError(RuntimeError):
    pass


@dataclass
class DeltaRule:
    """Perturbation direction: the parameter itself, or custom tensors."""

    kind: str = "param_itself"  # "param_itself" | "custom"
    tangents: dict[str, dict[str, np.ndarray]] | None = None

    @staticmethod
    def param_itself() -> "DeltaRule":
        return DeltaRule("param_itself")

    @staticmethod
    def custom(tangents) -> "DeltaRule":
        return DeltaRule("custom", tangents)

    def describe(self) -> dict:
        return {"kind": self.kind}


def resolve_rule(g: NetworkGraph, rule: DeltaRule) -> dict[str, dict[str, np.ndarray]]:
    if rule.kind == "param_itself":
        return {
            pid: {k: v.copy() for k, v in g.node(pid).params.items()}
            for pid in g.param_layers()
        }
    if rule.kind == "custom":
        out = {}
        for pid in g.param_layers():
            if pid not in rule.tangents:
                raise ValueError(f"custom delta rule missing layer {pid!r}")
            src = rule.tangents[pid]
            out[pid] = {}
            for name, p in g.node(pid).params.items():
                arr = np.asarray(src[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(
                        f"{pid}.{name}: delta shape {arr.shape} != {p.shape}"
                    )
                out[pid][name] = arr
        return out
    raise ValueError(f"unknown delta rule {rule.kind!r}")


@dataclass
class ImportanceTable:
    criterion: str
    batches: int
    rule: dict = field(default_factory=dict)
    graph_hash: str = ""
    # entries[pid][pname][component] -> array shaped like the parameter
    entries: dict[str, dict[str, dict[str, np.ndarray]]] = field(default_factory=dict)
    aggregated: bool = False

    def total(self, pid: str, pname: str) -> np.ndarray:
        return self.entries[pid][pname]["total"]

    def second_order(self, pid: str, pname: str) -> np.ndarray:
        comp = self.entries[pid][pname]
        out = np.zeros_like(comp["total"])
        for name in SECOND_ORDER:
            if name in comp:
                out = out + comp[name]
        return out

    def param_items(self):
        for pid in self.entries:
            for pname in self.entries[pid]:
                yield pid, pname


def _zero_like_params(g: NetworkGraph) -> dict:
    return {
        pid: {k: np.zeros_like(v) for k, v in g.node(pid).params.items()}
        for pid in g.param_layers()
    }


def _table_from_components(g, criterion, comps, batches=1, rule=None) -> ImportanceTable:
    table = ImportanceTable(criterion, batches, rule.describe() if rule else {})
    for pid in g.param_layers():
        table.entries[pid] = {}
        for pname, p in g.node(pid).params.items():
            entry = {}
            total = np.zeros_like(p)
            for cname, cdict in comps.items():
                arr = cdict.get(pid, {}).get(pname)
                arr = np.zeros_like(p) if arr is None else arr
                entry[cname] = arr
                total = total + arr
            entry["total"] = total
            table.entries[pid][pname] = entry
    return table


def oba_score_batch(
    g: NetworkGraph, batch, targets, rule: DeltaRule | None = None
) -> ImportanceTable:
    """Full importance decomposition on one batch."""
    rule = rule or DeltaRule.param_itself()
    cmap = parallel_sets(g)  # rejects unsupported weight sharing up front
    deltas = resolve_rule(g, rule)
    cache = forward(g, batch, targets)
    grads = backward(g, cache)

    first = _zero_like_params(g)
    for pid in g.param_layers():
        for pname, gp in grads.param_grads[pid].items():
            first[pid][pname] = gp * deltas[pid][pname]

    # upper-series: seed every parameter layer's input edge with its output
    # gradient pulled through the perturbation-weight input map
    seeds: dict[tuple[str, int], np.ndarray] = {}
    for pid in g.param_layers():
        nd = g.node(pid)
        cot = nd.ops.input_map_vjp_with_weights(
            nd,
            grads.output_grads[pid],
            deltas[pid]["weight"],
            cache.inputs[pid],
            cache.ctx[pid],
        )
        seeds[(pid, 0)] = cot
    upper_grads = backward_from_seeds(g, cache, seeds)
    upper = _zero_like_params(g)
    for pid, gp in upper_grads.items():
        for pname, arr in gp.items():
            upper[pid][pname] = arr * deltas[pid][pname]

    # lower-series: weight gradient evaluated at the accumulated input tangent
    tangents = jvpf_run(g, cache, rule)
    lower = _zero_like_params(g)
    for pid in g.param_layers():
        nd = g.node(pid)
        x_tan = tangents.input_tangents[pid][0]
        if nd.kind == "LayerNorm":
            wg = nd.ops.weight_grad_at_input(nd, grads.output_grads[pid], x_tan, nd.params, cache.ctx[pid])
        else:
            wg = nd.ops.weight_grad_at_input(nd, grads.output_grads[pid], x_tan, nd.params)
        for pname, arr in wg.items():
            lower[pid][pname] = arr * deltas[pid][pname]

    # parallel: per multiplication, contract the output gradient with one
    # side's tangent and backpropagate down the other side
    par_seeds: dict[tuple[str, int], np.ndarray] = {}
    for mid in cmap.left:
        nd = g.node(mid)
        gout = grads.output_grads[mid]
        lt, rt = tangents.input_tangents[mid]
        cot_left, cot_right = nd.ops.side_cotangents(nd, gout, lt, rt)
        par_seeds[(mid, 0)] = _PARALLEL_SIGN * cot_left
        par_seeds[(mid, 1)] = _PARALLEL_SIGN * cot_right
    parallel = _zero_like_params(g)
    if par_seeds:
        par_grads = backward_from_seeds(g, cache, par_seeds)
        for pid, gp in par_grads.items():
            for pname, arr in gp.items():
                parallel[pid][pname] = arr * deltas[pid][pname]

    comps = {
        "first_order": first,
        "upper_series": upper,
        "lower_series": lower,
        "parallel": parallel,
    }
    return _table_from_components(g, "oba", comps, batches=1, rule=rule)


def _mean_tables(tables: list[ImportanceTable]) -> ImportanceTable:
    out = tables[0]
    if len(tables) == 1:
        out.aggregated = True
        return out
    acc = ImportanceTable(out.criterion, len(tables), out.rule, out.graph_hash)
    for pid in out.entries:
        acc.entries[pid] = {}
        for pname in out.entries[pid]:
            comp_names = out.entries[pid][pname].keys()
            acc.entries[pid][pname] = {
                c: np.mean([t.entries[pid][pname][c] for t in tables], axis=0)
                for c in comp_names
            }
    acc.aggregated = True
    return acc


def _take_batches(dataset, n: int):
    it = iter(dataset)
    out = []
    for i in range(n):
        try:
            out.append(next(it))
        except StopIteration:
            raise DatasetExhaustedError(
                f"dataset yielded only {i} of the {n} requested batches"
            ) from None
    return out


def oba_importance(g: NetworkGraph, dataset, B: int, rule: DeltaRule | None = None) -> ImportanceTable:
    """Mean of per-batch scores over the first ``B`` batches, in order."""
    if B < 1:
        raise ValueError("B must be >= 1")
    rule = rule or DeltaRule.param_itself()
    tables = [oba_score_batch(g, x, y, rule) for x, y in _take_batches(dataset, B)]
    return _mean_tables(tables)


def taylor_importance(g: NetworkGraph, dataset, B: int) -> ImportanceTable:
    """|gradient x parameter| per entry, averaged over batches."""
    if B < 1:
        raise ValueError("B must be >= 1")
    tables = []
    for x, y in _take_batches(dataset, B):
        cache = forward(g, x, y)
        grads = backward(g, cache)
        comp = {
            pid: {
                pname: np.abs(gp * g.node(pid).params[pname])
                for pname, gp in grads.param_grads[pid].items()
            }
            for pid in g.param_layers()
        }
        tables.append(_table_from_components(g, "taylor", {"first_order": comp}))
    return _mean_tables(tables)


def weight_importance(g: NetworkGraph) -> ImportanceTable:
    """|parameter| per entry; data-free."""
    comp = {
        pid: {pname: np.abs(p) for pname, p in g.node(pid).params.items()}
        for pid in g.param_layers()
    }
    return _table_from_components(g, "weight", {"magnitude": comp})


def random_importance(g: NetworkGraph, seed: int = 0) -> ImportanceTable:
    rng = np.random.default_rng(seed)
    comp = {
        pid: {pname: rng.random(p.shape) for pname, p in g.node(pid).params.items()}
        for pid in g.param_layers()
    }
    return _table_from_components(g, "random", {"random": comp})


def obd_importance(
    g: NetworkGraph, dataset, B: int, cap: int = 2000
) -> ImportanceTable:
    """Diagonal second-order criterion ``0.5 * theta^2 * H_qq``.

    The diagonal is taken by central differences of the gradient entry,
    eps = 1e-4 * max(1, |theta_q|); cost is two backward passes per parameter
    per batch, so a parameter cap guards against misuse.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    n_params = sum(
        p.size for pid in g.param_layers() for p in g.node(pid).params.values()
    )
    if n_params > cap:
        raise ParameterCapError(
            f"obd_importance is a desk-scale operation: {n_params} parameters "
            f"exceed the cap of {cap}"
        )
    tables = []
    for x, y in _take_batches(dataset, B):
        comp = _zero_like_params(g)
        for pid in g.param_layers():
            nd = g.node(pid)
            for pname, p in nd.params.items():
                diag = np.zeros(p.size)
                for q in range(p.size):
                    saved = p.flat[q]
                    eps = 1e-4 * max(1.0, abs(saved))
                    p.flat[q] = saved + eps
                    gp = backward(g, forward(g, x, y)).param_grads[pid][pname].flat[q]
                    p.flat[q] = saved - eps
                    gm = backward(g, forward(g, x, y)).param_grads[pid][pname].flat[q]
                    p.flat[q] = saved
                    diag[q] = (gp - gm) / (2 * eps)
                comp[pid][pname] = 0.5 * p**2 * diag.reshape(p.shape)
        tables.append(_table_from_components(g, "obd", {"diag_second_order": comp}))
    return _mean_tables(tables)


def materialize_m(node, cap: int = 10_000_000, in_shape=None) -> np.ndarray:
    """Explicit {0,1} connection tensor of the layer's general bilinear form.

    For an output written as ``Y[a,b] = sum_cde W[a,c,d] X[c,e] M[b,d,e] +
    bias[a]`` this returns ``M`` with shape [p_out, p_weight, p_in]: a single
    1 for a fully connected layer, and the kernel-position/input-position
    incidence pattern for a convolution (``in_shape`` = (C,H,W) input).
    """
    if node.kind == "Linear":
        return np.ones((1, 1, 1), dtype=np.float64)
    if node.kind != "Conv2d":
        raise ValueError(f"{node.id}: no bilinear connection tensor for {node.kind}")
    a = node.attrs
    k, stride, pad = a["kernel"], a.get("stride", 1), a.get("pad", 0)
    if in_shape is None:
        raise ValueError("materialize_m for Conv2d needs the (C,H,W) input shape")
    _, h, w = in_shape
    oh, ow = conv_out_hw(h, w, k, stride, pad)
    p_out, p_weight, p_in = oh * ow, k * k, h * w
    if p_out * p_weight * p_in > cap:
        raise ParameterCapError(
            f"connection tensor would hold {p_out * p_weight * p_in} entries, cap {cap}"
        )
    m = np.zeros((p_out, p_weight, p_in), dtype=np.float64)
    for oy in range(oh):
        for ox in range(ow):
            b = oy * ow + ox
            for ky in range(k):
                for kx in range(k):
                    iy = oy * stride + ky - pad
                    ix = ox * stride + kx - pad
                    if 0 <= iy < h and 0 <= ix < w:
                        m[b, ky * k + kx, iy * w + ix] = 1.0
    return m


def eq_bilinear_apply(w: np.ndarray, x: np.ndarray, m: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Evaluate the explicit bilinear form ``Y[a,b] = sum W X M + bias[a]``.

    ``w``: [l_out, l_in, p_weight], ``x``: [l_in, p_in], ``m``:
    [p_out, p_weight, p_in]; returns [l_out, p_out].
    """
    return np.einsum("acd,ce,bde->ab", w, x, m) + bias[:, None]

"""Brute-force verification oracles.

These deliberately avoid the fused sweeps of the production scorer: every
Jacobian is materialised as a dense matrix from repeated single-entry passes,
and wherever the production path uses one differentiation direction the
oracle uses the opposite one (activation/parameter Jacobians come from
one-hot reverse sweeps; per-node surrogate maps from one-hot forward passes).
The adjoint-identity tests tie the two directions together.
"""

from __future__ import annotations

import numpy as np

from .autodiff import backward, backward_from_seeds, forward
from .connectivity import parallel_sets
from .graph import NetworkGraph
from .scoring import (
    DeltaRule,
    ImportanceTable,
    ParameterCapError,
    _table_from_components,
    _zero_like_params,
    resolve_rule,
)


def _param_count(g: NetworkGraph) -> int:
    return sum(p.size for pid in g.param_layers() for p in g.node(pid).params.values())


def _param_order(g: NetworkGraph):
    return [
        (pid, pname)
        for pid in g.param_layers()
        for pname in sorted(g.node(pid).params)
    ]


def dense_activation_param_jacobian(
    g: NetworkGraph, cache, edge: tuple[str, int]
) -> dict[str, dict[str, np.ndarray]]:
    """Dense d(activation on edge)/d(theta) per parameter layer.

    Built row-by-row: each scalar of the edge activation is seeded with a
    one-hot cotangent and backpropagated.  Returns, per layer and parameter
    name, a matrix [edge_size, param_size].
    """
    dst, slot = edge
    act = cache.inputs[dst][slot]
    n = act.size
    jac = {
        pid: {pn: np.zeros((n, g.node(pid).params[pn].size)) for pn in g.node(pid).params}
        for pid in g.param_layers()
    }
    seed = np.zeros_like(act)
    for i in range(n):
        seed.flat[i] = 1.0
        grads = backward_from_seeds(g, cache, {edge: seed})
        seed.flat[i] = 0.0
        for pid, gp in grads.items():
            for pn, arr in gp.items():
                jac[pid][pn][i, :] = arr.ravel()
    return jac


def dense_surrogate_input_jacobian(g, cache, pid: str, w_sub: np.ndarray) -> np.ndarray:
    """Dense Jacobian of a parameter layer's bias-free input map, with the
    weights replaced by ``w_sub``, built from one-hot forward passes."""
    nd = g.node(pid)
    x = cache.inputs[pid][0]
    y = cache.outputs[pid]
    jac = np.zeros((y.size, x.size))
    basis = np.zeros_like(x)
    for j in range(x.size):
        basis.flat[j] = 1.0
        col = nd.ops.input_map_jvp_with_weights(nd, basis, w_sub, cache.inputs[pid], cache.ctx[pid])
        basis.flat[j] = 0.0
        jac[:, j] = col.ravel()
    return jac


def dense_weight_jacobian_at_input(g, cache, pid: str, x_sub: np.ndarray) -> np.ndarray:
    """Dense d(output)/d(weight) with the layer input replaced by ``x_sub``,
    one weight entry at a time."""
    nd = g.node(pid)
    w = nd.params["weight"]
    y = cache.outputs[pid]
    jac = np.zeros((y.size, w.size))
    basis = np.zeros_like(w)
    if nd.kind == "LayerNorm":
        # the affine stage reads the core tangent of the substituted input
        sub = nd.ops.core_jvp(x_sub, cache.ctx[pid])
        for j in range(w.size):
            basis.flat[j] = 1.0
            jac[:, j] = (basis * sub).ravel()
            basis.flat[j] = 0.0
        return jac
    for j in range(w.size):
        basis.flat[j] = 1.0
        col = nd.ops.input_map_jvp_with_weights(nd, x_sub, basis, cache.inputs[pid], cache.ctx[pid])
        basis.flat[j] = 0.0
        jac[:, j] = col.ravel()
    return jac


def oracle_dense_second_order(
    g: NetworkGraph, batch, targets, rule: DeltaRule | None = None, cap: int = 5000
) -> ImportanceTable:
    """Direct dense evaluation of the three second-order terms.

    All activation/parameter Jacobians come from per-entry reverse passes and
    all per-node surrogate maps from per-entry forward passes; terms are then
    assembled by explicit matrix products.
    """
    rule = rule or DeltaRule.param_itself()
    n_params = _param_count(g)
    if n_params > cap:
        raise ParameterCapError(
            f"dense oracle caps at {cap} parameters, graph has {n_params}"
        )
    cmap = parallel_sets(g)
    deltas = resolve_rule(g, rule)
    cache = forward(g, batch, targets)
    grads = backward(g, cache)
    params = g.param_layers()

    # dense activation Jacobians at every parameter-layer input edge and
    # every multiplication operand edge
    edges = [(pid, 0) for pid in params]
    for mid in cmap.left:
        edges += [(mid, 0), (mid, 1)]
    edge_jac = {e: dense_activation_param_jacobian(g, cache, e) for e in edges}

    def tangent_at(edge) -> np.ndarray:
        act = cache.inputs[edge[0]][edge[1]]
        out = np.zeros(act.size)
        for pid in params:
            for pn in sorted(g.node(pid).params):
                out += edge_jac[edge][pid][pn] @ deltas[pid][pn].ravel()
        return out.reshape(act.shape)

    upper = _zero_like_params(g)
    for up in params:
        u = grads.output_grads[up].ravel()
        j_sub = dense_surrogate_input_jacobian(g, cache, up, deltas[up]["weight"])
        row = u @ j_sub  # cotangent on the input edge of `up`
        for pid in params:
            if pid == up:
                continue
            for pn in sorted(g.node(pid).params):
                d = edge_jac[(up, 0)][pid][pn]
                contrib = (row @ d) * deltas[pid][pn].ravel()
                upper[pid][pn] += contrib.reshape(upper[pid][pn].shape)

    lower = _zero_like_params(g)
    for pid in params:
        x_sub = tangent_at((pid, 0))
        jw = dense_weight_jacobian_at_input(g, cache, pid, x_sub)
        u = grads.output_grads[pid].ravel()
        lower[pid]["weight"] = ((u @ jw) * deltas[pid]["weight"].ravel()).reshape(
            g.node(pid).params["weight"].shape
        )

    parallel = _zero_like_params(g)
    for mid in cmap.left:
        nd = g.node(mid)
        u = grads.output_grads[mid].ravel()
        left_tan = tangent_at((mid, 0))
        right_tan = tangent_at((mid, 1))
        left_p, right_p = cache.inputs[mid]
        # Jacobian w.r.t. the right operand with the left replaced by its
        # tangent (and mirrored): bilinear, so evaluate by one-hot passes
        # against the substituted operand.
        jr = np.zeros((cache.outputs[mid].size, right_p.size))
        basis = np.zeros_like(right_p)
        for j in range(right_p.size):
            basis.flat[j] = 1.0
            col = nd.ops.jvp(nd, (left_tan, right_p), (np.zeros_like(left_tan), basis), None, None, None)
            basis.flat[j] = 0.0
            jr[:, j] = col.ravel()
        jl = np.zeros((cache.outputs[mid].size, left_p.size))
        basis = np.zeros_like(left_p)
        for j in range(left_p.size):
            basis.flat[j] = 1.0
            col = nd.ops.jvp(nd, (left_p, right_tan), (basis, np.zeros_like(right_tan)), None, None, None)
            basis.flat[j] = 0.0
            jl[:, j] = col.ravel()
        row_r = u @ jr
        row_l = u @ jl
        for pid in cmap.right[mid]:
            for pn in sorted(g.node(pid).params):
                d = edge_jac[(mid, 1)][pid][pn]
                contrib = (row_r @ d) * deltas[pid][pn].ravel()
                parallel[pid][pn] += contrib.reshape(parallel[pid][pn].shape)
        for pid in cmap.left[mid]:
            for pn in sorted(g.node(pid).params):
                d = edge_jac[(mid, 0)][pid][pn]
                contrib = (row_l @ d) * deltas[pid][pn].ravel()
                parallel[pid][pn] += contrib.reshape(parallel[pid][pn].shape)

    comps = {"upper_series": upper, "lower_series": lower, "parallel": parallel}
    table = _table_from_components(g, "oracle_dense", comps, rule=rule)
    return table


def oracle_true_hvp(
    g: NetworkGraph, batch, targets, rule: DeltaRule | None = None
) -> dict[str, dict[str, np.ndarray]]:
    """Per-parameter values of the full curvature contraction
    ``sum_j H_ij delta_i delta_j`` by central differences of the gradient
    along the perturbation direction.  Diagnostic: includes the intra-layer
    blocks the analytic decomposition omits."""
    rule = rule or DeltaRule.param_itself()
    deltas = resolve_rule(g, rule)
    order = _param_order(g)
    norm = float(np.sqrt(sum(float((deltas[p][n] ** 2).sum()) for p, n in order)))
    if norm == 0.0:
        return _zero_like_params(g)
    eps = 1e-4 / norm

    def grad_at(sign: float):
        shifted = {
            pid: {
                pn: g.node(pid).params[pn] + sign * eps * deltas[pid][pn]
                for pn in g.node(pid).params
            }
            for pid in g.param_layers()
        }
        g2 = g.copy_with_params(shifted)
        return backward(g2, forward(g2, batch, targets)).param_grads

    gp = grad_at(+1.0)
    gm = grad_at(-1.0)
    out = _zero_like_params(g)
    for pid, pn in order:
        out[pid][pn] = (gp[pid][pn] - gm[pid][pn]) / (2 * eps) * deltas[pid][pn]
    return out


def oracle_hessian_diag(g: NetworkGraph, batch, targets, cap: int = 2000):
    """Dense Hessian diagonal by second differences of the loss; the
    independent check for the diagonal criterion."""
    n_params = _param_count(g)
    if n_params > cap:
        raise ParameterCapError(f"hessian diagonal oracle caps at {cap} parameters")
    out = _zero_like_params(g)
    base = forward(g, batch, targets).loss
    for pid in g.param_layers():
        for pn, p in g.node(pid).params.items():
            diag = np.zeros(p.size)
            for q in range(p.size):
                saved = p.flat[q]
                eps = 1e-3 * max(1.0, abs(saved))
                p.flat[q] = saved + eps
                lp = forward(g, batch, targets).loss
                p.flat[q] = saved - eps
                lm = forward(g, batch, targets).loss
                p.flat[q] = saved
                diag[q] = (lp - 2 * base + lm) / (eps * eps)
            out[pid][pn] = diag.reshape(p.shape)
    return out


def directional_derivative_fd(g: NetworkGraph, batch, targets, rule: DeltaRule, eps: float = 1e-4):
    """Central finite difference of the loss along the perturbation."""
    deltas = resolve_rule(g, rule)

    def loss_at(sign):
        shifted = {
            pid: {
                pn: g.node(pid).params[pn] + sign * eps * deltas[pid][pn]
                for pn in g.node(pid).params
            }
            for pid in g.param_layers()
        }
        g2 = g.copy_with_params(shifted)
        return forward(g2, batch, targets).loss

    return (loss_at(+1.0) - loss_at(-1.0)) / (2 * eps)

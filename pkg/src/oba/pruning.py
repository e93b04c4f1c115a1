"""Turning importance tables into pruning decisions.

Covers per-group score normalisation, neuron-level score gathering, global
ranking with group protection, physical mask application (structured rebuild
or weight zeroing), the iterative FLOPs-targeting loop, the multi-stage
unstructured workflow, and rank-correlation evaluation against masking
ground truth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import forward
from .connectivity import GroupSpec, discover_groups
from .graph import NetworkGraph, count_flops, parse_network
from .layers import GraphValidationError
from .scoring import (
    DeltaRule,
    ImportanceTable,
    oba_importance,
    obd_importance,
    random_importance,
    taylor_importance,
    weight_importance,
)

NORMALIZATIONS = ("none", "standardization", "max", "l2")


class PruneScheduleError(RuntimeError):
    pass


@dataclass
class PruneMask:
    mode: str  # "structured" | "unstructured"
    groups: list[GroupSpec] | None = None
    keep: dict[str, np.ndarray] | None = None  # gid -> sorted kept neuron indices
    masks: dict[str, dict[str, np.ndarray]] | None = None  # pid -> {name: bool keep}
    meta: dict = field(default_factory=dict)

    def pruned_count(self) -> int:
        if self.mode == "structured":
            return sum(
                g.size - len(self.keep[g.gid]) for g in self.groups
            )
        return int(
            sum((~m).sum() for entry in self.masks.values() for m in entry.values())
        )


@dataclass
class NeuronScores:
    groups: list[GroupSpec]
    scores: dict[str, np.ndarray]  # gid -> per-neuron score vector
    n_upper: dict[str, int] = field(default_factory=dict)
    n_lower: dict[str, int] = field(default_factory=dict)
    graph_hash: str = ""


def _slice_sum(arr: np.ndarray, axis: int, idx: np.ndarray) -> float:
    return float(np.take(arr, idx, axis=axis).sum())


def gather_neuron_scores(table: ImportanceTable, groups: list[GroupSpec], graph_hash: str = "") -> NeuronScores:
    """Per-neuron sums of raw parameter scores over every member slice."""
    if graph_hash and table.graph_hash and graph_hash != table.graph_hash:
        raise ValueError(
            f"importance table was computed for a different graph "
            f"({table.graph_hash[:12]} != {graph_hash[:12]})"
        )
    scores = {}
    n_upper = {}
    n_lower = {}
    for grp in groups:
        vec = np.zeros(grp.size)
        for m in grp.members:
            arr = table.total(m.layer, m.param)
            for j in range(grp.size):
                vec[j] += _slice_sum(arr, m.axis, m.idx[j])
        scores[grp.gid] = vec
        n_upper[grp.gid] = len(grp.consumers)
        n_lower[grp.gid] = len(grp.producers)
    return NeuronScores(groups, scores, n_upper, n_lower, graph_hash or table.graph_hash)


def normalize_scores(ns: NeuronScores, method: str) -> NeuronScores:
    """Per-group normalisation: none | standardization (min-max) | max | l2."""
    method = method.lower()
    if method not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {method!r}; pick one of {NORMALIZATIONS}")
    out = {}
    for gid, v in ns.scores.items():
        if v.size == 0:
            raise ValueError(f"group {gid} has an empty score vector")
        if method == "none":
            out[gid] = v.copy()
        elif method == "standardization":
            lo, hi = v.min(), v.max()
            if hi == lo:
                out[gid] = np.zeros_like(v)  # declared convention for flat groups
            else:
                out[gid] = (v - lo) / (hi - lo)
        elif method == "max":
            m = v.max()
            if m == 0.0:
                warnings.warn(f"group {gid}: max normalisation of an all-zero vector")
                out[gid] = v.copy()
            else:
                out[gid] = v / m
        else:  # l2
            n = np.linalg.norm(v)
            if n == 0.0:
                warnings.warn(f"group {gid}: l2 normalisation of an all-zero vector")
                out[gid] = v.copy()
            else:
                out[gid] = v / n
    return NeuronScores(ns.groups, out, dict(ns.n_upper), dict(ns.n_lower), ns.graph_hash)


def rank_and_select(scores, p: float) -> PruneMask:
    """Mark the globally lowest ``floor(p*N)`` items pruned.

    ``scores`` is either :class:`NeuronScores` (structured; each group keeps
    at least its best neuron) or a per-parameter mapping
    ``pid -> {name: score array}`` (unstructured).  Ties break by id/index.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"pruning fraction must be in [0, 1), got {p}")

    if isinstance(scores, NeuronScores):
        items = []
        for grp in scores.groups:
            v = scores.scores[grp.gid]
            items.extend((float(v[j]), grp.gid, j) for j in range(grp.size))
        items.sort()
        n_prune = int(np.floor(p * len(items)))
        pruned: dict[str, set[int]] = {}
        for score, gid, j in items[:n_prune]:
            pruned.setdefault(gid, set()).add(j)
        keep = {}
        protected = 0
        for grp in scores.groups:
            dead = pruned.get(grp.gid, set())
            if len(dead) == grp.size:
                v = scores.scores[grp.gid]
                best = int(np.argmax(v))  # first index wins ties
                dead = dead - {best}
                protected += 1
            keep[grp.gid] = np.array(sorted(set(range(grp.size)) - dead), dtype=int)
        mask = PruneMask("structured", groups=scores.groups, keep=keep)
        mask.meta = {
            "requested": n_prune,
            "pruned": sum(grp.size - len(keep[grp.gid]) for grp in scores.groups),
            "protected_groups": protected,
        }
        return mask

    items = []
    for pid in sorted(scores):
        for pname in sorted(scores[pid]):
            v = scores[pid][pname].ravel()
            items.extend((float(v[i]), pid, pname, i) for i in range(v.size))
    items.sort()
    n_prune = int(np.floor(p * len(items)))
    masks = {
        pid: {pname: np.ones(arr.shape, dtype=bool) for pname, arr in entry.items()}
        for pid, entry in scores.items()
    }
    for score, pid, pname, i in items[:n_prune]:
        masks[pid][pname].flat[i] = False
    mask = PruneMask("unstructured", masks=masks)
    mask.meta = {"requested": n_prune, "pruned": n_prune}
    return mask


def _structured_keep_indices(mask: PruneMask):
    """Per (layer, param, axis): sorted kept index array, from group keeps."""
    out: dict[tuple[str, str, int], np.ndarray] = {}
    for grp in mask.groups:
        kept = mask.keep[grp.gid]
        for m in grp.members:
            ids = np.sort(np.concatenate([m.idx[j] for j in kept])) if len(kept) else np.array([], dtype=int)
            key = (m.layer, m.param, m.axis)
            if key in out and not np.array_equal(out[key], ids):
                raise GraphValidationError(
                    f"conflicting keep sets for {key} across groups"
                )
            out[key] = ids.astype(int)
    return out


def apply_mask(g: NetworkGraph, mask: PruneMask) -> NetworkGraph:
    """Realise a mask: structured masks rebuild a physically smaller graph,
    unstructured masks zero the masked entries (training keeps them frozen)."""
    if mask.mode == "unstructured":
        new_params = {}
        for pid, entry in mask.masks.items():
            cur = g.node(pid).params
            new_params[pid] = {
                pname: cur[pname] * entry[pname].astype(np.float64)
                for pname in cur
            }
        return g.copy_with_params(new_params)

    if mask.mode != "structured":
        raise ValueError(f"unknown mask mode {mask.mode!r}")
    for grp in mask.groups:
        if len(mask.keep[grp.gid]) == 0:
            raise GraphValidationError(f"group {grp.gid}: keep-set must not be empty")

    keep_idx = _structured_keep_indices(mask)
    nodes = []
    for nid in (entry["id"] for entry in g.to_spec()["nodes"]):
        nd = g.node(nid)
        attrs = dict(nd.attrs)
        entry = {"id": nid, "kind": nd.kind, "attrs": attrs}
        if nd.params is not None:
            new_p = {}
            for pname, arr in nd.params.items():
                for axis in range(arr.ndim):
                    ids = keep_idx.get((nid, pname, axis))
                    if ids is not None:
                        arr = np.take(arr, ids, axis=axis)
                new_p[pname] = arr
            entry["init"] = new_p
            if nd.kind == "Linear":
                attrs["out_features"] = new_p["weight"].shape[0]
                attrs["in_features"] = new_p["weight"].shape[1]
            elif nd.kind == "Conv2d":
                attrs["out_channels"] = new_p["weight"].shape[0]
                attrs["in_channels"] = new_p["weight"].shape[1]
            elif nd.kind == "LayerNorm":
                attrs["dim"] = new_p["weight"].shape[0]
        nodes.append(entry)
    doc = {
        "input_shape": list(g.input_shape),
        "loss": g.loss_id,
        "nodes": nodes,
        "edges": [list(e) for e in g.edges],
    }
    return parse_network(doc)


def group_masking_hooks(groups: list[GroupSpec], keep: dict[str, np.ndarray], g: NetworkGraph):
    """Forward hooks that zero pruned neurons' producer outputs; the masked
    forward of the original graph must match the pruned graph exactly."""
    hooks = {}
    for grp in groups:
        dead = sorted(set(range(grp.size)) - set(int(j) for j in keep[grp.gid]))
        if not dead:
            continue
        for m in grp.producers:
            if m.param != "weight":
                continue
            axis = 1 if g.node(m.layer).kind == "Conv2d" else -1
            idx = np.concatenate([m.idx[j] for j in dead])
            hooks[m.layer] = (axis, np.sort(idx))
    return hooks


# ---------------------------------------------------------------------------
# workflows
# ---------------------------------------------------------------------------


@dataclass
class PruneSchedule:
    p0: float = 0.05
    growth: float = 1.3
    max_steps: int = 50
    batches: int = 1
    normalization: str = "max"
    rule: DeltaRule = field(default_factory=DeltaRule.param_itself)
    seed: int = 0
    obd_cap: int = 2000


def compute_importance(
    g: NetworkGraph, dataset, criterion: str, B: int, rule: DeltaRule, seed: int = 0, obd_cap: int = 2000
) -> ImportanceTable:
    criterion = criterion.lower()
    if criterion == "oba":
        return oba_importance(g, dataset, B, rule)
    if criterion == "taylor":
        return taylor_importance(g, dataset, B)
    if criterion == "weight":
        return weight_importance(g)
    if criterion == "obd":
        return obd_importance(g, dataset, B, cap=obd_cap)
    if criterion == "random":
        return random_importance(g, seed)
    raise ValueError(f"unknown criterion {criterion!r}")


def prune_to_target(
    g: NetworkGraph,
    dataset,
    criterion: str,
    target_flops_fraction: float,
    schedule: PruneSchedule | None = None,
    finetune=None,
):
    """Score / normalise / rank / shrink until FLOPs drop to the target.

    The per-step fraction grows geometrically (p_k = p0 * growth^k).  With a
    fine-tune config the loop trains after every step (iterative workflow);
    without one it is a pure one-shot ratio search.
    """
    if not 0.0 < target_flops_fraction < 1.0:
        raise ValueError("target FLOPs fraction must be in (0, 1)")
    schedule = schedule or PruneSchedule()
    orig_flops, _ = count_flops(g)
    rows = []
    for step in range(schedule.max_steps):
        p = min(schedule.p0 * schedule.growth**step, 0.95)
        table = compute_importance(
            g, dataset, criterion, schedule.batches, schedule.rule,
            seed=schedule.seed + step, obd_cap=schedule.obd_cap,
        )
        groups = discover_groups(g)
        ns = gather_neuron_scores(table, groups)
        ns = normalize_scores(ns, schedule.normalization)
        mask = rank_and_select(ns, p)
        g = apply_mask(g, mask)
        flops, params = count_flops(g)
        acc = ""
        if finetune is not None:
            from .training import evaluate, sgd_train  # deferred: trainer imports this module

            g, _ = sgd_train(g, dataset, finetune)
            acc, _ = evaluate(g, dataset)
        rows.append(
            {
                "step": step,
                "p": p,
                "flops": flops,
                "params": params,
                "flops_fraction": flops / orig_flops,
                "accuracy": acc,
            }
        )
        if flops <= target_flops_fraction * orig_flops:
            return g, rows
    raise PruneScheduleError(
        f"schedule exhausted after {schedule.max_steps} steps; closest achieved "
        f"FLOPs fraction {rows[-1]['flops_fraction']:.4f} vs target {target_flops_fraction}"
    )


def unstructured_multistage(
    g: NetworkGraph,
    dataset,
    criterion: str,
    sparsity_levels,
    finetune_cfg,
    schedule: PruneSchedule | None = None,
):
    """Prune to each sparsity level in turn, fine-tuning with frozen zeros.

    Magnitude augmentation: for criteria whose raw scores can vanish with the
    gradient (oba, taylor) each entry's score gets +|theta| before ranking.
    Masks only ever grow: entries pruned at one level stay pruned at the next.
    """
    levels = list(sparsity_levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"sparsity levels must be strictly ascending, got {levels}")
    if levels and not 0.0 <= levels[0] <= levels[-1] < 1.0:
        raise ValueError(f"sparsity levels must lie in [0, 1), got {levels}")
    schedule = schedule or PruneSchedule()
    from .training import evaluate, sgd_train  # deferred: trainer imports this module

    total = sum(p.size for pid in g.param_layers() for p in g.node(pid).params.values())
    pruned: dict[str, dict[str, np.ndarray]] = {
        pid: {pname: np.zeros(p.shape, dtype=bool) for pname, p in g.node(pid).params.items()}
        for pid in g.param_layers()
    }
    rows = []
    for stage, s in enumerate(levels):
        target_count = int(np.floor(s * total))
        already = int(sum(m.sum() for e in pruned.values() for m in e.values()))
        extra = max(target_count - already, 0)
        if extra:
            table = compute_importance(
                g, dataset, criterion, schedule.batches, schedule.rule,
                seed=schedule.seed + stage, obd_cap=schedule.obd_cap,
            )
            items = []
            for pid in sorted(pruned):
                for pname in sorted(pruned[pid]):
                    score = table.total(pid, pname)
                    if criterion.lower() in ("oba", "taylor"):
                        score = score + np.abs(g.node(pid).params[pname])
                    flat = score.ravel()
                    dead = pruned[pid][pname].ravel()
                    items.extend(
                        (float(flat[i]), pid, pname, i)
                        for i in range(flat.size)
                        if not dead[i]
                    )
            items.sort()
            for _, pid, pname, i in items[:extra]:
                pruned[pid][pname].flat[i] = True
        mask = PruneMask(
            "unstructured",
            masks={
                pid: {pname: ~pruned[pid][pname] for pname in pruned[pid]}
                for pid in pruned
            },
        )
        g = apply_mask(g, mask)
        if finetune_cfg is not None and s > 0:
            g, _ = sgd_train(g, dataset, finetune_cfg, mask=mask)
        acc, loss = evaluate(g, dataset)
        flops, params = count_flops(g, mask)
        rows.append(
            {
                "stage": stage,
                "sparsity": s,
                "flops": flops,
                "params": params,
                "accuracy": acc,
                "loss": loss,
            }
        )
    return g, rows


# ---------------------------------------------------------------------------
# rank-correlation evaluation
# ---------------------------------------------------------------------------


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Rank correlation with average-rank tie handling; nan when either
    vector is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"spearman_rho expects equal-length vectors, got {a.shape}, {b.shape}")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0.0:
        return float("nan")
    return float((ra * rb).sum() / denom)


def masking_ground_truth(g: NetworkGraph, x, targets, layer_id: str) -> np.ndarray:
    """Loss change from zeroing each output neuron of ``layer_id`` in turn."""
    base = forward(g, x, targets).loss
    axis = 1 if g.node(layer_id).kind == "Conv2d" else len(g.out_shapes[layer_id])
    n = g.out_shapes[layer_id][0 if g.node(layer_id).kind == "Conv2d" else -1]
    out = np.zeros(n)
    for j in range(n):
        masked = forward(
            g, x, targets, zero_outputs={layer_id: (axis, np.array([j]))}
        ).loss
        out[j] = masked - base
    return out


def scores_for_layer(ns: NeuronScores, layer_id: str) -> np.ndarray:
    """A layer's per-output-neuron gathered scores (its producer group)."""
    for grp in ns.groups:
        for m in grp.producers:
            if m.layer == layer_id and m.param == "weight":
                return ns.scores[grp.gid].copy()
    raise KeyError(f"layer {layer_id!r} owns no prunable output dimension")


def spearman_eval(
    g: NetworkGraph,
    dataset,
    layer_ids,
    ns: NeuronScores,
    normalization: str = "max",
    scope: str = "per_layer",
):
    """Correlate gathered scores against masking ground truth.

    per_layer: rank correlation inside each layer, then averaged (raw
    scores; within-layer ranks ignore normalisation).  all_layers: each
    layer's scores are normalised, concatenated, and correlated against the
    concatenated ground truth.
    """
    x, targets = (dataset.samples, dataset.labels) if hasattr(dataset, "samples") else dataset
    gts = {lid: masking_ground_truth(g, x, targets, lid) for lid in layer_ids}
    est = {lid: scores_for_layer(ns, lid) for lid in layer_ids}
    report = {"scope": scope, "per_layer": {}, "rho": None, "degenerate": []}
    if scope == "per_layer":
        vals = []
        for lid in layer_ids:
            rho = spearman_rho(est[lid], gts[lid])
            report["per_layer"][lid] = rho
            if np.isnan(rho):
                report["degenerate"].append(lid)
            else:
                vals.append(rho)
        report["rho"] = float(np.mean(vals)) if vals else float("nan")
        return report
    if scope != "all_layers":
        raise ValueError(f"unknown scope {scope!r}")
    est_cat = []
    for lid in layer_ids:
        v = est[lid]
        fake = NeuronScores(
            groups=[GroupSpec(lid, v.size, [])], scores={lid: v}
        )
        est_cat.append(normalize_scores(fake, normalization).scores[lid])
    rho = spearman_rho(np.concatenate(est_cat), np.concatenate([gts[l] for l in layer_ids]))
    report["rho"] = rho
    if np.isnan(rho):
        report["degenerate"] = list(layer_ids)
    return report

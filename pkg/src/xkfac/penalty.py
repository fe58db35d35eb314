"""Merged-weight reparameterization and the Kronecker-factored penalty.

A linear (or conv) layer followed by a normalization layer is equivalent to a
single affine layer with a data-dependent merged weight; the quadratic
penalty anchors those merged weights instead of the raw parameters, so the
free parameters can absorb statistic drift between tasks.

Four interpretations of the merged weight are supported:

* ``bn``         -- mini-batch statistics, gradients flow through them
* ``brn``        -- population-corrected (r, d frozen), batch-stat gradients kept
* ``const_stats``-- mini-batch statistics treated as constants
* ``eval_stats`` -- population statistics (constants)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

INTERPRETATIONS = ("bn", "brn", "const_stats", "eval_stats")


@dataclass
class MergedUnit:
    """Merged weight [w~ | b~] for one unit plus chain-rule context."""

    unit: int
    W: np.ndarray                  # C x (P+1)
    interpretation: str
    has_norm: bool
    ctx: dict = field(default_factory=dict)


@dataclass
class PenaltyState:
    """Anchor + accumulated curvature + damping: everything L_s needs."""

    anchors: list                  # merged-weight snapshots per unit
    terms: list                    # list of curvature.CurvatureTerm
    damping: float = 0.0

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


def merge_weights(network, acts, interpretation):
    """Merged weight per unit for the given interpretation."""
    if interpretation not in INTERPRETATIONS:
        raise ValueError(f"unknown interpretation {interpretation!r}")
    merged = []
    for k, unit in enumerate(network.units):
        lin = network.blocks[unit.linear_idx]
        lcache = acts.block_cache[unit.linear_idx]
        w, b = lin.w, lin.b
        if unit.norm_idx is None:
            merged.append(MergedUnit(k, np.hstack([w, b[:, None]]),
                                     interpretation, has_norm=False,
                                     ctx={"a_in": lcache["a_in"]}))
            continue
        norm = network.blocks[unit.norm_idx]
        ncache = acts.block_cache[unit.norm_idx]
        if interpretation == "eval_stats":
            mu, var = norm.pop_mean, norm.pop_var
            s0 = 1.0 / np.sqrt(var + norm.eps)
            d = np.zeros_like(mu)
            live = False
        else:
            if "mu_b" not in ncache:
                raise ValueError("missing batch statistics: run a train-mode "
                                 "forward before merging")
            mu, var = ncache["mu_b"], ncache["var_b"]
            if interpretation == "brn":
                r = np.clip(np.sqrt((var + norm.eps) / (norm.pop_var + norm.eps)),
                            1.0 / norm.r_max, norm.r_max)
                d = np.clip((mu - norm.pop_mean) / np.sqrt(norm.pop_var + norm.eps),
                            -norm.d_max, norm.d_max)
            else:
                r = np.ones_like(mu)
                d = np.zeros_like(mu)
            s0 = r / np.sqrt(var + norm.eps)
            live = interpretation in ("bn", "brn")
        scale = norm.gamma * s0
        w_t = scale[:, None] * w
        b_t = norm.beta + norm.gamma * d + scale * (b - mu)
        merged.append(MergedUnit(
            k, np.hstack([w_t, b_t[:, None]]), interpretation, has_norm=True,
            ctx={"a_in": lcache["a_in"], "z": lcache["z"], "w": w, "b": b,
                 "gamma": norm.gamma, "mu": mu, "var": var, "eps": norm.eps,
                 "s0": s0, "scale": scale, "d": d, "live": live,
                 "r": s0 * np.sqrt(var + norm.eps)}))
    return merged


def snapshot_anchors(network):
    """Merged weights under population statistics; the task-end anchor."""
    anchors = []
    for unit in network.units:
        lin = network.blocks[unit.linear_idx]
        w, b = lin.w, lin.b
        if unit.norm_idx is None:
            anchors.append(np.hstack([w, b[:, None]]))
            continue
        norm = network.blocks[unit.norm_idx]
        s0 = 1.0 / np.sqrt(norm.pop_var + norm.eps)
        scale = norm.gamma * s0
        b_t = norm.beta + scale * (b - norm.pop_mean)
        anchors.append(np.hstack([scale[:, None] * w, b_t[:, None]]))
    return anchors


def penalty_grad(state: PenaltyState, current):
    """dL_s/dW~ per unit via the two-matrix-product form; no Kronecker
    product is materialized."""
    deltas = []
    for w_cur, w_anchor in zip(current, state.anchors, strict=True):
        if w_cur.shape != w_anchor.shape:
            raise ValueError("merged weight shape does not match anchor")
        deltas.append(w_cur - w_anchor)
    grads = [np.zeros_like(dw) for dw in deltas]
    for term in state.terms:
        f = term.factors
        n = f.batch_size
        denom = max(n - 1, 1)
        for l in range(len(deltas)):
            acc = np.zeros_like(deltas[l])
            lps = [l] if f.coupling == "diagonal" else range(len(deltas))
            for lp in lps:
                if not f.has(l, lp):
                    continue
                a = f.get(l, lp, "A")
                b = (n * f.get(l, lp, "Ap") - a) / denom
                hp = f.get(l, lp, "Hp")
                hd = f.get(l, lp, "Hpp") - hp
                acc += hp @ deltas[lp] @ a.T + hd @ deltas[lp] @ b.T
            grads[l] += term.weight * acc
    if state.damping:
        for l in range(len(deltas)):
            grads[l] += state.damping * deltas[l]
    return grads


def penalty_value(state: PenaltyState, current, grads):
    """L_s = 1/2 sum_l <W~_l - W~*_l, dL_s/dW~_l>."""
    total = 0.0
    for w_cur, w_anchor, g in zip(current, state.anchors, grads, strict=True):
        total += float(np.sum((w_cur - w_anchor) * g))
    return 0.5 * total


def chain_to_raw(network, merged_grads, merged_units, interpretation):
    """Propagate dL_s/dW~ to raw parameters and input activations.

    Returns one dict per unit with keys ``w``, ``b``, ``gamma``, ``beta``
    (None where absent) and ``a_in`` (gradient w.r.t. the unit's input
    activations via the live-statistic paths; None when all statistic paths
    are stopped).
    """
    out = []
    for mu_unit, g in zip(merged_units, merged_grads, strict=True):
        if mu_unit.interpretation != interpretation:
            raise ValueError("interpretation does not match the merge call")
        gw, gb = g[:, :-1], g[:, -1]
        ctx = mu_unit.ctx
        if not mu_unit.has_norm:
            out.append({"w": gw.copy(), "b": gb.copy(), "gamma": None,
                        "beta": None, "a_in": None})
            continue
        w, b = ctx["w"], ctx["b"]
        gamma, s0, scale = ctx["gamma"], ctx["s0"], ctx["scale"]
        mu, var, eps, d = ctx["mu"], ctx["var"], ctx["eps"], ctx["d"]
        gw_dot_w = (gw * w).sum(axis=1)
        d_w = scale[:, None] * gw
        d_b = scale * gb
        d_gamma = s0 * gw_dot_w + gb * (d + s0 * (b - mu))
        d_beta = gb.copy()
        d_a = None
        if ctx["live"]:
            z = ctx["z"]
            m = z.shape[1]
            u = -scale * gb
            v = -scale / (2.0 * (var + eps)) * (gw_dot_w + gb * (b - mu))
            dz = (u[:, None] + v[:, None] * 2.0 * (z - mu[:, None])) / m
            d_w += dz @ ctx["a_in"].T
            d_b += dz.sum(axis=1)
            d_a = w.T @ dz
        out.append({"w": d_w, "b": d_b, "gamma": d_gamma, "beta": d_beta,
                    "a_in": d_a})
    return out


def penalty_raw_gradient(network, acts, state: PenaltyState, interpretation):
    """Full penalty evaluation: value plus gradients on all raw parameters.

    The per-unit activation gradients from the statistic paths are injected
    into a backward sweep so they reach the parameters of earlier layers.
    """
    merged = merge_weights(network, acts, interpretation)
    current = [m.W for m in merged]
    m_grads = penalty_grad(state, current)
    value = penalty_value(state, current, m_grads)
    raw = chain_to_raw(network, m_grads, merged, interpretation)
    grads = {}
    injections = {}
    for k, unit in enumerate(network.units):
        grads[f"{unit.linear_idx}.w"] = raw[k]["w"]
        grads[f"{unit.linear_idx}.b"] = raw[k]["b"]
        if unit.norm_idx is not None:
            grads[f"{unit.norm_idx}.gamma"] = raw[k]["gamma"]
            grads[f"{unit.norm_idx}.beta"] = raw[k]["beta"]
        if raw[k]["a_in"] is not None and k > 0:
            injections[k] = raw[k]["a_in"]
    if injections:
        zero_seed = np.zeros_like(acts.logits)
        extra = network.backward_from_logit_grad(
            acts, zero_seed, activation_injections=injections)
        for key, val in extra.items():
            if key in grads:
                grads[key] = grads[key] + val
            else:
                grads[key] = val
    return value, grads


# ---------------------------------------------------------------------------
# preprocessing


def measure_population_stats(network, x, batch_size=256):
    """Eval-mode mean/variance of every norm layer's input over a dataset.

    Returns {norm_block_idx: (mean, var)} with biased variance.  Column
    counts are tracked per layer since conv layers have S*N columns.
    """
    sums, sqs, counts = {}, {}, {}
    for start in range(0, x.shape[1], batch_size):
        xb = x[:, start:start + batch_size]
        acts, _ = network.forward(xb, train_mode=False)
        for i, blk in enumerate(network.blocks):
            if blk.kind != "norm":
                continue
            z = acts.block_cache[i]["z_in"]
            sums[i] = sums.get(i, 0.0) + z.sum(axis=1)
            sqs[i] = sqs.get(i, 0.0) + (z ** 2).sum(axis=1)
            counts[i] = counts.get(i, 0) + z.shape[1]
    stats = {}
    for i in sums:
        mean = sums[i] / counts[i]
        var = sqs[i] / counts[i] - mean ** 2
        stats[i] = (mean, np.maximum(var, 0.0))
    return stats


def preprocess_reinit(network, target_stats):
    """Reinitialize gamma/beta so the merged weights are unchanged when the
    population statistics are replaced by the target-task ones."""
    for i, blk in enumerate(network.blocks):
        if blk.kind != "norm":
            continue
        mu_t, var_t = target_stats[i]
        var_old = blk.pop_var
        if np.any(var_old + blk.eps <= 0) or np.any(var_t + blk.eps <= 0):
            raise ValueError("non-positive variance in preprocessing")
        blk.beta = blk.beta + blk.gamma / np.sqrt(var_old + blk.eps) * (mu_t - blk.pop_mean)
        blk.gamma = blk.gamma * np.sqrt((var_t + blk.eps) / (var_old + blk.eps))
        blk.pop_mean = mu_t.copy()
        blk.pop_var = var_t.copy()


# ---------------------------------------------------------------------------
# anchor file


def save_anchors(path, anchors, interpretation="eval_stats"):
    header = {"format_version": 1, "interpretation": interpretation,
              "count": len(anchors)}
    arrays = {f"anchor{i}": a for i, a in enumerate(anchors)}
    np.savez(path, __header__=np.frombuffer(
        json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_anchors(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format_version") != 1:
            raise ValueError("unsupported anchor format version")
        anchors = [z[f"anchor{i}"].copy() for i in range(header["count"])]
        return anchors, header["interpretation"]

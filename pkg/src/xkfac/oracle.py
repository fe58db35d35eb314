"""Brute-force reference implementations used only by tests and `verify`.

Nothing here shares assembly code with the modules it checks: Hessians come
from finite differences, factor expectations from exhaustive enumeration over
mini-batches and label classes, and penalty Hessians from materialized
Kronecker products.  Everything is restricted to tiny shapes.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import net as nets
from .linalg import kron

MAX_ENUM_BATCHES = 10 ** 6


def mean_loss(network, x, labels, injections=None):
    _, logits = network.forward(x, train_mode=True, update_stats=False,
                                injections=injections)
    return float(nets.cross_entropy(logits, labels).mean())


def per_example_losses(network, x, labels, injections=None):
    _, logits = network.forward(x, train_mode=True, update_stats=False,
                                injections=injections)
    return nets.cross_entropy(logits, labels)


def _weight_ref(network, unit):
    lin = network.blocks[network.units[unit].linear_idx]
    return lin.w, lin.b


def _perturb_weight(network, unit, flat_idx, delta):
    """Perturb entry ``flat_idx`` of vec([w | b]) in column-major order."""
    w, b = _weight_ref(network, unit)
    c = w.shape[0]
    col, row = divmod(flat_idx, c)
    if col < w.shape[1]:
        w[row, col] += delta
    else:
        b[row] += delta


ADAPTIVE_STEPS = (5e-4, 1e-3, 2e-3, 4e-3)


def _adaptive(fn, steps=ADAPTIVE_STEPS):
    """Evaluate a Richardson-extrapolated FD estimate at several base steps
    and return the member of the most self-consistent adjacent pair.

    Too-small steps are corrupted by roundoff, too-large ones by crossing
    ReLU kinks; both show up as disagreement between neighbouring steps, so
    picking the best-agreeing pair sidesteps either failure mode without a
    hand-tuned step per problem."""
    vals = [fn(h) for h in steps]
    diffs = [np.max(np.abs(vals[i + 1] - vals[i]))
             for i in range(len(vals) - 1)]
    return vals[int(np.argmin(diffs))]


def fd_hessian(network, x, labels, l, lp, step=None, richardson=True):
    """Central-difference Hessian block of the mean loss w.r.t. the raw
    weights vec([w|b]) of units l and lp (column-major vec).

    With ``richardson`` the step-halving extrapolation (4*F(h) - F(2h))/3
    cancels the leading O(h^2) truncation term.  ``step=None`` selects the
    step adaptively by self-consistency across a small ladder."""
    if step is None:
        return _adaptive(lambda h: fd_hessian(network, x, labels, l, lp,
                                              step=h, richardson=richardson))
    if richardson:
        f1 = fd_hessian(network, x, labels, l, lp, step=step, richardson=False)
        f2 = fd_hessian(network, x, labels, l, lp, step=2 * step,
                        richardson=False)
        return (4 * f1 - f2) / 3
    w_l, b_l = _weight_ref(network, l)
    w_p, b_p = _weight_ref(network, lp)
    dim_l = w_l.size + b_l.size
    dim_p = w_p.size + b_p.size
    out = np.zeros((dim_l, dim_p))
    for i in range(dim_l):
        for j in range(dim_p):
            vals = []
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                _perturb_weight(network, l, i, si * step)
                _perturb_weight(network, lp, j, sj * step)
                vals.append(mean_loss(network, x, labels))
                _perturb_weight(network, lp, j, -sj * step)
                _perturb_weight(network, l, i, -si * step)
            out[i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * step ** 2)
    return out


def fd_unit_output_second_derivs(network, x, labels, l, lp, step=1e-4):
    """Per-example mixed second derivatives w.r.t. injected perturbations on
    the raw linear outputs of units l and lp.

    Returns T[n, a, m, c, m'] = d^2 L_n / d(h_l)_{a,m} d(h_lp)_{c,m'}.
    """
    acts, _ = network.forward(x, train_mode=True, update_stats=False)
    shape_l = acts.block_cache[network.units[l].linear_idx]["z"].shape
    shape_p = acts.block_cache[network.units[lp].linear_idx]["z"].shape
    n = x.shape[1]
    t = np.zeros((n,) + shape_l + shape_p)
    for a in range(shape_l[0]):
        for m in range(shape_l[1]):
            for c in range(shape_p[0]):
                for mp in range(shape_p[1]):
                    acc = np.zeros(n)
                    for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                        inj_l = np.zeros(shape_l)
                        inj_p = np.zeros(shape_p)
                        inj_l[a, m] += si * step
                        inj_p[c, mp] += sj * step
                        if l == lp:
                            inj = {l: inj_l + inj_p}
                        else:
                            inj = {l: inj_l, lp: inj_p}
                        sign = 1 if si == sj else -1
                        acc += sign * per_example_losses(network, x, labels,
                                                         injections=inj)
                    t[:, a, m, c, mp] = acc / (4 * step ** 2)
    return t


def hessian_from_contraction(network, x, labels, l, lp, step=None,
                             richardson=True):
    """Assemble the weight-space Hessian block from the linear-layer identity:
    contraction of unit-output second derivatives with input activations.

    The identity is exact for l == lp; for l != lp the factored form drops a
    first-order Jacobian term, so only diagonal blocks should be compared to
    :func:`fd_hessian`.  ``step=None`` selects the step adaptively."""
    if step is None:
        return _adaptive(lambda h: hessian_from_contraction(
            network, x, labels, l, lp, step=h, richardson=richardson))
    acts, _ = network.forward(x, train_mode=True, update_stats=False)
    a_l = _abar(network, acts, l)
    a_p = _abar(network, acts, lp)
    t = fd_unit_output_second_derivs(network, x, labels, l, lp, step=step)
    if richardson:
        t2 = fd_unit_output_second_derivs(network, x, labels, l, lp,
                                          step=2 * step)
        t = (4 * t - t2) / 3
    # mean over examples n of sum_{m,m'} abar[b,m] abar[d,m'] T[n,a,m,c,m']
    h = np.einsum("namcq,bm,dq->abcd", t, a_l, a_p) / x.shape[1]
    # vec([w|b]) is column-major: index b*C + a
    dim_l = h.shape[0] * h.shape[1]
    dim_p = h.shape[2] * h.shape[3]
    out = np.zeros((dim_l, dim_p))
    for a in range(h.shape[0]):
        for b in range(h.shape[1]):
            for c in range(h.shape[2]):
                for d in range(h.shape[3]):
                    out[b * h.shape[0] + a, d * h.shape[2] + c] = h[a, b, c, d]
    return out


def _abar(network, acts, unit):
    a = acts.block_cache[network.units[unit].linear_idx]["a_in"]
    return np.vstack([a, np.ones((1, a.shape[1]))])


# ---------------------------------------------------------------------------
# exhaustive Fisher enumeration


def exhaustive_factors(network, data, batch_n, pairs=None):
    """Exact factor expectations over all unordered size-N batches of a tiny
    dataset, with the label expectation enumerated class by class.

    Returns {(l, lp): {"A", "Ap", "H", "Hp", "Hpp", "Hppp"}} where H uses only
    matched own-example columns (the no-norm form), Hp/Hpp are the matched /
    summed column Fisher forms and Hppp is the asymmetric own-row form.
    """
    n_points = data.shape[1]
    n_units = len(network.units)
    if pairs is None:
        pairs = [(l, lp) for l in range(n_units) for lp in range(n_units)]
    if math.comb(n_points, batch_n) > MAX_ENUM_BATCHES:
        raise ValueError("too many batches to enumerate")
    combos = list(itertools.combinations(range(n_points), batch_n))
    acc = {p: None for p in pairs}
    for combo in combos:
        x = data[:, list(combo)]
        acts, logits = network.forward(x, train_mode=True, update_stats=False)
        probs = nets.softmax(logits)
        classes = logits.shape[0]
        abar = [_abar(network, acts, l) for l in range(n_units)]
        # label-expected gradient products, one backward sweep per (n, class)
        batch = {p: {k: 0.0 for k in ("A", "Ap", "H", "Hp", "Hpp", "Hppp")}
                 for p in pairs}
        for ex in range(batch_n):
            for cls in range(classes):
                p_cls = probs[cls, ex]
                if p_cls == 0.0:
                    continue
                seed = np.zeros_like(logits)
                seed[:, ex] = probs[:, ex]
                seed[cls, ex] -= 1.0
                _, captured, _ = network._sweep(acts, seed, capture="merged")
                for (l, lp) in pairs:
                    g_l, g_lp = captured[l], captured[lp]
                    s_l = g_l.sum(axis=1)
                    s_lp = g_lp.sum(axis=1)
                    b = batch[(l, lp)]
                    b["H"] += p_cls * np.outer(g_l[:, ex], g_lp[:, ex])
                    b["Hp"] += p_cls * (g_l @ g_lp.T)
                    b["Hpp"] += p_cls * np.outer(s_l, s_lp)
                    b["Hppp"] += p_cls * np.outer(g_l[:, ex], s_lp)
        for (l, lp) in pairs:
            b = batch[(l, lp)]
            for k in ("H", "Hp", "Hpp", "Hppp"):
                b[k] /= batch_n
            b["A"] = abar[l] @ abar[lp].T / batch_n
            b["Ap"] = np.outer(abar[l].mean(axis=1), abar[lp].mean(axis=1))
            if acc[(l, lp)] is None:
                acc[(l, lp)] = b
            else:
                for k in b:
                    acc[(l, lp)][k] += b[k]
    for p in pairs:
        for k in acc[p]:
            acc[p][k] /= len(combos)
    return acc


def group_decomposition(factors_pair, batch_n, hppp_swapped=None):
    """The five group sums of the full Hessian split, each assembled from its
    factored form, plus the closed-form total.  For an off-diagonal pair
    (l, lp), ``hppp_swapped`` must be the Hppp entry of the swapped pair
    (lp, l); on the diagonal it defaults to the transpose."""
    f = factors_pair
    n = batch_n
    a, ap = f["A"], f["Ap"]
    h, hp, hpp, hppp = f["H"], f["Hp"], f["Hpp"], f["Hppp"]
    hppp_t = hppp.T if hppp_swapped is None else hppp_swapped.T
    coef = (n * ap - a) / max(n - 1, 1)
    groups = [kron(a, h)]
    if n >= 2:
        groups.append(kron(a, hp - h))
        groups.append(kron(coef, hppp - h))
        groups.append(kron(coef, hppp_t - h))
    if n >= 3:
        groups.append(kron(coef, hpp - hppp - hppp_t - hp + 2 * h))
    closed = kron(a, hp) + kron(coef, hpp - hp)
    return groups, closed


# ---------------------------------------------------------------------------
# materialized penalty Hessian


def materialize_penalty_hessian(state, shapes, max_dim=4000):
    """Full dense penalty Hessian over concatenated column-major vec(W~_l),
    including the damping term."""
    dims = [c * p for (c, p) in shapes]
    total = sum(dims)
    if total > max_dim:
        raise ValueError("materialized Hessian would be too large")
    h = np.zeros((total, total))
    offs = np.concatenate([[0], np.cumsum(dims)])
    for term in state.terms:
        f = term.factors
        n = f.batch_size
        denom = max(n - 1, 1)
        for l in range(len(shapes)):
            lps = [l] if f.coupling == "diagonal" else range(len(shapes))
            for lp in lps:
                if not f.has(l, lp):
                    continue
                a = f.get(l, lp, "A")
                b = (n * f.get(l, lp, "Ap") - a) / denom
                hp = f.get(l, lp, "Hp")
                hd = f.get(l, lp, "Hpp") - hp
                block = kron(a, hp) + kron(b, hd)
                h[offs[l]:offs[l + 1], offs[lp]:offs[lp + 1]] += term.weight * block
    h += state.damping * np.eye(total)
    return h


def vec_merged(mats):
    """Concatenate column-major vectorizations of per-unit matrices."""
    return np.concatenate([m.ravel(order="F") for m in mats])

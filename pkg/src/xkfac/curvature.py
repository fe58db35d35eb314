"""Kronecker factor estimation and assembly for the BN-aware curvature.

Per layer (pair) the stored factors are:

* ``A``   -- second moment of unit inputs, E[E_n[a_b a_d]]
* ``Ap``  -- product of per-batch input means, E[E_n[a_b] E_n[a_d]]
* ``Hp``  -- Fisher form with matched columns, E[E_n[sum_m g_n[.,m] g_n[.,m]^T]]
* ``Hpp`` -- Fisher form with summed columns, E[E_n[(sum_m g_n[.,m])(...)^T]]

where g_n is the exact per-example gradient at the unit output, including all
cross-example terms induced by normalization layers.  The assembled block is

    kron(A, Hp) + kron(N*Ap - A, Hpp - Hp) / max(N - 1, 1)

which reduces to plain K-FAC when Hpp == Hp (no norm layers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import net as nets
from .linalg import kron


@dataclass
class FactorSet:
    """Estimated factor matrices keyed by unit pair (l, l')."""

    coupling: str                 # "diagonal" | "full"
    batch_size: int
    unit_kinds: list              # "mlp" | "conv" per unit
    blocks: dict = field(default_factory=dict)
    sample_count: int = 0

    @property
    def n_units(self):
        return len(self.unit_kinds)

    def get(self, l, lp, name):
        """Block accessor; (l', l) blocks come from symmetry."""
        if (l, lp) in self.blocks:
            return self.blocks[(l, lp)][name]
        if (lp, l) in self.blocks:
            return self.blocks[(lp, l)][name].T
        raise KeyError(f"no factor block for pair ({l}, {lp})")

    def has(self, l, lp):
        return (l, lp) in self.blocks or (lp, l) in self.blocks


@dataclass
class CurvatureTerm:
    weight: float
    factors: FactorSet

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("term weight must be positive")


def estimate_factors(network, data_sampler, n_batches, batch_size, rng,
                     coupling="diagonal", method="xkfac"):
    """Estimate factor matrices by sampling labels from the model.

    ``data_sampler(rng, batch_size)`` must return an input batch of shape
    (features, batch_size).  ``method="kfac"`` ignores cross-example terms
    (only m == n gradient products), in which case Hpp == Hp and the
    assembled block degenerates to plain K-FAC.
    """
    if batch_size < 1 or n_batches < 1:
        raise ValueError("batch_size and n_batches must be >= 1")
    n_units = len(network.units)
    kinds = ["conv" if network.blocks[u.linear_idx].kind == "conv" else "mlp"
             for u in network.units]
    if coupling == "full" and any(k == "conv" for k in kinds):
        raise ValueError("full coupling is only supported for MLP units")
    pairs = ([(l, l) for l in range(n_units)] if coupling == "diagonal"
             else [(l, lp) for l in range(n_units) for lp in range(l, n_units)])
    sums = {p: None for p in pairs}

    for _ in range(n_batches):
        x = data_sampler(rng, batch_size)
        acts, logits = network.forward(x, train_mode=True, update_stats=False)
        labels = nets.sample_model_labels(logits, rng)
        g_logits = nets.cross_entropy_grad(logits, labels)
        d = network.per_example_backward(acts, losses_grad=g_logits)["d"]
        abar = [unit_input_bar(network, acts, l) for l in range(n_units)]
        for (l, lp) in pairs:
            contrib = _batch_factor_contrib(
                kinds[l], abar[l], abar[lp], d[l], d[lp], batch_size, method,
                spatial=_unit_out_spatial(network, acts, l))
            if sums[(l, lp)] is None:
                sums[(l, lp)] = contrib
            else:
                for k in contrib:
                    sums[(l, lp)][k] += contrib[k]

    blocks = {}
    for p, s in sums.items():
        blk = {k: v / n_batches for k, v in s.items()}
        for v in blk.values():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError("non-finite factor entries")
        blocks[p] = blk
    return FactorSet(coupling=coupling, batch_size=batch_size,
                     unit_kinds=kinds, blocks=blocks,
                     sample_count=n_batches * batch_size)


def unit_input_bar(network, acts, l):
    """Unit input activations with the homogeneous all-ones row appended."""
    a = acts.block_cache[network.units[l].linear_idx]["a_in"]
    return np.vstack([a, np.ones((1, a.shape[1]))])


def _unit_out_spatial(network, acts, l):
    u = network.units[l]
    cache = acts.block_cache[u.linear_idx]
    if network.blocks[u.linear_idx].kind != "conv":
        return None
    ho, wo = cache["out_spatial"]
    return ho * wo


def _batch_factor_contrib(kind, abar_l, abar_lp, d_l, d_lp, n, method, spatial):
    if kind == "mlp":
        a = abar_l @ abar_lp.T / n
        ap = np.outer(abar_l.mean(axis=1), abar_lp.mean(axis=1))
        if method == "kfac":
            g_l = np.stack([d_l[ex][:, ex] for ex in range(n)], axis=1)
            g_lp = np.stack([d_lp[ex][:, ex] for ex in range(n)], axis=1)
            hp = g_l @ g_lp.T / n
            hpp = hp.copy()
        else:
            hp = sum(d_l[ex] @ d_lp[ex].T for ex in range(n)) / n
            s_l = d_l.sum(axis=2)
            s_lp = d_lp.sum(axis=2)
            hpp = s_l.T @ s_lp / n
        return {"A": a, "Ap": ap, "Hp": hp, "Hpp": hpp}
    # conv unit (diagonal block only): columns are indexed (s, n) = s*N + n
    s = spatial
    a = abar_l @ abar_l.T / n
    means = abar_l.reshape(abar_l.shape[0], s, n).mean(axis=2)
    ap = means @ means.T
    if method == "kfac":
        cols = np.concatenate(
            [d_l[ex].reshape(d_l.shape[1], s, n)[:, :, ex] for ex in range(n)],
            axis=1)
        hp = cols @ cols.T / (s * n)
        hpp = hp.copy()
    else:
        hp = sum(d_l[ex] @ d_l[ex].T for ex in range(n)) / (s * n)
        hpp = np.zeros_like(hp)
        for ex in range(n):
            t = d_l[ex].reshape(d_l.shape[1], s, n).sum(axis=2)
            hpp += t @ t.T
        hpp /= s * n
    return {"A": a, "Ap": ap, "Hp": hp, "Hpp": hpp}


def assemble_block(factors: FactorSet, l, lp=None):
    """Materialize one curvature block; oracle/test use only."""
    if lp is None:
        lp = l
    a = factors.get(l, lp, "A")
    ap = factors.get(l, lp, "Ap")
    hp = factors.get(l, lp, "Hp")
    hpp = factors.get(l, lp, "Hpp")
    n = factors.batch_size
    return kron(a, hp) + kron(n * ap - a, hpp - hp) / max(n - 1, 1)


def assemble_block_conv(factors: FactorSet, l):
    """Conv-unit (KFC-style) diagonal block; same Kronecker form."""
    if factors.unit_kinds[l] != "conv":
        raise ValueError(f"unit {l} is not convolutional")
    return assemble_block(factors, l, l)


def accumulate(existing, lambda_s, new_factors, lambda_t, fold=None):
    """Task-end curvature update: reweight old terms, append the new one.

    Kronecker structure is not closed under addition, so the default keeps a
    list of weighted terms.  ``fold="ema"`` instead averages the factor
    matrices into a single term (an additional approximation, for long task
    sequences).
    """
    if lambda_s <= 0 or lambda_t <= 0:
        raise ValueError("importance weights must be positive")
    if fold == "ema" and existing:
        if len(existing) != 1:
            raise ValueError("ema folding requires a single accumulated term")
        old = existing[0]
        w_old = lambda_s * old.weight
        w_new = lambda_t
        total = w_old + w_new
        blocks = {}
        for p in old.factors.blocks:
            blocks[p] = {
                k: (w_old * old.factors.blocks[p][k]
                    + w_new * new_factors.blocks[p][k]) / total
                for k in old.factors.blocks[p]
            }
        folded = FactorSet(coupling=new_factors.coupling,
                           batch_size=new_factors.batch_size,
                           unit_kinds=list(new_factors.unit_kinds),
                           blocks=blocks,
                           sample_count=new_factors.sample_count)
        return [CurvatureTerm(total, folded)]
    out = [CurvatureTerm(t.weight * lambda_s, t.factors) for t in existing]
    out.append(CurvatureTerm(lambda_t, new_factors))
    return out


# ---------------------------------------------------------------------------
# serialization


def save_terms(path, terms):
    arrays = {}
    header = {"format_version": 1, "terms": []}
    for ti, term in enumerate(terms):
        f = term.factors
        header["terms"].append({
            "weight": term.weight, "coupling": f.coupling,
            "batch_size": f.batch_size, "unit_kinds": f.unit_kinds,
            "sample_count": f.sample_count,
            "pairs": sorted(f.blocks.keys()),
        })
        for (l, lp), blk in f.blocks.items():
            for name, arr in blk.items():
                arrays[f"t{ti}.{l}.{lp}.{name}"] = arr
    np.savez(path, __header__=np.frombuffer(
        json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_terms(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format_version") != 1:
            raise ValueError("unsupported curvature format version")
        terms = []
        for ti, spec in enumerate(header["terms"]):
            blocks = {}
            for l, lp in [tuple(p) for p in spec["pairs"]]:
                blocks[(l, lp)] = {
                    name: z[f"t{ti}.{l}.{lp}.{name}"].copy()
                    for name in ("A", "Ap", "Hp", "Hpp")
                }
            factors = FactorSet(coupling=spec["coupling"],
                                batch_size=spec["batch_size"],
                                unit_kinds=spec["unit_kinds"], blocks=blocks,
                                sample_count=spec["sample_count"])
            terms.append(CurvatureTerm(spec["weight"], factors))
        return terms

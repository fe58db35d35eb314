import itertools

import numpy as np
import pytest

from xkfac import linalg, net as nets, oracle


def bn_mlp(widths=(3, 4, 2), seed=0):
    return nets.Network.mlp(list(widths), np.random.default_rng(seed),
                            norm_mode="bn")


def test_fd_hessian_quadratic_toy():
    """Loss ||Wx||^2/2 summed over a fixed batch has Hessian
    (x_bar x_bar^T) kron I exactly (column-major vec)."""
    rng = np.random.default_rng(0)
    w = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    x = rng.standard_normal((3, 4))
    xb = np.vstack([x, np.ones((1, 4))])
    n = 4

    def loss(wm):
        z = wm @ xb
        return 0.5 * float(np.sum(z * z)) / n

    wm = np.hstack([w, b[:, None]])
    dim = wm.size
    h = np.zeros((dim, dim))
    step = 1e-4
    for i in range(dim):
        for j in range(dim):
            acc = 0.0
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                pert = wm.copy()
                pert.reshape(-1, order="F")
                flat = pert.ravel(order="F")
                flat[i] += si * step
                flat[j] += sj * step
                acc += (1 if si == sj else -1) * loss(
                    flat.reshape(wm.shape, order="F"))
            h[i, j] = acc / (4 * step ** 2)
    ref = linalg.kron(xb @ xb.T / n, np.eye(2))
    assert np.max(np.abs(h - ref)) < 1e-6


def test_fd_hessian_symmetry():
    rng = np.random.default_rng(1)
    net = bn_mlp()
    x = rng.standard_normal((3, 3))
    y = rng.integers(0, 2, size=3)
    h = oracle.fd_hessian(net, x, y, 0, 0)
    assert np.max(np.abs(h - h.T)) < 1e-7


def test_contraction_identity_on_diagonal_blocks():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        net = bn_mlp(seed=seed)
        x = rng.standard_normal((3, 3))
        y = rng.integers(0, 2, size=3)
        for l in range(2):
            fd = oracle.fd_hessian(net, x, y, l, l)
            an = oracle.hessian_from_contraction(net, x, y, l, l)
            mask = np.abs(fd) > 1e-6
            rel = (np.abs(an - fd) / np.maximum(np.abs(fd), 1e-6))[mask]
            assert rel.max() < 1e-4, (seed, l)


def test_exhaustive_factors_n1_special_case():
    """With N=1 all column sums collapse: Hp == Hpp == H == Hppp."""
    rng = np.random.default_rng(2)
    net = bn_mlp()
    pool = rng.standard_normal((3, 4))
    exact = oracle.exhaustive_factors(net, pool, 1, pairs=[(0, 0), (1, 1)])
    for d in exact.values():
        for name in ("Hp", "Hpp", "Hppp"):
            assert np.max(np.abs(d[name] - d["H"])) < 1e-14
        assert np.max(np.abs(d["A"] - d["Ap"])) < 1e-14


def test_exhaustive_factors_n2_identity():
    """N=2: Hpp - Hp == Hppp + Hppp^T - 2H."""
    rng = np.random.default_rng(3)
    net = bn_mlp()
    pool = rng.standard_normal((3, 4))
    exact = oracle.exhaustive_factors(net, pool, 2, pairs=[(0, 0), (1, 1)])
    for d in exact.values():
        lhs = d["Hpp"] - d["Hp"]
        rhs = d["Hppp"] + d["Hppp"].T - 2 * d["H"]
        assert np.max(np.abs(lhs - rhs)) < 1e-12


@pytest.mark.parametrize("batch_n", [1, 2, 3, 4])
def test_group_decomposition_sums_to_closed_form(batch_n):
    rng = np.random.default_rng(4)
    net = bn_mlp()
    pool = rng.standard_normal((3, 5))
    exact = oracle.exhaustive_factors(net, pool, batch_n)
    for (l, lp), d in exact.items():
        swapped = exact[(lp, l)]["Hppp"]
        groups, closed = oracle.group_decomposition(d, batch_n,
                                                    hppp_swapped=swapped)
        assert np.max(np.abs(sum(groups) - closed)) < 1e-10
    expected_groups = {1: 1, 2: 4, 3: 5, 4: 5}[batch_n]
    assert len(groups) == expected_groups


def test_exhaustive_label_expectation_matches_explicit_enumeration():
    """Spot-check the oracle's label expectation on one batch by enumerating
    (batch, label assignment) pairs explicitly for the Hp factor."""
    rng = np.random.default_rng(5)
    net = bn_mlp((3, 3, 2), seed=9)
    pool = rng.standard_normal((3, 2))
    exact = oracle.exhaustive_factors(net, pool, 2, pairs=[(0, 0)])

    acc = 0.0
    combos = list(itertools.combinations(range(2), 2))
    for combo in combos:
        x = pool[:, list(combo)]
        acts, logits = net.forward(x, train_mode=True, update_stats=False)
        probs = nets.softmax(logits)
        for labels in itertools.product(range(2), repeat=2):
            w = 1.0
            contrib = 0.0
            res = net.per_example_backward(acts, targets=np.array(labels),
                                           capture="merged")
            for n in range(2):
                w_n = probs[labels[n], n]
                g = np.asarray(res["d"][0][n])
                # only example n's own-label weight applies to its gradient
                contrib += w_n * (g @ g.T) / 2 * np.prod(
                    [probs[labels[m], m] for m in range(2) if m != n])
            acc += contrib / len(combos)
    # the full product enumeration double counts the other example's labels,
    # which sum to one, so acc equals the oracle's Hp
    assert np.max(np.abs(acc - exact[(0, 0)]["Hp"])) < 1e-12


def test_enumeration_guard():
    net = bn_mlp()
    pool = np.random.default_rng(6).standard_normal((3, 60))
    with pytest.raises(ValueError):
        oracle.exhaustive_factors(net, pool, 30)


def test_materialize_size_guard():
    from xkfac import curvature as curv, penalty as pen

    net = bn_mlp()
    fs = curv.estimate_factors(net, lambda r, b: r.standard_normal((3, b)),
                               2, 4, np.random.default_rng(7))
    state = pen.PenaltyState(anchors=pen.snapshot_anchors(net),
                             terms=[curv.CurvatureTerm(1.0, fs)],
                             damping=0.0)
    shapes = [a.shape for a in state.anchors]
    with pytest.raises(ValueError):
        oracle.materialize_penalty_hessian(state, shapes, max_dim=3)

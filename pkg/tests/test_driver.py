import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xkfac import data as datamod
from xkfac import driver
from xkfac import net as nets
from xkfac import penalty as pen


def tiny_problem(seed=0, n=200, features=16, classes=3, hidden=6):
    base = datamod.synthetic_digits(seed=seed, n=n, features=features,
                                    classes=classes)
    rng = np.random.default_rng(seed + 17)
    network = nets.Network.mlp((features, hidden, classes), rng)
    return base, network


# -- adaptive scaling state machine -----------------------------------------


def test_update_alphas_increments_dominated_side():
    state = driver.ContinualState()
    for k in range(1, 5):
        driver.update_alphas(state, avg_source=2.0, avg_target=1.0)
        assert (state.alpha_s, state.alpha_t) == (1, 1 + k)


def test_update_alphas_reset_on_flip():
    state = driver.ContinualState()
    driver.update_alphas(state, 2.0, 1.0)
    driver.update_alphas(state, 2.0, 1.0)
    assert (state.alpha_s, state.alpha_t) == (1, 3)
    # dominance flips: the inflated divisor resets before the other grows
    driver.update_alphas(state, 1.0, 2.0)
    assert (state.alpha_s, state.alpha_t) == (1, 1)
    driver.update_alphas(state, 1.0, 2.0)
    assert (state.alpha_s, state.alpha_t) == (2, 1)


def test_update_alphas_tie_is_noop():
    state = driver.ContinualState()
    driver.update_alphas(state, 1.0, 1.0)
    assert (state.alpha_s, state.alpha_t) == (1, 1)
    driver.update_alphas(state, 2.0, 1.0)
    driver.update_alphas(state, 1.5, 1.5)
    assert (state.alpha_s, state.alpha_t) == (1, 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["s", "t", "tie"]), min_size=1, max_size=40))
def test_at_most_one_alpha_exceeds_one(outcomes):
    state = driver.ContinualState()
    for o in outcomes:
        if o == "s":
            driver.update_alphas(state, 2.0, 1.0)
        elif o == "t":
            driver.update_alphas(state, 1.0, 2.0)
        else:
            driver.update_alphas(state, 1.0, 1.0)
        assert state.alpha_s >= 1 and state.alpha_t >= 1
        assert state.alpha_s == 1 or state.alpha_t == 1


# -- importance weights ------------------------------------------------------


def test_importance_weights_after_k_tasks():
    state = driver.ContinualState()
    for k in range(1, 6):
        state.tasks_learned = k
        state.recompute_importance()
        assert state.lambda_s == pytest.approx(k / (k + 1), abs=0)
        assert state.lambda_t == pytest.approx(1 / (k + 1), abs=0)
        assert state.lambda_s + state.lambda_t == pytest.approx(1.0)


# -- run selection -----------------------------------------------------------


def test_select_model_prefers_accuracy_then_damping_then_lr():
    runs = [
        {"target_val_acc": 0.90, "damping": 1e-3, "lr": 0.1},
        {"target_val_acc": 0.92, "damping": 1e-3, "lr": 0.1},
        {"target_val_acc": 0.92, "damping": 1e-4, "lr": 0.2},
        {"target_val_acc": 0.92, "damping": 1e-4, "lr": 0.1},
    ]
    assert driver.select_model(runs) is runs[3]
    runs[1]["target_val_acc"] = 0.95
    assert driver.select_model(runs) is runs[1]


def test_select_model_skips_failed_runs():
    runs = [
        {"target_val_acc": 0.99, "damping": 1e-4, "lr": 0.1, "failed": True},
        {"target_val_acc": 0.50, "damping": 1e-4, "lr": 0.1},
    ]
    assert driver.select_model(runs) is runs[1]
    with pytest.raises(ValueError):
        driver.select_model([runs[0]])


# -- training behaviour ------------------------------------------------------


def test_zero_source_weight_matches_plain_finetuning():
    """With lambda_s = 0 an attached penalty state must leave the update
    sequence bit-for-bit identical to running without one."""
    base, network = tiny_problem()
    train, val = datamod.split(base, 0.2, seed=3)
    cfg = driver.RunConfig(epochs=2, batch_size=32, seed=0,
                           early_stopping=False)

    pstate = pen.PenaltyState(anchors=pen.snapshot_anchors(network),
                              terms=[], damping=cfg.damping)
    net_a = network.clone()
    net_b = network.clone()
    state_a = driver.ContinualState()  # lambda_s = 0.0
    state_b = driver.ContinualState()
    m_a = driver.train_task(net_a, pstate, cfg, state_a, train, val,
                            np.random.default_rng(5))
    m_b = driver.train_task(net_b, None, cfg, state_b, train, val,
                            np.random.default_rng(5))
    for (ka, pa), (kb, pb) in zip(net_a.param_items(), net_b.param_items()):
        assert ka == kb
        assert np.array_equal(pa, pb)
    assert m_a["target_val_acc"] == m_b["target_val_acc"]


def test_early_stopping_restores_best_epoch():
    base, network = tiny_problem(seed=2)
    train, val = datamod.split(base, 0.2, seed=3)
    cfg = driver.RunConfig(epochs=4, batch_size=32, early_stopping=True)
    state = driver.ContinualState()
    snapshots = []

    def hook(net_, row):
        snapshots.append((row["target_val_acc"], net_.clone()))

    metrics = driver.train_task(network, None, cfg, state, train, val,
                                np.random.default_rng(1), epoch_hook=hook)
    best_acc, best_net = max(snapshots, key=lambda t: t[0])
    assert metrics["target_val_acc"] == pytest.approx(best_acc)
    for (_, pa), (_, pb) in zip(network.param_items(), best_net.param_items()):
        assert np.array_equal(pa, pb)


def test_divergent_run_is_marked_failed():
    base, network = tiny_problem(seed=4)
    train, val = datamod.split(base, 0.2, seed=3)
    cfg = driver.RunConfig(lr=1e30, epochs=3, batch_size=32)
    state = driver.ContinualState()
    metrics = driver.train_task(network, None, cfg, state, train, val,
                                np.random.default_rng(0))
    assert metrics["failed"]


def test_alpha_updates_only_rescale_divisors():
    """Enabling the adaptive divisors must not change which loss terms enter
    the objective: with alpha frozen at 1 the trajectory matches the
    alpha-disabled one exactly."""
    base, network = tiny_problem(seed=5)
    train, val = datamod.split(base, 0.2, seed=3)

    # build a one-term penalty so the source loss is active
    anchors = pen.snapshot_anchors(network)
    from xkfac import curvature
    factors = curvature.estimate_factors(
        network, driver.make_sampler(train), 4, 16, np.random.default_rng(9))
    terms = curvature.accumulate([], 1.0, factors, 1.0)
    state_kwargs = dict(tasks_learned=1)

    nets_out = []
    for alpha_enabled in (False, True):
        net_c = network.clone()
        pstate = pen.PenaltyState(anchors=[a.copy() for a in anchors],
                                  terms=terms, damping=1e-4)
        state = driver.ContinualState(**state_kwargs)
        state.recompute_importance()
        # huge interval: alpha never actually updates inside the run
        cfg = driver.RunConfig(epochs=2, batch_size=32,
                               alpha_enabled=alpha_enabled,
                               alpha_interval=10 ** 9,
                               early_stopping=False)
        state.c_t = 0.123  # only read when alpha is enabled
        driver.train_task(net_c, pstate, cfg, state, train, val,
                          np.random.default_rng(7))
        nets_out.append(net_c)
    for (_, pa), (_, pb) in zip(nets_out[0].param_items(),
                                nets_out[1].param_items()):
        assert np.array_equal(pa, pb)


# -- bookkeeping across tasks ------------------------------------------------


def test_finish_task_weight_trace():
    base, network = tiny_problem(seed=6)
    train, _ = datamod.split(base, 0.2, seed=3)
    cfg = driver.RunConfig(batch_size=32, fisher_batches=2,
                           fisher_batch_size=16)
    state = driver.ContinualState()
    pstate = pen.PenaltyState(anchors=[], terms=[], damping=cfg.damping)
    rng = np.random.default_rng(0)

    expected_traces = [[1.0], [0.5, 0.5], [1 / 3, 1 / 3, 1 / 3]]
    for k, expected in enumerate(expected_traces):
        driver.finish_task(network, pstate, state, cfg, train, rng)
        assert [t.weight for t in pstate.terms] == pytest.approx(expected)
        assert state.tasks_learned == k + 1
    assert state.lambda_s == pytest.approx(3 / 4)
    assert state.lambda_t == pytest.approx(1 / 4)
    assert pstate.anchors  # anchors refreshed


def test_metrics_csv_fields(tmp_path):
    rows = [{f: 0 for f in driver.METRIC_FIELDS}]
    path = tmp_path / "metrics.csv"
    driver.write_metrics_csv(path, rows)
    with open(path) as f:
        got = list(csv.DictReader(f))
    assert list(got[0].keys()) == driver.METRIC_FIELDS
    assert len(got) == 1


def test_run_continual_two_tasks_smoke(tmp_path):
    base, network = tiny_problem(seed=7, n=300)
    tasks = driver.TaskSequence(base, 2, val_fraction=0.2)
    cfg = driver.RunConfig(epochs=2, batch_size=32, fisher_batches=3,
                           fisher_batch_size=16, seed=1)
    path = tmp_path / "m.csv"
    out = driver.run_continual(network, tasks, cfg, mode="xkfac",
                               metrics_path=path, log=None)
    assert len(out["avg_val_acc"]) == 2
    with open(path) as f:
        got = list(csv.DictReader(f))
    assert len(got) == 4  # 2 tasks x 2 epochs
    assert {int(r["task_index"]) for r in got} == {0, 1}

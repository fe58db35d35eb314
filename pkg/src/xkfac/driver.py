"""Continual-learning loop: per-task SGD with the quadratic penalty,
adaptive loss scaling, importance bookkeeping, model selection, and the
baseline variants used in the permuted-task experiment."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import curvature, data as datamod, net as nets, penalty as pen


@dataclass
class RunConfig:
    lr: float = 0.1
    lr_decay_every: int = 5          # epochs
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 15
    damping: float = 1e-4
    coupling: str = "diagonal"
    interpretation: str = "brn"
    method: str = "xkfac"            # factor estimation: "xkfac" | "kfac"
    alpha_enabled: bool = False
    alpha_interval: int = 10         # steps between alpha updates
    seed: int = 0
    val_fraction: float = 0.1
    fisher_batches: int = 0          # 0 = one epoch over the training set
    fisher_batch_size: int = 0       # 0 = batch_size
    early_stopping: bool = True
    brn_r_max: float = 3.0           # correction clips for the BRN
    brn_d_max: float = 5.0           # interpretation / BRN layers

    def __post_init__(self):
        if self.lr < 0 or self.damping < 0 or self.momentum < 0:
            raise ValueError("rates must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class ContinualState:
    tasks_learned: int = 0
    lambda_s: float = 0.0
    lambda_t: float = 1.0
    alpha_s: int = 1
    alpha_t: int = 1
    c_t: float = 0.0
    interval: int = 10

    def recompute_importance(self):
        """Equal task importance: lambda_s = T/(T+1), lambda_t = 1/(T+1)."""
        t = self.tasks_learned
        self.lambda_s = t / (t + 1)
        self.lambda_t = 1 / (t + 1)


def update_alphas(state: ContinualState, avg_source, avg_target):
    """One interval of the adaptive scaling state machine.

    If the (importance-weighted) source penalty average dominates, alpha_t
    grows by 1 per interval; on the first flip it resets to 1.  Symmetric for
    alpha_s.  Ties leave both at 1; at most one ever exceeds 1.
    """
    if avg_source > avg_target:
        if state.alpha_s > 1:
            state.alpha_s = 1
        else:
            state.alpha_t += 1
    elif avg_target > avg_source:
        if state.alpha_t > 1:
            state.alpha_t = 1
        else:
            state.alpha_s += 1
    return state.alpha_s, state.alpha_t


def evaluate(network, ds, batch_size=512):
    """Eval-mode classification accuracy."""
    correct = 0
    for start in range(0, ds.n, batch_size):
        xb = ds.images[:, start:start + batch_size]
        _, logits = network.forward(xb, train_mode=False)
        correct += int((logits.argmax(axis=0) == ds.labels[start:start + batch_size]).sum())
    return correct / ds.n


def mean_training_loss(network, ds, batch_size=512):
    total = 0.0
    for start in range(0, ds.n, batch_size):
        xb = ds.images[:, start:start + batch_size]
        _, logits = network.forward(xb, train_mode=False)
        total += float(nets.cross_entropy(logits, ds.labels[start:start + batch_size]).sum())
    return total / ds.n


def _restore_from(dst, src):
    """Copy all parameters and population statistics of src into dst."""
    for b_dst, b_src in zip(dst.blocks, src.blocks):
        for name, arr in b_dst.params().items():
            arr[...] = b_src.params()[name]
        if b_dst.kind == "norm":
            b_dst.pop_mean[...] = b_src.pop_mean
            b_dst.pop_var[...] = b_src.pop_var


class SgdMomentum:
    def __init__(self, momentum):
        self.momentum = momentum
        self.velocity = {}

    def step(self, network, grads, lr):
        params = dict(network.param_items())
        for key, g in grads.items():
            v = self.velocity.get(key)
            v = g if v is None else self.momentum * v + g
            self.velocity[key] = v
            params[key] -= lr * v


def _combine(target_grads, penalty_grads, ct, cs):
    out = {}
    for key, g in target_grads.items():
        out[key] = ct * g
        if penalty_grads and key in penalty_grads:
            out[key] = out[key] + cs * penalty_grads[key]
    if penalty_grads:
        for key, g in penalty_grads.items():
            if key not in out:
                out[key] = cs * g
    return out


def train_task(network, pstate, cfg: RunConfig, state: ContinualState,
               train_ds, val_ds, rng, extra_penalty=None, epoch_hook=None):
    """Train one target task with the combined objective.

    ``pstate`` may be None (plain fine-tuning).  ``extra_penalty`` is an
    alternative penalty object with a ``raw_gradient(network, acts)`` method
    (used by the `separate` baseline).  Returns a metrics dict; a run that
    diverges is marked failed instead of raising.
    """
    opt = SgdMomentum(cfg.momentum)
    penalty_on = state.lambda_s > 0 and (
        (pstate is not None and (pstate.terms or pstate.damping > 0))
        or extra_penalty is not None)
    steps_per_epoch = max(1, train_ds.n // cfg.batch_size)
    metrics = {"epochs": [], "failed": False}
    best_acc, best_snapshot = -1.0, None
    interval_src, interval_tgt, interval_count = 0.0, 0.0, 0

    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr / (cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every))
            order = rng.permutation(train_ds.n)
            ls_sum, lt_sum = 0.0, 0.0
            for step in range(steps_per_epoch):
                idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                xb = train_ds.images[:, idx]
                yb = train_ds.labels[idx]
                acts, logits = network.forward(xb, train_mode=True)
                l_t = float(nets.cross_entropy(logits, yb).mean())
                t_grads = network.backward(acts, yb)
                p_grads, l_s = None, 0.0
                if penalty_on:
                    if extra_penalty is not None:
                        l_s, p_grads = extra_penalty.raw_gradient(network, acts)
                    else:
                        l_s, p_grads = pen.penalty_raw_gradient(
                            network, acts, pstate, cfg.interpretation)
                grads = _combine(t_grads, p_grads,
                                 state.lambda_t / state.alpha_t,
                                 state.lambda_s / state.alpha_s)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise FloatingPointError("non-finite gradient")
                opt.step(network, grads, lr)
                ls_sum += l_s
                lt_sum += l_t
                if cfg.alpha_enabled and penalty_on:
                    interval_src += state.lambda_s * l_s
                    interval_tgt += state.lambda_t * (l_t - state.c_t)
                    interval_count += 1
                    if interval_count == cfg.alpha_interval:
                        update_alphas(state, interval_src / interval_count,
                                      interval_tgt / interval_count)
                        interval_src = interval_tgt = 0.0
                        interval_count = 0
            val_acc = evaluate(network, val_ds)
            row = {"epoch": epoch, "target_val_acc": val_acc,
                   "L_s": ls_sum / steps_per_epoch,
                   "L_t": lt_sum / steps_per_epoch,
                   "alpha_s": state.alpha_s, "alpha_t": state.alpha_t}
            metrics["epochs"].append(row)
            if epoch_hook is not None:
                epoch_hook(network, row)
            if val_acc > best_acc:
                best_acc = val_acc
                if cfg.early_stopping:
                    best_snapshot = network.clone()
    except FloatingPointError:
        metrics["failed"] = True
        return metrics

    if cfg.early_stopping and best_snapshot is not None:
        _restore_from(network, best_snapshot)
    metrics["target_val_acc"] = best_acc if cfg.early_stopping else \
        metrics["epochs"][-1]["target_val_acc"]
    return metrics


def measure_ct(network, train_ds, val_ds, cfg: RunConfig, rng):
    """Target-loss floor: final-epoch mean training loss of a penalty-free
    fine-tuning run on a copy of the network."""
    probe = network.clone()
    state = ContinualState()  # lambda_s = 0: plain fine-tuning
    probe_cfg = replace(cfg, alpha_enabled=False, early_stopping=False)
    metrics = train_task(probe, None, probe_cfg, state, train_ds, val_ds, rng)
    if metrics["failed"]:
        raise FloatingPointError("C_t measurement run diverged")
    return metrics["epochs"][-1]["L_t"]


def select_model(runs):
    """Pick the run with the best target validation accuracy; ties go to the
    smaller damping, then the smaller learning rate."""
    ok = [r for r in runs if not r.get("failed")]
    if not ok:
        raise ValueError("all runs failed")
    return min(ok, key=lambda r: (-r["target_val_acc"], r["damping"], r["lr"]))


def make_sampler(ds):
    def sampler(rng, batch_size):
        idx = rng.integers(0, ds.n, size=batch_size)
        return ds.images[:, idx]
    return sampler


def finish_task(network, pstate, state: ContinualState, cfg: RunConfig,
                train_ds, rng):
    """Postprocessing after a task: estimate target-task factors on the
    selected model, fold them into the penalty, snapshot new anchors, and
    advance the importance weights."""
    fisher_bs = cfg.fisher_batch_size or cfg.batch_size
    n_batches = cfg.fisher_batches or max(1, train_ds.n // fisher_bs)
    factors = curvature.estimate_factors(
        network, make_sampler(train_ds), n_batches, fisher_bs, rng,
        coupling=cfg.coupling, method=cfg.method)
    lam_s = state.lambda_s if pstate.terms else 1.0
    pstate.terms = curvature.accumulate(pstate.terms, lam_s, factors,
                                        state.lambda_t)
    pstate.anchors = pen.snapshot_anchors(network)
    state.tasks_learned += 1
    state.recompute_importance()
    return pstate, state


# ---------------------------------------------------------------------------
# `separate` baseline: per-parameter diagonal-Fisher penalty including the
# batch statistics, without weight merging.


class SeparatePenalty:
    """EWC-style diagonal penalty on raw parameters plus the mini-batch
    statistics of every norm layer; statistic terms propagate into the
    preceding weights and activations, which is exactly the conflict weight
    merging avoids."""

    def __init__(self, damping=0.0):
        self.fisher = {}        # param key -> diagonal Fisher
        self.anchors = {}       # param key -> anchor values
        self.stat_fisher = {}   # norm block idx -> (F_mu, F_var)
        self.stat_anchors = {}  # norm block idx -> (mu*, var*)
        self.damping = damping

    def estimate(self, network, sampler, n_batches, batch_size, rng,
                 lambda_s, lambda_t):
        fisher = {k: np.zeros_like(v) for k, v in network.param_items()}
        stat_fisher = {i: (np.zeros_like(b.pop_mean), np.zeros_like(b.pop_var))
                       for i, b in enumerate(network.blocks) if b.kind == "norm"}
        for _ in range(n_batches):
            x = sampler(rng, batch_size)
            acts, logits = network.forward(x, train_mode=True, update_stats=False)
            labels = nets.sample_model_labels(logits, rng)
            res = network.per_example_backward(
                acts, targets=labels, collect_param_grads=True,
                collect_stat_grads=True)
            for pg in res["param_grads"]:
                for k in fisher:
                    fisher[k] += pg[k] ** 2 / batch_size
            for sg in res["stat_grads"]:
                for i, d in sg.items():
                    stat_fisher[i][0][...] += d["mu"] ** 2 / batch_size
                    stat_fisher[i][1][...] += d["var"] ** 2 / batch_size
        for k in fisher:
            fisher[k] /= n_batches
        for i in stat_fisher:
            stat_fisher[i][0][...] /= n_batches
            stat_fisher[i][1][...] /= n_batches
        # online EWC-style accumulation
        if self.fisher:
            for k in fisher:
                self.fisher[k] = lambda_s * self.fisher[k] + lambda_t * fisher[k]
            for i in stat_fisher:
                self.stat_fisher[i] = (
                    lambda_s * self.stat_fisher[i][0] + lambda_t * stat_fisher[i][0],
                    lambda_s * self.stat_fisher[i][1] + lambda_t * stat_fisher[i][1])
        else:
            self.fisher = fisher
            self.stat_fisher = stat_fisher
        self.anchors = {k: v.copy() for k, v in network.param_items()}
        self.stat_anchors = {i: (b.pop_mean.copy(), b.pop_var.copy())
                             for i, b in enumerate(network.blocks)
                             if b.kind == "norm"}

    def raw_gradient(self, network, acts):
        value = 0.0
        grads = {}
        for k, p in network.param_items():
            diff = p - self.anchors[k]
            coef = self.fisher[k] + self.damping
            grads[k] = coef * diff
            value += 0.5 * float(np.sum(coef * diff * diff))
        injections = {}
        unit_of_norm = {u.norm_idx: ui for ui, u in enumerate(network.units)
                        if u.norm_idx is not None}
        for i, blk in enumerate(network.blocks):
            if blk.kind != "norm" or i not in unit_of_norm:
                continue
            cache = acts.block_cache[i]
            mu_b, var_b = cache["mu_b"], cache["var_b"]
            f_mu, f_var = self.stat_fisher[i]
            mu_a, var_a = self.stat_anchors[i]
            u = f_mu * (mu_b - mu_a)
            v = f_var * (var_b - var_a)
            value += 0.5 * float(np.sum(f_mu * (mu_b - mu_a) ** 2))
            value += 0.5 * float(np.sum(f_var * (var_b - var_a) ** 2))
            z = cache["z_in"]
            m = z.shape[1]
            dz = (u[:, None] + v[:, None] * 2.0 * (z - mu_b[:, None])) / m
            ui = unit_of_norm[i]
            lin_idx = network.units[ui].linear_idx
            lin = network.blocks[lin_idx]
            a_in = acts.block_cache[lin_idx]["a_in"]
            grads[f"{lin_idx}.w"] = grads[f"{lin_idx}.w"] + dz @ a_in.T
            grads[f"{lin_idx}.b"] = grads[f"{lin_idx}.b"] + dz.sum(axis=1)
            if ui > 0:
                injections[ui] = lin.w.T @ dz
        if injections:
            extra = network.backward_from_logit_grad(
                acts, np.zeros_like(acts.logits),
                activation_injections=injections)
            for k, g in extra.items():
                grads[k] = grads[k] + g
        return value, grads


# ---------------------------------------------------------------------------
# task sequences and the full experiment loop


class TaskSequence:
    """Permuted tasks over a base dataset; exposes one task at a time."""

    def __init__(self, base, n_tasks, val_fraction=0.1, split_seed=1234,
                 train_per_task=None):
        self.base = base
        self.n_tasks = n_tasks
        self.val_fraction = val_fraction
        self.split_seed = split_seed
        self.train_per_task = train_per_task

    def task(self, i):
        ds = datamod.permute_task(self.base, 0 if i == 0 else 1000 + i)
        train, val = datamod.split(ds, self.val_fraction, self.split_seed + i)
        if self.train_per_task and train.n > self.train_per_task:
            train = train.subset(np.arange(self.train_per_task), "train")
        return train, val


def run_continual(network, tasks: TaskSequence, cfg: RunConfig, mode="xkfac",
                  metrics_path=None, log=print):
    """Sequentially learn every task; returns per-task average accuracies.

    Modes: "xkfac" (merged-weight penalty, interpretation from cfg),
    "kfac" (same but cross-example terms dropped), "const-stats",
    "eval-stats" (merge interpretations), "separate" (per-parameter
    penalty), "finetune" (no penalty).
    """
    cfg = replace(cfg)
    if mode == "kfac":
        cfg = replace(cfg, method="kfac")
    elif mode == "const-stats":
        cfg = replace(cfg, interpretation="const_stats")
    elif mode == "eval-stats":
        cfg = replace(cfg, interpretation="eval_stats")

    state = ContinualState(interval=cfg.alpha_interval)
    if cfg.interpretation == "brn":
        network.set_brn_limits(cfg.brn_r_max, cfg.brn_d_max)
    pstate = pen.PenaltyState(anchors=[], terms=[], damping=cfg.damping)
    separate = SeparatePenalty(damping=cfg.damping) if mode == "separate" else None
    val_sets = []
    rows = []
    avg_history = []

    for ti in range(tasks.n_tasks):
        rng = np.random.default_rng(cfg.seed * 100003 + ti)
        train_ds, val_ds = tasks.task(ti)
        val_sets.append(val_ds)
        use_penalty = mode != "finetune" and ti > 0
        if use_penalty:
            stats = pen.measure_population_stats(network, train_ds.images)
            pen.preprocess_reinit(network, stats)
        if cfg.alpha_enabled and use_penalty:
            state.c_t = measure_ct(network, train_ds, val_ds, cfg,
                                   np.random.default_rng(rng.integers(2 ** 62)))
        state.alpha_s = state.alpha_t = 1

        def hook(net_, row, ti=ti):
            accs = [evaluate(net_, v) for v in val_sets]
            rows.append({"task_index": ti, "epoch": row["epoch"],
                         "target_val_acc": row["target_val_acc"],
                         "avg_val_acc_all_seen_tasks": float(np.mean(accs)),
                         "L_s": row["L_s"], "L_t": row["L_t"],
                         "alpha_s": row["alpha_s"], "alpha_t": row["alpha_t"]})

        metrics = train_task(
            network,
            pstate if (use_penalty and separate is None) else None,
            cfg, state, train_ds, val_ds, rng,
            extra_penalty=separate if (use_penalty and separate is not None) else None,
            epoch_hook=hook)
        if metrics["failed"]:
            raise FloatingPointError(f"task {ti} diverged")

        if mode == "finetune":
            state.tasks_learned += 1
        elif separate is not None:
            fisher_bs = cfg.fisher_batch_size or cfg.batch_size
            n_batches = cfg.fisher_batches or max(1, train_ds.n // fisher_bs)
            lam_s = state.lambda_s if separate.fisher else 1.0
            separate.estimate(network, make_sampler(train_ds), n_batches,
                              fisher_bs, rng, lam_s, state.lambda_t)
            state.tasks_learned += 1
            state.recompute_importance()
        else:
            finish_task(network, pstate, state, cfg, train_ds, rng)

        accs = [evaluate(network, v) for v in val_sets]
        avg_history.append(float(np.mean(accs)))
        if log:
            log(f"[{mode}] task {ti}: target_val={metrics['target_val_acc']:.4f} "
                f"avg_seen={avg_history[-1]:.4f}")

    if metrics_path:
        write_metrics_csv(metrics_path, rows)
    return {"avg_val_acc": avg_history, "rows": rows}


METRIC_FIELDS = ["task_index", "epoch", "target_val_acc",
                 "avg_val_acc_all_seen_tasks", "L_s", "L_t",
                 "alpha_s", "alpha_t"]


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row)

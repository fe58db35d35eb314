"""Command line entry points for the permuted-task experiments."""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import curvature, data as datamod, driver, net as nets, oracle

CONFIG_KEYS = {f.name: f.type for f in dataclasses.fields(driver.RunConfig)}


def read_config_file(path):
    """Flat key=value file; blank lines and '#' comments allowed."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


def build_run_config(args):
    values = {}
    if args.config:
        for key, val in read_config_file(args.config).items():
            if key not in CONFIG_KEYS:
                raise ValueError(f"unknown config key: {key}")
            field = {f.name: f for f in dataclasses.fields(driver.RunConfig)}[key]
            caster = type(field.default)
            values[key] = caster(float(val)) if caster in (int, float) else str(val)
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return driver.RunConfig(**values)


def add_config_flags(p):
    for f in dataclasses.fields(driver.RunConfig):
        kind = type(f.default)
        if kind is bool:
            p.add_argument(f"--{f.name.replace('_', '-')}", default=None,
                           type=lambda s: s.lower() in ("1", "true", "yes"))
        else:
            p.add_argument(f"--{f.name.replace('_', '-')}", default=None, type=kind)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--data-dir", default=None,
                   help="directory with MNIST idx files (default: $XKFAC_DATA_DIR)")
    p.add_argument("--hidden", type=int, default=100)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--norm", default="bn", choices=["bn", "brn", "none"])
    p.add_argument("--out", default=None,
                   help="output file (checkpoint, factor file, or metrics "
                        "CSV depending on the subcommand)")


def load_base_dataset(args, log=print):
    data_dir = args.data_dir or os.environ.get("XKFAC_DATA_DIR")
    if data_dir:
        found = datamod.find_mnist(data_dir)
        if found is not None:
            log(f"using MNIST from {data_dir}")
            return datamod.load_mnist_idx(*found)
        log(f"no idx files under {data_dir}; falling back to synthetic digits")
    else:
        log("no data directory given; using synthetic digits")
    return datamod.synthetic_digits(seed=0)


def build_network(args, features, classes, seed):
    dims = [features] + [args.hidden] * args.layers + [classes]
    norm = None if args.norm == "none" else args.norm
    return nets.Network.mlp(dims, np.random.default_rng(seed), norm_mode=norm)


def cmd_train_first(args):
    cfg = build_run_config(args)
    base = load_base_dataset(args)
    tasks = driver.TaskSequence(base, 1, val_fraction=cfg.val_fraction)
    train_ds, val_ds = tasks.task(0)
    network = build_network(args, base.images.shape[0], base.classes, cfg.seed)
    state = driver.ContinualState()
    rng = np.random.default_rng(cfg.seed)
    metrics = driver.train_task(network, None, cfg, state, train_ds, val_ds, rng)
    out = args.out or "task0.npz"
    network.save(out)
    print(f"task 0 val acc {metrics['target_val_acc']:.4f}; saved {out}")
    return 0


def cmd_estimate(args):
    cfg = build_run_config(args)
    base = load_base_dataset(args)
    network = nets.Network.load(args.checkpoint)
    tasks = driver.TaskSequence(base, 1, val_fraction=cfg.val_fraction)
    train_ds, _ = tasks.task(0)
    rng = np.random.default_rng(cfg.seed)
    fisher_bs = cfg.fisher_batch_size or cfg.batch_size
    n_batches = cfg.fisher_batches or max(1, train_ds.n // fisher_bs)
    factors = curvature.estimate_factors(
        network, driver.make_sampler(train_ds), n_batches, fisher_bs, rng,
        coupling=cfg.coupling, method=cfg.method)
    out = args.out or "factors.npz"
    curvature.save_terms(out, [curvature.CurvatureTerm(1.0, factors)])
    print(f"estimated factors from {n_batches} batches; saved {out}")
    return 0


def _run_sequence(args, mode):
    cfg = build_run_config(args)
    base = load_base_dataset(args)
    tasks = driver.TaskSequence(base, args.tasks, val_fraction=cfg.val_fraction)
    network = build_network(args, base.images.shape[0], base.classes, cfg.seed)
    result = driver.run_continual(network, tasks, cfg, mode=mode,
                                  metrics_path=args.out)
    print(f"final avg val acc over {args.tasks} tasks: "
          f"{result['avg_val_acc'][-1]:.4f}")
    if args.out:
        print(f"metrics written to {args.out}")
    return 0


def cmd_continual(args):
    return _run_sequence(args, "xkfac")


def cmd_baseline(args):
    return _run_sequence(args, args.mode)


def cmd_verify(args):
    """Small oracle battery; prints a pass/fail table."""
    rng = np.random.default_rng(0)
    checks = []

    net = nets.Network.mlp([4, 5, 3], rng, norm_mode="bn")
    x = rng.standard_normal((4, 6))
    y = rng.integers(0, 3, size=6)

    acts, _ = net.forward(x, train_mode=True)
    grads = net.backward(acts, y)
    eps = 1e-6
    for key, p in net.param_items():
        flat = p.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            vp = oracle.mean_loss(net, x, y)
            flat[i] = old - eps
            vm = oracle.mean_loss(net, x, y)
            flat[i] = old
            worst = max(worst, abs((vp - vm) / (2 * eps)
                                   - grads[key].reshape(-1)[i]))
        checks.append((f"fd gradient {key}", worst, 1e-6))

    for l in range(2):
        fd = oracle.fd_hessian(net, x, y, l, l)
        an = oracle.hessian_from_contraction(net, x, y, l, l)
        mask = np.abs(fd) > 1e-6
        rel = (np.abs(an - fd) / np.maximum(np.abs(fd), 1e-6))[mask].max()
        checks.append((f"layer Hessian contraction unit {l}", float(rel), 1e-4))

    data = rng.standard_normal((4, 5))
    ex = oracle.exhaustive_factors(net, data, 2, pairs=[(0, 0)])
    est = curvature.estimate_factors(
        net, lambda r, b: data[:, r.choice(5, size=b, replace=False)],
        n_batches=2000, batch_size=2, rng=np.random.default_rng(1))
    err = float(np.max(np.abs(ex[(0, 0)]["Hpp"] - est.get(0, 0, "Hpp"))))
    checks.append(("factor estimation vs exhaustive (loose)", err, 0.2))

    failed = 0
    for name, err, tol in checks:
        ok = err <= tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: err={err:.3e} tol={tol:g}")
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="xkfac")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-first", help="train on the first task and save it")
    add_config_flags(p)
    p.set_defaults(func=cmd_train_first)

    p = sub.add_parser("estimate", help="estimate curvature factors for a checkpoint")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("continual", help="run the full continual sequence")
    add_config_flags(p)
    p.add_argument("--tasks", type=int, default=5)
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("baseline", help="run a baseline variant")
    add_config_flags(p)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--mode", required=True,
                   choices=["finetune", "separate", "kfac", "const-stats",
                            "eval-stats"])
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("verify", help="run quick numerical self-checks")
    p.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``madpoison <subcommand> [options]``.

Environment overrides: ``MADPOISON_OUT`` (output directory),
``MADPOISON_THREADS`` (BLAS thread count), ``MADPOISON_DATA`` (data root).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import attacks, data, defenses, harness, nn


def _config(args):
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    for item in args.set or ():
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        d = cfg.to_dict()
        if key not in d:
            raise SystemExit(f"unknown config key {key!r}")
        d[key] = value
        cfg = harness.ExperimentConfig.from_dict(d)
    env_out = os.environ.get("MADPOISON_OUT")
    if args.out:
        cfg.out_dir = args.out
    elif env_out:
        cfg.out_dir = env_out
    return cfg


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _policy_from_args(args, cfg):
    base = cfg.defenses[0]
    return defenses.DefensePolicy(kind=args.defense, epsilon=args.epsilon, beta=args.beta, gamma=args.gamma,
                                  decimals=args.decimals, k=args.k, surrogate=base.surrogate)


def cmd_fetch_mnist(args):
    path = data.fetch_mnist(args.dir)
    print(f"MNIST written to {path}")


def cmd_make_letters(args):
    pool = data.letters_pool(args.n, args.seed, args.dir)
    print(f"{len(pool)} letters, sha256 {pool.digest}")


def cmd_train_victim(args):
    cfg = _config(args)
    bench = harness.Workbench(cfg)
    victim = harness.train_victim(cfg, bench.train)
    path = Path(args.model or cfg.victim_path or Path(cfg.out_dir) / "victim.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_model(victim, path)
    acc = nn.accuracy(victim, bench.test.inputs, bench.test.labels)
    print(f"victim {cfg.victim_arch} test accuracy {acc:.4f} -> {path}")


def cmd_attack(args):
    cfg = _config(args)
    acfg = attacks.AttackConfig.from_dict({**cfg.attacks[0].to_dict(), **{
        k: v for k, v in {"strategy": args.strategy, "budget": args.budget, "seed": args.seed,
                          "subversion": args.subversion.split(",") if args.subversion else None}.items()
        if v is not None}})
    bench = harness.Workbench(cfg)
    point = harness.run_point(bench, _policy_from_args(args, cfg), acfg)
    harness.emit_results([point], [], cfg.out_dir, provenance={"config": cfg.to_dict()})
    _print_points([point])


def cmd_sweep(args):
    cfg = _config(args)
    if args.defense:
        eps = _floats(args.epsilons) if args.epsilons else harness.DEFAULT_EPSILONS
        cfg.defenses = harness.expand_epsilons(args.defense, eps, surrogate=cfg.defenses[0].surrogate)
    points = harness.run_sweep(cfg)
    _print_points(points)


def cmd_ablation(args):
    cfg = _config(args)
    eps = _floats(args.epsilons) if args.epsilons else None
    seeds = [int(s) for s in args.seeds.split(",")]
    points = harness.run_ablation(cfg, epsilons=eps, seeds=seeds)
    _print_points(points)


def cmd_angular(args):
    cfg = _config(args)
    bench = harness.Workbench(cfg)
    policy = defenses.DefensePolicy(kind=args.defense, epsilon=args.epsilon, surrogate=cfg.defenses[0].surrogate)
    surrogate = bench.surrogate(policy.surrogate) if args.mode == "blackbox" else None
    hist = harness.run_angular_experiment(bench.victim, policy, args.mode, args.steps, bench.train.inputs,
                                          test=bench.test, lr=args.lr, seed=args.seed, surrogate=surrogate)
    harness.emit_results([], [hist], cfg.out_dir, provenance={"config": cfg.to_dict()})
    print(f"{args.mode} eps={args.epsilon:g}: mean deviation {hist.mean_theta:.1f} deg over {args.steps} steps")
    print("test loss trace: " + " ".join(f"{v:.3f}" for v in hist.test_loss_trace))


def cmd_timing(args):
    cfg = _config(args)
    bench = harness.Workbench(cfg)
    X = bench.test.inputs[:args.n_queries]
    rows = []
    for kind in ("none", "mad"):
        ep = bench.endpoint(defenses.DefensePolicy(kind=kind, epsilon=0.5 if kind == "mad" else 0.0,
                                                   surrogate=cfg.defenses[0].surrogate))
        mean, std = harness.timing_report(ep, X, args.n_queries)
        rows.append((kind, bench.n_classes, mean, std))
    for K in [int(k) for k in args.classes.split(",") if k]:
        victim = nn.build_model(cfg.victim_arch, bench.input_shape, K, seed=0)
        surrogate = nn.build_model(cfg.defenses[0].surrogate.arch_id, bench.input_shape, K, seed=1)
        ep = defenses.DefendedEndpoint(victim, defenses.DefensePolicy(kind="mad", epsilon=0.5), surrogate=surrogate)
        mean, std = harness.timing_report(ep, X, args.n_queries)
        rows.append(("mad", K, mean, std))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", "n_classes", "mean_ms", "std_ms"])
        w.writerows(rows)
    for kind, K, mean, std in rows:
        print(f"{kind:5s} K={K:<4d} {mean:8.2f} +- {std:.2f} ms/query")


def cmd_emit(args):
    points, hists = harness.load_results(args.results)
    files = harness.emit_results(points, hists, args.out or args.results)
    for name, path in files.items():
        print(f"{name}: {path}")


def _print_points(points):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(harness.CSV_COLUMNS)
    for p in points:
        w.writerow(p.row())


def build_parser():
    parser = argparse.ArgumentParser(prog="madpoison", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a top-level config key")
        p.add_argument("--out", help="output directory (overrides $MADPOISON_OUT, which overrides config out_dir)")
        return p

    def with_defense(p, default="mad"):
        p.add_argument("--defense", default=default, choices=defenses.KINDS)
        p.add_argument("--epsilon", type=float, default=0.0)
        p.add_argument("--beta", type=float, default=0.0)
        p.add_argument("--gamma", type=float, default=0.2)
        p.add_argument("--decimals", type=int, default=2)
        p.add_argument("--k", type=int, default=1)
        return p

    p = sub.add_parser("fetch-mnist", help="download MNIST IDX files")
    p.add_argument("--dir")
    p.set_defaults(func=cmd_fetch_mnist)

    p = sub.add_parser("make-letters", help="render the letter query pool")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dir")
    p.set_defaults(func=cmd_make_letters)

    p = with_config(sub.add_parser("train-victim", help="train and save the victim model"))
    p.add_argument("--model", help="checkpoint path")
    p.set_defaults(func=cmd_train_victim)

    p = with_defense(with_config(sub.add_parser("attack", help="one defense/attack operating point")), "none")
    p.add_argument("--strategy", choices=attacks.STRATEGIES)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--subversion", help="comma list: argmax_only, nquery:N, nquery_aug:N, opt_adam")
    p.set_defaults(func=cmd_attack)

    p = with_config(sub.add_parser("sweep", help="defense sweep over epsilon"))
    p.add_argument("--defense", choices=defenses.KINDS, help="sweep this kind instead of the config grid")
    p.add_argument("--epsilons", help="comma list (default grid if omitted)")
    p.set_defaults(func=cmd_sweep)

    p = with_config(sub.add_parser("ablation", help="MAD ablations over epsilon and seeds"))
    p.add_argument("--epsilons")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_ablation)

    p = with_config(sub.add_parser("angular", help="angular-deviation histogram"))
    p.add_argument("--defense", default="mad", choices=("mad", "mad_argmax"))
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--mode", default="whitebox", choices=("whitebox", "blackbox"))
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_angular)

    p = with_config(sub.add_parser("timing", help="per-query latency"))
    p.add_argument("--n-queries", type=int, default=100)
    p.add_argument("--classes", default="2,10,100", help="extra MAD runs with K-class random models")
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("emit", help="re-render CSV/SVG from a results.json directory")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_emit)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("MADPOISON_THREADS")
    if threads:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(int(threads)):
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    main()

"""Command-line entry point.

Subcommands: ``run`` (one experiment), ``sweep`` (vary one config key),
``accountant`` (epsilon queries), ``presets`` (bundled configurations).
Machine-readable results go to stdout, diagnostics to stderr. Exit codes:
0 success, 2 configuration error, 3 all repetitions diverged.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import json
import math
import os
import sys

from . import harness, presets, privacy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_tree(path: str) -> dict:
    if not os.path.exists(path):
        raise harness.ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise harness.ConfigError(f"{path}: not valid JSON ({e})") from None


def _resolve_config(path: str, seed: int | None) -> harness.ExperimentConfig:
    if path in presets.EXPERIMENT_PRESETS:
        tree = presets.get_experiment_preset(path)
    else:
        tree = _load_tree(path)
    if seed is not None:
        tree["master_seed"] = seed
    return harness.parse_config(tree)


def cmd_run(args) -> int:
    try:
        cfg = _resolve_config(args.config, args.seed)
    except harness.ConfigError as e:
        _err(f"config error: {e}")
        return EXIT_CONFIG
    try:
        artifacts = harness.run_experiment(cfg)
    except RuntimeError as e:
        _err(f"run failed: {e}")
        return EXIT_DIVERGED
    paths = harness.write_outputs(artifacts, args.out)
    print(json.dumps({"out_dir": args.out, "files": paths, "summary": artifacts.summary,
                      "privacy": artifacts.privacy}, sort_keys=True))
    return EXIT_OK


def _set_key(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
            raise harness.ConfigError(
                f"sweep key {dotted!r}: no section {part!r}; valid keys here: {sorted(node)}")
        node = node[part]
    if parts[-1] not in node:
        raise harness.ConfigError(
            f"sweep key {dotted!r}: unknown key {parts[-1]!r}; valid keys here: {sorted(node)}")
    node[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _max_workers() -> int:
    raw = os.environ.get("FLG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def cmd_sweep(args) -> int:
    if "=" not in args.vary:
        _err("sweep error: --vary expects KEY=V1,V2,...")
        return EXIT_CONFIG
    key, _, raw_values = args.vary.partition("=")
    values = [_parse_value(v) for v in raw_values.split(",") if v != ""]
    if not values:
        _err("sweep error: no values given")
        return EXIT_CONFIG
    try:
        if args.config in presets.EXPERIMENT_PRESETS:
            base = presets.get_experiment_preset(args.config)
        else:
            base = _load_tree(args.config)
        # Materialize one standalone config per sweep point.
        points = []
        for v in values:
            tree = copy.deepcopy(base)
            if args.seed is not None:
                tree["master_seed"] = args.seed
            _set_key(tree, key, v)
            tree["name"] = f"{tree.get('name', 'sweep')}__{key}={v}"
            points.append((v, harness.parse_config(tree), tree))
    except harness.ConfigError as e:
        _err(f"config error: {e}")
        return EXIT_CONFIG

    def _one(point):
        v, cfg, tree = point
        sub = os.path.join(args.out, f"{key.replace('.', '_')}={v}")
        artifacts = harness.run_experiment(cfg)
        harness.write_outputs(artifacts, sub)
        with open(os.path.join(sub, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(tree, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return v, sub, artifacts

    os.makedirs(args.out, exist_ok=True)
    results = []
    failures = 0
    with concurrent.futures.ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        for future in [pool.submit(_one, p) for p in points]:
            try:
                results.append(future.result())
            except RuntimeError as e:
                _err(f"sweep point failed: {e}")
                failures += 1

    combined = os.path.join(args.out, "sweep.csv")
    with open(combined, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([key, "final_main_acc_mean", "final_backdoor_acc_mean",
                         "attack_metric_mean", "eps", "rounds_executed", "out_dir"])
        for v, sub, artifacts in results:
            s = artifacts.summary
            writer.writerow([v, s["final_main_accuracy_mean"], s["final_backdoor_accuracy_mean"],
                             s["attack_metric_mean"], artifacts.privacy["eps"],
                             artifacts.rounds_executed, sub])
    print(json.dumps({"sweep_csv": combined, "points": len(results)}, sort_keys=True))
    if failures == len(points):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_accountant(args) -> int:
    try:
        curve = privacy.rdp_subsampled_gaussian(args.q, args.z, args.steps)
        eps = privacy.rdp_to_dp(curve, args.delta)
    except ValueError as e:
        _err(f"accountant error: {e}")
        return EXIT_CONFIG
    if math.isinf(eps):
        print("infinite")
    else:
        print(f"{eps:.6f}")
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.list:
        for name in sorted(presets.EXPERIMENT_PRESETS):
            print(f"{name}\texperiment")
        for name in sorted(presets.HYPERPARAM_PRESETS):
            print(f"{name}\thyperparameters")
        return EXIT_OK
    name = args.show
    if name in presets.HYPERPARAM_PRESETS:
        row = presets.get_hyperparam_preset(name)
        parts = [f"dataset={row['dataset']}", f"mechanism={row['mechanism']}",
                 f"S={row['S']}"]
        if row["sigma"] is not None:
            parts.append(f"sigma={row['sigma']}")
        if row["z"] is not None:
            parts.append(f"z={row['z']}")
        parts.append(f"eps={row['eps']}")
        parts.append(f"delta={row['delta']}")
        print(" ".join(parts))
        return EXIT_OK
    if name in presets.EXPERIMENT_PRESETS:
        print(json.dumps(presets.get_experiment_preset(name), indent=2, sort_keys=True))
        return EXIT_OK
    _err(f"unknown preset {name!r}; see `fldp presets --list`")
    return EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fldp",
                                     description="Deterministic federated-learning testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("--config", required=True, help="path to a JSON config or a preset name")
    p_run.add_argument("--seed", type=int, default=None, help="override master_seed")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one config across values of one key")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--vary", required=True, metavar="KEY=V1,V2,...",
                         help="dotted config key and comma-separated values")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_acc = sub.add_parser("accountant", help="epsilon of the subsampled Gaussian mechanism")
    p_acc.add_argument("--q", type=float, required=True, help="sampling rate in (0, 1]")
    p_acc.add_argument("--z", type=float, required=True, help="noise multiplier")
    p_acc.add_argument("--steps", type=int, required=True)
    p_acc.add_argument("--delta", type=float, default=1e-5)
    p_acc.set_defaults(fn=cmd_accountant)

    p_pre = sub.add_parser("presets", help="bundled configurations")
    group = p_pre.add_mutually_exclusive_group(required=True)
    group.add_argument("--list", action="store_true")
    group.add_argument("--show", metavar="NAME")
    p_pre.set_defaults(fn=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

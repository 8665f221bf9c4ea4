"""Command-line entry point.

    seea train           run the self-evolution loop, write metrics.csv and checkpoints
    seea eval            greedy success rate of a checkpoint, written to eval.csv
    seea rm-eval         per-class reward-model accuracy on a labeled JSONL set
    seea inspect-tree    run one search and dump the tree as JSONL
    seea validate-config resolve a config and print it, or print all defaults

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command prints the resolved configuration and its hash on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from seea import config as C
from seea import env as E
from seea import evolve as V
from seea import mcts as M
from seea import mgrm as R
from seea.env import ConfigError
from seea.policy import AgentState, InputError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
EVAL_HEADER = V.EVAL_FIELDS


class UsageError(Exception):
    pass


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--preset", choices=sorted(C.PRESETS), help="preset the config builds on (default: default)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one setting; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seea", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the self-evolution loop")
    _config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--reward-mode", choices=[m.value for m in V.RewardMode])
    p.add_argument("--iterations", type=int)
    p.add_argument("--workers", type=int, help="worker processes for tree generation")
    p.add_argument("--out", type=Path, default=Path("runs/latest"))
    p.add_argument("--resume", type=Path, metavar="CHECKPOINT", help="continue from this checkpoint")

    p = sub.add_parser("eval", help="greedy success rate of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="selects the evaluation task set")
    p.add_argument("--out", type=Path, default=Path("eval.csv"))

    p = sub.add_parser("rm-eval", help="reward-model accuracy table")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--labeled-set", type=Path, required=True, help='JSONL of {"state": ..., "label": ...}')
    p.add_argument("--out", type=Path, default=Path("rm_accuracy.csv"))

    p = sub.add_parser("inspect-tree", help="run one search and dump it")
    _config_args(p)
    p.add_argument("--seed", type=int, default=0, help="task seed")
    p.add_argument("--checkpoint", type=Path, help="policy to search with (default: fresh init)")
    p.add_argument("--out", type=Path, default=Path("tree.jsonl"))

    p = sub.add_parser("validate-config", help="check a config and print it")
    _config_args(p)
    p.add_argument("--print-defaults", action="store_true", help="print every default setting and exit")
    return parser


def _parse_overrides(items) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args, extra: dict | None = None) -> V.RunConfig:
    overrides = _parse_overrides(args.overrides)
    overrides.update({k: str(v) for k, v in (extra or {}).items() if v is not None})
    return C.load(args.config, base=args.preset, overrides=overrides)


def _announce(config: V.RunConfig) -> None:
    print(C.dump(config), file=sys.stderr)
    print(f"config_hash {config.hash()}", file=sys.stderr)


def cmd_train(args) -> int:
    config = _resolve(
        args,
        {
            "run.seed": args.seed,
            "run.reward_mode": args.reward_mode,
            "run.iterations": args.iterations,
            "run.workers": args.workers,
        },
    )
    _announce(config)
    args.out.mkdir(parents=True, exist_ok=True)
    resolved = {"config_hash": config.hash(), "config": config.to_dict()}
    (args.out / "resolved-config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    def progress(m: V.IterationMetrics) -> None:
        print(
            f"iter {m.iter:3d}  success {m.success_rate:.3f}  steps {m.avg_steps:5.2f}  "
            f"valid_groups {m.valid_groups}  episodes {m.episodes}{'  ABORTED' if m.aborted else ''}",
            file=sys.stderr,
        )

    V.run(config, args.out, resume_from=args.resume, progress=progress)
    print(f"wrote {args.out / 'metrics.csv'}")
    return EXIT_OK


def _oracle_chooser(agent, world):
    return E.oracle_plan(world)[0]


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ConfigError("episodes must be >= 1")
    config = V.checkpoint_config(args.checkpoint)
    _announce(config)
    raw = json.loads(args.checkpoint.read_text())
    chooser = _oracle_chooser if raw.get("chooser") == "oracle" else None
    state = V.checkpoint_load(args.checkpoint, config)
    models = V.Models(config)
    seeds = [V.EVAL_SEED_BASE + (args.seed << 32) + i for i in range(args.episodes)]
    rate, steps = V.evaluate_policy(models.policy, state.policy, config.env, args.episodes, seeds, chooser)
    row = [args.episodes, f"{rate:.4f}", f"{steps:.4f}"]
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerow(row)
    print(f"success_rate {rate:.4f}")
    print(f"avg_steps {steps:.4f}")
    return EXIT_OK


def read_labeled_set(path: Path):
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read labeled set {path}: {exc.strerror or exc}") from None
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(R.labeled_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: malformed labeled record ({exc})") from None
    if not out:
        raise InputError(f"{path}: labeled set is empty")
    return out


def cmd_rm_eval(args) -> int:
    config = V.checkpoint_config(args.checkpoint)
    _announce(config)
    state = V.checkpoint_load(args.checkpoint, config)
    labeled = read_labeled_set(args.labeled_set)
    report = R.eval_accuracy(V.Models(config).rm, state.rm, labeled)
    table = report.to_csv()
    args.out.write_text(table)
    print(f"{'class':<10}{'correct':>9}{'total':>7}{'percent':>9}")
    for name, c, t, pct in report.rows():
        print(f"{name:<10}{c:>9}{t:>7}{pct:>9.2f}")
    return EXIT_OK


def cmd_inspect_tree(args) -> int:
    config = _resolve(args)
    if args.checkpoint is not None:
        config = dataclasses.replace(V.checkpoint_config(args.checkpoint), search=config.search)
    _announce(config)
    models = V.Models(config)
    if args.checkpoint is not None:
        state = V.checkpoint_load(args.checkpoint, config)
        policy_params, rm_params = state.policy, state.rm
    else:
        policy_params = models.policy.init_params(config.seed)
        rm_params = models.rm.init_params(config.seed + 1)
    world, obs = E.reset(args.seed, config.env)
    rng = np.random.default_rng([config.seed, args.seed])
    source = V._reward_source(config, models, rm_params)
    tree = M.run_search(AgentState(obs), world, models.policy, policy_params, source, config.search, rng)
    args.out.write_text(tree.dump_jsonl())
    print(f"{len(tree.nodes)} nodes written to {args.out}")
    print(f"{'action':<32}{'N':>5}{'Q':>10}")
    for e in tree.root.children:
        print(f"{' '.join(e.action):<32}{e.N:>5}{e.Q:>10.4f}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    if args.print_defaults:
        config = C.preset(args.preset or "default")
    else:
        config = _resolve(args)
    print(C.dump(config), end="")
    print(f"# config_hash {config.hash()}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "rm-eval": cmd_rm_eval,
    "inspect-tree": cmd_inspect_tree,
    "validate-config": cmd_validate_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, InputError, V.CheckpointError) as exc:
        print(f"seea {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the runtime-failure exit code
        logging.getLogger("seea").debug("runtime failure", exc_info=True)
        print(f"seea {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

"""Command-line entry point: ``sgfnoma <subcommand> [flags]``.

Subcommands map one-to-one onto library operations:

=================  ===========================================================
train              run the learning loop, write metrics, checkpoint, summary
evaluate           greedy rollout of a checkpoint, one row per slot
sweep-levels       retrain for several power-level counts
sweep-cluster      retrain for several GF-users-per-channel settings
sweep-agents       retrain for several agent counts
extract-pool       build per-channel power pools from a checkpoint
compare-baselines  learned policy vs fixed-power SGF / pure GF, and pooled
                   open-loop access vs fixed power allocation
=================  ===========================================================

Outputs go to ``--out`` or, when absent, ``$SGFNOMA_OUT`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import persist
from .config import ConfigError, ExperimentConfig, config_from_mapping, parse_config
from .env import CONSTRAINT_NAMES
from .pools import BroadcastMessage, compare_baselines, compare_open_loop, extract_pools
from .training import (
    Trainer,
    TrainingResult,
    level_grid,
    run_greedy_evaluation,
    sweep_agent_count,
    sweep_cluster_size,
    sweep_power_levels,
)

log = logging.getLogger("sgfnoma")

SWEEP_COLUMNS = ["axis", "value", "seed", "plateau_episode", "final_reward", "eval_goodput",
                 "eval_capacity", "num_actions", "num_agents"]
COMPARISON_COLUMNS = ["seed", "protocol", "slots", "mean_capacity", "mean_goodput", "mean_reward",
                      "gb_violation_rate", "feasible_rate"]


def _levels_flag(text: str) -> tuple[float, ...]:
    """``--levels 5`` gives five even levels on [0.1, 0.9]; ``--levels 0.2,0.5`` lists them."""
    if "," in text or "." in text:
        return tuple(float(p) for p in text.split(",") if p.strip())
    return level_grid(int(text))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file or a run manifest")
    common.add_argument("--seed", type=int, help="single master seed (overrides the config's seed list)")
    common.add_argument("--episodes", type=int, help="training episodes (default 500); evaluation episodes when loading a checkpoint")
    common.add_argument("--steps", type=int, help="steps per episode (default 100)")
    common.add_argument("--agents", type=int, help="number of GF agents (default 12)")
    common.add_argument("--channels", type=int, help="number of sub-channels M (default 3)")
    common.add_argument("--levels", type=_levels_flag, help="level count or comma list in watts")
    common.add_argument("--algorithm", choices=("ddqn", "dueling"), help="head type (default dueling)")
    common.add_argument("--out", help="output directory (default $SGFNOMA_OUT or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sgfnoma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="train agents")
    train.add_argument("--checkpoint-every", type=int, default=0,
                       help="also checkpoint every N episodes (0 = only at the end)")
    train.add_argument("--resume", help="checkpoint to resume from")
    ev = sub.add_parser("evaluate", parents=[common], help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    sub.add_parser("sweep-levels", parents=[common], help="power-level count sweep")
    sub.add_parser("sweep-cluster", parents=[common], help="GF users per channel sweep")
    sweep_agents = sub.add_parser("sweep-agents", parents=[common], help="agent count sweep")
    sweep_agents.add_argument("--keep-cluster-cap", action="store_true",
                              help="do not relax the per-channel GF cap for large agent counts")
    pool = sub.add_parser("extract-pool", parents=[common], help="extract power pools")
    pool.add_argument("--checkpoint", required=True)
    cmp_ = sub.add_parser("compare-baselines", parents=[common], help="baseline comparison")
    cmp_.add_argument("--checkpoint", help="use this trained run instead of training per seed")
    return parser


def resolve_config(args, base: dict | None = None, episodes_key: str = "episodes") -> ExperimentConfig:
    overrides = {
        episodes_key: args.episodes,
        "steps_per_episode": args.steps,
        "num_agents": args.agents,
        "num_subchannels": args.channels,
        "power_levels": args.levels,
        "algorithm": args.algorithm,
        "seeds": (args.seed,) if args.seed is not None else None,
    }
    if args.config:
        return parse_config(args.config, overrides)
    return config_from_mapping(base or {}, overrides)


def _load_run(path, args) -> tuple[Trainer, ExperimentConfig]:
    """Rebuild a trained run.  On a loaded run ``--episodes`` sets the evaluation length."""
    state, saved_cfg = persist.load_checkpoint(path)
    key = "episodes" if args.command == "train" else "eval_episodes"
    cfg = resolve_config(args, saved_cfg, episodes_key=key)
    return Trainer.from_state(cfg, state), cfg


def _finish(out: Path, command: str, cfg: ExperimentConfig, outputs: dict, watch) -> None:
    manifest = persist.RunManifest(command, cfg.to_dict(), list(cfg.seeds),
                                   {k: str(v) for k, v in outputs.items()}, watch.marks)
    manifest.write(out / "manifest.json")
    for name, path in outputs.items():
        print(f"{name}: {path}")


def cmd_train(args, out: Path) -> int:
    watch = persist.Stopwatch()
    if args.resume:
        trainer, cfg = _load_run(args.resume, args)
        seeds = [trainer.seed]
    else:
        cfg = resolve_config(args)
        trainer = None
        seeds = list(cfg.seeds)
    outputs = {}
    for seed in seeds:
        tr = trainer or Trainer(cfg, seed)
        tag = f"seed{seed}"
        while tr.episode < cfg.episodes:
            stop = cfg.episodes
            if args.checkpoint_every:
                stop = min(cfg.episodes, (tr.episode // args.checkpoint_every + 1) * args.checkpoint_every)
            tr.run(stop)
            if args.checkpoint_every and tr.episode < cfg.episodes:
                persist.save_checkpoint(out / f"{tag}_ep{tr.episode}.npz", tr.state_dict(), cfg.to_dict())
        watch.mark(f"train_{tag}")
        outputs[f"metrics_{tag}"] = out / f"metrics_{tag}.csv"
        persist.write_csv(outputs[f"metrics_{tag}"], tr.metrics.columns(), tr.metrics.rows())
        outputs[f"checkpoint_{tag}"] = persist.save_checkpoint(out / f"checkpoint_{tag}.npz",
                                                               tr.state_dict(), cfg.to_dict())
        result = TrainingResult(cfg, tr.seed, tr.team, tr.metrics, tr.topology)
        outputs[f"summary_{tag}"] = out / f"summary_{tag}.json"
        persist.write_json(outputs[f"summary_{tag}"], {
            "seed": tr.seed, "episodes": tr.episode, "discount": cfg.discount,
            "algorithm": cfg.algorithm, "plateau_episode": result.plateau,
            "final_moving_average_reward": result.final_reward,
            "episode_reward": result.episode_reward,
        })
    _finish(out, "train", cfg, outputs, watch)
    return 0


def cmd_evaluate(args, out: Path) -> int:
    watch = persist.Stopwatch()
    trainer, cfg = _load_run(args.checkpoint, args)
    ev = run_greedy_evaluation(trainer.team, cfg, trainer.topology, episodes=cfg.eval_episodes,
                               seed=trainer.seed)
    n = trainer.topology.num_gf
    columns = (["episode", "step", "reward", "capacity", "goodput", "gb_violations"]
               + [f"ok_{c}" for c in CONSTRAINT_NAMES] + [f"action_{i}" for i in range(n)]
               + [f"rate_{i}" for i in range(n)])
    steps = cfg.steps_per_episode

    def rows():
        for k in range(ev.slots):
            yield [k // steps, k % steps, ev.rewards[k], ev.capacity[k], ev.goodput[k], ev.gb_violations[k],
                   *ev.flags[k].astype(int).tolist(), *ev.actions[k].tolist(), *ev.gf_rates[k].tolist()]

    outputs = {"evaluation": out / "evaluation.csv", "evaluation_summary": out / "evaluation_summary.json"}
    persist.write_csv(outputs["evaluation"], columns, rows())
    persist.write_json(outputs["evaluation_summary"], {
        "seed": trainer.seed, "slots": ev.slots, "mean_reward": ev.rewards.mean(),
        "mean_capacity": ev.capacity.mean(), "mean_goodput": ev.goodput.mean(),
        "feasible_rate": ev.flags.all(axis=1).mean(),
        "mean_steps_to_settle": ev.steps_to_settle(steps),
    })
    watch.mark("evaluate")
    _finish(out, "evaluate", cfg, outputs, watch)
    return 0


def _cmd_sweep(name, fn, args, out: Path, **kw) -> int:
    watch = persist.Stopwatch()
    cfg = resolve_config(args)
    rows = fn(cfg, **kw)
    outputs = {name: out / f"{name}.csv"}
    persist.write_csv(outputs[name], SWEEP_COLUMNS, [r.as_dict() for r in rows])
    watch.mark(name)
    _finish(out, name, cfg, outputs, watch)
    return 0


def cmd_extract_pool(args, out: Path) -> int:
    watch = persist.Stopwatch()
    trainer, cfg = _load_run(args.checkpoint, args)
    ev = run_greedy_evaluation(trainer.team, cfg, trainer.topology, seed=trainer.seed)
    pool = extract_pools(ev, cfg.network, cfg.pool_min_frequency, trainer.topology)
    message = BroadcastMessage.from_pool(pool, cfg.network)
    outputs = {"pool": out / "pool.json", "pool_table": out / "pool.txt"}
    persist.write_json(outputs["pool"], {**pool.to_dict(), "gb_target_se": message.gb_target,
                                         "gf_target_se": message.gf_target})
    outputs["pool_table"].parent.mkdir(parents=True, exist_ok=True)
    outputs["pool_table"].write_text(pool.table() + "\n")
    print(pool.table())
    watch.mark("extract")
    _finish(out, "extract-pool", cfg, outputs, watch)
    return 0


def cmd_compare(args, out: Path) -> int:
    watch = persist.Stopwatch()
    runs = []
    if args.checkpoint:
        trainer, cfg = _load_run(args.checkpoint, args)
        runs.append(trainer)
    else:
        cfg = resolve_config(args)
        runs = [Trainer(cfg, seed).run() for seed in cfg.seeds]
    slots = cfg.baseline_slots
    rows = []
    for tr in runs:
        net = cfg.network
        stats = compare_baselines(tr.team, net, tr.topology, slots, tr.seed, cfg.observation)
        ev = run_greedy_evaluation(tr.team, cfg, tr.topology, seed=tr.seed)
        pool = extract_pools(ev, net, cfg.pool_min_frequency, tr.topology)
        stats += compare_open_loop(pool, net, tr.topology, cfg.num_agents, slots, tr.seed)
        rows += [{"seed": tr.seed, **s.as_row()} for s in stats]
    outputs = {"comparison": out / "comparison.csv"}
    persist.write_csv(outputs["comparison"], COMPARISON_COLUMNS, rows)
    watch.mark("compare")
    _finish(out, "compare-baselines", cfg, outputs, watch)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = persist.output_root(args.out)
    try:
        if args.command == "train":
            return cmd_train(args, out)
        if args.command == "evaluate":
            return cmd_evaluate(args, out)
        if args.command == "sweep-levels":
            return _cmd_sweep("sweep_levels", sweep_power_levels, args, out)
        if args.command == "sweep-cluster":
            return _cmd_sweep("sweep_cluster", sweep_cluster_size, args, out)
        if args.command == "sweep-agents":
            return _cmd_sweep("sweep_agents", sweep_agent_count, args, out,
                              relax_cluster_cap=not args.keep_cluster_cap)
        if args.command == "extract-pool":
            return cmd_extract_pool(args, out)
        if args.command == "compare-baselines":
            return cmd_compare(args, out)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"sgfnoma {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())

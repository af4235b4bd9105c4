"""Command-line entry point.

Every subcommand accepts ``--config`` (YAML experiment file), ``--seed`` and
``--out``; the output directory defaults to ``$GOALREC_OUTPUT_DIR`` and then to
the config's ``output_dir``. Exit status is 0 on success, 1 for invalid input
and 2 for failures during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .agent import GoalRecPolicy, TrajectoryStore, online_train, pretrain, train_offline
from .env import ItemCatalog, Simulator, write_trajectory_log
from .nn import ConfigurationError, UsageError
from .world_model import WorldModel

log = logging.getLogger("goalrec")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class ArgumentError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None,
                        help="seed index (root seed for compare)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=harness.VARIANTS, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="goalrec", description="Goal-conditioned recommender experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    sub.add_parser("gen-env", parents=[common], help="write the catalog and env config")
    sub.add_parser("rollout", parents=[common], help="log random-policy sessions")
    for name, text in (("pretrain", "fit the world model on logged sessions"),
                       ("train", "pretrain then train online"),
                       ("train-offline", "fit on logged sessions only, no interaction")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--sessions", help="session CSV to train from instead of fresh logs")
    sp = sub.add_parser("eval", parents=[common], help="evaluate a saved world model")
    sp.add_argument("--model", required=True)
    sub.add_parser("compare", parents=[common], help="multi-seed, multi-method grid")
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    sp.add_argument("--seeds", type=int, default=1, help="number of seeds to check")
    sp = sub.add_parser("ingest", parents=[common], help="session CSV to a trajectory log")
    sp.add_argument("--sessions", required=True)
    sp.add_argument("--catalog", help="catalog JSON from gen-env (default: regenerate)")
    return p


def resolve(args) -> tuple[harness.ExperimentConfig, Path]:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.variant:
        cfg.variants = (args.variant,)
    if args.seed is not None:
        if args.command == "compare":
            cfg.root_seed = args.seed
        else:
            cfg.seeds = (args.seed,)
    cfg.validate()
    out = Path(args.out or os.environ.get(harness.OUTPUT_DIR_ENV) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _context(cfg) -> harness.CellContext:
    return harness.CellContext(cfg, cfg.variants[0], cfg.seeds[0])


def _write(out: Path, name: str, text: str) -> str:
    (out / name).write_text(text)
    return name


def cmd_gen_env(args, cfg, out):
    ctx = _context(cfg)
    arts = {"catalog": _write(out, "catalog.json", json.dumps(ctx.sim.catalog.to_dict())),
            "env": _write(out, "env.json", json.dumps(ctx.sim.describe(), indent=2))}
    harness.write_manifest(out, "gen-env", cfg, arts)
    print(f"wrote catalog of {len(ctx.sim.catalog)} items to {out}")


def cmd_rollout(args, cfg, out):
    ctx = _context(cfg)
    trajs = ctx.logs
    write_trajectory_log(out / "trajectories.jsonl", trajs,
                         include_features=ctx.variant != "high_dim")
    harness.export_sessions_csv(out / "sessions.csv", trajs)
    harness.write_manifest(out, "rollout", cfg, {"trajectories": "trajectories.jsonl",
                                                 "sessions": "sessions.csv"})
    print(f"logged {len(trajs)} sessions, {sum(len(t) for t in trajs)} steps")


def _training_store(args, ctx, sim) -> TrajectoryStore:
    if getattr(args, "sessions", None):
        # features are rebuilt on a separate simulator so the training one
        # keeps a clean interaction count
        store, rep = harness.ingest_sessions(args.sessions, sim.catalog, ctx.spec,
                                             sim=ctx.fresh_sim())
        log.info("ingested %d sessions (%d malformed, %d unresolved rows)",
                 rep.sessions, rep.malformed, rep.unresolved)
        return store
    return ctx.log_store(sim)


def _train(args, cfg, out, mode: str):
    ctx = _context(cfg)
    sim = ctx.fresh_sim()
    seed = harness.derive_seed(cfg.root_seed, "goalrec" if mode == "train" else "goalrec_off",
                               ctx.variant, ctx.seed)
    wm = WorldModel(sim.state_dim, sim.action_dim, ctx.spec.dim, cfg.model, seed=seed)
    rng = np.random.default_rng([seed, 3])
    store = _training_store(args, ctx, sim)
    harness.write_manifest(out, mode, cfg, {}, complete=False)
    arts = {}
    if mode == "train":
        if cfg.pretrain_iterations:
            pretrain(store, wm, cfg.pretrain_iterations, cfg.agent, rng)
        _, rows = online_train(sim, wm, ctx.setting, ctx.spec, cfg.agent, ctx.train_users,
                               rng, store=store)
        arts["metrics"] = _write(out, "metrics.csv", harness.metrics_csv(rows))
    else:
        iters = cfg.pretrain_iterations if mode == "pretrain" else cfg.offline_iterations
        curve = (pretrain if mode == "pretrain" else train_offline)(store, wm, iters,
                                                                   cfg.agent, rng)
        rows = [{"iteration": k, "main_loss": m, "aux_loss": a}
                for k, (m, a) in enumerate(curve)]
        arts["loss_curve"] = _write(out, "loss_curve.csv", harness.metrics_csv(
            rows, ("iteration", "main_loss", "aux_loss")))
        if sim.interactions:
            raise UsageError("offline training interacted with the environment")
    wm.save(out / "model.json")
    arts["model"] = "model.json"
    harness.write_manifest(out, mode, cfg, arts,
                           extra={"interactions_during_training": sim.interactions})
    print(f"saved model to {out / 'model.json'} ({sim.interactions} env interactions)")


def cmd_eval(args, cfg, out):
    ctx = _context(cfg)
    sim = ctx.fresh_sim()
    wm = WorldModel.load(args.model)
    if (wm.state_dim, wm.action_dim, wm.dim) != (sim.state_dim, sim.action_dim, ctx.spec.dim):
        raise ConfigurationError("model dimensions do not match the configured environment")
    m = ctx.evaluate(GoalRecPolicy(wm, sim.action_matrix, ctx.setting.vector), sim)
    text = harness.metrics_csv([m], ("cumulative_reward", "ctr", "browsing_depth", "n_users"))
    harness.write_manifest(out, "eval", cfg, {"metrics": _write(out, "eval.csv", text),
                                              "model": str(args.model)})
    print(text, end="")


def cmd_compare(args, cfg, out):
    harness.write_manifest(out, "compare", cfg, {}, complete=False)

    def progress(cell):
        status = "failed" if cell.failed else f"{cell.metrics['cumulative_reward']:.3f}"
        print(f"{cell.method:12s} {cell.variant:14s} seed {cell.seed}: {status} "
              f"({cell.seconds:.0f}s)", flush=True)

    report = harness.compare(cfg, progress=progress)
    csv_text, table = harness.render_report(report)
    arts = {"report": _write(out, "report.csv", csv_text),
            "table": _write(out, "report.txt", table),
            "per_seed": _write(out, "per_seed.csv", harness.per_seed_csv(report))}
    failed = [k for k, c in report.cells.items() if c.failed]
    harness.write_manifest(out, "compare", cfg, arts, extra={"failed_cells": failed})
    print(table, end="")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(args, cfg, out):
    base = cfg.seeds[0]
    worst = 0.0
    lines = []
    for s in range(base, base + args.seeds):
        for name, rep in harness.gradient_suite(s, cfg.model).items():
            worst = max(worst, rep.max_error)
            lines.append(f"seed {s} {name:18s} max rel err {rep.max_error:.3e}")
    lines.append(f"overall max rel err {worst:.3e} ({'PASS' if worst <= 1e-4 else 'FAIL'})")
    text = "\n".join(lines) + "\n"
    harness.write_manifest(out, "gradcheck", cfg, {"report": _write(out, "gradcheck.txt",
                                                                    text)})
    print(text, end="")
    return EXIT_OK if worst <= 1e-4 else EXIT_FAILED


def cmd_ingest(args, cfg, out):
    ctx = _context(cfg)
    if args.catalog:
        catalog = ItemCatalog.from_dict(json.loads(Path(args.catalog).read_text()))
        sim = Simulator(ctx.env_config, catalog) if len(catalog) == ctx.env_config.n_items \
            and catalog.d_e == ctx.env_config.d_e else None
    else:
        sim = ctx.fresh_sim()
        catalog = sim.catalog
    store, rep = harness.ingest_sessions(args.sessions, catalog, ctx.spec, sim=sim,
                                         max_steps=ctx.env_config.max_steps)
    write_trajectory_log(out / "trajectories.jsonl", list(store))
    summary = {"rows": rep.rows, "malformed": rep.malformed, "unresolved": rep.unresolved,
               "sessions": rep.sessions, "steps": store.n_steps}
    harness.write_manifest(out, "ingest", cfg, {"trajectories": "trajectories.jsonl"},
                           extra={"ingest": summary})
    print(json.dumps(summary))


COMMANDS = {
    "gen-env": cmd_gen_env,
    "rollout": cmd_rollout,
    "pretrain": lambda a, c, o: _train(a, c, o, "pretrain"),
    "train": lambda a, c, o: _train(a, c, o, "train"),
    "train-offline": lambda a, c, o: _train(a, c, o, "train-offline"),
    "eval": cmd_eval,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "ingest": cmd_ingest,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ArgumentError as exc:
        print(f"goalrec: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = resolve(args)
    except (ConfigurationError, OSError) as exc:
        print(f"goalrec: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        status = COMMANDS[args.command](args, cfg, out)
    except ConfigurationError as exc:
        print(f"goalrec: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"goalrec: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dqplan {gen,collect,train,eval,plan}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .exceptions import DQPlanError
from .game import Subgoal, new_game
from .harness import (
    APPROACHES,
    DEFAULT_STEP_LIMIT,
    GenKnobs,
    collect_dataset,
    evaluate,
    generate_levels,
)
from .learner import DQPModel, load_dataset, save_dataset
from .level_codec import Game, parse_level, serialize_level
from .planner import SearchConfig, emit_pddl_problem, plan_full, plan_to_subgoal

log = logging.getLogger("dqplan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# config files ---------------------------------------------------------------------

_INT_KEYS = {"target_sync_period", "batch_size", "iterations", "seed", "node_budget",
             "heuristic_weight", "count", "rows", "cols", "gems", "coins", "catapults",
             "full_budget", "per_level_unique_cap", "per_level_iteration_cap",
             "step_limit", "repetitions", "subgoal_budget"}
_FLOAT_KEYS = {"gamma", "reward_scale", "learning_rate", "wall_density", "boulder_density",
               "ice_density", "fire_density", "spike_density", "water_density"}
_BOOL_KEYS = {"augment", "batch_norm"}
_LIST_KEYS = {"conv_filters", "fc_units"}
_STR_KEYS = {"strategy", "approaches"}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _BOOL_KEYS:
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1", "yes")
            elif key in _LIST_KEYS:
                out[key] = tuple(int(v) for v in value.replace(",", " ").split())
            elif key in _STR_KEYS:
                out[key] = value
            else:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def _game(text: str) -> tuple[Game, bool]:
    name = text.strip()
    mini = name.lower().endswith("-mini")
    if mini:
        name = name[:-5]
    try:
        return Game.parse(name), mini
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dims(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise UsageError(f"--dims expects ROWSxCOLS, got {text!r}") from None


def _read_levels(directory, game: Game):
    files = sorted(Path(directory).glob("*.txt"))
    if not files:
        raise DQPlanError(f"no level files (*.txt) in {directory}")
    return [parse_level(f.read_text(), game) for f in files], [f.stem for f in files]


def _search(cfg: dict) -> SearchConfig:
    return SearchConfig.from_name(cfg.get("strategy", "weighted"),
                                  node_budget=cfg.get("subgoal_budget", 50_000),
                                  weight=cfg.get("heuristic_weight", 5))


def _write(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# subcommands ---------------------------------------------------------------------

def cmd_gen(args, cfg):
    game, mini = _game(args.game)
    rows, cols = _dims(args.dims) if args.dims else (cfg.get("rows", 8), cfg.get("cols", 8))
    knob_names = {f.name for f in fields(GenKnobs)}
    knobs = GenKnobs(**{k: v for k, v in cfg.items() if k in knob_names})
    count = args.count if args.count is not None else cfg.get("count", 20)
    levels = generate_levels(game, count, (rows, cols), knobs, seed=args.seed, mini=mini)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, level in enumerate(levels):
        (out / f"level_{i:03d}.txt").write_text(serialize_level(level))
    print(f"wrote {len(levels)} levels to {out}")


def cmd_collect(args, cfg):
    game, mini = _game(args.game)
    levels, _ = _read_levels(args.levels, game)
    data = collect_dataset(levels, cfg.get("per_level_unique_cap", 500),
                           cfg.get("per_level_iteration_cap", 1000), seed=args.seed, mini=mini,
                           step_limit=cfg.get("step_limit", DEFAULT_STEP_LIMIT),
                           search=_search(cfg))
    save_dataset(data, args.out, game.value)
    print(f"wrote {len(data)} samples to {args.out}")


_MODEL_KEYS = {"conv_filters", "fc_units", "batch_norm", "gamma", "target_sync_period",
               "batch_size", "iterations", "reward_scale", "learning_rate", "augment"}


def cmd_train(args, cfg):
    data = load_dataset(args.dataset)
    if not data:
        raise DQPlanError(f"{args.dataset} holds no samples")
    kwargs = {k: v for k, v in cfg.items() if k in _MODEL_KEYS}
    model = DQPModel(random_state=args.seed, **kwargs).fit(data)
    model.save(args.out)
    h = model.loss_history_
    k = min(100, len(h))
    print(f"trained {len(h)} iterations on {len(data)} samples; "
          f"loss {h[:k].mean():.5f} -> {h[-k:].mean():.5f}; wrote {args.out}")


def cmd_eval(args, cfg):
    game, mini = _game(args.game)
    approaches = [a.strip() for a in (args.approaches or cfg.get("approaches", "DQP,Random"))
                  .split(",") if a.strip()]
    unknown = [a for a in approaches if a not in APPROACHES]
    if unknown:
        raise UsageError(f"unknown approach {unknown[0]!r}; choose from {', '.join(APPROACHES)}")
    if "DQP" in approaches and not args.params:
        raise UsageError("eval: DQP rows need --params")
    levels, names = _read_levels(args.levels, game)
    model = None
    if "DQP" in approaches:
        model = DQPModel.load(args.params, reward_scale=cfg.get("reward_scale", 0.01))
    report = evaluate(levels, approaches, cfg.get("repetitions", 15), seed=args.seed,
                      model=model, mini=mini,
                      step_limit=cfg.get("step_limit", DEFAULT_STEP_LIMIT),
                      full_budget=cfg.get("full_budget", cfg.get("node_budget", 1_000_000)),
                      search=_search(cfg), timing=not args.no_timing, level_names=names)
    _write(report.render(args.format), args.out)


def cmd_plan(args, cfg):
    game, mini = _game(args.game)
    level = parse_level(Path(args.level).read_text(), game)
    state = new_game(level, mini)
    config = SearchConfig.from_name(args.strategy or cfg.get("strategy", "weighted"),
                                    node_budget=cfg.get("node_budget", 1_000_000),
                                    weight=cfg.get("heuristic_weight", 5))
    subgoal = None
    if args.subgoal:
        try:
            r, c = (int(v) for v in args.subgoal.split(","))
        except ValueError:
            raise UsageError(f"--subgoal expects ROW,COL, got {args.subgoal!r}") from None
        subgoal = Subgoal.at(r, c)
    if args.emit_pddl:
        if subgoal is None:
            raise UsageError("--emit-pddl needs --subgoal")
        Path(args.emit_pddl).write_text(emit_pddl_problem(state, subgoal))
    if subgoal is None:
        plan, stats = plan_full(state, config)
    else:
        plan, stats = plan_to_subgoal(state, subgoal, config)
    lines = [
        "plan: " + " ".join(a.name for a in plan.actions),
        f"cost: {plan.cost}",
        f"nodes_expanded: {stats.nodes_expanded}",
        f"nodes_generated: {stats.nodes_generated}",
        f"wall_time_ms: {stats.wall_time * 1000:.3f}",
    ]
    _write("\n".join(lines) + "\n", args.out)


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dqplan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, game=True):
        if game:
            p.add_argument("--game", required=True,
                           help="boulderdash, iceandfire or catapults; add -mini for desk rules")
        p.add_argument("--config", help="key = value file with training/search/generation fields")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("gen", help="generate solvable levels"))
    p.add_argument("--count", type=int)
    p.add_argument("--dims", help="ROWSxCOLS, default 8x8")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("collect", help="random-exploration dataset"))
    p.add_argument("--levels", required=True, metavar="DIR")
    p.add_argument("--out", required=True, help="dataset file")
    p.set_defaults(func=cmd_collect)

    p = common(sub.add_parser("train", help="fit the value network"), game=False)
    p.add_argument("--game", help="ignored; the dataset records its game")
    p.add_argument("--dataset", required=True, metavar="FILE")
    p.add_argument("--out", required=True, help="parameter file")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate approaches on levels"))
    p.add_argument("--levels", required=True, metavar="DIR")
    p.add_argument("--params", metavar="FILE")
    p.add_argument("--approaches", help=f"comma list from {', '.join(APPROACHES)}")
    p.add_argument("--format", choices=("csv", "json-lines"), default="csv")
    p.add_argument("--no-timing", action="store_true",
                   help="report zero wall time so output is byte-reproducible")
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("plan", help="plan on a single level"))
    p.add_argument("--level", required=True, metavar="FILE")
    p.add_argument("--strategy", choices=("optimal", "weighted", "ehc"))
    p.add_argument("--subgoal", metavar="ROW,COL", help="plan to this tile instead of winning")
    p.add_argument("--emit-pddl", metavar="FILE", help="also write the PDDL problem")
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = read_config(args.config) if args.config else {}
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dqplan: cannot read config: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        args.func(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DQPlanError, OSError, ValueError) as exc:
        print(f"dqplan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

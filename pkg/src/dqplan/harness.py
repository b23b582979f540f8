"""Planning-and-acting loop, data collection, level generation and evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import AllCandidatesExcluded, GenerationExhausted, PlanningFailure
from .game import (
    GameState,
    Status,
    Subgoal,
    TerminalKind,
    classify_terminal,
    formulate_subgoals,
    new_game,
    step,
)
from .learner import DQPModel, ExperienceSample, reward_of
from .level_codec import Game, LevelGrid, encode_observation, parse_level
from .planner import SearchConfig, plan_full, plan_to_subgoal

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_STEP_LIMIT",
    "SUBGOAL_SEARCH",
    "RandomPolicy",
    "DQPPolicy",
    "EpisodeResult",
    "run_episode",
    "collect_dataset",
    "GenKnobs",
    "generate_levels",
    "EvalRow",
    "EvalReport",
    "evaluate",
]

DEFAULT_STEP_LIMIT = 2000
# satisficing per-subgoal search (g=1, h=5)
SUBGOAL_SEARCH = SearchConfig.weighted(5, node_budget=50_000)


class RandomPolicy:
    """Uniform choice among the non-excluded candidates."""

    name = "Random"

    def __init__(self, seed=0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def select(self, state, candidates, excluded):
        pool = [g for g in candidates if g not in excluded]
        if not pool:
            raise AllCandidatesExcluded("every candidate subgoal was rejected")
        return pool[int(self.rng.integers(len(pool)))]


class DQPPolicy:
    """Greedy selection by a trained :class:`DQPModel`."""

    name = "DQP"

    def __init__(self, model: DQPModel):
        self.model = model

    def select(self, state, candidates, excluded):
        return self.model.select_goal(state, candidates, excluded)


@dataclass
class EpisodeResult:
    outcome: str  # Win, Loss, StepLimit, NoCandidates
    total_actions: int = 0
    total_select_time: float = 0.0
    total_plan_time: float = 0.0
    total_nodes_expanded: int = 0
    subgoal_trace: list = field(default_factory=list)
    actions: list = field(default_factory=list)

    @property
    def won(self) -> bool:
        return self.outcome == "Win"

    @property
    def total_time(self) -> float:
        return self.total_select_time + self.total_plan_time


def run_episode(level, policy, step_limit: int = DEFAULT_STEP_LIMIT, mini: bool = False,
                search: SearchConfig = SUBGOAL_SEARCH, on_sample=None,
                detect_dead_ends: bool = False, start: GameState | None = None) -> EpisodeResult:
    """Run the formulate / select / plan / execute loop until the episode ends.

    A subgoal the planner cannot reach is excluded and the policy picks the
    next best. ``on_sample`` receives each :class:`ExperienceSample`; if it
    returns ``False`` the episode stops early (outcome ``StepLimit``).
    """
    state = start if start is not None else new_game(level, mini)
    result = EpisodeResult("StepLimit")
    excluded: set[Subgoal] = set()
    while True:
        if state.status == Status.WON:
            result.outcome = "Win"
            break
        if state.status == Status.LOST:
            result.outcome = "Loss"
            break
        if result.total_actions >= step_limit:
            result.outcome = "StepLimit"
            break
        candidates = formulate_subgoals(state)
        t0 = time.perf_counter()
        try:
            goal = policy.select(state, candidates, excluded)
        except AllCandidatesExcluded:
            result.outcome = "NoCandidates"
            break
        finally:
            result.total_select_time += time.perf_counter() - t0

        try:
            plan, stats = plan_to_subgoal(state, goal, search)
        except PlanningFailure as exc:
            if exc.stats is not None:
                result.total_nodes_expanded += exc.stats.nodes_expanded
                result.total_plan_time += exc.stats.wall_time
            excluded.add(goal)
            if on_sample is not None:
                reward, kind = reward_of(None)
                if on_sample(ExperienceSample(state, goal, reward, state, kind)) is False:
                    break
            continue
        result.total_nodes_expanded += stats.nodes_expanded
        result.total_plan_time += stats.wall_time

        nxt = state
        for action in plan.actions:
            nxt = step(nxt, action)
        result.actions.extend(plan.actions)
        result.total_actions += plan.cost
        result.subgoal_trace.append((goal, plan.cost))
        excluded.clear()

        dead_end = False
        if detect_dead_ends and nxt.status == Status.RUNNING:
            dead_end = classify_terminal(nxt, node_budget=20_000) is TerminalKind.DEAD_END
        if on_sample is not None:
            reward, kind = reward_of(plan, nxt, dead_end)
            if on_sample(ExperienceSample(state, goal, reward, nxt, kind)) is False:
                state = nxt
                break
        state = nxt
        if dead_end:
            result.outcome = "NoCandidates"
            break
    return result


def collect_dataset(levels, per_level_unique_cap: int = 500, per_level_iteration_cap: int = 1000,
                    seed: int = 0, mini: bool = False, step_limit: int = DEFAULT_STEP_LIMIT,
                    search: SearchConfig = SUBGOAL_SEARCH) -> list[ExperienceSample]:
    """Random-exploration samples, at most ``per_level_unique_cap`` unique per level.

    Uniqueness is keyed on the encoded (state, subgoal) pair. Every subgoal
    selection counts toward ``per_level_iteration_cap`` whether or not the
    sample is new.
    """
    levels = list(levels)
    if not levels:
        raise ValueError("collect_dataset needs at least one level")
    dataset: list[ExperienceSample] = []
    for index, level in enumerate(levels):
        policy = RandomPolicy(seed ^ index)
        seen: set[bytes] = set()
        iterations = 0

        def record(sample):
            nonlocal iterations
            iterations += 1
            key = encode_observation(sample.state, sample.chosen).tobytes()
            if key not in seen:
                seen.add(key)
                dataset.append(sample)
            return len(seen) < per_level_unique_cap and iterations < per_level_iteration_cap

        while len(seen) < per_level_unique_cap and iterations < per_level_iteration_cap:
            before = iterations
            run_episode(level, policy, step_limit, mini, search, on_sample=record,
                        detect_dead_ends=True)
            if iterations == before:
                break
        log.info("level %d: %d unique samples from %d iterations", index, len(seen), iterations)
    return dataset


# level generation ---------------------------------------------------------------

@dataclass
class GenKnobs:
    """Difficulty knobs for procedural levels; counts are per level."""

    wall_density: float = 0.10
    boulder_density: float = 0.15
    gems: int = 6
    coins: int = 4
    ice_density: float = 0.08
    fire_density: float = 0.08
    spike_density: float = 0.04
    catapults: int = 5
    water_density: float = 0.25
    full_budget: int = 200_000


def _interior(rows, cols):
    return [(r, c) for r in range(1, rows - 1) for c in range(1, cols - 1)]


def _candidate_level(game: Game, rows: int, cols: int, knobs: GenKnobs, rng) -> LevelGrid:
    grid = [["w"] * cols if r in (0, rows - 1) else ["w"] + ["."] * (cols - 2) + ["w"]
            for r in range(rows)]
    cells = _interior(rows, cols)
    order = rng.permutation(len(cells))
    free = [cells[i] for i in order]

    def place(ch, n):
        for _ in range(n):
            r, c = free.pop()
            grid[r][c] = ch

    place("A", 1)
    place("e", 1)
    area = len(cells)
    if game is Game.BOULDERDASH:
        place("x", knobs.gems)
        place("w", int(round(knobs.wall_density * area)))
        place("o", int(round(knobs.boulder_density * area)))
    elif game is Game.ICEANDFIRE:
        place("c", knobs.coins)
        place("b", 1)
        place("h", 1)
        place("i", int(round(knobs.ice_density * area)))
        place("f", int(round(knobs.fire_density * area)))
        place("s", int(round(knobs.spike_density * area)))
        place("w", int(round(knobs.wall_density * area)))
    else:
        for _ in range(knobs.catapults):
            place("urld"[int(rng.integers(4))], 1)
        place("~", int(round(knobs.water_density * area)))
        place("w", int(round(knobs.wall_density * area)))
    return LevelGrid(game, tuple("".join(row) for row in grid))


def generate_levels(game_id, count: int, dims=(8, 8), knobs: GenKnobs | None = None,
                    seed: int = 0, mini: bool = True, max_attempts: int | None = None):
    """Random levels, each verified solvable by a satisficing full-level search."""
    game = Game.parse(game_id)
    rows, cols = dims
    if rows < 4 or cols < 4:
        raise ValueError("levels must be at least 4x4")
    knobs = knobs or GenKnobs()
    rng = np.random.default_rng(seed)
    max_attempts = max_attempts or 50 * count + 100
    levels: list[LevelGrid] = []
    attempts = 0
    while len(levels) < count:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationExhausted(
                f"only {len(levels)} of {count} solvable levels after {max_attempts} attempts")
        try:
            level = _candidate_level(game, rows, cols, knobs, rng)
        except IndexError:
            raise ValueError("knobs place more objects than the level has tiles") from None
        level = parse_level("\n".join(level.layout), game)
        try:
            plan_full(new_game(level, mini), SearchConfig.weighted(5, knobs.full_budget))
        except PlanningFailure:
            continue
        levels.append(level)
    return levels


# evaluation -------------------------------------------------------------------

APPROACHES = ("DQP", "Random", "FullOptimal", "FullWeighted", "FullEHC")
_FULL = {"FullOptimal": "optimal", "FullWeighted": "weighted", "FullEHC": "ehc"}


@dataclass
class EvalRow:
    game: str
    level: str
    approach: str
    repetitions: int
    mean_actions: float | None  # over successful runs; None renders as "-"
    success_rate: float
    mean_total_time_ms: float
    mean_nodes_expanded: float

    @property
    def solved(self) -> bool:
        return self.mean_actions is not None


CSV_COLUMNS = ("game", "level", "approach", "repetitions", "mean_actions", "success_rate",
               "mean_total_time_ms", "mean_nodes_expanded")


def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def select(self, approach=None, level=None) -> list[EvalRow]:
        return [r for r in self.rows
                if (approach is None or r.approach == approach)
                and (level is None or r.level == level)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(getattr(row, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(row), sort_keys=True) + "\n" for row in self.rows)

    def render(self, fmt: str = "csv") -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt in ("json-lines", "jsonl"):
            return self.to_jsonl()
        raise ValueError(f"unknown report format {fmt!r}")


def evaluate(levels, approaches=("DQP", "Random"), repetitions: int = 15, seed: int = 0,
             model: DQPModel | None = None, mini: bool = False,
             step_limit: int = DEFAULT_STEP_LIMIT, full_budget: int = 1_000_000,
             search: SearchConfig = SUBGOAL_SEARCH, timing: bool = True,
             level_names=None) -> EvalReport:
    """Aggregate episode statistics per level and approach.

    Policy rows run ``repetitions`` episodes; full-planner rows run once and
    report a budget overrun as an unsolved ("-") entry. With ``timing=False``
    wall times are reported as 0 so reports are byte-reproducible.
    """
    levels = list(levels)
    names = list(level_names) if level_names is not None else [str(i) for i in range(len(levels))]
    unknown = set(approaches) - set(APPROACHES)
    if unknown:
        raise ValueError(f"unknown approaches {sorted(unknown)}")
    if "DQP" in approaches and model is None:
        raise ValueError("DQP rows need a trained model")
    report = EvalReport()
    for index, (level, name) in enumerate(zip(levels, names)):
        game = level.game_id.value
        for approach in approaches:
            if approach in _FULL:
                config = SearchConfig.from_name(_FULL[approach], node_budget=full_budget)
                t0 = time.perf_counter()
                try:
                    plan, stats = plan_full(new_game(level, mini), config)
                    actions, success, nodes = float(plan.cost), 1.0, stats.nodes_expanded
                except PlanningFailure as exc:
                    actions, success = None, 0.0
                    nodes = exc.stats.nodes_expanded if exc.stats else 0
                elapsed = (time.perf_counter() - t0) * 1000 if timing else 0.0
                report.rows.append(EvalRow(game, name, approach, 1, actions, success,
                                           elapsed, float(nodes)))
                continue
            results = []
            for rep in range(repetitions):
                if approach == "DQP":
                    policy = DQPPolicy(model)
                else:
                    policy = RandomPolicy(seed ^ (index * repetitions + rep))
                results.append(run_episode(level, policy, step_limit, mini, search))
            wins = [r for r in results if r.won]
            mean_actions = float(np.mean([r.total_actions for r in wins])) if wins else None
            mean_time = float(np.mean([r.total_time for r in results])) * 1000 if timing else 0.0
            report.rows.append(EvalRow(
                game, name, approach, repetitions, mean_actions, len(wins) / repetitions,
                mean_time, float(np.mean([r.total_nodes_expanded for r in results]))))
    return report

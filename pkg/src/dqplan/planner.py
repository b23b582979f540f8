"""Forward state-space search over engine states.

Three strategies are offered: ``optimal`` (A*, f = g + h), ``weighted``
(f = g + w*h, w defaults to 5) and ``ehc`` (enforced hill climbing). The search
runs through :func:`dqplan.game.successors`, so it is game agnostic; duplicate
detection hashes full states.
"""

from __future__ import annotations

import enum
import heapq
import time
from collections import deque
from dataclasses import dataclass
from importlib import resources

from .exceptions import BudgetExceeded, EHCStuck, Unreachable
from .game import (
    Action,
    GameState,
    Status,
    Subgoal,
    SubgoalKind,
    successors,
    subgoal_achieved,
)
from .level_codec import Game

__all__ = [
    "Strategy",
    "SearchConfig",
    "Plan",
    "PlanStats",
    "heuristic",
    "full_heuristic",
    "plan_to_subgoal",
    "plan_full",
    "any_reachable",
    "replay",
    "emit_pddl_problem",
    "pddl_domain",
]


class Strategy(str, enum.Enum):
    OPTIMAL = "optimal"
    WEIGHTED = "weighted"
    EHC = "ehc"


@dataclass(frozen=True)
class SearchConfig:
    strategy: Strategy = Strategy.WEIGHTED
    heuristic_weight: int | None = None  # weighted defaults to 5, others to 1
    node_budget: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.heuristic_weight is None:
            default = 5 if self.strategy is Strategy.WEIGHTED else 1
            object.__setattr__(self, "heuristic_weight", default)
        if self.strategy is Strategy.OPTIMAL and self.heuristic_weight != 1:
            raise ValueError("optimal search requires heuristic_weight == 1")
        if self.heuristic_weight < 1:
            raise ValueError("heuristic_weight must be a positive integer")
        if self.node_budget < 1:
            raise ValueError("node_budget must be positive")

    @classmethod
    def optimal(cls, node_budget=1_000_000):
        return cls(Strategy.OPTIMAL, 1, node_budget)

    @classmethod
    def weighted(cls, weight=5, node_budget=1_000_000):
        return cls(Strategy.WEIGHTED, weight, node_budget)

    @classmethod
    def ehc(cls, node_budget=1_000_000):
        return cls(Strategy.EHC, 1, node_budget)

    @classmethod
    def from_name(cls, name, node_budget=1_000_000, weight=5):
        strategy = Strategy(str(name).lower())
        if strategy is Strategy.OPTIMAL:
            return cls.optimal(node_budget)
        if strategy is Strategy.EHC:
            return cls.ehc(node_budget)
        return cls.weighted(weight, node_budget)


@dataclass(frozen=True)
class Plan:
    actions: tuple = ()

    @property
    def cost(self) -> int:
        return len(self.actions)

    def __len__(self):
        return len(self.actions)


@dataclass
class PlanStats:
    nodes_expanded: int = 0
    nodes_generated: int = 0
    wall_time: float = 0.0
    timed_out: bool = False


def _manhattan(layout, a: int, b: int) -> int:
    cols = layout.cols
    return abs(a // cols - b // cols) + abs(a % cols - b % cols)


def _catapult_bound(state: GameState, target: int, skip: int = -1) -> int:
    # Walking cost to the target, or to the first catapult entered, whichever
    # is nearer: a launch can carry the avatar anywhere afterwards.
    layout = state.layout
    best = _manhattan(layout, state.pos, target)
    mask = state.objects
    for bit, p in enumerate(layout.obj_pos):
        if p != skip and mask >> bit & 1:
            d = _manhattan(layout, state.pos, p)
            if d < best:
                best = d
    return best


def heuristic(state: GameState, subgoal: Subgoal) -> int:
    """Admissible distance estimate from the avatar to the subgoal.

    Manhattan distance, except in Catapults where a reachable catapult caps
    the estimate, since one launch moves the avatar many tiles.
    """
    if subgoal_achieved(state, subgoal):
        return 0
    layout = state.layout
    target = layout.index(subgoal.tile)
    if layout.game is Game.CATAPULTS:
        return _catapult_bound(state, target, skip=target)
    return _manhattan(layout, state.pos, target)


def full_heuristic(state: GameState) -> int:
    """Admissible estimate of the actions left to win the whole level."""
    if state.status == Status.WON:
        return 0
    layout = state.layout
    if layout.game is Game.CATAPULTS:
        return _catapult_bound(state, layout.exit_pos)
    return max(state.items_needed, _manhattan(layout, state.pos, layout.exit_pos))


def _path(parents, state) -> tuple:
    actions = []
    while True:
        entry = parents[state]
        if entry is None:
            break
        state, action = entry
        actions.append(action)
    actions.reverse()
    return tuple(actions)


def _best_first(start, is_goal, h, weight, budget, stats):
    if is_goal(start):
        return ()
    parents = {start: None}
    g_score = {start: 0}
    closed = set()
    h0 = h(start)
    seq = 0
    heap = [(weight * h0, h0, seq, start)]
    push, pop = heapq.heappush, heapq.heappop
    while heap:
        _, _, _, state = pop(heap)
        if state in closed:
            continue
        if is_goal(state):
            return _path(parents, state)
        if stats.nodes_expanded >= budget:
            stats.timed_out = True
            raise BudgetExceeded(f"node budget {budget} exhausted", stats)
        closed.add(state)
        stats.nodes_expanded += 1
        g = g_score[state] + 1
        for action, nxt in successors(state):
            stats.nodes_generated += 1
            if nxt in closed:
                continue
            old = g_score.get(nxt)
            if old is not None and old <= g:
                continue
            g_score[nxt] = g
            parents[nxt] = (state, action)
            hn = h(nxt)
            seq += 1
            push(heap, (g + weight * hn, hn, seq, nxt))
    raise Unreachable("search space exhausted without reaching the goal", stats)


def _enforced_hill_climbing(start, is_goal, h, budget, stats):
    if is_goal(start):
        return ()
    actions = []
    current, h_cur = start, h(start)
    first = True
    while True:
        parents = {current: None}
        queue = deque([current])
        improved = None
        while queue and improved is None:
            state = queue.popleft()
            if stats.nodes_expanded >= budget:
                stats.timed_out = True
                raise BudgetExceeded(f"node budget {budget} exhausted", stats)
            stats.nodes_expanded += 1
            for action, nxt in successors(state):
                stats.nodes_generated += 1
                if nxt in parents:
                    continue
                parents[nxt] = (state, action)
                if is_goal(nxt):
                    actions.extend(_path(parents, nxt))
                    return tuple(actions)
                if nxt.status == Status.RUNNING and h(nxt) < h_cur:
                    improved = nxt
                    break
                queue.append(nxt)
        if improved is None:
            if first:
                raise Unreachable("search space exhausted without reaching the goal", stats)
            raise EHCStuck("no strictly improving state reachable", stats)
        actions.extend(_path(parents, improved))
        current, h_cur = improved, h(improved)
        first = False


def _run(start, is_goal, h, config: SearchConfig):
    stats = PlanStats()
    t0 = time.perf_counter()
    try:
        if config.strategy is Strategy.EHC:
            actions = _enforced_hill_climbing(start, is_goal, h, config.node_budget, stats)
        else:
            actions = _best_first(start, is_goal, h, config.heuristic_weight,
                                  config.node_budget, stats)
    finally:
        stats.wall_time = time.perf_counter() - t0
    return Plan(actions), stats


def plan_to_subgoal(state: GameState, subgoal: Subgoal, config: SearchConfig | None = None):
    """Plan from ``state`` until the avatar enters ``subgoal``'s tile.

    A final-goal subgoal is satisfied only by winning. Returns
    ``(Plan, PlanStats)``; raises :class:`Unreachable`,
    :class:`BudgetExceeded` or :class:`EHCStuck`.
    """
    if state.status != Status.RUNNING:
        raise ValueError("cannot plan from a terminal state")
    config = config or SearchConfig()
    if subgoal.kind is SubgoalKind.FINAL:
        def is_goal(s):
            return s.status == Status.WON
    else:
        def is_goal(s):
            return subgoal_achieved(s, subgoal)
    return _run(state, is_goal, lambda s: heuristic(s, subgoal), config)


def plan_full(state: GameState, config: SearchConfig | None = None):
    """Solve the whole level (reach a won state) with no goal selection."""
    if state.status != Status.RUNNING:
        raise ValueError("cannot plan from a terminal state")
    config = config or SearchConfig()
    return _run(state, lambda s: s.status == Status.WON, full_heuristic, config)


def any_reachable(state: GameState, subgoals, node_budget: int = 200_000):
    """Breadth-first check whether any of ``subgoals`` can be achieved.

    Returns True, False, or None when the budget runs out first.
    """
    subgoals = list(subgoals)

    def hit(s):
        return any(
            s.status == Status.WON if g.kind is SubgoalKind.FINAL else subgoal_achieved(s, g)
            for g in subgoals
        )

    if hit(state):
        return True
    seen = {state}
    queue = deque([state])
    expanded = 0
    while queue:
        s = queue.popleft()
        expanded += 1
        if expanded > node_budget:
            return None
        for _, nxt in successors(s):
            if nxt in seen:
                continue
            if hit(nxt):
                return True
            seen.add(nxt)
            queue.append(nxt)
    return False


def replay(state: GameState, actions) -> GameState:
    """Apply ``actions`` with the engine's checked ``step``."""
    from .game import step

    for action in actions:
        state = step(state, action)
    return state


# PDDL --------------------------------------------------------------------

_DIR_NAMES = {Action.UP: "up", Action.DOWN: "down", Action.LEFT: "left", Action.RIGHT: "right"}
_DOMAIN_FILES = {
    Game.BOULDERDASH: "boulderdash.pddl",
    Game.ICEANDFIRE: "iceandfire.pddl",
    Game.CATAPULTS: "catapults.pddl",
}


def pddl_domain(game_id) -> str:
    """Static domain text shipped with the package."""
    name = _DOMAIN_FILES[Game.parse(game_id)]
    return resources.files("dqplan").joinpath("domains").joinpath(name).read_text()


def _tile_name(layout, pos: int) -> str:
    r, c = divmod(pos, layout.cols)
    return f"tile{r}_{c}"


def emit_pddl_problem(state: GameState, subgoal: Subgoal, name: str | None = None) -> str:
    """PDDL problem for reaching ``subgoal`` from ``state``.

    The goal is the single literal ``(goto tileR_C)``.
    """
    if state.status != Status.RUNNING:
        raise ValueError("cannot emit a problem for a terminal state")
    layout = state.layout
    game = layout.game
    n = layout.rows * layout.cols
    tiles = [_tile_name(layout, p) for p in range(n)]
    domain = _DOMAIN_FILES[game].removesuffix(".pddl")
    name = name or f"{domain}-problem"

    init = [f"(at {tiles[state.pos]})", f"(goto {tiles[state.pos]})"]
    for p in range(n):
        ch = layout.terrain[p]
        if ch == "w":
            init.append(f"(wall {tiles[p]})")
            continue
        for action in (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT):
            q = layout.neighbor[action][p]
            if q >= 0 and layout.terrain[q] != "w":
                init.append(f"(adjacent {tiles[p]} {tiles[q]} {_DIR_NAMES[action]})")
        if ch == "e":
            init.append(f"(exit {tiles[p]})")
        elif ch == "s":
            init.append(f"(spikes {tiles[p]})")
        elif ch == "i":
            init.append(f"(ice {tiles[p]})")
        elif ch == "f":
            init.append(f"(fire {tiles[p]})")
        elif ch == "~":
            init.append(f"(water {tiles[p]})")
    kind_pred = {"o": "boulder", "x": "gem", "c": "coin", "b": "ice-boots", "h": "fire-boots"}
    catapults = []
    for bit, (p, k) in enumerate(zip(layout.obj_pos, layout.obj_kind)):
        if state.objects >> bit & 1:
            if k in kind_pred:
                init.append(f"({kind_pred[k]} {tiles[p]})")
            else:
                catapults.append(p)
                init.append(f"(catapult {tiles[p]})")
    objects = [" ".join(tiles) + " - tile"]

    if game is Game.CATAPULTS:
        from .game import _launch, _CATAPULT_DIRS

        for p in catapults:
            kind = layout.obj_kind[layout.bit_at[p]]
            _, landing, _ = _launch(layout, state.objects, p, _CATAPULT_DIRS[kind])
            init.append(f"(lands {tiles[p]} {tiles[landing]})")
    else:
        depth = max(layout.required, state.gems, state.coins) + len(layout.obj_pos) + 1
        counts = [f"n{i}" for i in range(depth + 1)]
        objects.append(" ".join(counts) + " - count")
        have = state.gems if game is Game.BOULDERDASH else state.coins
        init.append(f"(collected n{have})")
        init.extend(f"(next n{i} n{i + 1})" for i in range(depth))
        init.extend(f"(enough n{i})" for i in range(layout.required, depth + 1))
        if game is Game.BOULDERDASH:
            objects.append("up down left right - dir")
            init.append(f"(facing {_DIR_NAMES[Action(state.facing)]})")
        else:
            objects.append("up down left right - dir")
            if state.has_ice_boots:
                init.append("(has-ice-boots)")
            if state.has_fire_boots:
                init.append("(has-fire-boots)")
    if game is Game.CATAPULTS:
        objects.append("up down left right - dir")

    goal = f"(goto {_tile_name(layout, layout.index(subgoal.tile))})"
    lines = [f"(define (problem {name})", f"  (:domain {domain})", "  (:objects"]
    lines += [f"    {o}" for o in objects]
    lines.append("  )")
    lines.append("  (:init")
    lines += [f"    {fact}" for fact in init]
    lines.append("  )")
    lines.append(f"  (:goal {goal})")
    lines.append(")")
    return "\n".join(lines) + "\n"

"""Deterministic simulators for BoulderDash, IceAndFire and Catapults.

States are immutable tuples so they can be hashed by the planner. The static
part of a level (terrain, exit, requirement, removable-object slots) lives in a
shared :class:`Layout`; a state only carries a bitmask of the removable objects
still present, the avatar tile, facing, counters and status.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

from .exceptions import GameOver, IllegalAction
from .level_codec import Game, LevelGrid

__all__ = [
    "Action",
    "Status",
    "TerminalKind",
    "SubgoalKind",
    "Subgoal",
    "SubgoalPattern",
    "PATTERNS",
    "Layout",
    "GameState",
    "new_game",
    "step",
    "try_step",
    "legal_actions",
    "successors",
    "formulate_subgoals",
    "final_goal_attainable",
    "subgoal_achieved",
    "classify_terminal",
    "required_items",
    "pack_state",
    "unpack_state",
]

# Full-game collection requirements.
BOULDERDASH_GEMS = 9
ICEANDFIRE_COINS = 10


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    USE = 4


ACTIONS = tuple(Action)
MOVES = (Action.UP, Action.DOWN, Action.LEFT, Action.RIGHT)
_DELTAS = {Action.UP: (-1, 0), Action.DOWN: (1, 0), Action.LEFT: (0, -1), Action.RIGHT: (0, 1)}
_CATAPULT_DIRS = {"u": Action.UP, "d": Action.DOWN, "l": Action.LEFT, "r": Action.RIGHT}


class Status(enum.IntEnum):
    RUNNING = 0
    WON = 1
    LOST = 2


class TerminalKind(str, enum.Enum):
    NOT_TERMINAL = "NotTerminal"
    WIN = "Win"
    DEAD_END = "DeadEnd"


class SubgoalKind(str, enum.Enum):
    TILE = "Tile"
    FINAL = "FinalGoal"


@dataclass(frozen=True, order=True)
class Subgoal:
    tile: tuple[int, int]
    kind: SubgoalKind = SubgoalKind.TILE

    @classmethod
    def at(cls, row: int, col: int) -> "Subgoal":
        return cls((row, col), SubgoalKind.TILE)

    @classmethod
    def final(cls, exit_tile) -> "Subgoal":
        return cls(tuple(exit_tile), SubgoalKind.FINAL)

    @property
    def is_final(self) -> bool:
        return self.kind is SubgoalKind.FINAL

    def __repr__(self):
        if self.is_final:
            return f"FinalGoal{self.tile}"
        return f"Tile{self.tile}"


@dataclass(frozen=True)
class SubgoalPattern:
    game_id: Game
    object_classes: tuple[str, ...]

    def __post_init__(self):
        from .level_codec import ALPHABETS

        if not self.object_classes:
            raise ValueError("subgoal pattern needs at least one object class")
        bad = set(self.object_classes) - set(ALPHABETS[self.game_id])
        if bad:
            raise ValueError(f"classes {sorted(bad)} are not valid for {self.game_id.value}")


PATTERNS = {
    Game.BOULDERDASH: SubgoalPattern(Game.BOULDERDASH, ("x",)),
    Game.ICEANDFIRE: SubgoalPattern(Game.ICEANDFIRE, ("c", "b", "h")),
    Game.CATAPULTS: SubgoalPattern(Game.CATAPULTS, ("u", "r", "l", "d")),
}

# Object classes that vanish when the avatar enters their tile.
_ENTERED_ON_REMOVE = frozenset("xcbhurld")
_REMOVABLE = {
    Game.BOULDERDASH: frozenset("ox"),
    Game.ICEANDFIRE: frozenset("cbh"),
    Game.CATAPULTS: frozenset("urld"),
}
_IMPASSABLE = {
    Game.BOULDERDASH: frozenset("w"),
    Game.ICEANDFIRE: frozenset("ws"),
    Game.CATAPULTS: frozenset("w~"),
}


class Layout:
    """Static, shared part of a level under a given rule set."""

    __slots__ = (
        "game", "rows", "cols", "terrain", "exit_pos", "start_pos", "required",
        "obj_pos", "obj_kind", "bit_at", "initial_mask", "neighbor", "level",
        "mini", "_hash", "_planes", "__weakref__",
    )

    def __init__(self, level: LevelGrid, mini: bool = False):
        self.level = level
        self.mini = mini
        self.game = level.game_id
        self.rows, self.cols = level.rows, level.cols
        removable = _REMOVABLE[self.game]
        terrain = []
        obj_pos, obj_kind = [], []
        for i, ch in enumerate("".join(level.layout)):
            if ch in removable:
                obj_pos.append(i)
                obj_kind.append(ch)
                terrain.append(".")
            elif ch == "A":
                self.start_pos = i
                terrain.append(".")
            else:
                terrain.append(ch)
                if ch == "e":
                    self.exit_pos = i
        self.terrain = "".join(terrain)
        self.obj_pos = tuple(obj_pos)
        self.obj_kind = "".join(obj_kind)
        self.bit_at = {p: b for b, p in enumerate(obj_pos)}
        self.initial_mask = (1 << len(obj_pos)) - 1
        self.required = required_items(level, mini)
        n = self.rows * self.cols
        neighbor = []
        for a in MOVES:
            dr, dc = _DELTAS[a]
            row = []
            for i in range(n):
                r, c = divmod(i, self.cols)
                rr, cc = r + dr, c + dc
                row.append(rr * self.cols + cc if 0 <= rr < self.rows and 0 <= cc < self.cols else -1)
            neighbor.append(tuple(row))
        self.neighbor = tuple(neighbor)
        self._hash = hash((self.game, level.layout, self.required))
        self._planes = None

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Layout):
            return NotImplemented
        return (self.game, self.level.layout, self.required) == (
            other.game, other.level.layout, other.required)

    def __reduce__(self):
        return (_layout_for, (self.level, self.mini))

    def tile(self, pos: int) -> tuple[int, int]:
        return divmod(pos, self.cols)

    def index(self, tile) -> int:
        return tile[0] * self.cols + tile[1]

    def in_bounds(self, tile) -> bool:
        return 0 <= tile[0] < self.rows and 0 <= tile[1] < self.cols


def required_items(level: LevelGrid, mini: bool = False) -> int:
    """Items needed before the exit wins the level.

    Full rules use the fixed counts; mini variants scale with the level:
    half the gems (rounded up) in BoulderDash, every coin in IceAndFire.
    """
    if level.game_id is Game.BOULDERDASH:
        gems = level.count("x")
        return math.ceil(gems / 2) if mini else BOULDERDASH_GEMS
    if level.game_id is Game.ICEANDFIRE:
        return level.count("c") if mini else ICEANDFIRE_COINS
    return 0


@lru_cache(maxsize=4096)
def _layout_for(level: LevelGrid, mini: bool) -> Layout:
    return Layout(level, mini)


class GameState(NamedTuple):
    """Full world state. ``objects`` is a bitmask over ``layout.obj_pos``."""

    layout: Layout
    objects: int
    pos: int
    facing: int
    gems: int
    coins: int
    boots: int  # bit 0: ice boots, bit 1: fire boots
    status: int

    @property
    def game_id(self) -> Game:
        return self.layout.game

    @property
    def avatar(self) -> tuple[int, int]:
        return divmod(self.pos, self.layout.cols)

    @property
    def gems_collected(self) -> int:
        return self.gems

    @property
    def coins_collected(self) -> int:
        return self.coins

    @property
    def has_ice_boots(self) -> bool:
        return bool(self.boots & 1)

    @property
    def has_fire_boots(self) -> bool:
        return bool(self.boots & 2)

    @property
    def items_needed(self) -> int:
        """Collectables still missing before the exit counts."""
        have = self.gems if self.layout.game is Game.BOULDERDASH else self.coins
        return max(self.layout.required - have, 0)

    @property
    def running(self) -> bool:
        return self.status == Status.RUNNING

    def object_at(self, pos: int) -> str | None:
        bit = self.layout.bit_at.get(pos)
        if bit is not None and self.objects >> bit & 1:
            return self.layout.obj_kind[bit]
        return None

    def remaining(self, kinds) -> list[int]:
        """Tile indices of present objects of the given classes, row-major."""
        layout = self.layout
        mask = self.objects
        return [
            p for b, (p, k) in enumerate(zip(layout.obj_pos, layout.obj_kind))
            if k in kinds and mask >> b & 1
        ]

    @property
    def grid(self) -> LevelGrid:
        """Current contents as a level grid (avatar drawn over its tile)."""
        layout = self.layout
        chars = list(layout.terrain)
        for b, (p, k) in enumerate(zip(layout.obj_pos, layout.obj_kind)):
            if self.objects >> b & 1:
                chars[p] = k
        chars[self.pos] = "A"
        cols = layout.cols
        return LevelGrid(layout.game, tuple(
            "".join(chars[r * cols:(r + 1) * cols]) for r in range(layout.rows)))

    def __repr__(self):
        return (f"GameState({self.layout.game.value}, avatar={self.avatar}, gems={self.gems}, "
                f"coins={self.coins}, boots={self.boots}, status={Status(self.status).name})")


def new_game(level: LevelGrid, mini: bool = False) -> GameState:
    layout = _layout_for(level, mini)
    return GameState(layout, layout.initial_mask, layout.start_pos, int(Action.RIGHT),
                     0, 0, 0, int(Status.RUNNING))


def _finish(layout: Layout, objects, pos, facing, gems, coins, boots) -> GameState:
    status = Status.RUNNING
    if pos == layout.exit_pos:
        have = gems if layout.game is Game.BOULDERDASH else coins
        if have >= layout.required:
            status = Status.WON
    return GameState(layout, objects, pos, facing, gems, coins, boots, int(status))


def _launch(layout: Layout, objects: int, pos: int, direction: int):
    """Resolve a catapult chain starting on the catapult at ``pos``.

    Returns ``(objects, landing_pos, lost)``. A repeated (tile, direction)
    pair is a loss.
    """
    objects &= ~(1 << layout.bit_at[pos])
    visited = {(pos, direction)}
    terrain = layout.terrain
    bit_at = layout.bit_at
    while True:
        nxt = layout.neighbor[direction][pos]
        if nxt < 0 or terrain[nxt] == "w":
            break
        pos = nxt
        bit = bit_at.get(nxt)
        if bit is not None and objects >> bit & 1:
            direction = _CATAPULT_DIRS[layout.obj_kind[bit]]
            objects &= ~(1 << bit)
            if (pos, direction) in visited:
                return objects, pos, True
            visited.add((pos, direction))
    return objects, pos, terrain[pos] == "~"


def try_step(state: GameState, action: int) -> GameState | None:
    """Successor of ``state`` under ``action``, or ``None`` if illegal."""
    layout = state.layout
    game = layout.game
    objects, pos = state.objects, state.pos

    if action == Action.USE:
        if game is not Game.BOULDERDASH:
            return None
        target = layout.neighbor[state.facing][pos]
        bit = layout.bit_at.get(target) if target >= 0 else None
        if bit is None or not objects >> bit & 1 or layout.obj_kind[bit] != "o":
            return None
        return GameState(layout, objects & ~(1 << bit), pos, state.facing,
                         state.gems, state.coins, state.boots, state.status)

    target = layout.neighbor[action][pos]
    if target < 0:
        return None
    ground = layout.terrain[target]
    if ground in _IMPASSABLE[game]:
        return None
    gems, coins, boots = state.gems, state.coins, state.boots
    if game is Game.ICEANDFIRE:
        if ground == "i" and not boots & 1:
            return None
        if ground == "f" and not boots & 2:
            return None
    facing = int(action) if game is Game.BOULDERDASH else state.facing

    bit = layout.bit_at.get(target)
    if bit is not None and objects >> bit & 1:
        kind = layout.obj_kind[bit]
        if kind == "o":
            return None
        if kind in "urld":
            objects, landing, lost = _launch(layout, objects, target, _CATAPULT_DIRS[kind])
            if lost:
                return GameState(layout, objects, landing, facing, gems, coins, boots,
                                 int(Status.LOST))
            return _finish(layout, objects, landing, facing, gems, coins, boots)
        objects &= ~(1 << bit)
        if kind == "x":
            gems += 1
        elif kind == "c":
            coins += 1
        elif kind == "b":
            boots |= 1
        elif kind == "h":
            boots |= 2
    return _finish(layout, objects, target, facing, gems, coins, boots)


def step(state: GameState, action) -> GameState:
    if state.status != Status.RUNNING:
        raise GameOver(f"game already {Status(state.status).name.lower()}")
    action = Action(action)
    nxt = try_step(state, action)
    if nxt is None:
        raise IllegalAction(f"{action.name} is illegal at {state.avatar}")
    return nxt


def successors(state: GameState):
    """Yield ``(action, next_state)`` for every legal action in fixed order."""
    if state.status != Status.RUNNING:
        return
    for action in ACTIONS:
        nxt = try_step(state, action)
        if nxt is not None:
            yield action, nxt


def legal_actions(state: GameState) -> set:
    return {a for a, _ in successors(state)}


def final_goal_attainable(state: GameState) -> bool:
    return state.items_needed == 0


def formulate_subgoals(state: GameState, pattern: SubgoalPattern | None = None) -> list[Subgoal]:
    """Compound subgoal for ``state``: one tile per remaining pattern object.

    Once the requirement is met in a collection game the list is just the
    final goal. In Catapults the final goal is always a candidate, listed last.
    """
    layout = state.layout
    pattern = pattern or PATTERNS[layout.game]
    exit_goal = Subgoal.final(layout.tile(layout.exit_pos))
    if layout.game is Game.CATAPULTS:
        tiles = [Subgoal(layout.tile(p)) for p in state.remaining(pattern.object_classes)]
        return tiles + [exit_goal]
    if final_goal_attainable(state):
        return [exit_goal]
    return [Subgoal(layout.tile(p)) for p in state.remaining(pattern.object_classes)]


def subgoal_achieved(state: GameState, subgoal: Subgoal) -> bool:
    """True once the avatar has entered the subgoal tile.

    Collected items and used catapults vanish on entry, so a missing
    object at the tile also counts (a catapult moves the avatar away).
    """
    if subgoal.kind is SubgoalKind.FINAL:
        return state.status == Status.WON
    layout = state.layout
    pos = layout.index(subgoal.tile)
    if state.pos == pos:
        return True
    bit = layout.bit_at.get(pos)
    return (bit is not None and layout.obj_kind[bit] in _ENTERED_ON_REMOVE
            and not state.objects >> bit & 1)


def classify_terminal(state: GameState, node_budget: int = 200_000) -> TerminalKind:
    """Win, DeadEnd (lost or no candidate subgoal reachable) or NotTerminal.

    Reachability is decided by a breadth-first search; an inconclusive
    search (budget hit) counts as not terminal.
    """
    if state.status == Status.WON:
        return TerminalKind.WIN
    if state.status == Status.LOST:
        return TerminalKind.DEAD_END
    from .planner import any_reachable

    candidates = formulate_subgoals(state)
    if not candidates:
        return TerminalKind.DEAD_END
    reachable = any_reachable(state, candidates, node_budget=node_budget)
    if reachable is False:
        return TerminalKind.DEAD_END
    return TerminalKind.NOT_TERMINAL


# binary state records ---------------------------------------------------------

_STATE_TAIL = struct.Struct("<IBHHBB")


def pack_state(state: GameState) -> bytes:
    """Self-contained binary record of a state (level text included)."""
    layout = state.layout
    text = "".join(row + "\n" for row in layout.level.layout).encode()
    mask = state.objects.to_bytes((len(layout.obj_pos) + 7) // 8, "little")
    game = layout.game.value.encode()
    return b"".join([
        struct.pack("<B", len(game)), game,
        struct.pack("<BI", int(layout.mini), len(text)), text,
        struct.pack("<H", len(mask)), mask,
        _STATE_TAIL.pack(state.pos, state.facing, state.gems, state.coins, state.boots,
                         state.status),
    ])


def unpack_state(buf: bytes, offset: int = 0) -> tuple[GameState, int]:
    """Inverse of :func:`pack_state`; returns the state and the next offset."""
    (glen,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    game = Game(buf[offset:offset + glen].decode())
    offset += glen
    mini, tlen = struct.unpack_from("<BI", buf, offset)
    offset += 5
    level = _parse_cached(buf[offset:offset + tlen].decode(), game)
    offset += tlen
    (mlen,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    mask = int.from_bytes(buf[offset:offset + mlen], "little")
    offset += mlen
    pos, facing, gems, coins, boots, status = _STATE_TAIL.unpack_from(buf, offset)
    offset += _STATE_TAIL.size
    layout = _layout_for(level, bool(mini))
    return GameState(layout, mask, pos, facing, gems, coins, boots, status), offset


@lru_cache(maxsize=4096)
def _parse_cached(text: str, game: Game) -> LevelGrid:
    from .level_codec import parse_level

    return parse_level(text, game)

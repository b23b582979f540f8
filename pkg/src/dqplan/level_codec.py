"""Level description files and one-hot observation encoding.

A level file is plain text, one row per line and one character per tile.
Each game has its own alphabet; ``.`` and ``-`` are both empty floor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import (
    AvatarCountNotOne,
    ExitCountNotOne,
    LevelFormatError,
    NonRectangular,
    SubgoalOutOfBounds,
    UnknownCharacter,
)

__all__ = [
    "Game",
    "LevelGrid",
    "ALPHABETS",
    "FLOOR_CHARS",
    "parse_level",
    "serialize_level",
    "object_channels",
    "inventory_channels",
    "n_channels",
    "encode_observation",
    "encode_batch",
]


class Game(str, enum.Enum):
    BOULDERDASH = "BoulderDash"
    ICEANDFIRE = "IceAndFire"
    CATAPULTS = "Catapults"

    @classmethod
    def parse(cls, name) -> "Game":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("_", "").replace("-", "")
        for game in cls:
            if game.value.lower() == key:
                return game
        raise ValueError(f"unknown game {name!r}")


FLOOR_CHARS = frozenset(".-")

# Object characters per game, in channel order. Floor is not an object.
ALPHABETS: dict[Game, tuple[str, ...]] = {
    Game.BOULDERDASH: ("w", "o", "x", "A", "e"),
    Game.ICEANDFIRE: ("w", "s", "i", "f", "b", "h", "c", "A", "e"),
    Game.CATAPULTS: ("w", "u", "r", "l", "d", "~", "A", "e"),
}

# Thermometer depth for "items still needed" (full-game requirement).
_NEEDED_DEPTH = {Game.BOULDERDASH: 9, Game.ICEANDFIRE: 10, Game.CATAPULTS: 0}


@dataclass(frozen=True)
class LevelGrid:
    """A rectangular level layout in canonical form (floors are ``.``)."""

    game_id: Game
    layout: tuple[str, ...]

    @property
    def rows(self) -> int:
        return len(self.layout)

    @property
    def cols(self) -> int:
        return len(self.layout[0]) if self.layout else 0

    @cached_property
    def cells(self) -> tuple[frozenset, ...]:
        """Row-major per-tile object sets."""
        return tuple(
            frozenset() if ch == "." else frozenset(ch)
            for row in self.layout
            for ch in row
        )

    def positions_of(self, char: str) -> list[tuple[int, int]]:
        return [
            (r, c)
            for r, row in enumerate(self.layout)
            for c, ch in enumerate(row)
            if ch == char
        ]

    def count(self, char: str) -> int:
        return sum(row.count(char) for row in self.layout)

    @property
    def avatar_start(self) -> tuple[int, int]:
        return self.positions_of("A")[0]

    @property
    def exit(self) -> tuple[int, int]:
        return self.positions_of("e")[0]

    def __str__(self) -> str:
        return serialize_level(self)


def parse_level(text: str, game_id) -> LevelGrid:
    """Parse level text into a validated :class:`LevelGrid`."""
    game = Game.parse(game_id)
    lines = text.replace("\r\n", "\n").split("\n")
    while lines and lines[-1].strip() == "":
        lines.pop()
    if not lines:
        raise LevelFormatError("empty level text")

    width = len(lines[0])
    for r, line in enumerate(lines):
        if len(line) != width:
            raise NonRectangular(
                f"row {r} has {len(line)} characters, expected {width}"
            )
    if width == 0:
        raise LevelFormatError("empty level rows")

    allowed = set(ALPHABETS[game]) | FLOOR_CHARS
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch not in allowed:
                raise UnknownCharacter(r, c, ch)

    layout = tuple(line.replace("-", ".") for line in lines)
    n_avatar = sum(row.count("A") for row in layout)
    if n_avatar != 1:
        raise AvatarCountNotOne(f"expected one avatar, found {n_avatar}")
    n_exit = sum(row.count("e") for row in layout)
    if n_exit != 1:
        raise ExitCountNotOne(f"expected one exit, found {n_exit}")
    return LevelGrid(game, layout)


def serialize_level(grid: LevelGrid) -> str:
    return "".join(row.replace("-", ".") + "\n" for row in grid.layout)


def object_channels(game_id) -> tuple[str, ...]:
    return ALPHABETS[Game.parse(game_id)]


def inventory_channels(game_id) -> tuple[str, ...]:
    game = Game.parse(game_id)
    needed = tuple(f"needed>={j}" for j in range(1, _NEEDED_DEPTH[game] + 1))
    if game is Game.ICEANDFIRE:
        return ("ice_boots", "fire_boots") + needed
    return needed


def n_channels(game_id) -> int:
    """Object channels, inventory channels and the trailing subgoal channel."""
    return len(object_channels(game_id)) + len(inventory_channels(game_id)) + 1


def _static_planes(layout) -> np.ndarray:
    # cached per (immutable) engine layout
    cached = getattr(layout, "_planes", None)
    if cached is not None:
        return cached
    objs = object_channels(layout.game)
    planes = np.zeros((layout.rows, layout.cols, len(objs)), dtype=np.float32)
    index = {ch: k for k, ch in enumerate(objs)}
    for i, ch in enumerate(layout.terrain):
        if ch in index:
            planes[i // layout.cols, i % layout.cols, index[ch]] = 1.0
    object.__setattr__(layout, "_planes", planes)
    return planes


def encode_observation(state, subgoal=None, out: np.ndarray | None = None) -> np.ndarray:
    """One-hot ``(rows, cols, channels)`` tensor for a state and optional subgoal.

    Inventory facts are broadcast over the whole grid as constant planes.
    The last channel marks the subgoal tile, or is all zero.
    """
    layout = state.layout
    rows, cols = layout.rows, layout.cols
    game = layout.game
    objs = object_channels(game)
    n_obj = len(objs)
    if out is None:
        out = np.zeros((rows, cols, n_channels(game)), dtype=np.float32)
    else:
        out[...] = 0.0
    out[:, :, :n_obj] = _static_planes(layout)

    index = {ch: k for k, ch in enumerate(objs)}
    mask = state.objects
    for bit, (pos, kind) in enumerate(zip(layout.obj_pos, layout.obj_kind)):
        if mask >> bit & 1:
            out[pos // cols, pos % cols, index[kind]] = 1.0
    r, c = divmod(state.pos, cols)
    out[r, c, index["A"]] = 1.0

    k = n_obj
    if game is Game.ICEANDFIRE:
        if state.has_ice_boots:
            out[:, :, k] = 1.0
        if state.has_fire_boots:
            out[:, :, k + 1] = 1.0
        k += 2
    depth = _NEEDED_DEPTH[game]
    if depth:
        needed = min(state.items_needed, depth)
        if needed:
            out[:, :, k:k + needed] = 1.0

    if subgoal is not None:
        sr, sc = subgoal.tile
        if not (0 <= sr < rows and 0 <= sc < cols):
            raise SubgoalOutOfBounds(f"subgoal tile {subgoal.tile} outside {rows}x{cols} grid")
        out[sr, sc, -1] = 1.0
    return out


def encode_batch(pairs) -> np.ndarray:
    """Stack encodings of ``(state, subgoal)`` pairs into an NHWC batch."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("encode_batch needs at least one pair")
    first = pairs[0][0].layout
    batch = np.zeros((len(pairs), first.rows, first.cols, n_channels(first.game)), dtype=np.float32)
    for i, (state, subgoal) in enumerate(pairs):
        encode_observation(state, subgoal, out=batch[i])
    return batch

import numpy as np
import pytest
from hypothesis import given, settings

from dqplan.exceptions import (
    AvatarCountNotOne,
    ExitCountNotOne,
    NonRectangular,
    SubgoalOutOfBounds,
    UnknownCharacter,
)
from dqplan.game import Subgoal, new_game
from dqplan.level_codec import (
    Game,
    LevelGrid,
    encode_observation,
    inventory_channels,
    n_channels,
    object_channels,
    parse_level,
    serialize_level,
)

from .conftest import level
from .strategies import level_texts


def test_dense_level_dimensions(dense_level):
    assert (dense_level.rows, dense_level.cols) == (13, 26)
    assert dense_level.avatar_start == (7, 11)
    assert dense_level.exit == (11, 6)


def test_dense_level_round_trip_only_normalizes_dashes(dense_level, dense_text):
    assert serialize_level(dense_level) == dense_text.replace("-", ".")
    assert parse_level(serialize_level(dense_level), Game.BOULDERDASH) == dense_level


def test_dash_and_dot_are_both_floor():
    a = parse_level("A-e", "BoulderDash")
    b = parse_level("A.e", "BoulderDash")
    assert a == b
    assert a.cells[1] == frozenset()


def test_single_wall_serializes():
    assert serialize_level(LevelGrid(Game.BOULDERDASH, ("w",))) == "w\n"


@pytest.mark.parametrize(
    "text, error",
    [
        ("A", ExitCountNotOne),
        ("Ae\n.", NonRectangular),
        ("Aez", UnknownCharacter),
        ("AAe", AvatarCountNotOne),
        ("..e", AvatarCountNotOne),
        ("Aee", ExitCountNotOne),
    ],
)
def test_parse_errors(text, error):
    with pytest.raises(error):
        parse_level(text, "BoulderDash")


def test_unknown_character_location():
    with pytest.raises(UnknownCharacter) as info:
        parse_level("Ae.\n.~.", "BoulderDash")
    assert (info.value.row, info.value.col, info.value.char) == (1, 1, "~")


def test_alphabets_are_per_game():
    parse_level("A~e", "Catapults")
    with pytest.raises(UnknownCharacter):
        parse_level("A~e", "IceAndFire")


def test_game_names_parse_loosely():
    assert Game.parse("boulderdash") is Game.BOULDERDASH
    assert Game.parse("ice-and-fire") is Game.ICEANDFIRE
    with pytest.raises(ValueError):
        Game.parse("sokoban")


@settings(max_examples=100, deadline=None)
@given(level_texts())
def test_round_trip_on_generated_levels(case):
    game, text = case
    grid = parse_level(text, game)
    again = parse_level(serialize_level(grid), game)
    assert again == grid
    assert serialize_level(again) == serialize_level(grid)


# encoding ------------------------------------------------------------------

ROOM = """
wwwww
wA.xw
w.o.w
w..ew
wwwww
"""


def test_channel_counts():
    for game in Game:
        assert n_channels(game) == len(object_channels(game)) + len(inventory_channels(game)) + 1
    assert n_channels(Game.CATAPULTS) == len(object_channels(Game.CATAPULTS)) + 1


def test_wall_tile_has_single_object_channel():
    s = new_game(level(ROOM))
    x = encode_observation(s)
    n_obj = len(object_channels(Game.BOULDERDASH))
    assert x[0, 0, :n_obj].sum() == 1
    assert x[0, 0, object_channels(Game.BOULDERDASH).index("w")] == 1


def test_subgoal_channel_is_one_hot():
    s = new_game(level(ROOM))
    x = encode_observation(s, Subgoal.at(2, 3))
    assert x[:, :, -1].sum() == 1
    assert x[2, 3, -1] == 1
    assert encode_observation(s)[:, :, -1].sum() == 0


def test_subgoal_out_of_bounds():
    s = new_game(level(ROOM))
    with pytest.raises(SubgoalOutOfBounds):
        encode_observation(s, Subgoal.at(5, 0))


@settings(max_examples=60, deadline=None)
@given(level_texts())
def test_object_channels_count_tile_objects(case):
    game, text = case
    grid = parse_level(text, game)
    s = new_game(grid)
    x = encode_observation(s, Subgoal.at(0, 0))
    n_obj = len(object_channels(game))
    counts = np.array([len(cell) for cell in grid.cells]).reshape(grid.rows, grid.cols)
    np.testing.assert_array_equal(x[:, :, :n_obj].sum(axis=-1), counts)
    assert set(np.unique(x)) <= {0.0, 1.0}
    np.testing.assert_array_equal(x, encode_observation(s, Subgoal.at(0, 0)))


def test_inventory_planes_are_broadcast():
    s = new_game(level("""
        wwwwww
        wAcbhw
        w...ew
        wwwwww
    """, "IceAndFire"), mini=True)
    s = s._replace(boots=1)
    x = encode_observation(s)
    k = len(object_channels(Game.ICEANDFIRE))
    assert np.all(x[:, :, k] == 1)        # ice boots held
    assert np.all(x[:, :, k + 1] == 0)    # fire boots not held
    assert np.all(x[:, :, k + 2] == 1)    # one coin still needed
    assert np.all(x[:, :, k + 3] == 0)

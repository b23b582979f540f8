"""Goal reasoning for tile games: learned subgoal selection plus classical planning."""

from .exceptions import DQPlanError
from .game import Action, GameState, Status, Subgoal, new_game, step
from .harness import evaluate, generate_levels, run_episode
from .learner import DQPModel, ExperienceSample, train
from .level_codec import Game, LevelGrid, parse_level, serialize_level
from .planner import SearchConfig, plan_full, plan_to_subgoal

__version__ = "0.1.0"

__all__ = [
    "Action",
    "DQPModel",
    "DQPlanError",
    "ExperienceSample",
    "Game",
    "GameState",
    "LevelGrid",
    "SearchConfig",
    "Status",
    "Subgoal",
    "evaluate",
    "generate_levels",
    "new_game",
    "parse_level",
    "plan_full",
    "plan_to_subgoal",
    "run_episode",
    "serialize_level",
    "step",
    "train",
]

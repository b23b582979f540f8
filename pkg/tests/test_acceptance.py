"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also repeated in the terminal
summary) before asserting. Desk-scale experiment settings live in
``configs/*.cfg`` and are shared with the CLI.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from dqplan.cli import read_config
from dqplan.exceptions import BudgetExceeded, EHCStuck, Unreachable
from dqplan.game import formulate_subgoals, new_game, subgoal_achieved
from dqplan.harness import (
    GenKnobs,
    RandomPolicy,
    collect_dataset,
    evaluate,
    generate_levels,
    run_episode,
)
from dqplan.learner import DQPModel, dataset_bytes, load_dataset, save_dataset
from dqplan.level_codec import parse_level, serialize_level
from dqplan.neural import ConvSpec, NetworkSpec, init_params, load_params, save_params
from dqplan.planner import SearchConfig, plan_full, plan_to_subgoal, replay

from .conftest import record_criterion
from .oracles import bfs_cost, finite_difference_error, random_float64_params, tile_goal, won
from .test_learner import ROOM, exhaustive_samples, oracle_values
from .conftest import level as literal_level

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
GAMES = ("boulderdash", "iceandfire", "catapults")


def _experiment(name):
    cfg = read_config(CONFIGS / f"{name}.cfg")
    knob_names = GenKnobs.__dataclass_fields__
    knobs = GenKnobs(**{k: v for k, v in cfg.items() if k in knob_names})
    model_keys = ("conv_filters", "fc_units", "batch_norm", "gamma", "target_sync_period",
                  "batch_size", "iterations", "reward_scale", "learning_rate", "augment")
    model_kwargs = {k: cfg[k] for k in model_keys if k in cfg}
    return cfg, knobs, model_kwargs


@pytest.fixture(scope="module")
def small_levels():
    """100 generated 8x8 levels per game."""
    return {g: generate_levels(g, 100, (8, 8), seed=100, mini=True) for g in GAMES}


def test_criterion_01_planner_optimality(small_levels):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    matched = total = 0
    for game in GAMES:
        for lv in small_levels[game]:
            s = new_game(lv, True)
            goals = formulate_subgoals(s)
            goal = goals[int(rng.integers(len(goals)))]
            expected = bfs_cost(s, won if goal.is_final else tile_goal(s, goal.tile))
            try:
                got = plan_to_subgoal(s, goal, SearchConfig.optimal())[0].cost
            except Unreachable:
                got = None
            total += 1
            matched += got == expected
    elapsed = time.perf_counter() - t0
    ok = matched == total == 300 and elapsed < 60
    record_criterion(1, ok, f"optimal == BFS oracle on {matched}/{total} pairs "
                            f"(100 levels x 3 games) in {elapsed:.1f}s (limit 60s)")
    assert ok


def test_criterion_02_plan_soundness(small_levels):
    sound = plans = 0
    configs = (SearchConfig.optimal(), SearchConfig.weighted(), SearchConfig.ehc())
    for game in GAMES:
        for lv in small_levels[game]:
            s = new_game(lv, True)
            for goal in formulate_subgoals(s):
                for config in configs:
                    try:
                        plan, _ = plan_to_subgoal(s, goal, config)
                    except (Unreachable, EHCStuck):
                        continue
                    plans += 1
                    try:
                        sound += subgoal_achieved(replay(s, plan.actions), goal)
                    except Exception:
                        pass
    ok = plans >= 1000 and sound == plans
    record_criterion(2, ok, f"{sound}/{plans} plans replay to their subgoal (need >= 1000, 100%)")
    assert ok


def test_criterion_03_gradient_correctness():
    specs = [
        NetworkSpec((3, 3, 2), (ConvSpec(2),), (3,), seed=1),
        NetworkSpec((4, 3, 3), (ConvSpec(3), ConvSpec(2)), (4, 3), seed=2),
        NetworkSpec((2, 5, 1), (ConvSpec(4),), (2,), seed=3),
        NetworkSpec((3, 4, 2), (ConvSpec(2), ConvSpec(3), ConvSpec(2)), (5,), seed=4),
        NetworkSpec((3, 3, 2), (ConvSpec(3, True), ConvSpec(2, True)), (4,), seed=5),
    ]
    worst = max(finite_difference_error(*random_float64_params(spec)) for spec in specs)
    ok = worst <= 1e-4
    record_criterion(3, ok, f"max relative gradient error {worst:.2e} over 5 specs "
                            f"(one with batch norm), limit 1e-4")
    assert ok


@pytest.fixture(scope="module")
def boulderdash_experiment():
    cfg, knobs, model_kwargs = _experiment("boulderdash-mini")
    dims = (cfg["rows"], cfg["cols"])
    levels = generate_levels("boulderdash", cfg["count"], dims, knobs, seed=cfg["seed"])
    train_levels, test_levels = levels[:-5], levels[-5:]
    data = collect_dataset(train_levels, cfg["per_level_unique_cap"],
                           cfg["per_level_iteration_cap"], seed=cfg["seed"], mini=True)
    return cfg, model_kwargs, train_levels, test_levels, data


def test_criterion_04_bellman_convergence(boulderdash_experiment):
    cfg, model_kwargs, _, _, data = boulderdash_experiment
    subset = data[:5000]
    t0 = time.perf_counter()
    model = DQPModel(**{**model_kwargs, "iterations": 2000}, random_state=0).fit(subset)
    elapsed = time.perf_counter() - t0
    h = model.loss_history_
    initial, final = h[:100].mean(), h[-100:].mean()
    ok = len(subset) == 5000 and final <= 0.5 * initial and elapsed < 600
    record_criterion(4, ok, f"loss {initial:.5f} -> {final:.5f} "
                            f"(ratio {final / initial:.3f}, limit 0.5) on {len(subset)} samples, "
                            f"2000 iterations in {elapsed:.0f}s")
    assert ok


def test_criterion_05_value_fixed_point():
    start = new_game(literal_level(ROOM), mini=True)
    samples, states = exhaustive_samples(start)
    truth = oracle_values(samples, states)[start]
    model = DQPModel(conv_filters=(8, 8), fc_units=(32,), iterations=3000,
                     target_sync_period=250, random_state=0).fit(samples)
    pred = min(model.predict_q(start, g) for g in formulate_subgoals(start))
    err = abs(pred - truth) / abs(truth)
    ok = len(states) <= 50 and err <= 0.10
    record_criterion(5, ok, f"start value {pred:.2f} vs value-iteration {truth:.2f} "
                            f"(rel err {err:.3f}, limit 0.10; {len(states)} states)")
    assert ok


def test_criterion_06_dqp_beats_random(boulderdash_experiment):
    cfg, model_kwargs, _, test_levels, data = boulderdash_experiment
    model = DQPModel(**model_kwargs, random_state=cfg["seed"]).fit(data)
    report = evaluate(test_levels, ("DQP", "Random"), cfg["repetitions"], seed=cfg["seed"],
                      model=model, mini=True)

    def mean(approach):
        vals = [r.mean_actions for r in report.select(approach)]
        return float(np.mean(vals)) if None not in vals else float("inf")

    dqp, rnd = mean("DQP"), mean("Random")
    ok = dqp <= 0.8 * rnd
    record_criterion(6, ok, f"mean actions DQP {dqp:.1f} vs Random {rnd:.1f} "
                            f"(ratio {dqp / rnd:.3f}, limit 0.8) on 5 held-out levels x "
                            f"{cfg['repetitions']}")
    assert ok


def test_criterion_07_success_rate_ordering():
    cfg, knobs, model_kwargs = _experiment("catapults-mini")
    dims = (cfg["rows"], cfg["cols"])
    levels = generate_levels("catapults", cfg["count"], dims, knobs, seed=cfg["seed"])
    data = collect_dataset(levels[:-5], cfg["per_level_unique_cap"],
                           cfg["per_level_iteration_cap"], seed=cfg["seed"], mini=True)
    model = DQPModel(**model_kwargs, random_state=cfg["seed"]).fit(data)
    report = evaluate(levels[-5:], ("DQP", "Random"), cfg["repetitions"], seed=cfg["seed"],
                      model=model, mini=True)
    dqp = [r.success_rate for r in report.select("DQP")]
    rnd = [r.success_rate for r in report.select("Random")]
    per_level = all(d >= r for d, r in zip(dqp, rnd))
    ok = per_level and sum(dqp) > sum(rnd)
    record_criterion(7, ok, f"success DQP {np.round(dqp, 2).tolist()} vs Random "
                            f"{np.round(rnd, 2).tolist()}; sums {sum(dqp):.2f} vs {sum(rnd):.2f}")
    assert ok


def test_criterion_08_decomposition_relieves_planner(dense_level):
    budget = 1_000_000
    s = new_game(dense_level)
    exceeded = {}
    for name, config in (("Optimal", SearchConfig.optimal(budget)),
                         ("Weighted", SearchConfig.weighted(5, budget))):
        try:
            plan_full(s, config)
            exceeded[name] = False
        except BudgetExceeded:
            exceeded[name] = True
    episode = run_episode(dense_level, RandomPolicy(0))
    nodes = episode.total_nodes_expanded
    ok = all(exceeded.values()) and episode.won and nodes <= budget // 10
    record_criterion(8, ok, f"full search over budget {exceeded}; decomposed Random episode "
                            f"{episode.outcome} with {nodes} expansions (limit {budget // 10})")
    assert ok


def test_criterion_09_determinism(tmp_path):
    def run(tag):
        levels = generate_levels("boulderdash", 4, (6, 6), GenKnobs(gems=4), seed=3)
        data = collect_dataset(levels[:3], 40, 80, seed=3, mini=True)
        save_dataset(data, tmp_path / f"d{tag}.bin")
        model = DQPModel(conv_filters=(4, 4), fc_units=(8,), iterations=60, augment=True,
                         random_state=3).fit(data)
        model.save(tmp_path / f"p{tag}.bin")
        report = evaluate(levels[3:], ("DQP", "Random", "FullWeighted"), 3, seed=3,
                          model=model, mini=True, timing=False)
        (tmp_path / f"r{tag}.csv").write_text(report.to_csv() + report.to_jsonl())

    run("a")
    run("b")
    same = {kind: (tmp_path / f"{kind}a.{ext}").read_bytes() ==
            (tmp_path / f"{kind}b.{ext}").read_bytes()
            for kind, ext in (("d", "bin"), ("p", "bin"), ("r", "csv"))}
    ok = all(same.values())
    record_criterion(9, ok, "byte-identical across runs: dataset={d}, parameters={p}, "
                            "report={r}".format(**same))
    assert ok


def test_criterion_10_format_fidelity(tmp_path, dense_text):
    grid = parse_level(dense_text, "BoulderDash")
    text = serialize_level(grid)
    shape_ok = (grid.rows, grid.cols) == (13, 26)
    round_trip = (text == dense_text.replace("-", ".")
                  and serialize_level(parse_level(text, "BoulderDash")) == text)

    params = init_params(NetworkSpec.desk((13, 26, 15), batch_norm=True, seed=4))
    save_params(params, tmp_path / "p.bin")
    params_ok = load_params(tmp_path / "p.bin").equals(params)

    lv = literal_level(ROOM)
    samples, _ = exhaustive_samples(new_game(lv, True))
    save_dataset(samples, tmp_path / "d.bin")
    data_ok = (load_dataset(tmp_path / "d.bin") == samples
               and dataset_bytes(load_dataset(tmp_path / "d.bin")) ==
               (tmp_path / "d.bin").read_bytes())

    rejected = 0
    for name, loader in (("p.bin", load_params), ("d.bin", load_dataset)):
        raw = bytearray((tmp_path / name).read_bytes())
        raw[len(raw) // 3] ^= 0x01
        (tmp_path / name).write_bytes(bytes(raw))
        try:
            loader(tmp_path / name)
        except Exception as exc:
            rejected += type(exc).__name__ == "ChecksumMismatch"
    ok = shape_ok and round_trip and params_ok and data_ok and rejected == 2
    record_criterion(10, ok, f"13x26 grid={shape_ok}, canonical round trip={round_trip}, "
                             f"params bit-exact={params_ok}, dataset bit-exact={data_ok}, "
                             f"corruptions rejected={rejected}/2")
    assert ok


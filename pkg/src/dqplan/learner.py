"""Deep Q-learning of total plan length over (state, subgoal) pairs.

Rewards are plan lengths, so the learned value is a cost to go: targets
bootstrap with a *minimum* over the successor's candidate subgoals and goal
selection takes the argmin. Terminal samples carry fixed rewards: -100 for
reaching the final goal, +100 for unreachable or dead-end subgoals.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    AllCandidatesExcluded,
    ChecksumMismatch,
    IoFailure,
    NoCandidateSubgoals,
)
from .game import (
    GameState,
    Status,
    Subgoal,
    SubgoalKind,
    formulate_subgoals,
    pack_state,
    unpack_state,
)
from .level_codec import encode_batch, encode_observation, n_channels, object_channels
from .neural import (
    AdamState,
    ConvSpec,
    NetworkSpec,
    Parameters,
    apply_bn_stats,
    init_params,
    load_params,
    loss_and_grad,
    optimize_step,
    predict_batch,
    save_params,
)

__all__ = [
    "FINAL_GOAL_REWARD",
    "FAILURE_REWARD",
    "SampleKind",
    "ExperienceSample",
    "TrainConfig",
    "reward_of",
    "bellman_target",
    "train",
    "predict_values",
    "select_goal",
    "DQPModel",
    "save_dataset",
    "load_dataset",
    "dataset_bytes",
]

FINAL_GOAL_REWARD = -100.0
FAILURE_REWARD = 100.0


class SampleKind(str, enum.Enum):
    NONE = "None"
    FINAL_GOAL = "FinalGoal"
    DEAD_END = "DeadEnd"
    UNREACHABLE = "Unreachable"

    @property
    def terminal(self) -> bool:
        return self is not SampleKind.NONE


@dataclass(frozen=True)
class ExperienceSample:
    state: GameState
    chosen: Subgoal
    reward: float
    next_state: GameState
    terminal_kind: SampleKind = SampleKind.NONE

    def __post_init__(self):
        kind = SampleKind(self.terminal_kind)
        object.__setattr__(self, "terminal_kind", kind)
        if kind is SampleKind.FINAL_GOAL and self.reward != FINAL_GOAL_REWARD:
            raise ValueError("final-goal samples carry reward -100")
        if kind in (SampleKind.DEAD_END, SampleKind.UNREACHABLE) and self.reward != FAILURE_REWARD:
            raise ValueError("dead-end and unreachable samples carry reward 100")
        if kind is SampleKind.NONE and (self.reward < 0 or self.reward != int(self.reward)):
            raise ValueError("non-terminal reward must be a plan cost")
        if kind is SampleKind.UNREACHABLE and self.next_state != self.state:
            raise ValueError("unreachable samples keep the state unchanged")


@dataclass
class TrainConfig:
    gamma: float = 1.0
    target_sync_period: int = 500
    batch_size: int = 32
    iterations: int = 2000
    reward_scale: float = 0.01
    learning_rate: float = 1e-3
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.target_sync_period < 1 or self.batch_size < 1 or self.iterations < 1:
            raise ValueError("sync period, batch size and iterations must be positive")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be positive")


def reward_of(plan, next_state: GameState | None = None, dead_end: bool = False):
    """Map a planning outcome to ``(reward, terminal_kind)``.

    ``plan`` is the executed plan (anything with ``cost``) or ``None`` when
    the planner could not reach the subgoal.
    """
    if plan is None:
        return FAILURE_REWARD, SampleKind.UNREACHABLE
    if next_state is not None and next_state.status == Status.WON:
        return FINAL_GOAL_REWARD, SampleKind.FINAL_GOAL
    if dead_end or (next_state is not None and next_state.status == Status.LOST):
        return FAILURE_REWARD, SampleKind.DEAD_END
    return float(plan.cost), SampleKind.NONE


def predict_values(params: Parameters, state: GameState, subgoals, reward_scale: float = 1.0):
    """Predicted total plan lengths (unscaled) for each candidate subgoal."""
    x = encode_batch([(state, g) for g in subgoals])
    return predict_batch(params, x).astype(np.float64) / reward_scale


def bellman_target(sample: ExperienceSample, target_params: Parameters,
                   gamma: float = 1.0, reward_scale: float = 1.0) -> float:
    """Q-target in unscaled action units.

    Terminal samples return their reward; otherwise
    ``reward + gamma * min_g' Q_target(s', g')`` over the candidates of s'.
    """
    if sample.terminal_kind.terminal:
        return float(sample.reward)
    candidates = formulate_subgoals(sample.next_state)
    if not candidates:
        raise NoCandidateSubgoals("non-terminal successor has no candidate subgoals")
    q = predict_values(target_params, sample.next_state, candidates, reward_scale)
    return float(sample.reward + gamma * q.min())


def select_goal(state: GameState, candidates, params: Parameters, excluded=(),
                reward_scale: float = 1.0) -> Subgoal:
    """Candidate with the smallest predicted total plan length.

    Ties go to the first tile in row-major order.
    """
    excluded = set(excluded)
    pool = [g for g in candidates if g not in excluded]
    if not pool:
        raise AllCandidatesExcluded("every candidate subgoal was rejected")
    if len(pool) == 1:
        return pool[0]
    q = predict_values(params, state, pool, reward_scale)
    best = min(range(len(pool)), key=lambda i: (q[i], pool[i].tile, pool[i].kind.value))
    return pool[best]


class _Prepared:
    """Encoded training set: one row per sample plus successor candidates."""

    def __init__(self, dataset, reward_scale: float):
        self.x = encode_batch([(s.state, s.chosen) for s in dataset]).astype(np.uint8)
        self.reward = np.array([s.reward for s in dataset], dtype=np.float64) * reward_scale
        self.terminal = np.array([s.terminal_kind.terminal for s in dataset])
        pairs, owner = [], []
        for i, s in enumerate(dataset):
            if s.terminal_kind.terminal:
                continue
            cands = formulate_subgoals(s.next_state)
            if not cands:
                raise NoCandidateSubgoals(f"sample {i}: successor has no candidate subgoals")
            pairs.extend((s.next_state, g) for g in cands)
            owner.extend([i] * len(cands))
        self.next_x = encode_batch(pairs).astype(np.uint8) if pairs else None
        self.owner = np.array(owner, dtype=np.int64)

    def bootstrap(self, target: Parameters, chunk: int = 2048) -> np.ndarray:
        """Min target-network value over each sample's successor candidates."""
        best = np.zeros(len(self.reward))
        if self.next_x is None:
            return best
        preds = np.concatenate([
            predict_batch(target, self.next_x[k:k + chunk].astype(np.float32))
            for k in range(0, len(self.next_x), chunk)
        ]).astype(np.float64)
        best[:] = np.inf
        np.minimum.at(best, self.owner, preds)
        best[self.terminal] = 0.0
        return best


# Catapult channels that trade places under each grid symmetry.
_DIRECTION_SWAPS = {
    "transpose": (("u", "l"), ("d", "r")),
    "rows": (("u", "d"),),
    "cols": (("l", "r"),),
}


def _channel_perms(game, n: int) -> dict[str, np.ndarray]:
    names = object_channels(game)
    perms = {}
    for op, pairs in _DIRECTION_SWAPS.items():
        perm = np.arange(n)
        for a, b in pairs:
            if a in names and b in names:
                i, j = names.index(a), names.index(b)
                perm[i], perm[j] = j, i
        perms[op] = perm
    return perms


def _dihedral(x: np.ndarray, k: int, perms: dict | None = None) -> np.ndarray:
    """Apply symmetry ``k`` (0-7) of the square to an NHWC batch."""
    steps = []
    if k & 4:
        x = x.transpose(0, 2, 1, 3)
        steps.append("transpose")
    if k & 1:
        x = x[:, ::-1]
        steps.append("rows")
    if k & 2:
        x = x[:, :, ::-1]
        steps.append("cols")
    if perms:
        for op in steps:
            x = x[..., perms[op]]
    return x


def _augment(x: np.ndarray, rng, perms: dict | None = None) -> np.ndarray:
    """Random grid symmetry per row; transposes only when the grid is square."""
    kinds = 8 if x.shape[1] == x.shape[2] else 4
    ks = rng.integers(0, kinds, size=len(x))
    out = np.empty_like(x)
    for k in np.unique(ks):
        rows = ks == k
        out[rows] = _dihedral(x[rows], int(k), perms)
    return out


def train(dataset, spec: NetworkSpec, config: TrainConfig | None = None,
          params: Parameters | None = None):
    """Fit the value network with fixed Q-targets.

    Returns ``(params, loss_history)``; losses are in scaled units.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    params = params.copy() if params is not None else init_params(spec)
    prepared = _Prepared(dataset, config.reward_scale)
    opt = AdamState(lr=config.learning_rate)
    history = np.empty(config.iterations)
    targets = None
    n = len(dataset)
    perms = _channel_perms(dataset[0].state.layout.game, prepared.x.shape[-1])
    for it in range(config.iterations):
        if it % config.target_sync_period == 0:
            frozen = params.copy()
            targets = prepared.reward + config.gamma * prepared.bootstrap(frozen)
        idx = rng.integers(0, n, size=config.batch_size)
        xb = prepared.x[idx]
        if config.augment:
            xb = _augment(xb, rng, perms)
        loss, grads, bn_stats = loss_and_grad(
            params, xb.astype(np.float32), targets[idx], training=True)
        optimize_step(params, grads, opt)
        apply_bn_stats(params, bn_stats)
        history[it] = loss
    return params, history


class DQPModel(RegressorMixin, BaseEstimator):
    """Subgoal value model with the scikit-learn estimator interface.

    ``fit`` takes a sequence of :class:`ExperienceSample`; ``predict`` takes an
    NHWC batch of encoded observations (or ``(state, subgoal)`` pairs) and
    returns predicted total plan lengths in actions.
    """

    def __init__(self, conv_filters=(16, 32, 32), fc_units=(64, 32), batch_norm=False,
                 gamma=1.0, target_sync_period=500, batch_size=32, iterations=2000,
                 reward_scale=0.01, learning_rate=1e-3, augment=False, random_state=0):
        self.conv_filters = conv_filters
        self.fc_units = fc_units
        self.batch_norm = batch_norm
        self.gamma = gamma
        self.target_sync_period = target_sync_period
        self.batch_size = batch_size
        self.iterations = iterations
        self.reward_scale = reward_scale
        self.learning_rate = learning_rate
        self.augment = augment
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.gamma, self.target_sync_period, self.batch_size,
                           self.iterations, self.reward_scale, self.learning_rate,
                           int(self.random_state or 0), bool(self.augment))

    def _network_spec(self, input_dims) -> NetworkSpec:
        convs = tuple(ConvSpec(int(f), bool(self.batch_norm)) for f in self.conv_filters)
        return NetworkSpec(input_dims, convs, tuple(self.fc_units), int(self.random_state or 0))

    def fit(self, X, y=None):
        samples = list(X)
        if not samples or not all(isinstance(s, ExperienceSample) for s in samples):
            raise ValueError("DQPModel.fit expects a non-empty sequence of ExperienceSample")
        layout = samples[0].state.layout
        dims = (layout.rows, layout.cols, n_channels(layout.game))
        self.spec_ = self._network_spec(dims)
        self.params_, self.loss_history_ = train(samples, self.spec_, self._train_config())
        self.game_ = layout.game
        self.n_features_in_ = int(np.prod(dims))
        return self

    def _as_batch(self, X):
        if isinstance(X, np.ndarray):
            return X
        X = list(X)
        if X and isinstance(X[0], tuple) and isinstance(X[0][0], GameState):
            return encode_batch(X)
        return np.asarray(X, dtype=np.float32)

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict_batch(self.params_, self._as_batch(X)).astype(np.float64) / self.reward_scale

    def predict_q(self, state: GameState, subgoal: Subgoal) -> float:
        check_is_fitted(self, "params_")
        x = encode_observation(state, subgoal)[None]
        return float(predict_batch(self.params_, x)[0]) / self.reward_scale

    def select_goal(self, state: GameState, candidates, excluded=()) -> Subgoal:
        check_is_fitted(self, "params_")
        return select_goal(state, candidates, self.params_, excluded, self.reward_scale)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_params(self.params_, path)

    @classmethod
    def from_params(cls, params: Parameters, reward_scale: float = 0.01, **kwargs) -> "DQPModel":
        spec = params.spec
        model = cls(conv_filters=tuple(c.filters for c in spec.conv_layers),
                    fc_units=spec.fc_layers,
                    batch_norm=any(c.batch_norm for c in spec.conv_layers),
                    reward_scale=reward_scale, random_state=spec.seed, **kwargs)
        model.spec_ = spec
        model.params_ = params
        model.loss_history_ = np.empty(0)
        model.n_features_in_ = int(np.prod(spec.input_dims))
        return model

    @classmethod
    def load(cls, path, reward_scale: float = 0.01, **kwargs) -> "DQPModel":
        return cls.from_params(load_params(path), reward_scale, **kwargs)


# dataset files ----------------------------------------------------------------

DATASET_MAGIC = b"DQPD"
DATASET_VERSION = 1
LEVEL_FORMAT_VERSION = 1
_KIND_CODES = {SampleKind.NONE: 0, SampleKind.FINAL_GOAL: 1, SampleKind.DEAD_END: 2,
               SampleKind.UNREACHABLE: 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def dataset_bytes(samples, game_id: str = "") -> bytes:
    """Serialize samples: header, per-sample records, CRC-32 trailer."""
    samples = list(samples)
    if not game_id and samples:
        game_id = samples[0].state.layout.game.value
    game = game_id.encode()
    parts = [DATASET_MAGIC,
             struct.pack("<HB", DATASET_VERSION, len(game)), game,
             struct.pack("<HI", LEVEL_FORMAT_VERSION, len(samples))]
    for s in samples:
        r, c = s.chosen.tile
        parts.append(pack_state(s.state))
        parts.append(struct.pack("<BHHd", s.chosen.kind is SubgoalKind.FINAL, r, c, s.reward))
        parts.append(pack_state(s.next_state))
        parts.append(struct.pack("<B", _KIND_CODES[s.terminal_kind]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(samples, path, game_id: str = "") -> None:
    try:
        Path(path).write_bytes(dataset_bytes(samples, game_id))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_dataset(path) -> list[ExperienceSample]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(data) < 8:
        raise ChecksumMismatch("dataset file is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("dataset checksum does not match")
    if body[:4] != DATASET_MAGIC:
        raise IoFailure("not a dataset file")
    version, glen = struct.unpack_from("<HB", body, 4)
    if version != DATASET_VERSION:
        raise IoFailure(f"unsupported dataset version {version}")
    offset = 7 + glen
    _, count = struct.unpack_from("<HI", body, offset)
    offset += 6
    rec = struct.Struct("<BHHd")
    samples = []
    for _ in range(count):
        state, offset = unpack_state(body, offset)
        final, r, c, reward = rec.unpack_from(body, offset)
        offset += rec.size
        nxt, offset = unpack_state(body, offset)
        (code,) = struct.unpack_from("<B", body, offset)
        offset += 1
        kind = SubgoalKind.FINAL if final else SubgoalKind.TILE
        samples.append(ExperienceSample(state, Subgoal((r, c), kind), reward, nxt,
                                        _CODE_KINDS[code]))
    return samples

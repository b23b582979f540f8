"""Small convolutional regression network with hand-written gradients.

Layout is NHWC throughout. Convolutions are 3x3, stride 1, zero padded
("same"); each is optionally followed by batch normalization, then ReLU.
Fully connected ReLU layers follow the flattened feature map and a linear
head produces one scalar per input.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    ChecksumMismatch,
    IoFailure,
    NonFiniteLoss,
    NonFiniteUpdate,
    ShapeMismatch,
    SpecMismatch,
)

__all__ = [
    "ConvSpec",
    "NetworkSpec",
    "Parameters",
    "AdamState",
    "init_params",
    "forward",
    "predict_batch",
    "loss_and_grad",
    "backward",
    "apply_bn_stats",
    "optimize_step",
    "save_params",
    "load_params",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MAGIC = b"DQPN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    batch_norm: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    input_dims: tuple[int, int, int]
    conv_layers: tuple[ConvSpec, ...] = (ConvSpec(16), ConvSpec(32), ConvSpec(32))
    fc_layers: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "conv_layers", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(*c) if isinstance(c, (tuple, list))
            else ConvSpec(**c) for c in self.conv_layers))
        object.__setattr__(self, "fc_layers", tuple(int(w) for w in self.fc_layers))
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be three positive ints, got {self.input_dims}")
        if not self.conv_layers or not self.fc_layers:
            raise ValueError("need at least one convolutional and one fully connected layer")
        if min(c.filters for c in self.conv_layers) < 1 or min(self.fc_layers) < 1:
            raise ValueError("layer widths must be positive")

    @classmethod
    def desk(cls, input_dims, batch_norm=False, seed=0):
        """Default desk-scale network: conv 16-32-32, fc 64-32."""
        convs = tuple(ConvSpec(f, batch_norm) for f in (16, 32, 32))
        return cls(input_dims, convs, (64, 32), seed)

    @classmethod
    def large(cls, input_dims, batch_norm=False, seed=0):
        """Eight conv layers (32, 32, 64, 64, 64, 128, 128, 128), fc 128-32."""
        convs = tuple(ConvSpec(f, batch_norm) for f in (32, 32, 64, 64, 64, 128, 128, 128))
        return cls(input_dims, convs, (128, 32), seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["fc_layers"] = list(self.fc_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_dims"]), tuple(ConvSpec(**c) for c in d["conv_layers"]),
                   tuple(d["fc_layers"]), int(d.get("seed", 0)))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every stored array in declaration order."""
        rows, cols, chans = self.input_dims
        shapes = {}
        c_in = chans
        for i, conv in enumerate(self.conv_layers):
            shapes[f"conv{i}.weight"] = (3, 3, c_in, conv.filters)
            if conv.batch_norm:
                shapes[f"conv{i}.gamma"] = (conv.filters,)
                shapes[f"conv{i}.beta"] = (conv.filters,)
                shapes[f"conv{i}.running_mean"] = (conv.filters,)
                shapes[f"conv{i}.running_var"] = (conv.filters,)
            else:
                shapes[f"conv{i}.bias"] = (conv.filters,)
            c_in = conv.filters
        width = rows * cols * c_in
        for j, units in enumerate(self.fc_layers):
            shapes[f"fc{j}.weight"] = (width, units)
            shapes[f"fc{j}.bias"] = (units,)
            width = units
        shapes["head.weight"] = (width, 1)
        shapes["head.bias"] = (1,)
        return shapes

    def trainable(self) -> list[str]:
        return [k for k in self.param_shapes() if not k.endswith(("running_mean", "running_var"))]


@dataclass
class Parameters:
    spec: NetworkSpec
    arrays: dict[str, np.ndarray]
    version: int = 0

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "Parameters":
        return Parameters(self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.spec, {k: v.astype(dtype) for k, v in self.arrays.items()},
                          self.version)

    def equals(self, other: "Parameters") -> bool:
        return (self.spec == other.spec and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_params(spec: NetworkSpec, dtype=np.float32) -> Parameters:
    """He-normal weights (fan-in scaled), zero biases, identity batch norm."""
    rng = np.random.default_rng(spec.seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            fan_in = int(np.prod(shape[:-1]))
            gain = 1.0 if name.startswith("head") else 2.0
            arr = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        elif kind in ("gamma", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    return Parameters(spec, arrays, 0)


# layers -------------------------------------------------------------------

def _im2col(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate(
        [xp[:, di:di + h, dj:dj + w, :] for di in range(3) for dj in range(3)], axis=-1)


def _col2im(dcols, c):
    n, h, w, _ = dcols.shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _check_input(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_dims:
        raise ShapeMismatch(f"input shape {x.shape} does not match {spec.input_dims}")
    return x


def _forward(params: Parameters, x, training: bool):
    spec = params.spec
    a = params.arrays
    dtype = a["head.weight"].dtype
    h = x.astype(dtype, copy=False)
    caches, bn_stats = [], {}
    for i, conv in enumerate(spec.conv_layers):
        w = a[f"conv{i}.weight"]
        cols = _im2col(h)
        z = cols @ w.reshape(-1, conv.filters)
        cache = {"cols": cols, "c_in": h.shape[-1]}
        if conv.batch_norm:
            gamma, beta = a[f"conv{i}.gamma"], a[f"conv{i}.beta"]
            if training:
                mu = z.mean(axis=(0, 1, 2))
                var = z.var(axis=(0, 1, 2))
                m = z.shape[0] * z.shape[1] * z.shape[2]
                bn_stats[i] = (mu, var * m / max(m - 1, 1))
            else:
                mu, var = a[f"conv{i}.running_mean"], a[f"conv{i}.running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            z = gamma * xhat + beta
            cache.update(xhat=xhat, inv_std=inv_std)
        else:
            z = z + a[f"conv{i}.bias"]
        cache["mask"] = z > 0
        h = np.maximum(z, 0)
        caches.append(cache)
    flat_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    fc_caches = []
    for j in range(len(spec.fc_layers)):
        z = h @ a[f"fc{j}.weight"] + a[f"fc{j}.bias"]
        fc_caches.append((h, z > 0))
        h = np.maximum(z, 0)
    out = (h @ a["head.weight"] + a["head.bias"])[:, 0]
    return out, (caches, flat_shape, fc_caches, h), bn_stats


def predict_batch(params: Parameters, x: np.ndarray) -> np.ndarray:
    """Inference-mode predictions for an NHWC batch."""
    x = _check_input(params.spec, np.asarray(x))
    out, _, _ = _forward(params, x, training=False)
    return out


def forward(params: Parameters, x: np.ndarray) -> float:
    """Scalar prediction for a single ``(rows, cols, channels)`` observation."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"forward expects one observation, got shape {x.shape}")
    return float(predict_batch(params, x)[0])


def loss_and_grad(params: Parameters, x, y, training: bool = True):
    """Mean squared error, gradients of every trainable array, and BN batch stats."""
    spec = params.spec
    x = _check_input(spec, np.asarray(x))
    y = np.asarray(y, dtype=params.arrays["head.weight"].dtype).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} inputs but {y.shape[0]} targets")
    a = params.arrays
    pred, (caches, flat_shape, fc_caches, h_last), bn_stats = _forward(params, x, training)
    diff = pred - y
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    grads = {}
    n = x.shape[0]
    dout = (2.0 / n) * diff[:, None]
    grads["head.weight"] = h_last.T @ dout
    grads["head.bias"] = dout.sum(axis=0)
    dh = dout @ a["head.weight"].T
    for j in reversed(range(len(spec.fc_layers))):
        h_in, mask = fc_caches[j]
        dz = dh * mask
        grads[f"fc{j}.weight"] = h_in.T @ dz
        grads[f"fc{j}.bias"] = dz.sum(axis=0)
        dh = dz @ a[f"fc{j}.weight"].T
    dh = dh.reshape(flat_shape)
    for i in reversed(range(len(spec.conv_layers))):
        conv = spec.conv_layers[i]
        cache = caches[i]
        dz = dh * cache["mask"]
        if conv.batch_norm:
            xhat, inv_std = cache["xhat"], cache["inv_std"]
            grads[f"conv{i}.gamma"] = (dz * xhat).sum(axis=(0, 1, 2))
            grads[f"conv{i}.beta"] = dz.sum(axis=(0, 1, 2))
            dxhat = dz * a[f"conv{i}.gamma"]
            if training:
                m = dz.shape[0] * dz.shape[1] * dz.shape[2]
                dz = (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2))
                                      - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
            else:
                dz = dxhat * inv_std
        else:
            grads[f"conv{i}.bias"] = dz.sum(axis=(0, 1, 2))
        cols = cache["cols"]
        w = a[f"conv{i}.weight"]
        dz2 = dz.reshape(-1, conv.filters)
        grads[f"conv{i}.weight"] = (cols.reshape(-1, cols.shape[-1]).T @ dz2).reshape(w.shape)
        if i > 0:
            dh = _col2im(dz @ w.reshape(-1, conv.filters).T, cache["c_in"])
    return loss, grads, bn_stats


def backward(params: Parameters, batch):
    """``(loss, gradients)`` for a list of ``(observation, target)`` pairs."""
    batch = list(batch)
    if not batch:
        raise ValueError("backward needs a non-empty batch")
    x = np.stack([np.asarray(obs) for obs, _ in batch])
    y = np.array([t for _, t in batch])
    loss, grads, _ = loss_and_grad(params, x, y, training=True)
    return loss, grads


def apply_bn_stats(params: Parameters, bn_stats: dict, momentum: float = BN_MOMENTUM) -> None:
    """Fold batch statistics into the running averages, in place."""
    for i, (mu, var) in bn_stats.items():
        rm, rv = params.arrays[f"conv{i}.running_mean"], params.arrays[f"conv{i}.running_var"]
        rm *= 1 - momentum
        rm += momentum * mu.astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * var.astype(rv.dtype)


def optimize_step(params: Parameters, grads: dict, opt_state: AdamState) -> Parameters:
    """One Adam update applied in place; returns ``params`` with a bumped version."""
    opt_state.t += 1
    t = opt_state.t
    b1, b2 = opt_state.beta1, opt_state.beta2
    updates = {}
    for name, g in grads.items():
        p = params.arrays[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {name} has shape {g.shape}, expected {p.shape}")
        m = opt_state.m.get(name)
        v = opt_state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        step = opt_state.lr * m_hat / (np.sqrt(v_hat) + opt_state.eps)
        if not np.all(np.isfinite(step)):
            raise NonFiniteUpdate(f"non-finite update for {name}")
        updates[name] = (step.astype(p.dtype), m.astype(p.dtype), v.astype(p.dtype))
    for name, (step, m, v) in updates.items():
        params.arrays[name] -= step
        opt_state.m[name] = m
        opt_state.v[name] = v
    params.version += 1
    return params


# persistence ----------------------------------------------------------------

def save_params(params: Parameters, path) -> None:
    """Write the binary parameter file.

    Layout: ``DQPN``, u16 format version, u32 header length, UTF-8 JSON header
    (spec, version), little-endian float32 arrays in declaration order, and a
    trailing CRC-32 of everything before it.
    """
    header = json.dumps({"spec": params.spec.to_dict(), "version": params.version},
                        sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    for name, shape in params.spec.param_shapes().items():
        arr = params.arrays[name]
        if arr.shape != shape:
            raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    try:
        Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_params(path, spec: NetworkSpec | None = None) -> Parameters:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(data) < 14:
        raise ChecksumMismatch("parameter file is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("parameter file checksum does not match")
    if body[:4] != MAGIC:
        raise IoFailure("not a parameter file")
    fmt, hlen = struct.unpack_from("<HI", body, 4)
    if fmt != FORMAT_VERSION:
        raise IoFailure(f"unsupported parameter format version {fmt}")
    header = json.loads(body[10:10 + hlen])
    stored = NetworkSpec.from_dict(header["spec"])
    if spec is not None and stored != spec:
        raise SpecMismatch(f"file holds {stored}, expected {spec}")
    offset = 10 + hlen
    arrays = {}
    for name, shape in stored.param_shapes().items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(body, dtype="<f4", count=count, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(body):
        raise SpecMismatch("array payload does not match the stored spec")
    return Parameters(stored, arrays, int(header["version"]))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dqplan.exceptions import ChecksumMismatch, IoFailure, NonFiniteUpdate, ShapeMismatch, SpecMismatch
from dqplan.neural import (
    AdamState,
    ConvSpec,
    NetworkSpec,
    Parameters,
    backward,
    forward,
    init_params,
    load_params,
    loss_and_grad,
    optimize_step,
    predict_batch,
    save_params,
)

from .oracles import finite_difference_error, random_float64_params


def toy_params():
    spec = NetworkSpec((2, 2, 1), (ConvSpec(1),), (1,))
    p = init_params(spec, np.float64)
    for k in p.arrays:
        p.arrays[k][...] = 0
    return p


def test_zero_network_outputs_zero():
    spec = NetworkSpec.desk((5, 6, 7))
    p = init_params(spec)
    for k in p.arrays:
        p.arrays[k][...] = 0
    x = np.random.default_rng(0).random((5, 6, 7))
    assert forward(p, x) == 0.0


def test_toy_forward_by_hand():
    # Kernel taps the centre and the right neighbour (cross-correlation), so
    # with input [[1,2],[3,4]] the feature map is [[3,2],[7,4]], sum 16.
    p = toy_params()
    p.arrays["conv0.weight"][1, 1, 0, 0] = 1
    p.arrays["conv0.weight"][1, 2, 0, 0] = 1
    p.arrays["fc0.weight"][:] = 1
    p.arrays["head.weight"][:] = 2
    p.arrays["head.bias"][:] = 1
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert forward(p, x) == pytest.approx(33.0)
    # ReLU clips the negative tile
    x2 = np.array([[1.0, -5.0], [3.0, 0.5]])[..., None]
    p.arrays["conv0.weight"][1, 2, 0, 0] = 0
    assert forward(p, x2) == pytest.approx(2 * 4.5 + 1)


def test_forward_is_deterministic_and_checks_shape():
    p = init_params(NetworkSpec.desk((4, 4, 3)))
    x = np.random.default_rng(1).random((4, 4, 3)).astype(np.float32)
    assert forward(p, x) == forward(p, x)
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros((4, 5, 3)))
    with pytest.raises(ShapeMismatch):
        predict_batch(p, np.zeros((2, 4, 4, 2)))


def test_exact_fit_has_zero_loss_and_bias_gradient():
    p = toy_params()
    p.arrays["head.bias"][:] = 27
    loss, grads = backward(p, [(np.zeros((2, 2, 1)), 27.0)])
    assert loss == 0.0
    assert grads["head.bias"][0] == 0.0


def test_zero_prediction_unit_target_loss_one():
    p = toy_params()
    loss, _ = backward(p, [(np.zeros((2, 2, 1)), 1.0)])
    assert loss == 1.0


GRAD_SPECS = [
    NetworkSpec((3, 3, 2), (ConvSpec(2),), (3,), seed=1),
    NetworkSpec((4, 3, 3), (ConvSpec(3), ConvSpec(2)), (4, 3), seed=2),
    NetworkSpec((2, 5, 1), (ConvSpec(4),), (2,), seed=3),
    NetworkSpec((3, 4, 2), (ConvSpec(2), ConvSpec(3), ConvSpec(2)), (5,), seed=4),
    NetworkSpec((3, 3, 2), (ConvSpec(3, True), ConvSpec(2, True)), (4,), seed=5),
]


@pytest.mark.parametrize("spec", GRAD_SPECS, ids=lambda s: f"seed{s.seed}")
def test_gradients_match_finite_differences(spec):
    p, x, y = random_float64_params(spec)
    assert finite_difference_error(p, x, y) < 1e-4


def test_adam_zero_gradient_keeps_values():
    p = init_params(NetworkSpec.desk((3, 3, 2)))
    before = p.copy()
    optimize_step(p, {k: np.zeros_like(v) for k, v in p.arrays.items()}, AdamState())
    assert p.version == before.version + 1
    assert all(np.array_equal(p.arrays[k], before.arrays[k]) for k in p.arrays)


def test_adam_constant_gradient_descends():
    p = Parameters(None, {"w": np.array([0.5])})
    opt = AdamState()
    values = [p.arrays["w"][0]]
    for _ in range(10):
        optimize_step(p, {"w": np.array([1.0])}, opt)
        values.append(p.arrays["w"][0])
    assert all(b < a for a, b in zip(values, values[1:]))
    # bias-corrected Adam moves by ~lr per step under a constant gradient
    assert values[-1] == pytest.approx(0.5 - 10 * 1e-3, rel=1e-6)


def test_adam_rejects_non_finite():
    p = Parameters(None, {"w": np.array([0.5])})
    with pytest.raises(NonFiniteUpdate):
        optimize_step(p, {"w": np.array([np.nan])}, AdamState())
    assert p.arrays["w"][0] == 0.5


def test_seeded_init_is_reproducible():
    spec = NetworkSpec.desk((4, 4, 3), seed=9)
    assert init_params(spec).equals(init_params(spec))
    assert not init_params(spec).equals(init_params(NetworkSpec.desk((4, 4, 3), seed=10)))


@pytest.mark.parametrize("batch_norm", [False, True])
def test_training_reduces_loss(batch_norm):
    rng = np.random.default_rng(0)
    spec = NetworkSpec.desk((4, 4, 2), batch_norm=batch_norm)
    p = init_params(spec)
    x = rng.random((64, 4, 4, 2)).astype(np.float32)
    y = x[..., 0].sum(axis=(1, 2)) - x[..., 1].mean(axis=(1, 2))
    first = loss_and_grad(p, x, y, training=False)[0]
    opt = AdamState(lr=3e-3)
    for _ in range(300):
        _, g, _ = loss_and_grad(p, x, y)
        optimize_step(p, g, opt)
    assert loss_and_grad(p, x, y)[0] < 0.05 * first


def test_save_load_round_trip_bit_exact(tmp_path):
    spec = NetworkSpec.desk((5, 4, 3), batch_norm=True, seed=2)
    p = init_params(spec)
    p.version = 17
    path = tmp_path / "p.bin"
    save_params(p, path)
    q = load_params(path, spec)
    assert q.equals(p) and q.version == 17
    save_params(q, tmp_path / "q.bin")
    assert (tmp_path / "q.bin").read_bytes() == path.read_bytes()


def test_load_with_other_spec_raises(tmp_path):
    p = init_params(NetworkSpec.desk((5, 4, 3)))
    save_params(p, tmp_path / "p.bin")
    with pytest.raises(SpecMismatch):
        load_params(tmp_path / "p.bin", NetworkSpec.desk((5, 4, 4)))


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        load_params(tmp_path / "nope.bin")


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_any_flipped_byte_is_rejected(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("flip") / "p.bin"
    save_params(init_params(NetworkSpec((3, 3, 2), (ConvSpec(2),), (2,))), path)
    raw = bytearray(path.read_bytes())
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] ^= data.draw(st.integers(1, 255))
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        load_params(path)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 50))
def test_prediction_shape_property(rows, cols, chans, seed):
    spec = NetworkSpec((rows, cols, chans), (ConvSpec(2),), (3,), seed)
    p = init_params(spec)
    x = np.random.default_rng(seed).random((3, rows, cols, chans))
    out = predict_batch(p, x)
    assert out.shape == (3,) and np.all(np.isfinite(out))

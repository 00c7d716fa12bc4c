import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fcx import container
from fcx.core.optim import make_optimizer, opt_step
from fcx.core.stats import dyadic_grid, snap, variance_of
from fcx.core.tensor import Tensor, backprop, mse, tsum
from fcx.errors import (
    CorruptCheckpoint,
    EmptyInput,
    ShapeMismatch,
    TrainingDiverged,
    UnsupportedVersion,
    ValidationError,
)
from fcx.training import TrainConfig, fit
from fcx.utils import canonical_json, config_hash, derive_seed, worker_count

finite = st.floats(-1e3, 1e3, allow_nan=False)


# --- optimiser -----------------------------------------------------------------

def test_sgd_step():
    p = Tensor([1.0, 2.0], requires_grad=True)
    opt_step(make_optimizer("sgd", 0.1), [p], [np.array([1.0, -1.0])])
    np.testing.assert_allclose(p.data, [0.9, 2.1])


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]), st.floats(1e-4, 1e-1))
def test_adam_first_step_moves_by_lr(mag, sign, lr):
    p = Tensor([0.0], requires_grad=True)
    opt_step(make_optimizer("adam", lr), [p], [np.array([sign * mag])])
    assert abs(abs(p.data[0]) - lr) < 2e-5 * lr
    assert np.sign(p.data[0]) == -sign


def test_adam_zero_grad_no_move():
    p = Tensor([3.0], requires_grad=True)
    state = make_optimizer("adam", 0.1)
    for _ in range(3):
        opt_step(state, [p], [np.zeros(1)])
    assert p.data[0] == 3.0 and state.step_count == 3


def test_optimizer_shape_checks():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        opt_step(make_optimizer(), [p], [np.ones(2)])
    with pytest.raises(ShapeMismatch):
        opt_step(make_optimizer(), [p], [])
    with pytest.raises(ValidationError):
        make_optimizer("rmsprop")


# --- variance and dyadic snapping ----------------------------------------------------

def test_variance_examples():
    assert variance_of([np.array([0.0]), np.array([2.0])]) == 1.0
    assert variance_of(np.ones((5, 3, 2))) == 0.0
    with pytest.raises(EmptyInput):
        variance_of([])
    with pytest.raises(ShapeMismatch):
        variance_of([np.zeros(2), np.zeros(3)])


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)), elements=finite))
def test_variance_matches_two_pass_oracle(a):
    mean = [sum(a[i, j] for i in range(len(a))) / len(a) for j in range(a.shape[1])]
    oracle = sum(sum((a[i, j] - mean[j]) ** 2 for j in range(a.shape[1]))
                 for i in range(len(a))) / len(a)
    assert math.isclose(variance_of(a), oracle, rel_tol=1e-9, abs_tol=1e-9)


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 10), st.integers(1, 4)), elements=finite),
       finite, st.floats(-10, 10))
def test_variance_translation_and_scale(a, shift, scale):
    v = variance_of(a)
    assert math.isclose(variance_of(a + shift), v, rel_tol=1e-6, abs_tol=1e-6)
    assert math.isclose(variance_of(scale * a), scale ** 2 * v, rel_tol=1e-6, abs_tol=1e-6)
    assert v >= 0


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)),
       hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)))
def test_snapped_values_add_and_subtract_exactly(a, b):
    q = dyadic_grid(a, b)
    sa, sb = snap(a, q), snap(b, q)
    n = min(len(sa), len(sb))
    # integers of quanta: the float result equals the integer result
    ia, ib = np.round(sa[:n] / q), np.round(sb[:n] / q)
    np.testing.assert_array_equal((sa[:n] + sb[:n]) / q, ia + ib)
    np.testing.assert_array_equal(((sa[:n] + sb[:n]) - sb[:n]), sa[:n])


def test_grid_is_power_of_two():
    for top in (0.0, 1e-3, 1.0, 3e7):
        q = dyadic_grid(np.array([top]))
        assert math.log2(q) == int(math.log2(q))
    assert dyadic_grid(np.zeros(3)) == 2.0 ** -40


# --- utilities ---------------------------------------------------------------------

def test_derive_seed_is_stable_and_tag_sensitive():
    assert derive_seed(3, "a", 1) == derive_seed(3, "a", 1)
    assert derive_seed(3, "a", 1) != derive_seed(3, "a", 2)
    assert derive_seed(3, "a") != derive_seed(4, "a")


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


def test_worker_count_reads_env(monkeypatch):
    monkeypatch.setenv("FCX_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("FCX_THREADS", "junk")
    assert worker_count() == 1
    monkeypatch.delenv("FCX_THREADS")
    assert worker_count() == 1


# --- container ----------------------------------------------------------------------

def test_container_round_trip_is_byte_stable(rng, tmp_path):
    arrays = {"b": rng.normal(size=(3,)), "a.weight": rng.normal(size=(2, 2, 3, 3))}
    buf = container.encode({"kind": "test", "x": [1, 2]}, arrays)
    meta, back = container.decode(buf)
    assert meta == {"kind": "test", "x": [1, 2]}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v.astype(np.float32))
    assert container.encode(meta, back) == buf
    path = container.write(tmp_path / "x.ckpt", meta, back)
    assert path.read_bytes() == buf


def test_container_rejects_damage(rng):
    buf = container.encode({}, {"w": rng.normal(size=10)})
    with pytest.raises(CorruptCheckpoint):
        container.decode(buf[:-3])
    flipped = bytearray(buf)
    flipped[-6] ^= 0xFF
    with pytest.raises(CorruptCheckpoint):
        container.decode(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        container.decode(b"garbage")
    with pytest.raises(UnsupportedVersion):
        container.decode(b"FCXCKPT9" + buf[8:])


# --- training loop ---------------------------------------------------------------------

def _quadratic(target):
    p = {"w": Tensor(np.zeros_like(target), requires_grad=True)}
    return p, lambda idx: mse(p["w"], Tensor(target))


def test_fit_converges_on_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p, loss = _quadratic(target)
    curve = fit(p, loss, 8, TrainConfig(epochs=300, lr=0.5, optimizer="sgd", lr_schedule="constant"))
    np.testing.assert_allclose(p["w"].data, target, atol=1e-3)
    assert curve[-1] < curve[0]


def test_fit_is_deterministic():
    def run():
        p, loss = _quadratic(np.array([1.0, 2.0]))
        return fit(p, loss, 40, TrainConfig(epochs=5, batch_size=7, seed=3)), p["w"].data.copy()
    (c1, w1), (c2, w2) = run(), run()
    assert c1 == c2 and w1.tobytes() == w2.tobytes()


def test_fit_stops_on_plateau():
    p = {"w": Tensor(np.zeros(1), requires_grad=True)}
    curve = fit(p, lambda idx: tsum(p["w"] * 0.0) + 1.0, 4, TrainConfig(epochs=100, patience=5))
    assert len(curve) == 6


def test_fit_raises_on_divergence():
    p = {"w": Tensor(np.ones(1), requires_grad=True)}
    with pytest.raises(TrainingDiverged):
        fit(p, lambda idx: tsum(p["w"] * math.inf), 4, TrainConfig(epochs=3))


def test_fit_after_step_hook_runs_each_batch():
    calls = []
    p, loss = _quadratic(np.zeros(2))
    fit(p, loss, 10, TrainConfig(epochs=2, batch_size=4), after_step=lambda: calls.append(1))
    assert len(calls) == 6


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"tol": 0.0}, {"lr": -1.0},
                                {"optimizer": "lbfgs"}, {"lr_schedule": "step"}])
def test_train_config_validation(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**kw)


def test_backprop_through_loss_in_fit_matches_manual():
    w = Tensor(np.array([2.0]), requires_grad=True)
    (g,) = backprop(mse(w, Tensor([0.0])), [w])
    assert g.tolist() == [4.0]

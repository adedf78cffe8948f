import numpy as np
import pytest
import tensorflow as tf

from numerics import (ParamStore, AdamState, adam_step, check_gradients, save_checkpoint, load_checkpoint,
                      assert_finite)
from utils import DataError, NumericalError


def make_store(dtype=tf.float64):
    return ParamStore({"b": np.full((3,), 0.5), "a": np.full((2, 2), 0.5)}, dtype=dtype)


def test_param_store_sorted_order():
    store = make_store()
    assert store.names() == ["a", "b"]
    assert store.size == 7
    assert store.dtype == tf.float64


def test_check_gradients_linear():
    report = check_gradients(lambda p: tf.add_n([tf.reduce_sum(v) for _, v in p.items()]), make_store(), n_probe=16)
    assert report.passed
    assert report.max_rel_err < 1e-8
    for _, _, analytic, fd, _ in report.probes:
        assert analytic == pytest.approx(1.0)
        assert fd == pytest.approx(1.0)


def test_check_gradients_constant_is_excluded():
    report = check_gradients(lambda p: tf.constant(3.0, tf.float64), make_store(), n_probe=8)
    assert report.passed
    assert report.excluded == 8


def test_check_gradients_square_at_half():
    report = check_gradients(lambda p: tf.add_n([tf.reduce_sum(tf.square(v)) for _, v in p.items()]),
                             make_store(), n_probe=8, eps=1e-4)
    assert report.max_rel_err < 1e-8
    assert all(a == pytest.approx(1.0) for _, _, a, _, _ in report.probes)


def test_check_gradients_probes_every_tensor():
    report = check_gradients(lambda p: tf.reduce_sum(p["a"]) + tf.reduce_sum(p["b"]), make_store(), n_probe=4)
    assert {p[0] for p in report.probes} == {"a", "b"}


def test_check_gradients_detects_wrong_gradient():
    @tf.custom_gradient
    def bad_square(x):
        return tf.square(x), lambda dy: dy * 3.0 * x

    report = check_gradients(lambda p: tf.reduce_sum(bad_square(tf.identity(p["a"]))), make_store(), n_probe=8)
    assert not report.passed


def test_check_gradients_non_finite_loss():
    with pytest.raises(NumericalError):
        check_gradients(lambda p: tf.reduce_sum(p["a"]) / tf.constant(0.0, tf.float64), make_store())


def test_check_gradients_rejects_bad_eps():
    with pytest.raises(ValueError):
        check_gradients(lambda p: tf.reduce_sum(p["a"]), make_store(), eps=0.0)


def test_adam_zero_grads_unchanged():
    store = make_store()
    before = store.numpy()
    adam_step(store, {n: tf.zeros_like(v) for n, v in store.items()}, AdamState(store), lr=0.1, wd=0.0)
    for name, value in store.numpy().items():
        np.testing.assert_array_equal(value, before[name])


def test_adam_first_step_moves_by_lr():
    store = ParamStore({"p": np.array([1.0])}, dtype=tf.float64)
    adam_step(store, {"p": tf.constant([1.0], tf.float64)}, AdamState(store), lr=0.1, wd=0.0)
    assert store["p"].numpy()[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_decoupled_weight_decay():
    store = ParamStore({"p": np.array([1.0])}, dtype=tf.float64)
    adam_step(store, {"p": tf.constant([0.0], tf.float64)}, AdamState(store), lr=0.1, wd=1.0)
    assert store["p"].numpy()[0] == pytest.approx(0.9)


def test_adam_missing_gradient():
    store = make_store()
    with pytest.raises(ValueError):
        adam_step(store, {"a": tf.zeros((2, 2), tf.float64)}, AdamState(store), lr=0.1)


def test_adam_state_counts_steps():
    store = make_store()
    state = AdamState(store)
    for _ in range(3):
        adam_step(store, {n: tf.ones_like(v) for n, v in store.items()}, state, lr=0.01)
    assert int(state.step.numpy()) == 3
    assert not any(name.startswith("opt/step") for name in state.numpy())


def test_adam_state_restores_large_step():
    store = make_store()
    state = AdamState(store)
    state.assign(state.numpy(), 2 ** 24 + 1)
    assert int(state.step.numpy()) == 2 ** 24 + 1


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    tensors = {"w": rng.standard_normal((3, 4)).astype(np.float32),
               "scalar": np.array(2.5, dtype=np.float32)}
    path = str(tmp_path / "ckpt.vvck")
    save_checkpoint(path, tensors, {"model": {"d_model": 16}}, {"opt_step": 2 ** 24 + 1})
    loaded, config, counters = load_checkpoint(path)
    assert list(loaded) == sorted(tensors)
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        assert loaded[name].tobytes() == value.tobytes()
    assert config == {"model": {"d_model": 16}}
    assert counters == {"opt_step": 2 ** 24 + 1}


def test_checkpoint_header_layout(tmp_path):
    path = str(tmp_path / "ckpt.vvck")
    save_checkpoint(path, {"x": np.ones((2,), np.float32)})
    with open(path, "rb") as in_file:
        head = in_file.read(12)
    assert head[:4] == b"VVCK"
    assert int.from_bytes(head[4:8], "little") == 1
    assert int.from_bytes(head[8:12], "little") == 1


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.vvck"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(DataError):
        load_checkpoint(str(path))


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "ckpt.vvck")
    save_checkpoint(path, {"x": np.ones((64,), np.float32)})
    with open(path, "rb") as in_file:
        payload = in_file.read()
    with open(path, "wb") as out_file:
        out_file.write(payload[:40])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_assert_finite():
    assert_finite(np.zeros(3), "zeros")
    with pytest.raises(NumericalError):
        assert_finite(np.array([0.0, np.nan]), "nan")

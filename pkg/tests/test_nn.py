from __future__ import annotations

import json

import numpy as np
import pytest

from equigraph import tensor as T
from equigraph.nn import (Adam, DropoutStream, Mlp, cross_entropy, dump_params, format_floats,
                          glorot_uniform, load_params)
from equigraph.seeding import child_rng, child_seed
from equigraph.tensor import Index, Tape, Tensor


def test_glorot_bounds_and_reproducibility():
    w = glorot_uniform(np.random.default_rng(0), 64, 32)
    limit = np.sqrt(6.0 / (64 + 32))
    assert w.shape == (64, 32) and np.abs(w).max() <= limit
    np.testing.assert_array_equal(w, glorot_uniform(np.random.default_rng(0), 64, 32))


def test_mlp_shapes_and_zero_bias(rng):
    mlp = Mlp([5, 64, 3], rng, "m")
    assert sorted(mlp.parameters()) == ["m.W0", "m.W1", "m.b0", "m.b1"]
    assert np.all(mlp.biases[0].data == 0)
    out = mlp(Tensor(np.ones((7, 5))))
    assert out.shape == (7, 3)
    with pytest.raises(T.ShapeError):
        mlp(Tensor(np.ones((7, 4))))


def test_mlp_hand_unrolled(rng):
    mlp = Mlp([3, 4, 2], rng, "m")
    mlp.biases[0].data[:] = rng.standard_normal(4)
    mlp.biases[1].data[:] = rng.standard_normal(2)
    x = rng.standard_normal((5, 3))
    h = x @ mlp.weights[0].data + mlp.biases[0].data
    h = h / (1.0 + np.exp(-h))
    want = h @ mlp.weights[1].data + mlp.biases[1].data
    np.testing.assert_allclose(mlp(Tensor(x)).data, want, rtol=1e-12, atol=1e-12)


def test_apply_parts_equals_concatenation(rng):
    mlp = Mlp([2 + 3 + 1, 8, 4], rng, "m")
    a = rng.standard_normal((4, 2))      # per-node values, gathered by index
    b = rng.standard_normal((6, 3))      # per-row values
    c = rng.standard_normal((2, 1))      # per-graph values
    ia = Index(np.array([0, 1, 1, 2, 3, 0]), 4)
    ic = Index(np.array([0, 0, 0, 1, 1, 1]), 2)
    want = mlp(Tensor(np.concatenate([a[ia.idx], b, c[ic.idx]], axis=1))).data
    got = mlp.apply_parts([(Tensor(a), ia), (Tensor(b), None), (Tensor(c), ic)], 6).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_apply_parts_without_inputs_is_constant(rng):
    mlp = Mlp([0, 8, 3], rng, "m")
    mlp.biases[0].data[:] = rng.standard_normal(8)
    out = mlp.apply_parts([(Tensor(np.zeros((3, 0))), None)], 3).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0], (3, 3)))


def test_cross_entropy_matches_formula(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    want = -logp[np.arange(4), labels].mean()
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(want, rel=1e-14)


def test_adam_hand_unrolled():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.25, 2.0])]
    m = v = np.zeros(2)
    want = np.array([1.0, -2.0])
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want = want - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step({"p": g})
    np.testing.assert_allclose(p.data, want, rtol=1e-14)
    with pytest.raises(KeyError):
        opt.step({})


def test_params_round_trip_is_exact(rng):
    mlp = Mlp([3, 5, 2], rng, "m")
    for w in mlp.weights:
        w.data[:] = rng.standard_normal(w.shape) * 1e-3 + np.pi
    text = dump_params(mlp.parameters())
    other = Mlp([3, 5, 2], np.random.default_rng(99), "m")
    load_params(json.loads(text), other.parameters())
    for k, p in mlp.parameters().items():
        np.testing.assert_array_equal(p.data, other.parameters()[k].data)
    with pytest.raises(T.ShapeError):
        load_params(json.loads(text), Mlp([3, 4, 2], rng, "m").parameters())


def test_format_floats_refuses_nan():
    with pytest.raises(ValueError):
        format_floats([1.0, float("nan")])
    assert json.loads(format_floats([0.1, 1e-300])) == [0.1, 1e-300]


def test_dropout_stream_is_deterministic():
    a = DropoutStream(5).mask((4, 6), 0.5)
    b = DropoutStream(5).mask((4, 6), 0.5)
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}


def test_dropout_needs_stream_in_training(rng):
    mlp = Mlp([2, 4, 1], rng, "m", dropout=0.5)
    x = Tensor(np.ones((3, 2)))
    np.testing.assert_array_equal(mlp(x).data, mlp(x).data)
    with pytest.raises(ValueError):
        mlp(x, training=True)


def test_child_seeds_are_stable_and_distinct():
    assert child_seed(0, "init") == child_seed(0, "init")
    assert child_seed(0, "init") != child_seed(0, "dropout")
    assert child_seed(0, "init") != child_seed(1, "init")
    np.testing.assert_array_equal(child_rng(3, "x").random(4), child_rng(3, "x").random(4))


def test_mlp_gradient_through_parts(rng):
    from conftest import numeric_gradient
    mlp = Mlp([3, 6, 2], rng, "m")
    a = rng.standard_normal((3, 2))
    b = rng.standard_normal((5, 1))
    ia = Index(np.array([0, 2, 1, 1, 0]), 3)
    probe = rng.standard_normal((5, 2))

    def value():
        return float(np.sum(mlp.apply_parts([(Tensor(a), ia), (Tensor(b), None)], 5).data * probe))

    params = mlp.parameters()
    with Tape() as tape:
        loss = T.sum(mlp.apply_parts([(Tensor(a), ia), (Tensor(b), None)], 5) * probe)
    grads = tape.backward(loss, params)
    for name, p in params.items():
        np.testing.assert_allclose(grads[name], numeric_gradient(value, p.data), atol=1e-7)

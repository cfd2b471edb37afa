import math

import numpy as np
import pytest

from core.autodiff import OptimizerState, ParamStore, Routing, Tape, backward, grad_check, sgd_step
from core.errors import ConfigError, MaskError, NonFiniteError, ShapeError, TapeError


def test_mul_sum_gradients():
    t = Tape()
    a = t.leaf([1.0, 2.0, 3.0], "a")
    b = t.leaf([4.0, 5.0, 6.0], "b")
    loss = t.reduce_sum(t.mul(a, b))
    grads = t.gradients(loss)
    assert loss.item() == 32.0
    np.testing.assert_array_equal(grads["a"], [4.0, 5.0, 6.0])
    np.testing.assert_array_equal(grads["b"], [1.0, 2.0, 3.0])


def test_shape_mismatch_names_both_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as err:
        t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))
    assert "(2, 3) vs (2, 3)" in str(err.value)
    with pytest.raises(ShapeError):
        t.add(t.constant(np.ones(3)), t.constant(np.ones(4)))


def test_scalar_operand_broadcasts():
    t = Tape()
    a = t.leaf(np.ones((2, 2)), "a")
    s = t.leaf(3.0, "s")
    grads = t.gradients(t.reduce_sum(t.mul(a, s)))
    np.testing.assert_array_equal(grads["a"], np.full((2, 2), 3.0))
    assert grads["s"] == pytest.approx(4.0)


def test_log_of_nonpositive_raises():
    t = Tape()
    with pytest.raises(NonFiniteError):
        t.log(t.constant([1.0, 0.0]))


def test_reduce_max_ties_go_to_lowest_index():
    t = Tape()
    a = t.leaf([[1.0, 3.0, 3.0]], "a")
    grads = t.gradients(t.reduce_sum(t.reduce_max(a, axis=1)))
    np.testing.assert_array_equal(grads["a"], [[0.0, 1.0, 0.0]])


def test_masked_max_empty_slice_is_zero_without_gradient():
    t = Tape()
    a = t.leaf([[5.0, -1.0], [2.0, 7.0]], "a")
    mask = np.array([[False, True], [False, False]])
    out = t.masked_max(a, mask, axis=1)
    np.testing.assert_array_equal(out.data, [-1.0, 0.0])
    grads = t.gradients(t.reduce_sum(out))
    np.testing.assert_array_equal(grads["a"], [[0.0, 1.0], [0.0, 0.0]])


def test_masked_max_matches_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5, 3))
    mask = rng.random((4, 5)) > 0.4
    out = Tape(record=False).masked_max(Tape().constant(x), mask, axis=1).data
    for i in range(4):
        for c in range(3):
            vals = [x[i, j, c] for j in range(5) if mask[i, j]]
            assert out[i, c] == (max(vals) if vals else 0.0)


def test_softmax_masked_rows_and_empty_policy():
    t = Tape()
    logits = t.constant(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]))
    mask = np.array([[True, False, True], [False, False, False]])
    with pytest.raises(MaskError):
        t.softmax_masked(logits, mask)
    p = t.softmax_masked(logits, mask, empty="zero").data
    assert p[0].sum() == pytest.approx(1.0, abs=1e-12)
    assert p[0, 1] == 0.0
    np.testing.assert_array_equal(p[1], 0.0)


def test_cross_entropy_matches_manual():
    x = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 3.0]])
    target = np.array([0, 2])
    loss = Tape().cross_entropy_logits(Tape().constant(x), target).item()
    manual = np.mean([-math.log(math.exp(r[k]) / np.exp(r).sum()) for r, k in zip(x, target)])
    assert loss == pytest.approx(manual, rel=1e-12)


def test_gradients_errors():
    t = Tape()
    a = t.leaf(np.ones(3), "a")
    with pytest.raises(ShapeError):
        t.gradients(t.scale(a, 2.0))
    other = Tape()
    with pytest.raises(TapeError):
        t.gradients(other.reduce_sum(other.leaf(np.ones(2), "b")))


def test_inference_tape_records_nothing():
    t = Tape(record=False)
    w = t.leaf(np.ones((2, 2)), "w")
    t.reduce_sum(t.matmul(w, w))
    assert t.nodes == []
    assert not w.requires_grad


def test_dropout_is_identity_outside_training():
    t = Tape()
    a = t.constant(np.ones((3, 3)))
    assert t.dropout(a, 0.5, False, np.random.default_rng(0)) is a
    with pytest.raises(ConfigError):
        t.dropout(a, 1.0, True, np.random.default_rng(0))


def test_routing_replays_selection():
    routing = Routing()
    t = Tape(routing=routing)
    t.reduce_max(t.constant([[1.0, 2.0]]), axis=1)
    routing.rewind()
    replay = Tape(routing=routing)
    # the recorded argmax (index 1) is reused even though index 0 is now larger
    out = replay.reduce_max(replay.constant([[5.0, 2.0]]), axis=1)
    assert out.data[0] == 2.0


def test_grad_check_small_network():
    store = ParamStore(seed=4)
    store.add("w", (3, 4), 3)
    store.add("v", (4, 2), 4)
    x = np.random.default_rng(1).normal(size=(5, 3))

    def loss_fn(t, p):
        h = t.leaky_relu(t.matmul(t.constant(x), p["w"]))
        return t.cross_entropy_logits(t.matmul(h, p["v"]), [0, 1, 1, 0, 1])

    assert grad_check(loss_fn, store, eps=1e-5) < 1e-6


def test_backward_accumulates_and_skips_frozen():
    store = ParamStore.from_arrays({"a": np.array([1.0, 2.0]), "b": np.array([3.0])})
    store.freeze(["b"])
    t = Tape()
    p = store.bind(t)
    backward(t, t.reduce_sum(t.mul(p["a"], p["a"])), store)
    np.testing.assert_array_equal(store.grads["a"], [2.0, 4.0])
    np.testing.assert_array_equal(store.grads["b"], [0.0])


def test_param_init_bounds_and_duplicates():
    store = ParamStore(seed=1)
    w = store.add("w", (50, 10), 25)
    assert np.abs(w).max() <= math.sqrt(1 / 25)
    with pytest.raises(ConfigError):
        store.add("w", (1,))
    np.testing.assert_array_equal(ParamStore(seed=1).add("w", (50, 10), 25), w)


def test_cosine_schedule_endpoints():
    state = OptimizerState(base_lr=0.1, total_steps=10)
    assert state.lr(0) == pytest.approx(0.1)
    assert state.lr(5) == pytest.approx(0.05)
    assert state.lr(10) == pytest.approx(0.0, abs=1e-15)
    assert state.lr(20) == state.lr(10)


def test_sgd_momentum_steps():
    store = ParamStore.from_arrays({"w": np.array([1.0, 2.0]), "f": np.array([7.0])})
    store.freeze(["f"])
    state = OptimizerState(base_lr=0.1, total_steps=10, momentum=0.9, weight_decay=0.0)
    store.grads["w"][:] = [0.5, -1.0]
    store.grads["f"][:] = [1.0]
    sgd_step(store, state)
    np.testing.assert_allclose(store["w"], [0.95, 2.1])
    assert store["f"][0] == 7.0
    np.testing.assert_array_equal(store.grads["w"], 0.0)

    store.grads["w"][:] = [0.5, -1.0]
    sgd_step(store, state)
    lr1 = 0.05 * (1 + math.cos(math.pi / 10))
    np.testing.assert_allclose(store["w"], [0.95 - lr1 * 0.95, 2.1 + lr1 * 1.9])
    assert state.step == 2


def test_weight_decay_pulls_towards_zero():
    store = ParamStore.from_arrays({"w": np.array([2.0])})
    state = OptimizerState(base_lr=0.1, total_steps=4, momentum=0.0, weight_decay=0.5)
    sgd_step(store, state)
    assert store["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_snapshot_restore():
    store = ParamStore(seed=2)
    store.add("w", (2, 2))
    snap = store.snapshot()
    store["w"][:] = 0.0
    store.restore(snap)
    np.testing.assert_array_equal(store["w"], snap["w"])


C = np.random.default_rng(7).normal(size=(3, 4))
ROW_MASK = np.array([[True, False, True, True], [False, False, False, False], [True, True, False, True]])

OP_CASES = {
    "add": lambda t, a: t.add(a, t.constant(C)),
    "sub": lambda t, a: t.sub(t.constant(C), a),
    "mul": lambda t, a: t.mul(a, a),
    "scale": lambda t, a: t.scale(a, -1.7),
    "exp": lambda t, a: t.exp(a),
    "log": lambda t, a: t.log(a),
    "leaky_relu": lambda t, a: t.leaky_relu(t.sub(a, 1.0)),
    "matmul": lambda t, a: t.matmul(a, t.constant(C.T)),
    "reshape": lambda t, a: t.reshape(a, (2, 6)),
    "concat_last": lambda t, a: t.concat_last(a, t.exp(a)),
    "slice_last": lambda t, a: t.slice_last(a, 1, 3),
    "gather_rows": lambda t, a: t.gather_rows(a, [2, 0, 2]),
    "reduce_sum": lambda t, a: t.reduce_sum(a),
    "reduce_mean": lambda t, a: t.reduce_mean(a),
    "reduce_max": lambda t, a: t.reduce_max(a, axis=1),
    "masked_max": lambda t, a: t.masked_max(a, ROW_MASK, axis=1),
    "softmax_masked": lambda t, a: t.softmax_masked(a, ROW_MASK, empty="zero"),
    "cross_entropy_logits": lambda t, a: t.cross_entropy_logits(a, [0, 3, 1]),
    "dropout": lambda t, a: t.dropout(a, 0.3, True, np.random.default_rng(5)),
    "elementwise_sub": lambda t, a: t.elementwise("sub", a, t.constant(C)),
    "elementwise_scale": lambda t, a: t.elementwise("scale", a, 2.5),
    "elementwise_leaky_relu": lambda t, a: t.elementwise("leaky_relu", t.sub(a, 1.0)),
    "elementwise_exp": lambda t, a: t.elementwise("exp", a),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_each_op_matches_central_differences(op):
    # entries in [0.5, 1.5] keep log defined and leave no max ties
    store = ParamStore.from_arrays({"a": np.random.default_rng(2).uniform(0.5, 1.5, size=(3, 4))})

    def loss_fn(t, p):
        y = OP_CASES[op](t, p["a"])
        weights = np.random.default_rng(11).normal(size=y.shape)
        return t.reduce_sum(t.mul(y, t.constant(weights)))

    assert grad_check(loss_fn, store, eps=1e-5) < 1e-6


def test_elementwise_dispatch_and_errors():
    t = Tape()
    a = t.constant([1.0, -2.0])
    np.testing.assert_array_equal(t.elementwise("add", a, t.constant([1.0, 1.0])).data, [2.0, -1.0])
    np.testing.assert_array_equal(t.elementwise("leaky_relu", a).data, [1.0, -0.4])
    np.testing.assert_array_equal(t.elementwise("scale", a, 3.0).data, [3.0, -6.0])
    with pytest.raises(ConfigError):
        t.elementwise("scale", a)
    with pytest.raises(ConfigError):
        t.elementwise("tanh", a)


def test_softmax_values_and_shift_invariance():
    t = Tape()
    p = t.softmax_masked(t.constant([0.0, math.log(3.0)]), [True, True]).data
    np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-15)
    x = np.random.default_rng(0).normal(size=(2, 5))
    a = t.softmax_masked(t.constant(x), np.ones((2, 5), dtype=bool)).data
    b = t.softmax_masked(t.constant(x + 100.0), np.ones((2, 5), dtype=bool)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_cross_entropy_of_uniform_logits():
    loss = Tape().cross_entropy_logits(Tape().constant(np.zeros((1, 5))), [3]).item()
    assert loss == pytest.approx(math.log(5.0), rel=1e-12)


def test_dropout_preserves_expectation():
    t = Tape()
    out = t.dropout(t.constant(np.ones(10_000)), 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert out.mean() == pytest.approx(1.0, abs=0.05)


def test_reductions_reject_out_of_range_axis():
    t = Tape()
    a = t.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        t.reduce_max(a, axis=2)
    with pytest.raises(ShapeError):
        t.reduce_max(a, axis=-3)
    with pytest.raises(ShapeError):
        t.masked_max(a, np.ones((2, 3), dtype=bool), axis=5)
    # negative axes inside the range are still accepted
    np.testing.assert_array_equal(t.reduce_max(a, axis=-1).data, [1.0, 1.0])

"""Gradient checks for the fixed operator set and ParamStore round trips."""

import numpy as np
import pytest

from irlcast.nnops import (AdamOptimizer, ContractViolation, ParamStore, Tape,
                           finite_diff_grads, init_mlp, load_checkpoint,
                           max_rel_err, mlp, save_checkpoint)

RNG = np.random.default_rng(1234)


def analytic_and_numeric(build, store, names=None, eps=1e-5):
    """build(tape) must return a scalar loss node using store params."""
    store.zero_grads()
    t = Tape()
    t.backward(build(t))
    analytic = {k: v.copy() for k, v in store.grads.items()}

    def value():
        return float(build(Tape()).value)

    numeric = finite_diff_grads(value, store, names=names, eps=eps)
    return analytic, numeric


def test_matmul_add_relu_grad():
    store = ParamStore()
    store.add("W", RNG.standard_normal((4, 3)))
    store.add("b", RNG.standard_normal(3))
    x = RNG.standard_normal((5, 4))

    def build(t):
        out = t.relu(t.add(t.matmul(t.const(x), t.param(store, "W")),
                           t.param(store, "b")))
        return t.sum_all(t.square(out))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-7


def test_softplus_sqrt_huber_grad():
    store = ParamStore()
    store.add("w", RNG.standard_normal(6) * 2.0)

    def build(t):
        p = t.param(store, "w")
        return t.sum_all(t.add(t.huber(p), t.sqrt(t.softplus(p))))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-6


def test_concat_rows_mean_grad():
    store = ParamStore()
    store.add("a", RNG.standard_normal((4, 2)))
    store.add("b", RNG.standard_normal((4, 3)))

    def build(t):
        cat = t.concat([t.param(store, "a"), t.param(store, "b")], axis=1)
        picked = t.rows(cat, [0, 2, 2, 3])
        return t.sum_all(t.square(t.mean0(picked)))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-7


def test_rows_or_zero_grad():
    store = ParamStore()
    store.add("x", RNG.standard_normal((5, 3)))
    idx = np.array([0, 4, 2, 0, 1, 3])
    valid = np.array([True, False, True, True, False, True])

    def build(t):
        out = t.rows_or_zero(t.param(store, "x"), idx, valid)
        return t.sum_all(t.square(out))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-7


def test_neighbor_max_grad_and_isolated_rows():
    store = ParamStore()
    store.add("x", RNG.standard_normal((6, 4)))
    nbr = np.array([[1, 2, -1], [0, 3, 5], [-1, -1, -1],
                    [4, 4, 1], [2, -1, 0], [1, 1, 1]])
    valid = nbr >= 0

    t = Tape()
    out = t.neighbor_max(t.param(store, "x"), nbr, valid)
    assert np.array_equal(out.value[2], np.zeros(4))

    def build(t):
        out = t.neighbor_max(t.param(store, "x"), nbr, valid)
        return t.sum_all(t.square(out))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-7


def test_spmm_avgpool_grad():
    from scipy import sparse
    store = ParamStore()
    store.add("x", RNG.standard_normal((4, 4 * 2)))
    gate = sparse.random(5, 4, density=0.5, random_state=7, format="csr")

    def build(t):
        y = t.spmm(gate, t.param(store, "x"))
        grid = t.reshape(t.rows(y, [0, 1, 2, 3]), (4, 4, 2))
        pooled = t.avg_pool2x2(grid)
        return t.sum_all(t.square(pooled))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-7


def test_softmax_col_grad():
    store = ParamStore()
    store.add("z", RNG.standard_normal((4, 2)))

    def build(t):
        logits = t.col(t.param(store, "z"), 0)
        p = t.softmax1d(logits)
        target = t.const(np.array([0.7, 0.1, 0.1, 0.1]))
        return t.sum_all(t.square(t.sub(p, target)))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-7


def test_mlp_gradient_matches_finite_differences():
    store = ParamStore()
    init_mlp(store, "net", [3, 8, 2], np.random.default_rng(5))
    x = RNG.standard_normal((7, 3))

    def build(t):
        return t.sum_all(t.square(mlp(t, t.const(x), store, "net")))

    analytic, numeric = analytic_and_numeric(build, store)
    assert max_rel_err(analytic, numeric) <= 1e-4


def test_param_shape_is_immutable():
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    with pytest.raises(ContractViolation):
        store.set("w", np.zeros((3, 2)))


def test_checkpoint_round_trip_and_shape_rejection(tmp_path):
    store = ParamStore()
    store.add("a.W", RNG.standard_normal((3, 4)))
    store.add("a.b", RNG.standard_normal(4))
    path = tmp_path / "ckpt.json"
    save_checkpoint(str(path), store, widths={"lane": 32})

    loaded, widths, _ = load_checkpoint(
        str(path), expected_shapes={"a.W": (3, 4), "a.b": (4,)})
    assert widths == {"lane": 32}
    for name in store.names():
        assert np.array_equal(loaded.get(name), store.get(name))

    with pytest.raises(ContractViolation):
        load_checkpoint(str(path), expected_shapes={"a.W": (4, 3), "a.b": (4,)})
    with pytest.raises(ContractViolation):
        load_checkpoint(str(path), expected_shapes={"a.W": (3, 4)})


def test_adam_zero_gradient_keeps_params():
    store = ParamStore()
    store.add("w", np.ones(3))
    opt = AdamOptimizer(lr=0.1)
    store.zero_grads()
    opt.step(store)
    assert np.array_equal(store.get("w"), np.ones(3))

import json

import mpmath
import numpy as np
import pytest

from movesd import autodiff as ad


def rng_for(seed):
    return np.random.default_rng(seed)


def scalarize(t):
    """Reduce any tensor to a scalar with fixed random weights for checks."""
    w = np.random.default_rng(99).standard_normal(t.data.shape)
    return ad.reduce_sum(ad.mul(t, ad.Tensor(w)))


class TestForwardValues:
    def test_relu(self):
        out = ad.relu(ad.Tensor(np.array([-1.0, 2.0])))
        assert out.data.tolist() == [0.0, 2.0]

    def test_softmax_equal_logits_is_uniform(self):
        out = ad.softmax(ad.Tensor(np.zeros((1, 11))))
        assert np.allclose(out.data, 1 / 11)

    def test_softmax_rows_sum_to_one_and_positive(self):
        x = rng_for(0).standard_normal((5, 7)) * 10
        out = ad.softmax(ad.Tensor(x)).data
        assert np.allclose(out.sum(axis=1), 1.0)
        assert (out > 0).all()

    def test_sigmoid_extremes_are_stable(self):
        out = ad.sigmoid(ad.Tensor(np.array([-800.0, 0.0, 800.0]))).data
        assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0

    def test_softplus_large_input_is_linear(self):
        out = ad.softplus(ad.Tensor(np.array([800.0]))).data
        assert out[0] == pytest.approx(800.0)

    def test_digamma_at_one_is_negative_euler_constant(self):
        val = ad.digamma_values(np.array(1.0))
        assert val == pytest.approx(-0.5772156649015329, abs=1e-12)

    def test_lgamma_matches_high_precision_oracle(self):
        xs = np.concatenate([np.linspace(0.05, 0.95, 7), np.linspace(1.0, 30.0, 40),
                             [0.5, 1.0, 2.0, 100.0]])
        for x in xs:
            expect = float(mpmath.loggamma(mpmath.mpf(x)))
            assert abs(ad.lgamma_values(np.array(x)) - expect) <= 1e-10, x

    def test_digamma_matches_high_precision_oracle(self):
        xs = np.concatenate([np.linspace(0.05, 0.95, 7), np.linspace(1.0, 30.0, 40),
                             [6.0, 50.0]])
        for x in xs:
            expect = float(mpmath.digamma(mpmath.mpf(x)))
            assert abs(ad.digamma_values(np.array(x)) - expect) <= 1e-10, x

    def test_trigamma_matches_high_precision_oracle(self):
        for x in np.linspace(0.1, 20.0, 30):
            expect = float(mpmath.polygamma(1, mpmath.mpf(x)))
            assert abs(ad.trigamma_values(np.array(x)) - expect) <= 1e-9, x


class TestBackward:
    def test_square_gradient(self):
        x = ad.Tensor(np.array(3.0), requires_grad=True)
        ad.mul(x, x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_lgamma_gradient_is_digamma(self):
        x = ad.Tensor(np.array(2.0), requires_grad=True)
        ad.lgamma(x).backward()
        assert x.grad == pytest.approx(float(mpmath.digamma(2)), abs=1e-10)
        assert x.grad == pytest.approx(0.4227843350984671, abs=1e-10)

    def test_concat_gradient_splits_into_branches(self):
        a = ad.Tensor(rng_for(1).random((2, 3)), requires_grad=True)
        b = ad.Tensor(rng_for(2).random((2, 4)), requires_grad=True)
        out = ad.concat([a, b], axis=1)
        w = rng_for(3).random((2, 7))
        ad.reduce_sum(ad.mul(out, ad.Tensor(w))).backward()
        assert np.allclose(a.grad, w[:, :3])
        assert np.allclose(b.grad, w[:, 3:])

    def test_embedding_backward_scatters_only_into_used_rows(self):
        table = ad.Tensor(rng_for(4).random((6, 3)), requires_grad=True)
        out = ad.embedding_lookup(table, np.array([1, 1, 4, 2]))
        ad.reduce_sum(out).backward()
        assert np.allclose(table.grad[1], 2.0)  # looked up twice
        assert np.allclose(table.grad[0], 0.0)
        assert np.allclose(table.grad[3], 0.0)
        assert np.allclose(table.grad[5], 0.0)

    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.relu(x).backward()

    def test_broadcast_add_gradient_reduces(self):
        m = ad.Tensor(rng_for(5).random((4, 3)), requires_grad=True)
        bias = ad.Tensor(rng_for(6).random(3), requires_grad=True)
        ad.reduce_sum(ad.add(m, bias)).backward()
        assert bias.grad.shape == (3,)
        assert np.allclose(bias.grad, 4.0)

    def test_clip_passes_gradient_only_strictly_inside(self):
        x = ad.Tensor(np.array([0.05, 0.5, 0.95]), requires_grad=True)
        y = ad.clip(x, 0.1, 0.9)
        ad.reduce_sum(ad.mul(y, ad.Tensor(np.array([1.0, 1.0, 1.0])))).backward()
        assert x.grad.tolist() == [0.0, 1.0, 0.0]

    def test_no_grad_builds_no_graph(self):
        x = ad.Tensor(np.array(2.0), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y.parents == ()


def primitive_cases():
    r = rng_for(10)
    a23 = r.standard_normal((2, 3))
    return [
        ("matmul", lambda p: ad.matmul(p["a"], p["b"]),
         {"a": r.standard_normal((2, 3)), "b": r.standard_normal((3, 4))}),
        ("add", lambda p: ad.add(p["a"], p["b"]),
         {"a": a23, "b": r.standard_normal((2, 3))}),
        ("sub", lambda p: ad.sub(p["a"], p["b"]),
         {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))}),
        ("mul", lambda p: ad.mul(p["a"], p["b"]),
         {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))}),
        ("relu", lambda p: ad.relu(p["a"]), {"a": r.standard_normal((3, 3)) + 0.3}),
        ("sigmoid", lambda p: ad.sigmoid(p["a"]), {"a": r.standard_normal((2, 4))}),
        ("tanh", lambda p: ad.tanh(p["a"]), {"a": r.standard_normal((2, 4))}),
        ("exp", lambda p: ad.exp(p["a"]), {"a": r.standard_normal((2, 3))}),
        ("log", lambda p: ad.log(p["a"]), {"a": r.random((2, 3)) + 0.5}),
        ("softplus", lambda p: ad.softplus(p["a"]), {"a": r.standard_normal((2, 3))}),
        ("softmax", lambda p: ad.softmax(p["a"]), {"a": r.standard_normal((3, 5))}),
        ("concat", lambda p: ad.concat([p["a"], p["b"]], axis=1),
         {"a": r.standard_normal((2, 2)), "b": r.standard_normal((2, 3))}),
        ("lgamma", lambda p: ad.lgamma(p["a"]), {"a": r.random((2, 3)) * 4 + 0.2}),
        ("digamma", lambda p: ad.digamma(p["a"]), {"a": r.random((2, 3)) * 4 + 0.2}),
        ("mean", lambda p: ad.mean(p["a"]), {"a": r.standard_normal(7)}),
        ("reduce_sum_axis", lambda p: ad.reduce_sum(p["a"], axis=1),
         {"a": r.standard_normal((3, 4))}),
        ("select_columns", lambda p: ad.select_columns(p["a"], np.eye(4)[[1, 3, 0]]),
         {"a": r.standard_normal((3, 4))}),
        ("clip", lambda p: ad.clip(p["a"], -0.5, 0.5),
         {"a": r.standard_normal((2, 3)) * 0.3}),
        ("scale", lambda p: ad.scale(p["a"], 2.5), {"a": r.standard_normal((2, 3))}),
        ("neg", lambda p: ad.neg(p["a"]), {"a": r.standard_normal(5)}),
    ]


@pytest.mark.parametrize("name,op,arrays", primitive_cases(),
                         ids=[c[0] for c in primitive_cases()])
def test_primitive_gradients_match_finite_differences(name, op, arrays):
    store = ad.ParamStore()
    for key, arr in arrays.items():
        store.add(key, arr)
    err = ad.grad_check(lambda: scalarize(op(store)), store, coords=100,
                        rng=rng_for(11))
    assert err < 1e-5, f"{name}: {err}"


def test_embedding_gradient_matches_finite_differences():
    store = ad.ParamStore()
    store.add("table", rng_for(12).standard_normal((5, 4)))
    ids = np.array([0, 2, 4, 2])
    err = ad.grad_check(lambda: scalarize(ad.embedding_lookup(store["table"], ids)),
                        store, coords=20, rng=rng_for(13))
    assert err < 1e-5


def test_lstm_cell_gradient_matches_finite_differences():
    store = ad.ParamStore()
    for name, shape in ad.lstm_param_shapes(4, 3).items():
        store.init_uniform(name, shape, 4, rng_for(14))

    def fn():
        x = ad.Tensor(rng_for(15).standard_normal((2, 4)))
        h = ad.Tensor(np.zeros((2, 3)))
        c = ad.Tensor(np.zeros((2, 3)))
        for _ in range(3):
            h, c = ad.recurrent_cell(x, h, c, store)
        return scalarize(h)

    err = ad.grad_check(fn, store, coords=60, rng=rng_for(16))
    assert err < 1e-5


def test_quadratic_grad_check_is_nearly_exact():
    store = ad.ParamStore()
    store.add("x", rng_for(17).standard_normal(6))
    a = ad.Tensor(rng_for(18).standard_normal(6))

    def fn():
        return ad.reduce_sum(ad.mul(store["x"], ad.add(store["x"], a)))

    assert ad.grad_check(fn, store) < 1e-8


def test_grad_check_rejects_non_finite_objective():
    store = ad.ParamStore()
    store.add("x", np.array([-1.0]))
    with pytest.raises(FloatingPointError):
        ad.grad_check(lambda: ad.reduce_sum(ad.log(store["x"])), store)


class TestShapes:
    def test_matmul_shape_mismatch_names_op(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_concat_rank_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.concat([ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones(2))], axis=1)


class TestParamStore:
    def test_flatten_unflatten_identity(self):
        store = ad.ParamStore()
        store.add("a", rng_for(20).random((2, 3)))
        store.add("b", rng_for(21).random(4))
        flat = store.get_flat()
        store.set_flat(flat)
        assert np.array_equal(store.get_flat(), flat)
        assert store.size == 10

    def test_init_uniform_bounds(self):
        store = ad.ParamStore()
        store.init_uniform("w", (40, 40), 16, rng_for(22))
        assert np.abs(store["w"].data).max() <= 0.25  # 1/sqrt(16)

    def test_checkpoint_roundtrip(self, tmp_path):
        store = ad.ParamStore()
        store.add("w", rng_for(23).random((3, 2)))
        store.add("b", rng_for(24).random(2))
        path = tmp_path / "net.json"
        ad.save_checkpoint(path, store, kind="policy", meta={"n_actions": 11})
        state, meta, kind = ad.load_checkpoint(path)
        assert kind == "policy" and meta == {"n_actions": 11}
        assert np.array_equal(state["w"], store["w"].data)
        assert np.array_equal(state["b"], store["b"].data)

    def test_checkpoint_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"format": "something-else", "params": []}))
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)


class TestAdam:
    def test_minimizes_quadratic(self):
        store = ad.ParamStore()
        store.add("x", np.array([5.0, -3.0]))
        opt = ad.Adam(store, lr=0.1)
        for _ in range(400):
            store.zero_grad()
            loss = ad.reduce_sum(ad.mul(store["x"], store["x"]))
            loss.backward()
            opt.step()
        assert np.abs(store["x"].data).max() < 1e-3

    def test_maximize_flag_ascends(self):
        store = ad.ParamStore()
        store.add("x", np.array([0.1]))
        opt = ad.Adam(store, lr=0.05, maximize=True)
        for _ in range(200):
            store.zero_grad()
            # concave objective -x^2 + 2x peaks at x = 1
            obj = ad.add(ad.neg(ad.mul(store["x"], store["x"])),
                         ad.scale(store["x"], 2.0))
            ad.reduce_sum(obj).backward()
            opt.step()
        assert store["x"].data[0] == pytest.approx(1.0, abs=1e-2)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mistcl import numerics as nx
from mistcl.numerics import Graph, NumericsError, ParamStore, ShapeError, evaluate, gradient, masked_sgd_step


def scalar_store(name, value):
    s = ParamStore()
    s.add(name, value)
    return s


def central_fd(fn, x, step=1e-6):
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up.reshape(-1)[i] += step
        down.reshape(-1)[i] -= step
        flat[i] = (fn(up) - fn(down)) / (2 * step)
    return grad


class TestEvaluate:
    def test_identity(self):
        g = Graph()
        x = g.input("x", shape=(3,))
        g.set_output(x)
        np.testing.assert_array_equal(evaluate(g, {"x": [1.0, 2.0, 3.0]}), [1.0, 2.0, 3.0])

    def test_softmax_symmetric(self):
        g = Graph()
        g.set_output(nx.softmax(g.input("x", shape=(2,))))
        np.testing.assert_array_equal(evaluate(g, {"x": [0.0, 0.0]}), [0.5, 0.5])

    def test_sum_of_squares(self):
        g = Graph()
        x = g.input("x")
        g.set_output(nx.sum(x * x))
        assert evaluate(g, {"x": [1.0, 2.0, 3.0]}) == 14.0

    def test_input_shape_mismatch_names_node(self):
        g = Graph()
        x = g.input("x", shape=(None, 3))
        g.set_output(nx.sum(x))
        with pytest.raises(ShapeError, match=r"node #0 .*'x'"):
            evaluate(g, {"x": np.zeros((2, 4))})

    def test_matmul_mismatch_names_node(self):
        g = Graph()
        a = g.input("a")
        b = g.input("b")
        g.set_output(nx.sum(a @ b))
        with pytest.raises(ShapeError, match=r"node #2 \(matmul\)"):
            evaluate(g, {"a": np.zeros((2, 3)), "b": np.zeros((2, 3))})

    def test_softmax_is_stable_for_large_logits(self):
        g = Graph()
        g.set_output(nx.softmax(g.input("x")))
        out = evaluate(g, {"x": [1000.0, 1000.0, -1000.0]})
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((4, 3))

        def run():
            g = Graph()
            g.set_output(nx.sum(nx.log_softmax(nx.tanh(g.input("x", value=x) @ g.constant(w)))))
            return evaluate(g).tobytes()

        assert run() == run()


class TestGradient:
    def test_square(self):
        s = scalar_store("t", 3.0)
        g = Graph()
        t = g.param(s, "t")
        g.set_output(t * t)
        evaluate(g)
        gradient(g, s)
        assert s.grad("t") == 6.0

    def test_log_softmax_first_entry(self):
        s = scalar_store("t", [0.0, 0.0])
        g = Graph()
        out = nx.log(nx.softmax(g.param(s, "t")))
        g.set_output(nx.sum(nx.multiply(out, g.constant([1.0, 0.0]))))
        evaluate(g)
        gradient(g, s)

        def f(v):
            e = np.exp(v - v.max())
            return np.log(e[0] / e.sum())

        fd = central_fd(f, np.zeros(2))
        np.testing.assert_allclose(s.grad("t"), [0.5, -0.5], atol=1e-12)
        np.testing.assert_allclose(s.grad("t"), fd, atol=1e-6)

    def test_constant_graph_gives_zero(self):
        s = scalar_store("t", [1.0, 2.0])
        g = Graph()
        g.param(s, "t")
        g.set_output(nx.sum(g.constant([4.0, 5.0])))
        evaluate(g)
        gradient(g, s)
        np.testing.assert_array_equal(s.grad("t"), [0.0, 0.0])

    def test_non_scalar_output_rejected(self):
        s = scalar_store("t", [1.0, 2.0])
        g = Graph()
        g.set_output(g.param(s, "t") * 2.0)
        evaluate(g)
        with pytest.raises(NumericsError, match="scalar"):
            gradient(g, s)

    def test_gradient_before_evaluate(self):
        g = Graph()
        g.set_output(nx.sum(g.constant([1.0])))
        with pytest.raises(NumericsError):
            gradient(g)

    def test_untrainable_leaf_untouched(self):
        s = ParamStore()
        s.add("a", [1.0, 2.0])
        s.add("b", [3.0, 4.0])
        g = Graph()
        a = g.param(s, "a")
        b = g.param(s, "b", trainable=False)
        g.set_output(nx.sum(a * b))
        evaluate(g)
        gradient(g, s)
        np.testing.assert_array_equal(s.grad("a"), [3.0, 4.0])
        np.testing.assert_array_equal(s.grad("b"), [0.0, 0.0])

    def test_frozen_store_untouched(self):
        s = scalar_store("t", [1.0, 2.0])
        s.trainable = False
        g = Graph()
        g.set_output(nx.sum(g.param(s, "t")))
        evaluate(g)
        gradient(g, s)
        np.testing.assert_array_equal(s.grad("t"), [0.0, 0.0])

    def test_gradients_accumulate(self):
        s = scalar_store("t", 2.0)
        for _ in range(2):
            g = Graph()
            t = g.param(s, "t")
            g.set_output(t * t)
            evaluate(g)
            gradient(g, s)
        assert s.grad("t") == 8.0
        s.zero_grad()
        assert s.grad("t") == 0.0


def _primitive_graphs():
    """(name, shape of x, builder) where builder(g, x_node, rng) returns a scalar node."""

    def weighted(g, node, shape, rng):
        return nx.sum(nx.multiply(node, g.constant(rng.standard_normal(shape))))

    return [
        ("matmul", (3, 4), lambda g, x, r: weighted(g, x @ g.constant(r.standard_normal((4, 2))), (3, 2), r)),
        ("matmul_right", (4, 2), lambda g, x, r: weighted(g, g.constant(r.standard_normal((3, 4))) @ x, (3, 2), r)),
        ("add_broadcast", (1, 4), lambda g, x, r: weighted(g, nx.add(g.constant(r.standard_normal((3, 4))), x), (3, 4), r)),
        ("multiply", (3, 4), lambda g, x, r: weighted(g, nx.multiply(x, x), (3, 4), r)),
        ("exp", (3, 4), lambda g, x, r: weighted(g, nx.exp(x), (3, 4), r)),
        ("log", (3, 4), lambda g, x, r: weighted(g, nx.log(nx.exp(x) + 0.5), (3, 4), r)),
        ("tanh", (3, 4), lambda g, x, r: weighted(g, nx.tanh(x), (3, 4), r)),
        ("sum_axis", (3, 4), lambda g, x, r: weighted(g, nx.sum(x * x, axis=1), (3,), r)),
        ("sum_keepdims", (3, 4), lambda g, x, r: weighted(g, nx.sum(x * x, axis=0, keepdims=True), (1, 4), r)),
        ("softmax", (3, 4), lambda g, x, r: weighted(g, nx.softmax(x), (3, 4), r)),
        ("log_softmax", (3, 4), lambda g, x, r: weighted(g, nx.log_softmax(x), (3, 4), r)),
        ("scalar_divide", (3, 4), lambda g, x, r: weighted(g, nx.scalar_divide(x * x, 0.7), (3, 4), r)),
        ("l2_normalize", (3, 4), lambda g, x, r: weighted(g, nx.l2_normalize(x), (3, 4), r)),
        ("concatenate", (3, 4), lambda g, x, r: weighted(g, nx.concatenate([x, x * x], axis=0), (6, 4), r)),
        ("transpose", (3, 4), lambda g, x, r: weighted(g, nx.transpose(x) @ x, (4, 4), r)),
    ]


@pytest.mark.parametrize("name,shape,build", _primitive_graphs(), ids=[p[0] for p in _primitive_graphs()])
def test_primitive_gradients_match_finite_differences(name, shape, build):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal(shape)
        s = scalar_store("x", x0)
        g = Graph()
        g.set_output(build(g, g.param(s, "x"), np.random.default_rng(1000 + seed)))
        evaluate(g)
        gradient(g, s)

        def f(v):
            s.set_value("x", v)
            return float(evaluate(g))

        fd = central_fd(f, x0.copy())
        s.set_value("x", x0)
        analytic = s.grad("x")
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-12)
        assert rel < 1e-5, (name, seed, rel)


class TestMaskedSGD:
    def test_plain_step(self):
        s = scalar_store("t", [1.0])
        s.grad("t")[...] = [2.0]
        assert masked_sgd_step(s, 0.1, [0]) == 1
        np.testing.assert_allclose(s.value("t"), [0.8])

    def test_empty_mask(self):
        s = scalar_store("t", [1.0, 2.0])
        s.grad("t")[...] = 5.0
        before = s.to_bytes()
        assert masked_sgd_step(s, 0.1, []) == 0
        assert s.to_bytes() == before

    def test_single_index_across_entries(self):
        s = ParamStore()
        s.add("a", [1.0])
        s.add("b", [[2.0, 3.0]])
        for n in s.names():
            s.grad(n)[...] = 1.0
        before = [s.value("b").tobytes()]
        assert masked_sgd_step(s, 0.5, [0]) == 1
        assert s.value("a")[0] == 0.5
        assert s.value("b").tobytes() == before[0]

    def test_out_of_range(self):
        s = scalar_store("t", [1.0, 2.0])
        with pytest.raises(IndexError):
            masked_sgd_step(s, 0.1, [2])

    def test_lr_must_be_positive(self):
        s = scalar_store("t", [1.0])
        with pytest.raises(ValueError):
            masked_sgd_step(s, 0.0, [0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_never_touches_outside_mask(self, n, seed):
        rng = np.random.default_rng(seed)
        s = ParamStore()
        cut = int(rng.integers(0, n + 1))
        s.add("a", rng.standard_normal(cut))
        s.add("b", rng.standard_normal((n - cut, 1)))
        for name in s.names():
            s.grad(name)[...] = rng.standard_normal(s.value(name).shape)
        allowed = np.flatnonzero(rng.random(n) < 0.3)
        before = s.flat_values()
        count = masked_sgd_step(s, 0.01, allowed)
        after = s.flat_values()
        outside = np.setdiff1d(np.arange(n), allowed)
        assert count == len(allowed)
        assert after[outside].tobytes() == before[outside].tobytes()


class TestParamStore:
    def test_index_ranges_cover(self):
        s = ParamStore()
        s.add("w", np.zeros((2, 3)))
        s.add("b", np.zeros(3))
        assert s.index_range("w") == (0, 6)
        assert s.index_range("b") == (6, 9)
        assert s.total_count == 9

    def test_duplicate_rejected(self):
        s = scalar_store("w", 1.0)
        with pytest.raises(KeyError):
            s.add("w", 2.0)

    def test_copy_is_independent(self):
        s = scalar_store("w", [1.0, 2.0])
        c = s.copy()
        c.value("w")[0] = 9.0
        assert s.value("w")[0] == 1.0

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shrinkforge import autodiff as ad
from shrinkforge.errors import ShapeError


def naive_conv(x, k, stride, padding):
    """Quadruple loop cross-correlation used as the reference."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


# -- conv2d ------------------------------------------------------------------

def test_conv_all_ones():
    out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv_one_by_one_scaling():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data[0, 0], [[2.0, 4.0], [6.0, 8.0]])


def test_conv_matches_naive_loop_seeded():
    x = np.random.default_rng(7).standard_normal((1, 2, 4, 4))
    k = np.random.default_rng(8).standard_normal((3, 2, 3, 3))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data
    np.testing.assert_allclose(out, naive_conv(x, k, 1, 0), rtol=0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), stride=st.integers(1, 2), padding=st.integers(0, 2),
       kernel=st.sampled_from([1, 3]), c_in=st.integers(1, 3), c_out=st.integers(1, 3))
def test_conv_matches_naive_loop_property(seed, stride, padding, kernel, c_in, c_out):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c_in, 5, 5))
    k = rng.standard_normal((c_out, c_in, kernel, kernel))
    np.testing.assert_allclose(ad.conv2d(ad.Tensor(x), ad.Tensor(k), stride, padding).data,
                               naive_conv(x, k, stride, padding), rtol=0, atol=1e-9)


def test_conv_shape_errors_name_layer():
    with pytest.raises(ShapeError, match="conv9"):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 3, 3))), name="conv9")
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 1, 2, 2))), ad.Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_reports_macs():
    with ad.count_macs() as c:
        ad.conv2d(ad.Tensor(np.zeros((2, 3, 8, 8))), ad.Tensor(np.zeros((4, 3, 3, 3))), 1, 1, name="c")
    assert c.total == 2 * 3 * 9 * 4 * 64
    assert c.by_layer == {"c": 2 * 3 * 9 * 4 * 64}


# -- batchnorm ---------------------------------------------------------------

def test_bn_train_normalizes():
    # the output variance is var / (var + eps); 1e-6 needs a batch variance of at least 10
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(8, 1, 4, 4))
    out = ad.batchnorm(ad.Tensor(x), ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)), "train").data
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-6
    np.testing.assert_allclose(out.var(), x.var() / (x.var() + 1e-5), rtol=1e-12)


def test_bn_zero_scale_collapses_to_beta():
    x = np.random.default_rng(1).standard_normal((4, 1, 3, 3))
    out = ad.batchnorm(ad.Tensor(x), ad.Tensor(np.zeros(1)), ad.Tensor(np.full(1, 0.5)), "train").data
    assert np.all(out == 0.5)


def test_bn_hand_example():
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    out = ad.batchnorm(ad.Tensor(x), ad.Tensor(np.full(1, 2.0)), ad.Tensor(np.full(1, -1.0)), "train",
                       epsilon=1e-5).data.ravel()
    # mean 2, biased variance 1
    expected = 2.0 * np.array([-1.0, 1.0]) / np.sqrt(1.0 + 1e-5) - 1.0
    np.testing.assert_allclose(out, [-3.0, 1.0], atol=1e-2)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_bn_running_stats_update_and_eval():
    rng = np.random.default_rng(2)
    x = rng.normal(1.0, 2.0, size=(5, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batchnorm(ad.Tensor(x), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), "train", (rm, rv), momentum=0.9)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * v, rtol=1e-12)
    out = ad.batchnorm(ad.Tensor(x), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), "eval", (rm, rv)).data
    np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))
    with pytest.raises(ValueError):
        ad.batchnorm(ad.Tensor(x), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), "eval")


# -- softmax / cross-entropy ------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_rows_and_shift(row, shift):
    z = np.array([row, row[::-1]])
    s = ad.softmax(ad.Tensor(z)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(ad.Tensor(z + shift)).data, s, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 5, size=(4, 3))
    t = rng.dirichlet(np.ones(3), size=4)
    assert ad.cross_entropy_with_logits(ad.Tensor(logits), t).item() >= 0.0


# -- backward ---------------------------------------------------------------

def test_sum_gradient_is_ones():
    tape = ad.Tape()
    p = tape.param("p", np.random.default_rng(0).standard_normal((2, 3, 4)))
    g = ad.backward(tape, ad.sum(p))
    np.testing.assert_array_equal(g["p"], np.ones((2, 3, 4)))


def test_zero_times_function_gives_zero_gradient():
    tape = ad.Tape()
    p = tape.param("p", np.random.default_rng(0).standard_normal(5))
    loss = ad.scale(ad.sum(ad.mul(p, p)), 0.0)
    np.testing.assert_array_equal(ad.backward(tape, loss)["p"], np.zeros(5))


def test_unused_parameter_gets_zeros_and_nodes_are_ordered():
    tape = ad.Tape()
    p = tape.param("p", np.ones(3))
    tape.param("q", np.ones((2, 2)))
    loss = ad.sum(ad.scale(p, 2.0))
    g = ad.backward(tape, loss)
    np.testing.assert_array_equal(g["q"], np.zeros((2, 2)))
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.inputs)


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    p = tape.param("p", np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(tape, ad.scale(p, 2.0))


def test_shared_subexpression_accumulates():
    tape = ad.Tape()
    p = tape.param("p", np.array([1.5, -2.0]))
    loss = ad.sum(ad.add(ad.mul(p, p), p))
    np.testing.assert_allclose(ad.backward(tape, loss)["p"], 2 * np.array([1.5, -2.0]) + 1)


# -- finite differences ------------------------------------------------------

def _op_cases():
    rng = np.random.default_rng(11)
    x4 = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 5))
    soft = rng.dirichlet(np.ones(4), 3)
    return {
        "conv2d": ({"x": x4, "k": rng.standard_normal((3, 2, 3, 3))},
                   lambda t, p: ad.sum(ad.mul(ad.conv2d(p["x"], p["k"], 2, 1), ad.Tensor(np.cos(np.arange(12.0)).reshape(1, 3, 2, 2).repeat(2, 0))))),
        "batchnorm-train": ({"x": x4, "g": rng.standard_normal(2), "b": rng.standard_normal(2)},
                            lambda t, p: ad.sum(ad.mul(ad.batchnorm(p["x"], p["g"], p["b"], "train"),
                                                       ad.Tensor(np.sin(np.arange(64.0)).reshape(2, 2, 4, 4))))),
        "batchnorm-eval": ({"x": x4, "g": rng.standard_normal(2), "b": rng.standard_normal(2)},
                           lambda t, p: ad.sum(ad.mul(ad.batchnorm(p["x"], p["g"], p["b"], "eval",
                                                                   (np.array([0.1, -0.2]), np.array([1.3, 0.7]))),
                                                      ad.Tensor(np.sin(np.arange(64.0)).reshape(2, 2, 4, 4))))),
        "relu": ({"x": x4}, lambda t, p: ad.sum(ad.mul(ad.relu(p["x"]), p["x"]))),
        "avgpool": ({"x": x4}, lambda t, p: ad.sum(ad.mul(ad.avgpool2d(p["x"]), ad.avgpool2d(p["x"])))),
        "dense": ({"x": rng.standard_normal((4, 5)), "w": w, "b": rng.standard_normal(3)},
                  lambda t, p: ad.sum(ad.mul(ad.dense(p["x"], p["w"], p["b"]), ad.dense(p["x"], p["w"], p["b"])))),
        "softmax": ({"x": rng.standard_normal((3, 4))},
                    lambda t, p: ad.sum(ad.mul(ad.softmax(p["x"]), ad.Tensor(np.arange(12.0).reshape(3, 4))))),
        "cross_entropy": ({"x": rng.standard_normal((3, 4))},
                          lambda t, p: ad.cross_entropy_with_logits(p["x"], soft)),
        "reshape+mean": ({"x": rng.standard_normal((2, 6))},
                         lambda t, p: ad.mean(ad.mul(ad.reshape(p["x"], (3, 4)), ad.reshape(p["x"], (3, 4))))),
        "add+scale+add_const": ({"a": rng.standard_normal(4), "b": rng.standard_normal(4)},
                                lambda t, p: ad.sum(ad.mul(ad.add_const(ad.add(p["a"], ad.scale(p["b"], 3.0)), 1.0), p["a"]))),
    }


@pytest.mark.parametrize("name", list(_op_cases()))
def test_every_op_passes_finite_differences(name):
    params, fn = _op_cases()[name]
    report = ad.check_gradients(fn, params, tolerance=1e-6, step=1e-5)
    assert report.passed, (name, report.max_rel_error)
    assert report.max_rel_error < 1e-6


def test_relu_kink_is_excluded_and_noted():
    x = np.array([[-1.0, 0.0, 2.0]])
    report = ad.check_gradients(lambda t, p: ad.sum(ad.relu(p["x"])), {"x": x})
    assert report.params["x"].excluded == 1
    assert report.params["x"].checked == 2
    assert report.passed
    assert any("excluded" in n for n in report.notes)


def test_corrupted_backward_rule_fails(monkeypatch):
    original = ad.dense

    def broken_dense(x, weight, bias, name=None):
        out = original(x, weight, bias, name)
        node = out.tape.nodes[out.id]
        good = node.vjp
        node.vjp = lambda g, needs: tuple(None if r is None else 1.5 * r for r in good(g, needs))
        return out

    rng = np.random.default_rng(0)
    params = {"w": rng.standard_normal((2, 3)), "b": rng.standard_normal(2)}
    x = rng.standard_normal((4, 3))
    fn = lambda t, p: ad.sum(ad.mul(broken_dense(ad.Tensor(x), p["w"], p["b"]), broken_dense(ad.Tensor(x), p["w"], p["b"])))  # noqa: E731
    assert not ad.check_gradients(fn, params).passed


def test_nan_marks_failure():
    report = ad.check_gradients(lambda t, p: ad.sum(ad.mul(p["x"], ad.Tensor(np.array([np.nan])))),
                                {"x": np.ones(1)})
    assert not report.passed

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmalign import numerics as nx


def triple_loop_affine(x, W, b):
    n, d = len(x), len(x[0])
    m = len(W[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                acc += x[i][k] * W[k][j]
            out[i][j] = acc + b[j]
    return out


class TestAffine:
    def test_identity(self):
        out = nx.affine(np.array([[2.0, 3.0]]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out, [[2.0, 3.0]])

    def test_sum_plus_bias(self):
        out = nx.affine(np.array([[2.0, 3.0]]), np.array([[1.0], [1.0]]), np.array([1.0]))
        np.testing.assert_array_equal(out, [[6.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        expected = triple_loop_affine(x.tolist(), W.tolist(), b.tolist())
        np.testing.assert_allclose(nx.affine(x, W, b), expected, rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            nx.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))

    def test_recorded_on_tape(self):
        tape = nx.Tape()
        W = tape.param("W", np.eye(2))
        out = nx.affine(np.ones((3, 2)), W, np.zeros(2))
        assert isinstance(out, nx.Var) and out in tape.nodes


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(nx.relu(np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])

    def test_identity_on_positives(self):
        x = np.array([[0.5, 3.0]])
        np.testing.assert_array_equal(nx.relu(x), x)

    def test_indicator_gradient(self):
        tape = nx.Tape()
        x = tape.param("x", np.array([[-1.0, 2.0]]))
        g = tape.backward(nx.total(nx.relu(x)))
        np.testing.assert_array_equal(g["x"], [[0.0, 1.0]])

    def test_gradient_zero_at_zero(self):
        tape = nx.Tape()
        x = tape.param("x", np.array([[0.0]]))
        assert tape.backward(nx.total(nx.relu(x)))["x"][0, 0] == 0.0


class TestNormalize:
    def test_345(self):
        np.testing.assert_allclose(nx.l2_normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]])

    def test_unit_rows_unchanged(self):
        u = np.array([[1.0, 0.0], [0.0, -1.0]])
        np.testing.assert_array_equal(nx.l2_normalize_rows(u), u)

    def test_zero_row(self):
        with pytest.raises(nx.DegenerateVectorError):
            nx.l2_normalize_rows(np.array([[0.0, 0.0]]))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
    def test_unit_norm(self, row):
        x = np.array([row])
        if np.linalg.norm(x) < 1e-6:
            return
        assert abs(np.linalg.norm(nx.l2_normalize_rows(x)) - 1.0) < 1e-12


class TestReparam:
    def test_zero_variance_limit(self):
        z = nx.gaussian_reparam_sample(
            np.array([[1.0, 2.0]]), np.full((1, 2), -np.inf), np.random.default_rng(0)
        )
        # clamped at LOG_VAR_MIN: std = exp(-5) ~ 6.7e-3
        np.testing.assert_allclose(z, [[1.0, 2.0]], atol=0.05)

    def test_determinism(self):
        mu, lv = np.zeros((3, 2)), np.zeros((3, 2))
        a = nx.gaussian_reparam_sample(mu, lv, nx.make_rng(5, "reparam"))
        b = nx.gaussian_reparam_sample(mu, lv, nx.make_rng(5, "reparam"))
        np.testing.assert_array_equal(a, b)

    def test_monte_carlo_mean(self):
        z = nx.gaussian_reparam_sample(np.zeros((100_000, 2)), np.zeros((100_000, 2)), nx.make_rng(1))
        assert np.all(np.abs(z.mean(axis=0)) < 0.02)
        assert np.all(np.abs(z.std(axis=0) - 1.0) < 0.02)

    def test_eps_constant_for_gradient(self):
        tape = nx.Tape()
        mu = tape.param("mu", np.zeros((2, 2)))
        lv = tape.param("lv", np.zeros((2, 2)))
        rng = nx.make_rng(0)
        z = nx.gaussian_reparam_sample(mu, lv, rng)
        eps = nx.make_rng(0).standard_normal((2, 2))
        g = tape.backward(nx.total(z))
        np.testing.assert_array_equal(g["mu"], np.ones((2, 2)))
        np.testing.assert_allclose(g["lv"], 0.5 * eps)


def test_streams_independent():
    a = nx.make_rng(7, "data").standard_normal(5)
    b = nx.make_rng(7, "init").standard_normal(5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, nx.make_rng(7, "data").standard_normal(5))


class TestBackward:
    def test_bias_gradient_is_row_count(self):
        tape = nx.Tape()
        W = tape.param("W", np.ones((3, 2)))
        b = tape.param("b", np.zeros(2))
        g = tape.backward(nx.total(nx.affine(np.ones((4, 3)), W, b)))
        np.testing.assert_array_equal(g["b"], [4.0, 4.0])

    def test_unused_parameter_zero(self):
        tape = nx.Tape()
        W = tape.param("W", np.ones((2, 2)))
        tape.param("W2", np.ones((2, 2)))
        g = tape.backward(nx.total(nx.relu(W)))
        np.testing.assert_array_equal(g["W2"], np.zeros((2, 2)))

    def test_non_scalar_rejected(self):
        tape = nx.Tape()
        W = tape.param("W", np.ones((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(nx.relu(W))

    def test_topological_order(self):
        tape = nx.Tape()
        x = tape.param("x", np.ones((2, 2)))
        nx.total(nx.square(nx.relu(x)))
        for i, node in enumerate(tape.nodes):
            assert node.idx == i
            assert all(p.idx < i for p in node.parents if isinstance(p, nx.Var))


class TestFiniteDiffCheck:
    def test_quadratic(self):
        p = {"p": np.array([1.0, 2.0])}
        err = nx.finite_diff_check(lambda q: float((q["p"] ** 2).sum()), p, {"p": np.array([2.0, 4.0])})
        assert err < 1e-8

    def test_constant(self):
        p = {"p": np.array([1.0, -3.0])}
        assert nx.finite_diff_check(lambda q: 4.0, p, {"p": np.zeros(2)}) < 1e-10

    def test_eps_domain(self):
        with pytest.raises(ValueError):
            nx.finite_diff_check(lambda q: 0.0, {"p": np.zeros(1)}, {"p": np.zeros(1)}, eps=1e-2)

    def test_nonfinite_propagates(self):
        with pytest.raises(nx.NumericError):
            nx.finite_diff_check(lambda q: float("nan"), {"p": np.zeros(1)}, {"p": np.zeros(1)})


# every differentiable primitive against central differences
def _unary(fn, positive=False):
    def build(tape, vals):
        return nx.total(nx.mul(fn(tape.param("x", vals["x"])), vals["w"]))

    return build


PRIMS = {
    "relu": _unary(nx.relu),
    "exp": _unary(nx.exp),
    "square": _unary(nx.square),
    "sqrt": _unary(nx.sqrt),
    "abs": _unary(nx.abs_),
    "clip": _unary(lambda x: nx.clip(x, -0.5, 0.5)),
    "transpose": lambda t, v: nx.total(nx.mul(nx.transpose(t.param("x", v["x"])), v["w"].T)),
    "normalize": _unary(nx.l2_normalize_rows),
    "row_sum": lambda t, v: nx.total(nx.mul(nx.row_sum(t.param("x", v["x"])), v["w"][:, 0])),
    "take_rows": lambda t, v: nx.total(nx.mul(nx.take_rows(t.param("x", v["x"]), [2, 0, 0]), v["w"])),
    "split": lambda t, v: nx.total(
        nx.mul(nx.split_cols(t.param("x", v["x"]), 1)[1], v["w"][:, 1:])
    ),
    "scale_add_sub": lambda t, v: nx.total(
        nx.sub(nx.add(nx.scale(t.param("x", v["x"]), 3.0), v["w"]), nx.mul(t.params["x"], t.params["x"]))
    ),
    "affine": lambda t, v: nx.total(
        nx.mul(nx.affine(t.param("x", v["x"]), v["w"].T @ v["w"], v["w"][0]), v["w"])
    ),
    "matmul": lambda t, v: nx.total(nx.matmul(t.param("x", v["x"]), nx.transpose(t.params["x"]))),
    "gram": lambda t, v: nx.total(nx.mul(nx.scaled_gram(t.param("x", v["x"]), v["w"], 0.7), v["w"] @ v["w"].T)),
    "l1": lambda t, v: nx.l1_distance(t.param("x", v["x"]), v["w"]),
    "kl": lambda t, v: nx.gaussian_kl(t.param("x", v["x"]), v["w"]),
    "mlp": lambda t, v: nx.total(
        nx.mul(nx.mlp(t.param("x", v["x"]), v["w"].T, v["w"][:, 0], v["w"], v["w"][0]), v["w"])
    ),
    "softmax_nll": lambda t, v: nx.masked_log_softmax_nll(
        t.param("x", v["x"]),
        ~np.eye(3, dtype=bool),
        np.array([[0, 0.5, 0.5], [1.0, 0, 0], [0, 1.0, 0]]),
    ),
    "paired_gaussian": lambda t, v: nx.paired_gaussian_distance(
        t.param("x", v["x"]), v["w"], nx.scale(t.params["x"], 0.3), nx.scale(t.params["x"], -0.2), [1, 2, 0]
    ),
    "weighted_sum": lambda t, v: nx.weighted_sum(
        [nx.total(nx.square(t.param("x", v["x"]))), nx.total(t.params["x"])], [0.3, -2.0]
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients(name):
    build = PRIMS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        vals = {"x": rng.normal(size=(3, 3)), "w": rng.normal(size=(3, 3))}
        if name == "sqrt":
            vals["x"] = np.abs(vals["x"]) + 0.1
        if name == "clip":
            vals["x"] = np.where(np.abs(np.abs(vals["x"]) - 0.5) < 1e-3, 0.0, vals["x"])
        tape = nx.Tape()
        analytic = tape.backward(build(tape, vals))

        def f(p):
            return float(nx.value(build(nx.Tape(), {"x": p["x"], "w": vals["w"]})))

        assert nx.finite_diff_check(f, {"x": vals["x"]}, analytic, eps=1e-6) < 1e-4


def test_stacked_runs_match_single():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    Ws = rng.normal(size=(2, 3, 5))
    bs = rng.normal(size=(2, 5))
    stacked = nx.affine(x, Ws, bs)
    for r in range(2):
        np.testing.assert_allclose(stacked[r], nx.affine(x, Ws[r], bs[r]), rtol=0, atol=1e-14)
    tape = nx.Tape()
    W = tape.param("W", Ws)
    loss = nx.total(nx.l1_distance(nx.affine(x, W, bs), np.zeros((4, 5))))
    g = tape.backward(loss)
    for r in range(2):
        t1 = nx.Tape()
        g1 = t1.backward(nx.l1_distance(nx.affine(x, t1.param("W", Ws[r]), bs[r]), np.zeros((4, 5))))
        np.testing.assert_allclose(g["W"][r], g1["W"], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_finite_for_bounded_inputs(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1e3, 1e3, size=(4, 3))
    W = rng.uniform(-1e3, 1e3, size=(3, 3))
    out = nx.mlp(x, W, W[0], W, W[1])
    assert np.all(np.isfinite(out))
    logits = rng.uniform(-1e3, 1e3, size=(4, 4))
    assert np.isfinite(nx.masked_log_softmax_nll(logits, None, np.eye(4)))


def test_determinism_bitwise():
    rng = np.random.default_rng(0)
    x, W = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
    a = nx.mlp(x, W, W[0], W, W[1])
    b = nx.mlp(x.copy(), W.copy(), W[0].copy(), W.copy(), W[1].copy())
    assert a.tobytes() == b.tobytes()

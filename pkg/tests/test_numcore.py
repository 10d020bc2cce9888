import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpn import numcore as nc
from stpn.errors import DimensionError, FormatError, NumericError
from stpn.numcore import kernels
from stpn.numcore.rng import philox4x32


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            c[i, j] = s
    return c


# --- matmul --------------------------------------------------------------


def test_matmul_identity():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(nc.matmul(np.eye(2), b), b)


def test_matmul_small_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = naive_matmul(a, b)
    assert expected.tolist() == [[19, 22], [43, 50]]
    assert np.array_equal(nc.matmul(a, b), expected)


def test_matmul_zero_annihilates():
    b = np.random.default_rng(1).normal(size=(2, 5))
    assert np.array_equal(nc.matmul(np.zeros((2, 2)), b), np.zeros((2, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 7, 2), (6, 13, 5), (4, 1, 9)])
def test_matmul_bit_exact_against_naive(shape):
    m, k, n = shape
    rng = np.random.default_rng(sum(shape))
    a = rng.normal(size=(m, k)) * 10 ** rng.uniform(-3, 3, size=(m, k))
    b = rng.normal(size=(k, n))
    assert np.array_equal(nc.matmul(a, b), naive_matmul(a, b))


def test_matmul_batched_matches_per_item():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(3, 5, 2))
    out = nc.matmul(a, b)
    assert out.shape == (2, 3, 4, 2)
    for i in range(2):
        for j in range(3):
            assert np.array_equal(out[i, j], naive_matmul(a[i, j], b[j]))


# --- layer norm / softmax / gelu / mean ----------------------------------


def test_layer_norm_arithmetic_sequence():
    out = nc.layer_norm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), eps=0.0)
    s = math.sqrt(1.5)
    np.testing.assert_allclose(out, [-s, 0.0, s], atol=1e-12)
    assert abs(out[0] + 1.22474) < 1e-5


def test_layer_norm_constant_row_maps_to_beta():
    beta = np.array([0.3, -1.0, 2.0])
    out = nc.layer_norm(np.full(3, 4.2), np.array([5.0, 6.0, 7.0]), beta, eps=1e-5)
    np.testing.assert_allclose(out, beta, atol=1e-12)


def test_layer_norm_direct_formula():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    mu = sum(x) / 4
    var = sum((v - mu) ** 2 for v in x) / 4
    expected = [2.0 * (v - mu) / math.sqrt(var + 1e-5) + 1.0 for v in x]
    np.testing.assert_allclose(nc.layer_norm(x, np.full(4, 2.0), np.ones(4), 1e-5), expected, rtol=0, atol=1e-12)


def test_layer_norm_empty_axis():
    with pytest.raises(DimensionError):
        nc.layer_norm(np.zeros((2, 0)), np.zeros(0), np.zeros(0))


def test_layer_norm_rows_have_zero_mean():
    x = np.random.default_rng(0).normal(size=(50, 7)) * 100
    out = nc.layer_norm(x, np.ones(7), np.zeros(7), eps=0.0)
    assert np.abs(out.mean(axis=-1)).max() < 1e-12


@pytest.mark.parametrize("x,expected", [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5])])
def test_softmax_trivial(x, expected):
    np.testing.assert_allclose(nc.softmax(np.array(x)), expected, atol=1e-15)


def test_softmax_exponential_sum_oracle():
    z = sum(math.exp(v) for v in (1, 2, 3))
    expected = [math.exp(v) / z for v in (1, 2, 3)]
    out = nc.softmax(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    out = nc.softmax(np.array(xs))
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) < 1e-12


def test_gelu_values():
    assert nc.gelu(np.array(0.0)) == 0.0
    assert abs(float(nc.gelu(np.array(1.0))) - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15
    assert abs(float(nc.gelu(np.array(1.0))) - 0.84134) < 1e-5
    assert abs(float(nc.gelu(np.array(12.0))) - 12.0) < 1e-12


def test_mean_singleton_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 3, 2))
    assert np.array_equal(nc.mean_over_axis(x, 0), x[0])


def test_mean_midpoint():
    x = np.array([[[1, 3], [2, 4]], [[3, 5], [4, 6]]], dtype=float)
    assert nc.mean_over_axis(x, 0).tolist() == [[2, 4], [3, 5]]


def test_mean_matches_naive_loop():
    x = np.random.default_rng(5).normal(size=(3, 2, 2))
    naive = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            s = 0.0
            for t in range(3):
                s += x[t, i, j]
            naive[i, j] = s / 3
    assert np.array_equal(nc.mean_over_axis(x, 0), naive)
    np.testing.assert_allclose(nc.mean_over_axis(x, 0, order_free=True), naive, atol=1e-15)


def test_mean_order_free_is_permutation_invariant_and_exact_on_copies():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 4, 3))
    ref = nc.mean_over_axis(x, 0, order_free=True)
    for _ in range(10):
        assert np.array_equal(nc.mean_over_axis(x[rng.permutation(5)], 0, order_free=True), ref)
    v = rng.normal(size=(4, 3))
    assert np.array_equal(nc.mean_over_axis(np.stack([v] * 7), 0, order_free=True), v)


def test_mean_empty_axis():
    with pytest.raises(DimensionError):
        nc.mean_over_axis(np.zeros((0, 3)), 0)


# --- autodiff --------------------------------------------------------------


def test_backward_power_rule():
    g = nc.Graph()
    x = g.param(np.array(3.0), "x")
    assert nc.backward(g, x * x)["x"] == 6.0


def test_backward_matches_finite_differences_for_elementwise_product_sum():
    rng = np.random.default_rng(0)
    params = {"A": rng.normal(size=(2, 3)), "B": rng.normal(size=(2, 3))}
    assert nc.finite_diff_check(lambda p: nc.total(p["A"] * p["B"]), params, 1e-5) < 1e-9


def test_disconnected_parameter_gets_zero_gradient():
    g = nc.Graph()
    x = g.param(np.array([1.0, 2.0]), "x")
    g.param(np.ones((2, 2)), "unused")
    grads = nc.backward(g, nc.total(x * x))
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar_loss():
    g = nc.Graph()
    x = g.param(np.ones(3), "x")
    with pytest.raises(DimensionError):
        nc.backward(g, x * 2.0)


def test_graph_inputs_precede_nodes_and_replay_is_bit_exact():
    rng = np.random.default_rng(1)
    g = nc.Graph()
    w = g.param(rng.normal(size=(4, 4)), "w")
    x = g.const(rng.normal(size=(3, 4)))
    y = nc.layer_norm(nc.gelu(nc.matmul(x, w)), np.ones(4), np.zeros(4))
    nc.cross_entropy(nc.softmax(y), np.array([0, 1, 2]))
    for i, rec in enumerate(g.nodes):
        assert all(j < i for j in rec.inputs)
    for rec, val in zip(g.nodes, g.replay()):
        assert np.array_equal(rec.value, val)


def test_plain_and_graph_paths_agree_bitwise():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))

    def f(p):
        return nc.softmax(nc.gelu(nc.matmul(p["a"], p["b"])))

    g = nc.Graph()
    node = f(g.bind({"a": a, "b": b}))
    assert np.array_equal(node.value, f({"a": a, "b": b}))


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


PRIMITIVES = {
    "matmul": (lambda p: nc.total(nc.matmul(p["a"], p["b"]) * p["w"]),
               {"a": (3, 4), "b": (4, 2), "w": (3, 2)}),
    "batched_matmul": (lambda p: nc.total(nc.matmul(p["a"], p["b"]) * p["w"]),
                       {"a": (2, 3, 4), "b": (4, 2), "w": (2, 3, 2)}),
    "broadcast_matmul": (lambda p: nc.total(nc.matmul(p["a"], p["b"]) * p["w"]),
                         {"a": (3, 4), "b": (2, 4, 2), "w": (2, 3, 2)}),
    "layer_norm": (lambda p: nc.total(nc.layer_norm(p["x"], p["g"], p["b"]) * p["w"]),
                   {"x": (3, 5), "g": (5,), "b": (5,), "w": (3, 5)}),
    "softmax": (lambda p: nc.total(nc.softmax(p["x"]) * p["w"]), {"x": (2, 4), "w": (2, 4)}),
    "gelu": (lambda p: nc.total(nc.gelu(p["x"]) * p["w"]), {"x": (6,), "w": (6,)}),
    "mean": (lambda p: nc.total(nc.mean_over_axis(p["x"], 1) * p["w"]), {"x": (2, 3, 4), "w": (2, 4)}),
    "mean_order_free": (lambda p: nc.total(nc.mean_over_axis(p["x"], 0, order_free=True) * p["w"]),
                        {"x": (3, 4), "w": (4,)}),
    "concat_slice": (lambda p: nc.total(nc.concat([p["a"], p["b"]], axis=0)[1:4] * p["w"]),
                     {"a": (2, 3), "b": (3, 3), "w": (3, 3)}),
    "transpose_reshape": (lambda p: nc.total(nc.reshape(nc.swap_last(p["a"]), (6,)) * p["w"]),
                          {"a": (2, 3), "w": (6,)}),
    "pad_take": (lambda p: nc.total(nc.take(nc.pad(p["a"], ((1, 1), (2, 0))), (np.array([0, 1, 2, 1]), np.array([2, 3, 4, 3]))) * p["w"]),
                 {"a": (3, 3), "w": (4,)}),
    "cross_entropy": (lambda p: nc.cross_entropy(p["x"], np.array([1, 0, 2])), {"x": (3, 4)}),
    "stack": (lambda p: nc.total(nc.stack([p["a"], p["b"]], axis=1) * p["w"]), {"a": (2, 3), "b": (2, 3), "w": (2, 2, 3)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    f, shapes = PRIMITIVES[name]
    params = {k: _rand(s, seed + i) for i, (k, s) in enumerate(sorted(shapes.items()))}
    assert nc.finite_diff_check(f, params, 1e-5) < 1e-6


def test_finite_diff_affine_is_machine_precision():
    params = {"x": np.array([0.3, -1.2, 2.5])}
    assert nc.finite_diff_check(lambda p: nc.total(p["x"] * np.array([2.0, -3.0, 0.5])) + 1.0, params) < 1e-9


def test_finite_diff_constant_function():
    params = {"x": np.ones(3)}
    assert nc.finite_diff_check(lambda p: 4.0, params) == 0.0


def test_finite_diff_rejects_non_finite():
    params = {"x": np.ones(2)}
    with pytest.raises(NumericError):
        nc.finite_diff_check(lambda p: nc.total(p["x"] * np.inf), params)


def test_deep_composition_gradcheck():
    rng = np.random.default_rng(9)
    params = {f"w{i}": rng.normal(size=(4, 4)) * 0.5 for i in range(5)}
    x = rng.normal(size=(3, 4))

    def f(p):
        h = x
        for i in range(5):
            h = nc.layer_norm(nc.gelu(nc.matmul(h, p[f"w{i}"])), np.ones(4), np.zeros(4))
        return nc.cross_entropy(h, np.array([0, 1, 2]))

    assert nc.finite_diff_check(f, params) < 1e-4


# --- Adam ----------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = nc.adam_step(p, {"w": np.zeros(2)}, nc.AdamState())
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -7.0, 1e-3])}
    new, _ = nc.adam_step(p, g, nc.AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"] - new["w"], 1e-3 * np.sign(g["w"]), rtol=1e-4)


def test_adam_decreases_quadratic():
    p, state = {"x": np.array(3.0)}, nc.AdamState()
    f0 = float(p["x"] ** 2)
    for _ in range(2):
        p, state = nc.adam_step(p, {"x": 2 * p["x"]}, state, lr=0.1)
    assert float(p["x"] ** 2) < f0


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        nc.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, nc.AdamState())


# --- RNG -----------------------------------------------------------------


@pytest.mark.parametrize("ctr,key,expected", [
    ([0, 0, 0, 0], (0, 0), [0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8]),
    ([0xFFFFFFFF] * 4, (0xFFFFFFFF, 0xFFFFFFFF), [0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD]),
    ([0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344], (0xA4093822, 0x299F31D0),
     [0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1]),
])
def test_philox_known_answers(ctr, key, expected):
    assert philox4x32([ctr], key)[0].tolist() == expected


def test_rng_same_seed_same_stream():
    a, b = nc.Rng(42), nc.Rng(42)
    assert np.array_equal(a.uniform(size=100), b.uniform(size=100))
    assert np.array_equal(a.normal(size=10), b.normal(size=10))
    assert not np.array_equal(nc.Rng(43).uniform(size=100), nc.Rng(42).uniform(size=100))


def test_rng_spawn_is_independent_of_parent_position():
    a = nc.Rng(7)
    a.uniform(size=13)
    assert np.array_equal(a.spawn("x").uniform(size=5), nc.Rng(7).spawn("x").uniform(size=5))
    assert not np.array_equal(nc.Rng(7).spawn("x").uniform(size=5), nc.Rng(7).spawn("y").uniform(size=5))


def test_rng_distributions():
    r = nc.Rng(0)
    u = r.uniform(size=20000)
    assert 0 <= u.min() and u.max() < 1 and abs(u.mean() - 0.5) < 0.01
    z = r.normal(size=20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03
    t = r.truncated_normal(0.02, size=5000)
    assert np.abs(t).max() <= 0.04
    k = r.integers(3, 7, size=1000)
    assert set(np.unique(k)) == {3, 4, 5, 6}


# --- serialization ---------------------------------------------------------


def test_tensor_roundtrip_and_layout():
    x = np.arange(6, dtype=float).reshape(2, 3) / 7
    buf = io.BytesIO()
    nc.write_tensor(buf, x)
    raw = buf.getvalue()
    assert raw[:4] == b"STPN"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 2 and int.from_bytes(raw[20:28], "little") == 3
    assert len(raw) == 28 + 6 * 8
    buf.seek(0)
    assert np.array_equal(nc.read_tensor(buf), x)


def test_archive_roundtrip(tmp_path):
    tensors = {"encoder.patch.w": np.random.default_rng(0).normal(size=(4, 3)), "head.b": np.zeros(2),
               "scalar": np.array(1.5)}
    nc.write_archive(tmp_path / "a.ckpt", tensors)
    back = nc.read_archive(tmp_path / "a.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_tensor_rejects_bad_magic_and_truncation():
    with pytest.raises(FormatError):
        nc.read_tensor(io.BytesIO(b"XXXX" + bytes(20)))
    raw = io.BytesIO()
    nc.write_tensor(raw, np.ones(4))
    with pytest.raises(FormatError):
        nc.read_tensor(io.BytesIO(raw.getvalue()[:-3]))


def test_kernels_are_pure():
    x = np.random.default_rng(0).normal(size=(4, 6))
    before = x.copy()
    kernels.layer_norm(x, np.ones(6), np.zeros(6))
    kernels.softmax(x)
    assert np.array_equal(x, before)

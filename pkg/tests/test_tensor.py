import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from must import tensor as tz
from must.errors import DataError
from must.tensor import Tensor, grad_check, parameter


def rng(seed=0):
    return np.random.default_rng(seed)


def rand(shape, seed=0, scale=1.0):
    return parameter(rng(seed).standard_normal(shape) * scale)


# ---------------------------------------------------------------------------
# basic mechanics


def test_tensor_wraps_float64():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.shape == (2, 2)
    assert t.size == 4


def test_backward_requires_scalar():
    t = rand((2, 3))
    with pytest.raises(ValueError):
        tz.add(t, t).backward()


def test_item_requires_scalar():
    with pytest.raises(ValueError):
        rand((2, 2)).item()


def test_backward_accumulates_through_shared_node():
    # y = x*x + x*x uses x twice; dy/dx = 4x
    x = parameter(np.array([[3.0]]))
    y = tz.add(tz.mul(x, x), tz.mul(x, x))
    y.backward()
    assert x.grad[0, 0] == pytest.approx(12.0)


def test_no_grad_builds_no_graph():
    x = rand((2, 2))
    with tz.no_grad():
        y = tz.mul(x, x)
    assert y._parents == ()
    assert not y.requires_grad


def test_grad_disabled_restored_after_exception():
    x = rand((2, 2))
    with pytest.raises(RuntimeError):
        with tz.no_grad():
            raise RuntimeError("boom")
    y = tz.mul(x, x)
    assert y.requires_grad


def test_deep_chain_does_not_hit_recursion_limit():
    x = parameter(np.array([[1.0]]))
    y = x
    for _ in range(5000):
        y = tz.scale(y, 1.0)
    tz.sum_all(y).backward()
    assert x.grad[0, 0] == 1.0


# ---------------------------------------------------------------------------
# per-op gradient checks


def check_op(build, params, h=1e-5):
    err = grad_check(build, params, h=h)
    assert err < 1e-5, f"gradient error {err}"


def test_grad_add_sub_mul_scale():
    a, b = rand((3, 4), 1), rand((3, 4), 2)
    check_op(lambda: tz.sum_all(tz.mul(tz.add(a, b), tz.sub(a, b))), [a, b])
    check_op(lambda: tz.sum_all(tz.scale(a, -2.5)), [a])


def test_grad_add_rowvec():
    x, v = rand((4, 3), 3), rand(3, 4)
    check_op(lambda: tz.sum_all(tz.mul(tz.add_rowvec(x, v), x)), [x, v])


def test_grad_matmul_transpose():
    a, b = rand((3, 5), 5), rand((5, 2), 6)
    check_op(lambda: tz.sum_all(tz.matmul(a, b)), [a, b])
    check_op(lambda: tz.sum_all(tz.matmul(tz.transpose(b), tz.transpose(a))), [a, b])


def test_grad_concat_and_slice():
    a, b = rand((2, 3), 7), rand((3, 3), 8)

    def build():
        cat = tz.concat_rows([a, b])
        piece = tz.slice_rows(cat, 1, 4)
        return tz.sum_all(tz.mul(piece, piece))

    check_op(build, [a, b])

    c, d = rand((3, 2), 9), rand((3, 4), 10)

    def build_cols():
        cat = tz.concat_cols([c, d])
        return tz.sum_all(tz.mul(tz.slice_cols(cat, 1, 5), tz.slice_cols(cat, 0, 4)))

    check_op(build_cols, [c, d])


def test_grad_softmax_mean():
    x = rand((4, 5), 11)
    w = rand((5, 5), 12)
    check_op(lambda: tz.mean_all(tz.mul(tz.softmax_rows(x), tz.matmul(x, w))), [x, w])


def test_grad_layer_norm():
    x = rand((4, 6), 13)
    g, b = parameter(rng(14).random(6) + 0.5), rand(6, 15)
    check_op(lambda: tz.sum_all(tz.mul(tz.layer_norm(x, g, b), x)), [x, g, b])


def test_grad_gelu():
    x = rand((3, 4), 16)
    check_op(lambda: tz.sum_all(tz.mul(tz.gelu(x), x)), [x])


def test_grad_full_attention_block():
    """Composite: softmax(QK^T/sqrt(d)) V with layer norm, like the model uses."""
    x = rand((5, 4), 17, scale=0.5)
    wq, wk, wv = rand((4, 4), 18), rand((4, 4), 19), rand((4, 4), 20)
    g, b = parameter(np.ones(4)), parameter(np.zeros(4))

    def build():
        h = tz.layer_norm(x, g, b)
        q, k, v = tz.matmul(h, wq), tz.matmul(h, wk), tz.matmul(h, wv)
        att = tz.softmax_rows(tz.scale(tz.matmul(q, tz.transpose(k)), 0.5))
        return tz.mean_all(tz.matmul(att, v))

    check_op(build, [x, wq, wk, wv, g, b])


def test_grad_check_rejects_bad_h():
    x = rand((2, 2))
    with pytest.raises(ValueError):
        grad_check(lambda: tz.sum_all(x), [x], h=1e-2)


def test_grad_check_flags_wrong_gradient():
    x = rand((2, 2), 21)

    def wrong(g):
        x._accum(np.ones_like(x.data) * 99.0)

    def build():
        return tz._from_op(np.float64(x.data.sum()), (x,), wrong)

    assert grad_check(build, [x]) > 1e-5


# ---------------------------------------------------------------------------
# softmax behavior


def test_softmax_rows_stochastic():
    x = Tensor(rng(22).standard_normal((6, 9)) * 50)
    s = tz.softmax_rows(x).data
    assert np.all(s > 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_extreme_logits_no_overflow():
    x = Tensor(np.array([[1e4, 0.0, -1e4], [500.0, 500.0, 500.0]]))
    s = tz.softmax_rows(x).data
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(s[1], 1 / 3, atol=1e-12)


def test_softmax_shift_invariance():
    x = rng(23).standard_normal((3, 5))
    a = tz.softmax_rows(Tensor(x)).data
    b = tz.softmax_rows(Tensor(x + 123.456)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_capture_softmax_sees_every_call():
    x = Tensor(rng(24).standard_normal((3, 4)))
    with tz.capture_softmax() as seen:
        tz.softmax_rows(x)
        tz.softmax_rows(tz.scale(x, 2.0))
    assert len(seen) == 2
    for s in seen:
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    tz.softmax_rows(x)
    assert len(seen) == 2  # capture stops at context exit


def test_capture_softmax_nested_sinks():
    x = Tensor(np.zeros((1, 2)))
    with tz.capture_softmax() as outer:
        tz.softmax_rows(x)
        with tz.capture_softmax() as inner:
            tz.softmax_rows(x)
    assert len(outer) == 2 and len(inner) == 1


# ---------------------------------------------------------------------------
# layer norm behavior


def test_layer_norm_rows_standardized():
    x = Tensor(rng(25).standard_normal((5, 8)) * 7 + 3)
    g, b = parameter(np.ones(8)), parameter(np.zeros(8))
    y = tz.layer_norm(x, g, b).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)


def test_layer_norm_affine_applied():
    x = Tensor(rng(26).standard_normal((4, 3)))
    g = parameter(np.array([2.0, 3.0, 4.0]))
    b = parameter(np.array([1.0, -1.0, 0.5]))
    plain = tz.layer_norm(x, parameter(np.ones(3)), parameter(np.zeros(3))).data
    scaled = tz.layer_norm(x, g, b).data
    np.testing.assert_allclose(scaled, plain * g.data + b.data, atol=1e-12)


# ---------------------------------------------------------------------------
# gelu / dropout


def test_gelu_reference_values():
    # reference values of x * Phi(x) under the tanh approximation
    x = Tensor(np.array([[0.0, 1.0, -1.0, 3.0]]))
    y = tz.gelu(x).data[0]
    assert y[0] == 0.0
    assert y[1] == pytest.approx(0.841192, abs=1e-5)
    assert y[2] == pytest.approx(-0.158808, abs=1e-5)
    assert y[3] == pytest.approx(2.996363, abs=1e-5)


def test_dropout_zero_rate_is_identity():
    x = rand((3, 3), 27)
    y = tz.dropout(x, 0.0, rng(0))
    np.testing.assert_array_equal(y.data, x.data)


def test_dropout_scales_survivors():
    x = parameter(np.ones((100, 100)))
    y = tz.dropout(x, 0.4, rng(1)).data
    kept = y != 0
    assert 0.55 < kept.mean() < 0.65
    np.testing.assert_allclose(y[kept], 1.0 / 0.6)


def test_dropout_backward_masks_gradient():
    x = parameter(np.ones((10, 10)))
    y = tz.dropout(x, 0.5, rng(2))
    tz.sum_all(y).backward()
    mask = y.data != 0
    np.testing.assert_allclose(x.grad[mask], 2.0)
    np.testing.assert_allclose(x.grad[~mask], 0.0)


# ---------------------------------------------------------------------------
# shape errors


def test_matmul_shape_error_names_both_operands():
    with pytest.raises(ValueError, match=r"\(2, 3\) and \(4, 2\)"):
        tz.matmul(rand((2, 3)), rand((4, 2)))


def test_concat_rows_width_mismatch():
    with pytest.raises(ValueError):
        tz.concat_rows([rand((2, 3)), rand((2, 4))])


def test_slice_rows_bounds():
    with pytest.raises(ValueError):
        tz.slice_rows(rand((3, 3)), 2, 5)


# ---------------------------------------------------------------------------
# property: linearity of matmul gradient


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.integers(0, 10**6))
def test_matmul_grad_matches_closed_form(n, k, m, seed):
    g = np.random.default_rng(seed)
    a = parameter(g.standard_normal((n, k)))
    b = parameter(g.standard_normal((k, m)))
    tz.sum_all(tz.matmul(a, b)).backward()
    ones = np.ones((n, m))
    np.testing.assert_allclose(a.grad, ones @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ ones, atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = {
        "w": rng(30).standard_normal((3, 4)),
        "b": np.zeros(7),
        "scalar": np.array(2.5),
        "cube": rng(31).random((2, 3, 4)),
    }
    path = tmp_path / "model.ckpt"
    tz.save_checkpoint(path, params)
    back = tz.load_checkpoint(path)
    assert sorted(back) == sorted(params)
    for name, arr in params.items():
        assert back[name].dtype == np.float64
        np.testing.assert_array_equal(back[name], np.asarray(arr, dtype=np.float64))


def test_checkpoint_accepts_tensors(tmp_path):
    path = tmp_path / "t.ckpt"
    tz.save_checkpoint(path, {"x": parameter(np.eye(3))})
    np.testing.assert_array_equal(tz.load_checkpoint(path)["x"], np.eye(3))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DataError, match="magic"):
        tz.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "trunc.ckpt"
    tz.save_checkpoint(path, {"w": np.ones((4, 4))})
    data = path.read_bytes()
    path.write_bytes(data[:-9])
    with pytest.raises(DataError):
        tz.load_checkpoint(path)


def test_checkpoint_deterministic_bytes(tmp_path):
    params = {"a": rng(32).random((5, 5)), "z": rng(33).random(3)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    tz.save_checkpoint(p1, params)
    tz.save_checkpoint(p2, dict(reversed(list(params.items()))))
    assert p1.read_bytes() == p2.read_bytes()  # name-sorted on disk

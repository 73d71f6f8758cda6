import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgrade.numcore import (NumericalError, Rng, ShapeError, add, check_finite, finite_diff_grad,
                            grad_rel_error, load_tensor, load_tensors, matmul, mul, reduce_mean,
                            reduce_var, relu, rng_uniform, save_tensor, save_tensors, sigmoid,
                            take_slice, tensor_from_bytes, tensor_to_bytes, transpose)


def test_matmul_identity():
    a = Rng(0).normal((3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_precision_mismatch_rejected():
    with pytest.raises(TypeError):
        add(np.ones(3, dtype=np.float32), np.ones(3))


def test_trailing_broadcast_only():
    np.testing.assert_array_equal(add(np.ones((2, 3)), np.arange(3.0)), np.ones((2, 3)) + np.arange(3.0))
    with pytest.raises(ShapeError):
        mul(np.ones((2, 3)), np.ones(2))


def test_non_finite_output_is_an_error():
    with pytest.raises(NumericalError):
        mul(np.array([1e308]), np.array([1e10]))
    with pytest.raises(NumericalError, match="index"):
        check_finite(np.array([0.0, np.nan]))


def test_sigmoid_and_relu():
    assert sigmoid(np.array(0.0)) == 0.5
    assert np.all(np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))))
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_transpose_slice_reduce():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(transpose(x), x.T)
    np.testing.assert_array_equal(take_slice(x, 1, 1, 3), x[:, 1:3])
    with pytest.raises(ShapeError):
        take_slice(x, 1, 2, 5)
    assert reduce_mean(x) == 2.5
    assert np.isclose(reduce_var(np.array([1.0, -1.0])), 1.0)


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float(np.sum(x ** 2)), np.array([3.0]), eps=1e-5)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_constant_is_zero():
    g = finite_diff_grad(lambda x: 4.0, np.ones((2, 2)))
    np.testing.assert_array_equal(g, 0.0)


def test_finite_diff_non_finite_raises():
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda x: float(np.log(x[0])), np.array([0.0]))


def test_grad_rel_error_floor():
    assert grad_rel_error(np.array([1.0, 0.0]), np.array([1.0, 1e-12])) < 1e-6


def test_rng_clone_reproducible():
    a = rng_uniform(Rng(0).clone(), 0.0, 1.0, (5,))
    b = rng_uniform(Rng(0).clone(), 0.0, 1.0, (5,))
    np.testing.assert_array_equal(a, b)


def test_rng_split_independent_of_sibling_order():
    r = Rng(3)
    first = r.split(1).normal(4)
    r2 = Rng(3)
    r2.split(0).normal(100)
    np.testing.assert_array_equal(first, r2.split(1).normal(4))


def test_rng_uniform_law_of_large_numbers():
    u = rng_uniform(Rng(0), 0.0, 1.0, (100_000,))
    assert abs(u.mean() - 0.5) < 0.01
    assert u.min() >= 0.0 and u.max() < 1.0


def test_rng_uniform_degenerate_range():
    with pytest.raises(ValueError):
        rng_uniform(Rng(0), 1.0, 1.0, (3,))


@given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.sampled_from([np.float32, np.float64]))
@settings(max_examples=50, deadline=None)
def test_tensor_roundtrip(shape, dtype):
    x = Rng(len(shape)).normal(tuple(shape), dtype=dtype)
    y, end = tensor_from_bytes(tensor_to_bytes(x))
    assert end == len(tensor_to_bytes(x))
    assert y.dtype == x.dtype and y.shape == x.shape
    np.testing.assert_array_equal(x, y)


def test_tensor_format_layout():
    blob = tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert blob[:4] == b"MGT1"
    assert blob[4] == 0 and blob[5] == 2
    assert int.from_bytes(blob[6:14], "little") == 1
    assert int.from_bytes(blob[14:22], "little") == 2
    assert np.frombuffer(blob[22:], "<f4").tolist() == [1.0, 2.0]


def test_tensor_errors_carry_offset():
    blob = tensor_to_bytes(np.ones(4))
    with pytest.raises(ValueError, match="offset"):
        tensor_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="truncated"):
        tensor_from_bytes(blob[:-3])
    with pytest.raises(TypeError):
        tensor_to_bytes(np.ones(2, dtype=np.int32))


def test_tensor_files(tmp_path):
    x = np.arange(6.0).reshape(2, 3)
    save_tensor(tmp_path / "a.mgt", x)
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.mgt"), x)
    save_tensors(tmp_path / "b.mgt", [x, x[0].astype(np.float32)])
    got = load_tensors(tmp_path / "b.mgt")
    assert len(got) == 2 and got[1].dtype == np.float32

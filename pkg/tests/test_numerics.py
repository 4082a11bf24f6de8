import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from winoq.numerics import (
    FLOAT64,
    RATIONAL,
    Mat,
    ShapeError,
    Tensor4,
    gemm,
    im2col_lower,
    im2row_lower,
    rational,
    rational_array,
    sandwich,
    transpose,
)
from winoq.transforms import make_transform


def gemm_reference(a, b):
    """Independent triple-loop oracle."""
    rows, inner, cols = a.shape[0], a.shape[1], b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            for k in range(inner):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestGemm:
    def test_identity(self):
        x = Mat.from_rows([[1, 2], [3, 4]])
        out = gemm(Mat.identity(2), x)
        assert np.array_equal(out.data, x.data)

    def test_projector(self):
        p = Mat.from_rows([[1, 0], [0, 0]])
        x = Mat.from_rows([[5, 6], [7, 8]])
        assert np.array_equal(gemm(p, x).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self, rng):
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (4, 2))
        got = gemm(Mat(a), Mat(b)).data
        np.testing.assert_allclose(got, gemm_reference(a, b), rtol=1e-13)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            gemm(Mat(np.zeros((2, 3))), Mat(np.zeros((2, 2))))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-9, 9), min_size=27, max_size=27))
    def test_associative_exact_in_rational(self, values):
        vals = [rational(v, 3) for v in values]
        a = Mat(rational_array(np.array(vals[:9], dtype=object).reshape(3, 3)))
        b = Mat(rational_array(np.array(vals[9:18], dtype=object).reshape(3, 3)))
        c = Mat(rational_array(np.array(vals[18:], dtype=object).reshape(3, 3)))
        left = gemm(gemm(a, b), c)
        right = gemm(a, gemm(b, c))
        assert np.array_equal(left.data, right.data)


class TestSandwich:
    def test_identity(self, rng):
        x = Mat(rng.uniform(-1, 1, (3, 3)))
        assert np.array_equal(sandwich(Mat.identity(3), x).data, x.data)

    def test_scaling(self, rng):
        x = Mat(rng.uniform(-1, 1, (3, 3)))
        two_i = Mat(2.0 * np.eye(3))
        np.testing.assert_allclose(sandwich(two_i, x).data, 4.0 * x.data, rtol=1e-15)

    def test_matches_two_gemms(self, rng):
        bt = make_transform(2, 3).to_float().Bt
        d = Mat(rng.uniform(-1, 1, (4, 4)))
        via_gemm = gemm(gemm(bt, d), transpose(bt))
        np.testing.assert_allclose(sandwich(bt, d).data, via_gemm.data, rtol=1e-13)

    def test_exact_composition_in_rational(self, rng):
        bt = make_transform(2, 3).Bt
        d = Mat(rational_array(rng.integers(-9, 9, (4, 4))))
        via_gemm = gemm(gemm(bt, d), transpose(bt))
        assert np.array_equal(sandwich(bt, d).data, via_gemm.data)

    def test_non_square_x_rejected(self):
        with pytest.raises(ShapeError):
            sandwich(Mat(np.eye(3)), Mat(np.zeros((3, 2))))


class TestIm2Row:
    def test_single_window_is_flattened_input(self):
        x = Tensor4.from_array(np.arange(9.0).reshape(1, 1, 3, 3))
        rows = im2row_lower(x, 3, 3, 1, 0)
        assert rows.data.shape == (1, 9)
        assert np.array_equal(rows.data[0], np.arange(9.0))

    def test_four_windows_manual(self):
        x = Tensor4.from_array(np.arange(16.0).reshape(1, 1, 4, 4))
        rows = im2row_lower(x, 3, 3, 1, 0)
        assert rows.data.shape == (4, 9)
        img = x.data[0, 0]
        expected = [img[i:i + 3, j:j + 3].reshape(-1) for i in range(2) for j in range(2)]
        assert np.array_equal(rows.data, np.array(expected))

    def test_padding_zero_counts(self):
        # 3x3 input, k=3, pad=1: corner windows overlap 5 padded cells
        # (2k - 1), edge windows 3, center 0.
        x = Tensor4.from_array(1.0 + np.arange(9.0).reshape(1, 1, 3, 3))
        rows = im2row_lower(x, 3, 3, 1, 1)
        assert rows.data.shape == (9, 9)
        zero_counts = (rows.data == 0).sum(axis=1).reshape(3, 3)
        assert zero_counts[0, 0] == zero_counts[0, 2] == 5
        assert zero_counts[2, 0] == zero_counts[2, 2] == 5
        assert zero_counts[0, 1] == zero_counts[1, 0] == 3
        assert zero_counts[1, 1] == 0

    def test_non_integral_output_rejected(self):
        x = Tensor4.from_array(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ShapeError):
            im2row_lower(x, 3, 3, 2, 0)

    def test_im2col_is_transpose(self, rng):
        x = Tensor4(rng.uniform(-1, 1, (2, 3, 5, 5)))
        rows = im2row_lower(x, 3, 3, 1, 1)
        cols = im2col_lower(x, 3, 3, 1, 1)
        assert np.array_equal(cols.data, rows.data.T)


class TestContainers:
    def test_tensor4_invariants(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((2, 3, 4)))

    def test_rational_field_tag(self):
        t = Tensor4.from_array([[[[1]]]], field=RATIONAL)
        assert t.field == RATIONAL
        assert Tensor4.from_array([[[[1.0]]]]).field == FLOAT64

    def test_float32_storage_rounds_at_boundaries(self):
        # pi is not float32-representable; a float32-storage gemm snaps it
        a = Mat.from_rows([[np.pi]], storage="float32")
        b = Mat.from_rows([[1.0]])
        out = gemm(a, b)
        assert out.storage == "float32"
        assert out.data[0, 0] == np.float64(np.float32(np.pi))
        assert out.data[0, 0] != np.pi

    def test_rational_helpers(self):
        q = rational("-3/6")
        assert q.numerator == -1 and q.denominator == 2
        assert rational(0) == 0 and rational(0).denominator == 1

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caver import oracles
from caver.errors import DimensionError, NonFiniteError
from caver.instrument import probe
from caver.tensor import (
    add,
    as_tensor,
    batch_norm_infer,
    bilinear_upsample,
    conv2d,
    make_rng,
    matmul,
    relu,
    scale,
    sigmoid,
    softmax_rows,
    transpose2d,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out, [[3, 4], [5, 6]])

    def test_inner_product(self):
        assert np.array_equal(matmul([[1.0, 2.0]], [[3.0], [4.0]]), [[11.0]])

    def test_matches_triple_loop_exactly(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        assert np.array_equal(matmul(a, b), oracles.matmul(a, b))

    def test_inner_extent_mismatch(self):
        with pytest.raises(DimensionError, match="inner"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            matmul([[np.nan]], [[1.0]])

    def test_counts_multiply_adds(self, rng):
        with probe() as pr:
            matmul(rng.standard_normal((5, 7)), rng.standard_normal((7, 3)))
        assert pr.total_macs == 5 * 7 * 3

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_bit_exact_against_loops(self, m, k, p, seed):
        r = make_rng(seed)
        a, b = r.standard_normal((m, k)), r.standard_normal((k, p))
        assert np.array_equal(matmul(a, b), oracles.matmul(a, b))


class TestSoftmax:
    def test_equal_logits_uniform(self):
        assert np.allclose(softmax_rows([[0.0, 0.0, 0.0]]), 1 / 3, rtol=0, atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 1.0 and out[0, 1] < 1e-300

    def test_extended_precision_oracle(self, rng):
        x = rng.standard_normal((3, 4)) * 5
        mpmath.mp.dps = 50
        for i in range(3):
            exps = [mpmath.exp(mpmath.mpf(float(v))) for v in x[i]]
            total = mpmath.fsum(exps)
            want = [float(e / total) for e in exps]
            assert np.max(np.abs(softmax_rows(x)[i] - want)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=finite))
    def test_rows_are_distributions(self, x):
        out = softmax_rows(x)
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
    def test_shift_invariant(self, x, c):
        assert np.allclose(softmax_rows(x), softmax_rows(x + c), atol=1e-12)


class TestTranspose:
    def test_small(self):
        assert np.array_equal(transpose2d([[1.0, 2.0], [3.0, 4.0]]), [[1, 3], [2, 4]])

    def test_involution(self, rng):
        x = rng.standard_normal((3, 5))
        assert np.array_equal(transpose2d(transpose2d(x)), x)

    def test_row_to_column(self):
        assert transpose2d(np.ones((1, 6))).shape == (6, 1)


class TestConv2d:
    def test_pointwise_identity(self, rng):
        x = rng.standard_normal((4, 5, 3))
        kernel = np.eye(3).reshape(3, 3, 1, 1)
        assert np.array_equal(conv2d(x, kernel, np.zeros(3)), x)

    def test_box_sum_interior(self, rng):
        x = rng.standard_normal((5, 5, 1))
        out = conv2d(x, np.ones((1, 1, 3, 3)), np.zeros(1))
        assert math.isclose(out[2, 2, 0], x[1:4, 1:4, 0].sum(), abs_tol=1e-12)

    def test_matches_loop_oracle_exactly(self, rng):
        x = rng.standard_normal((5, 5, 2))
        kernel = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        assert np.array_equal(conv2d(x, kernel, bias), oracles.conv2d(x, kernel, bias))

    def test_zero_padding_at_borders(self):
        out = conv2d(np.ones((3, 3, 1)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out[0, 0, 0] == 4 and out[0, 1, 0] == 6 and out[1, 1, 0] == 9

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(np.ones((3, 3, 2)), np.ones((1, 3, 1, 1)), np.zeros(1))

    def test_unsupported_kernel_size(self):
        with pytest.raises(DimensionError):
            conv2d(np.ones((3, 3, 1)), np.ones((1, 1, 5, 5)), np.zeros(1))

    def test_counts_multiply_adds(self):
        with probe() as pr:
            conv2d(np.ones((4, 6, 2)), np.ones((3, 2, 3, 3)), np.zeros(3))
        assert pr.total_macs == 4 * 6 * 3 * 2 * 9


class TestBatchNorm:
    def test_identity_params(self, rng):
        x = rng.standard_normal((3, 3, 4))
        out = batch_norm_infer(x, np.zeros(4), np.ones(4), np.ones(4), np.zeros(4), eps=1e-12)
        assert np.max(np.abs(out - x)) <= 1e-9

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.standard_normal(4)
        out = batch_norm_infer(rng.standard_normal((2, 5, 4)), rng.standard_normal(4), np.ones(4), np.zeros(4), beta)
        assert np.array_equal(out, np.broadcast_to(beta, out.shape))

    def test_matches_scalar_formula(self, rng):
        x = rng.standard_normal((3, 4, 5))
        mean, gamma, beta = (rng.standard_normal(5) for _ in range(3))
        var = rng.uniform(0.1, 2.0, 5)
        out = batch_norm_infer(x, mean, var, gamma, beta)
        assert np.max(np.abs(out - oracles.batch_norm(x, mean, var, gamma, beta, 1e-5))) <= 1e-12

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            batch_norm_infer(np.ones((1, 1, 1)), [0.0], [-1.0], [1.0], [0.0])


class TestBilinear:
    def test_factor_one_identity(self, rng):
        x = rng.standard_normal((3, 4, 2))
        assert np.array_equal(bilinear_upsample(x, 1), x)

    def test_constant_preserved(self):
        out = bilinear_upsample(np.full((3, 3, 1), 7.0), 2)
        assert out.shape == (6, 6, 1) and np.all(out == 7.0)

    def test_ramp_matches_pixel_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1)
        assert np.max(np.abs(bilinear_upsample(x, 2) - oracles.bilinear(x, 2))) <= 1e-12

    def test_random_matches_pixel_oracle(self, rng):
        x = rng.standard_normal((3, 5, 2))
        assert np.max(np.abs(bilinear_upsample(x, 4) - oracles.bilinear(x, 4))) <= 1e-12

    def test_output_within_input_range(self, rng):
        x = rng.standard_normal((4, 4, 1))
        out = bilinear_upsample(x, 2)
        assert out.min() >= x.min() and out.max() <= x.max()


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])

    def test_sigmoid_half_at_zero(self):
        assert sigmoid(np.zeros(1))[0] == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        out = sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(out)) and out[0] >= 0 and out[1] == 1.0

    def test_add_zero(self, rng):
        x = rng.standard_normal((2, 3))
        assert np.array_equal(add(x, np.zeros_like(x)), x)

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            add(np.ones((2, 3)), np.ones((3, 2)))

    def test_scale(self):
        assert np.array_equal(scale(np.array([1.0, -2.0]), 3.0), [3.0, -6.0])


class TestValidation:
    def test_rank_check(self):
        with pytest.raises(DimensionError):
            as_tensor(np.ones(3), rank=2)

    def test_zero_extent_rejected(self):
        with pytest.raises(DimensionError):
            as_tensor(np.ones((0, 3)))

    def test_rng_is_reproducible(self):
        assert np.array_equal(make_rng(5).standard_normal(8), make_rng(5).standard_normal(8))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caver import oracles
from caver.errors import DimensionError, PatchError
from caver.ptre import PatchTokenSequence, TokenSequence, flatten, from_patch_tokens, to_patch_tokens, unflatten
from caver.tensor import make_rng


class TestFlatten:
    def test_roundtrip(self, rng):
        x = rng.standard_normal((4, 6, 3))
        assert np.array_equal(unflatten(flatten(x)), x)

    def test_single_pixel(self):
        seq = flatten(np.ones((1, 1, 5)))
        assert seq.n_tokens == 1 and seq.dim == 5

    def test_raster_order(self):
        seq = flatten(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
        assert seq.data[:, 0].tolist() == [1, 2, 3, 4]

    def test_geometry_must_match(self):
        with pytest.raises(DimensionError):
            TokenSequence(np.ones((6, 2)), 2, 2)


class TestPatchTokens:
    def test_p1_equals_pixel_tokens(self, rng):
        x = rng.standard_normal((3, 5, 2))
        assert np.array_equal(to_patch_tokens(x, 1).data, flatten(x).data)

    def test_layout(self):
        x = np.arange(16, dtype=float).reshape(4, 4, 1)
        seq = to_patch_tokens(x, 2)
        assert seq.data.shape == (4, 4)
        assert seq.data[0].tolist() == [x[0, 0, 0], x[0, 1, 0], x[1, 0, 0], x[1, 1, 0]]
        assert seq.data[1].tolist() == [2, 3, 6, 7]

    def test_channels_minor_inside_patch(self):
        x = np.arange(8, dtype=float).reshape(2, 2, 2)
        assert to_patch_tokens(x, 2).data[0].tolist() == list(range(8))

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((6, 4, 3))
        want = oracles.patch_tokens(flatten(x).data, 6, 4, 2)
        assert np.array_equal(to_patch_tokens(x, 2).data, np.array(want))

    def test_random_roundtrip_p4(self, rng):
        x = rng.standard_normal((8, 8, 4))
        assert np.array_equal(from_patch_tokens(to_patch_tokens(x, 4)), x)

    def test_single_patch_is_whole_map(self, rng):
        x = rng.standard_normal((4, 4, 2))
        seq = to_patch_tokens(x, 4)
        assert seq.n_patches == 1 and np.array_equal(seq.data[0], x.reshape(-1))
        assert np.array_equal(from_patch_tokens(seq), x)

    def test_inverse_of_layout_example(self):
        x = np.arange(16, dtype=float).reshape(4, 4, 1)
        assert np.array_equal(from_patch_tokens(to_patch_tokens(x, 2)), x)

    def test_indivisible_extent(self):
        with pytest.raises(PatchError, match="not divisible"):
            to_patch_tokens(np.ones((6, 4, 1)), 4)

    def test_patch_sequence_validates(self):
        with pytest.raises(DimensionError):
            PatchTokenSequence(np.ones((3, 4)), 2, 4, 4)

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from([2, 4, 8]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, p, bh, bw, d, seed):
        x = make_rng(seed).standard_normal((p * bh, p * bw, d))
        assert np.array_equal(from_patch_tokens(to_patch_tokens(x, p)), x)

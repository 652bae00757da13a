import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isorec.core import (
    Image2D,
    RandomSource,
    Volume3D,
    canonical_from_uint8,
    extract_axial_slice,
    gaussian_noise,
    insert_axial_slice,
    uint8_from_canonical,
)


class TestGridTypes:
    def test_image_shape_properties(self):
        img = Image2D(np.zeros((3, 5)))
        assert (img.height, img.width) == (3, 5)
        assert img.shape == (3, 5)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Image2D(np.array([[1.0, np.nan]]))
        with pytest.raises(ValueError):
            Volume3D(np.full((2, 2, 2), np.inf))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            Image2D(np.zeros(4))
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2)))

    def test_data_is_read_only(self):
        img = Image2D(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            img.data[0, 0] = 1.0

    def test_canonical_uint8_round_trip(self):
        assert canonical_from_uint8(np.array(255)) == pytest.approx(1.0)
        assert canonical_from_uint8(np.array(0)) == pytest.approx(-1.0)
        levels = np.arange(256, dtype=np.uint8)
        assert np.array_equal(uint8_from_canonical(canonical_from_uint8(levels)), levels)

    def test_uint8_clamps_out_of_range(self):
        out = uint8_from_canonical(np.array([-2.0, 2.0]))
        assert out.tolist() == [0, 255]


class TestRandomSource:
    def test_same_seed_and_stream_replays(self):
        a = gaussian_noise(RandomSource(7, 0), (16, 16))
        b = gaussian_noise(RandomSource(7, 0), (16, 16))
        assert np.array_equal(a.data, b.data)

    def test_standard_normal_moments(self):
        draws = RandomSource(123, 0).normal(100_000)
        assert abs(draws.mean()) < 0.02
        assert abs(draws.var() - 1.0) < 0.02

    def test_streams_are_uncorrelated(self):
        a = RandomSource(11, 0).normal(100_000)
        b = RandomSource(11, 1).normal(100_000)
        r = np.corrcoef(a, b)[0, 1]
        assert abs(r) < 0.01

    def test_split_matches_fresh_source(self):
        src = RandomSource(5, 0)
        src.normal(10)
        forked = src.split(3)
        assert np.array_equal(forked.normal(4), RandomSource(5, 3).normal(4))

    def test_noise_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            gaussian_noise(RandomSource(0), (0, 4))
        with pytest.raises(ValueError):
            gaussian_noise(RandomSource(0), (4, -1))


class TestAxialSlices:
    def test_single_voxel(self):
        vol = Volume3D(np.array([[[0.25]]]))
        assert extract_axial_slice(vol, "xz", 0).data[0, 0] == 0.25
        assert extract_axial_slice(vol, "yz", 0).data[0, 0] == 0.25

    def test_rows_run_along_z(self):
        data = np.zeros((4, 3, 2))
        for z in range(4):
            data[z] = z
        img = extract_axial_slice(Volume3D(data), "xz", 0)
        assert img.shape == (4, 2)
        for z in range(4):
            assert np.all(img.data[z] == z)

    def test_round_trip_is_identity(self):
        vol = Volume3D(RandomSource(3, 0).normal((4, 5, 6)))
        for axis, bound in (("xz", 5), ("yz", 6)):
            for index in range(bound):
                replaced = insert_axial_slice(vol, axis, index, extract_axial_slice(vol, axis, index))
                assert np.array_equal(replaced.data, vol.data)

    def test_insert_changes_only_the_addressed_plane(self):
        vol = Volume3D(np.zeros((3, 4, 5)))
        img = Image2D(np.ones((3, 5)))
        out = insert_axial_slice(vol, "xz", 2, img)
        assert np.all(out.data[:, 2, :] == 1.0)
        mask = np.ones((3, 4, 5), dtype=bool)
        mask[:, 2, :] = False
        assert np.all(out.data[mask] == 0.0)
        assert np.all(vol.data == 0.0)

    def test_index_out_of_range(self):
        vol = Volume3D(np.zeros((2, 3, 4)))
        with pytest.raises(ValueError):
            extract_axial_slice(vol, "xz", 3)
        with pytest.raises(ValueError):
            extract_axial_slice(vol, "yz", -1)
        with pytest.raises(ValueError):
            extract_axial_slice(vol, "xy", 0)

    def test_insert_shape_mismatch(self):
        vol = Volume3D(np.zeros((2, 3, 4)))
        with pytest.raises(ValueError):
            insert_axial_slice(vol, "xz", 0, Image2D(np.zeros((2, 3))))

    @given(
        dims=st.tuples(
            st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)
        ),
        axis=st.sampled_from(["xz", "yz"]),
        seed=st.integers(0, 100),
        data=st.data(),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, dims, axis, seed, data):
        vol = Volume3D(RandomSource(seed, 0).normal(dims))
        bound = vol.height if axis == "xz" else vol.width
        index = data.draw(st.integers(0, bound - 1))
        replaced = insert_axial_slice(vol, axis, index, extract_axial_slice(vol, axis, index))
        assert np.array_equal(replaced.data, vol.data)

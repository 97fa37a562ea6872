"""Cuboid slicing, degradation, patch cropping, and container round-trips."""

import numpy as np
import pytest

from cuboidnet import ContractError, FormatError
from cuboidnet.cuboid import (
    PatchPair,
    VideoCuboid,
    bicubic_baseline,
    crop_patch_pair,
    degrade,
    moving_pattern_clip,
    read_cubv,
    reassemble,
    rgb_to_luma,
    slice_cuboid,
    write_cubv,
)
from cuboidnet import bicubic


def indexed_cuboid(n=2, h=2, w=3):
    """V(t, y, x) = 100 t + 10 y + x."""
    t, y, x = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    return VideoCuboid((100 * t + 10 * y + x).astype(np.float64))


class TestSlicing:
    def test_axis1_slice0(self):
        s = slice_cuboid(indexed_cuboid(), 1)
        np.testing.assert_array_equal(s.slices[0], [[0, 1, 2], [10, 11, 12]])

    def test_axis2_slice0(self):
        # rows y, cols t
        s = slice_cuboid(indexed_cuboid(), 2)
        np.testing.assert_array_equal(s.slices[0], [[0, 100], [10, 110]])

    def test_axis3_slice1(self):
        # rows x, cols t
        s = slice_cuboid(indexed_cuboid(), 3)
        np.testing.assert_array_equal(s.slices[1], [[10, 110], [11, 111], [12, 112]])

    def test_slice_shapes(self):
        v = VideoCuboid(np.zeros((4, 6, 5)))
        assert [s.shape for s in slice_cuboid(v, 1).slices] == [(6, 5)] * 4
        assert [s.shape for s in slice_cuboid(v, 2).slices] == [(6, 4)] * 5
        assert [s.shape for s in slice_cuboid(v, 3).slices] == [(5, 4)] * 6

    def test_invalid_axis(self):
        with pytest.raises(ContractError, match="axis"):
            slice_cuboid(indexed_cuboid(), 0)

    @pytest.mark.parametrize("axis", [1, 2, 3])
    @pytest.mark.parametrize("seed", range(100))
    def test_roundtrip_bit_exact(self, axis, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(1, 7, size=3))
        v = VideoCuboid(rng.uniform(0, 255, size=dims))
        back = reassemble(slice_cuboid(v, axis))
        np.testing.assert_array_equal(back.values, v.values)

    @pytest.mark.parametrize("axis", [1, 2, 3])
    def test_voxel_conservation(self, axis):
        v = VideoCuboid(np.random.default_rng(5).uniform(0, 255, size=(3, 4, 5)))
        total = sum(float(s.sum()) for s in slice_cuboid(v, axis).slices)
        assert total == pytest.approx(float(v.values.sum()), rel=1e-12)

    def test_reassemble_rejects_bad_shapes(self):
        s = slice_cuboid(indexed_cuboid(), 2)
        s.slices[0] = s.slices[0][:1]
        with pytest.raises(ContractError, match="shape"):
            reassemble(s)


class TestDegrade:
    def test_paper_geometry(self):
        v = VideoCuboid(np.zeros((7, 256, 448)))
        assert degrade(v).shape == (4, 64, 112)

    def test_constant_preserved(self):
        v = VideoCuboid(np.full((5, 16, 16), 99.0))
        np.testing.assert_allclose(degrade(v).values, 99.0, atol=1e-12)

    def test_kept_frames_are_even_indices(self):
        v = moving_pattern_clip(7, 32, 32)
        lo = degrade(v)
        want = bicubic.resample_2d(v.values[2], (8, 8))
        np.testing.assert_allclose(lo.values[1], want, atol=1e-12)

    def test_even_frame_count_rejected(self):
        with pytest.raises(ContractError, match="odd"):
            degrade(VideoCuboid(np.zeros((4, 16, 16))))

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ContractError, match="divisible"):
            degrade(VideoCuboid(np.zeros((5, 18, 16))))

    def test_commutes_with_constant_shift(self):
        v = moving_pattern_clip(5, 16, 16, seed=3)
        a = degrade(VideoCuboid(v.values + 5.0)).values
        b = degrade(v).values + 5.0
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestPatches:
    def test_origin_crop_covers_clip(self):
        clip = moving_pattern_clip(7, 128, 128)
        pair = crop_patch_pair(clip, y0=0, x0=0)
        np.testing.assert_array_equal(pair.label_patch.values, clip.values)
        np.testing.assert_array_equal(pair.input_patch.values, degrade(clip).values)

    def test_patch_geometry(self):
        clip = moving_pattern_clip(7, 256, 256)
        pair = crop_patch_pair(clip, rng=0)
        assert pair.input_patch.shape == (4, 32, 32)
        assert pair.label_patch.shape == (7, 128, 128)

    def test_same_seed_same_offsets(self):
        clip = moving_pattern_clip(7, 256, 256)
        a = crop_patch_pair(clip, rng=42)
        b = crop_patch_pair(clip, rng=42)
        assert a.source_offset == b.source_offset

    def test_out_of_bounds_rejected(self):
        clip = moving_pattern_clip(7, 64, 64)
        with pytest.raises(ContractError, match="exceeds"):
            crop_patch_pair(clip, y0=0, x0=0, label_size=128)

    def test_misaligned_offset_rejected(self):
        clip = moving_pattern_clip(7, 256, 256)
        with pytest.raises(ContractError, match="multiples"):
            crop_patch_pair(clip, y0=2, x0=0)


class TestContainer:
    def test_roundtrip_f32(self, tmp_path):
        v = VideoCuboid(np.random.default_rng(0).uniform(0, 255, (4, 6, 5))
                        .astype(np.float32).astype(np.float64))
        p = tmp_path / "clip.cubv"
        write_cubv(v, p, dtype="f32")
        back = read_cubv(p)
        np.testing.assert_array_equal(back.values, v.values)

    def test_roundtrip_u8(self, tmp_path):
        v = VideoCuboid(np.random.default_rng(1).integers(0, 256, (3, 4, 4))
                        .astype(np.float64))
        p = tmp_path / "clip.cubv"
        write_cubv(v, p, dtype="u8")
        np.testing.assert_array_equal(read_cubv(p).values, v.values)

    def test_header_is_20_bytes(self, tmp_path):
        v = VideoCuboid(np.zeros((4, 64, 112)))
        p = tmp_path / "clip.cubv"
        write_cubv(v, p, dtype="f32")
        size = p.stat().st_size
        assert size - 4 * 64 * 112 * 4 == 20

    def test_truncated_payload_names_lengths(self, tmp_path):
        v = VideoCuboid(np.zeros((2, 3, 3)))
        p = tmp_path / "clip.cubv"
        write_cubv(v, p, dtype="f32")
        raw = p.read_bytes()
        p.write_bytes(raw[:-1])
        with pytest.raises(FormatError, match=r"expected 72 bytes, found 71"):
            read_cubv(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.cubv"
        p.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(FormatError, match="magic"):
            read_cubv(p)

    def test_dimension_overflow(self, tmp_path):
        import struct
        p = tmp_path / "big.cubv"
        p.write_bytes(struct.pack("<4sBBBBIII", b"CUBV", 1, 1, 1, 0,
                                  2**31, 2**31, 4))
        with pytest.raises(FormatError, match="overflow"):
            read_cubv(p)

    def test_byte_stable(self, tmp_path):
        v = moving_pattern_clip(3, 8, 8)
        p1, p2 = tmp_path / "a.cubv", tmp_path / "b.cubv"
        write_cubv(v, p1)
        write_cubv(v, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestBaselineAndHelpers:
    def test_baseline_shape(self):
        v = VideoCuboid(np.zeros((4, 16, 16)))
        assert bicubic_baseline(v).shape == (7, 64, 64)

    def test_baseline_constant(self):
        v = VideoCuboid(np.full((3, 8, 8), 12.0))
        np.testing.assert_allclose(bicubic_baseline(v).values, 12.0, atol=1e-10)

    def test_luma_weights(self):
        rgb = np.array([[[255.0, 0.0, 0.0]]])
        assert rgb_to_luma(rgb)[0, 0] == pytest.approx(255 * 0.299)

    def test_pattern_clip_deterministic(self):
        a = moving_pattern_clip(5, 16, 16, seed=9)
        b = moving_pattern_clip(5, 16, 16, seed=9)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.values.min() >= 0.0 and a.values.max() <= 255.0

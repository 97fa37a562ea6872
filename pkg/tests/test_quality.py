"""Metric oracles: exact PSNR anchors, SSIM identities, report layout."""

import math

import numpy as np
import pytest

from cuboidnet import ContractError
from cuboidnet.cuboid import VideoCuboid, moving_pattern_clip
from cuboidnet.quality import QualityReport, evaluate, frame_kind, psnr, ssim


class TestPsnr:
    def test_identical_frames_hit_cap(self):
        x = np.random.default_rng(0).uniform(0, 255, (16, 16))
        assert psnr(x, x) == 100.0

    def test_full_scale_difference_is_zero_db(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 255.0)
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_thousandth_of_max_square_is_30_db(self):
        # MSE = 255^2 / 1000 -> exactly 30 dB
        a = np.zeros((32, 32))
        b = np.full((32, 32), math.sqrt(255.0**2 / 1000.0))
        assert psnr(a, b) == pytest.approx(30.0, abs=1e-6)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(50, 200, (24, 24))
        noise = rng.normal(size=(24, 24))
        values = [psnr(x, x + amp * noise) for amp in (1.0, 2.0, 4.0, 8.0)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError, match="shape"):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(2).uniform(0, 255, (32, 32))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_constant_extremes_value(self):
        c1 = (0.01 * 255.0) ** 2
        want = c1 / (255.0**2 + c1)
        got = ssim(np.zeros((16, 16)), np.full((16, 16), 255.0))
        assert got == pytest.approx(want, abs=1e-9)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 255, (20, 20))
        b = rng.uniform(0, 255, (20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_invariant_under_simultaneous_flip(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 255, (20, 20))
        b = a + rng.normal(scale=5.0, size=(20, 20))
        assert ssim(a[::-1], b[::-1]) == pytest.approx(ssim(a, b), abs=1e-12)

    def test_undersized_frames_rejected(self):
        with pytest.raises(ContractError, match="11"):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_translation_invariance_on_interior(self):
        rng = np.random.default_rng(5)
        big_a = rng.uniform(0, 255, (40, 40))
        big_b = big_a + rng.normal(scale=3.0, size=(40, 40))
        a0, b0 = big_a[4:36, 4:36], big_b[4:36, 4:36]
        a1, b1 = big_a[5:37, 5:37], big_b[5:37, 5:37]
        # same interior content shifted together: windows in common agree
        assert ssim(a0[1:, 1:], b0[1:, 1:]) == pytest.approx(
            ssim(a1[:-1, :-1], b1[:-1, :-1]), abs=1e-12
        )


class TestEvaluate:
    def test_identical_cuboids(self):
        v = moving_pattern_clip(7, 32, 32)
        rep = evaluate(v, v)
        assert all(f.psnr_db == 100.0 for f in rep.frames)
        assert all(f.ssim == pytest.approx(1.0, abs=1e-9) for f in rep.frames)

    def test_seven_frame_split(self):
        v = moving_pattern_clip(7, 16, 16)
        rep = evaluate(v, v)
        kinds = [f.kind for f in rep.frames]
        assert kinds == ["SSR", "TSR", "SSR", "TSR", "SSR", "TSR", "SSR"]
        assert sum(k == "SSR" for k in kinds) == 4
        assert sum(k == "TSR" for k in kinds) == 3

    def test_stsr_mean_over_all_frames(self):
        rng = np.random.default_rng(6)
        ref = VideoCuboid(rng.uniform(0, 255, (7, 16, 16)))
        test = VideoCuboid(np.clip(ref.values + rng.normal(scale=4, size=(7, 16, 16)), 0, 255))
        rep = evaluate(ref, test)
        want = np.mean([f.psnr_db for f in rep.frames])
        assert rep.stsr_psnr == pytest.approx(want, abs=1e-12)

    def test_aggregates_match_recomputation(self):
        rng = np.random.default_rng(7)
        ref = VideoCuboid(rng.uniform(0, 255, (5, 16, 16)))
        test = VideoCuboid(np.clip(ref.values + rng.normal(scale=2, size=(5, 16, 16)), 0, 255))
        rep = evaluate(ref, test)
        ssr = [f.ssim for f in rep.frames if f.kind == "SSR"]
        assert rep.ssr_ssim == pytest.approx(np.mean(ssr), abs=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ContractError, match="shape"):
            evaluate(VideoCuboid(np.zeros((3, 16, 16))), VideoCuboid(np.zeros((3, 16, 17))))

    def test_csv_layout(self):
        v = moving_pattern_clip(5, 16, 16)
        lines = evaluate(v, v).to_csv().strip().split("\n")
        assert lines[0] == "frame_index,kind,psnr_db,ssim"
        assert len(lines) == 1 + 5 + 3
        assert lines[-3].startswith("AGG_SSR,")
        assert lines[-2].startswith("AGG_TSR,")
        assert lines[-1].startswith("AGG_STSR,")
        assert lines[1] == "0,SSR,100.0000,1.0000"

    def test_frame_kind_parity(self):
        assert frame_kind(0) == "SSR"
        assert frame_kind(1) == "TSR"
        assert frame_kind(6) == "SSR"

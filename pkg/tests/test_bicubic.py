"""Bicubic resampling: partition of unity, identity, direct kernel-sum oracle."""

import math

import numpy as np
import pytest

from cuboidnet import bicubic


def kernel_sum_at(samples, out_index, n_out):
    """Direct evaluation of one output site: sum over clamped kernel taps."""
    n_in = len(samples)
    scale = n_in / n_out
    support = max(1.0, scale)
    center = (out_index + 0.5) * scale - 0.5
    lo = math.ceil(center - 2.0 * support)
    hi = math.floor(center + 2.0 * support)
    acc = 0.0
    wsum = 0.0
    for tap in range(lo, hi + 1):
        w = float(bicubic.cubic_kernel(np.array([(center - tap) / support]))[0]) / support
        acc += w * samples[min(max(tap, 0), n_in - 1)]
        wsum += w
    return acc / wsum


def test_kernel_values():
    k = bicubic.cubic_kernel(np.array([0.0, 1.0, 2.0, 0.5]))
    assert k[0] == 1.0
    assert k[1] == 0.0
    assert k[2] == 0.0
    assert k[3] == pytest.approx(0.5625)  # 1.5 * 0.125 - 2.5 * 0.25 + 1


@pytest.mark.parametrize("target", [(3, 3), (7, 5), (16, 16), (1, 9)])
def test_constant_maps_to_constant(target):
    img = np.full((5, 4), 42.5)
    out = bicubic.resample_2d(img, target)
    assert out.shape == target
    np.testing.assert_allclose(out, 42.5, atol=1e-12)


def test_identity_target_reproduces_input():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, size=(6, 9))
    out = bicubic.resample_2d(img, (6, 9))
    np.testing.assert_array_equal(out, img)


def test_ramp_upsample_matches_kernel_sum_oracle():
    ramp = np.arange(8, dtype=np.float64)
    m = bicubic.weight_matrix(8, 32)
    got = m @ ramp
    for o in range(32):
        assert got[o] == pytest.approx(kernel_sum_at(ramp, o, 32), abs=1e-12)


@pytest.mark.parametrize("n_in,n_out", [(8, 32), (32, 8), (7, 5), (4, 7)])
def test_arbitrary_resample_matches_kernel_sum_oracle(n_in, n_out):
    rng = np.random.default_rng(n_in * 31 + n_out)
    samples = rng.uniform(-3, 3, size=n_in)
    got = bicubic.weight_matrix(n_in, n_out) @ samples
    for o in range(n_out):
        assert got[o] == pytest.approx(kernel_sum_at(samples, o, n_out), abs=1e-12)


def test_downsample_prefilter_widens_support():
    # 4x downsample must average more than 4 taps (antialiasing)
    m = bicubic.weight_matrix(32, 8)
    assert (np.abs(m[4]) > 1e-12).sum() > 4


def test_rows_sum_to_one():
    for n_in, n_out in [(4, 7), (16, 64), (64, 16), (2, 3)]:
        m = bicubic.weight_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)


def test_resample_axis_matches_matrix():
    rng = np.random.default_rng(1)
    vol = rng.normal(size=(3, 5, 4))
    out = bicubic.resample_axis(vol, axis=1, n_out=9)
    m = bicubic.weight_matrix(5, 9)
    want = np.einsum("os,csw->cow", m, vol)
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_linearity_constant_shift():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 255, size=(8, 8))
    a = bicubic.resample_2d(img + 7.0, (20, 12))
    b = bicubic.resample_2d(img, (20, 12)) + 7.0
    np.testing.assert_allclose(a, b, atol=1e-10)

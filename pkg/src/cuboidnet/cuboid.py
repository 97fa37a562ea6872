"""Video-as-cuboid data model: three-axis slicing, degradation, container I/O.

A video is a dense (frames, height, width) float volume indexed (t, y, x).
Cutting it along each axis yields three stacks of 2-D slices: axis 1 gives
the N ordinary frames (H, W); axis 2 gives W slices (H, N) mixing rows with
time; axis 3 gives H slices (W, N) mixing columns with time.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import bicubic
from .errors import ContractError, FormatError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601


@dataclass
class VideoCuboid:
    """Single-channel volumetric video with a value-range ceiling."""

    values: np.ndarray
    value_max: float = 255.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ContractError(
                f"VideoCuboid: values must be (frames, height, width), got {self.values.shape}"
            )
        if min(self.values.shape) < 1:
            raise ContractError(f"VideoCuboid: empty extent in {self.values.shape}")
        if self.value_max <= 0:
            raise ContractError(f"VideoCuboid: value_max must be positive, got {self.value_max}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def clamped(self) -> "VideoCuboid":
        return VideoCuboid(np.clip(self.values, 0.0, self.value_max), self.value_max)


@dataclass
class SliceSet:
    """Ordered stack of 2-D slices cut from a cuboid along one axis."""

    axis: int
    slices: list[np.ndarray]
    source_dims: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.slices)


@dataclass
class PatchPair:
    """A degraded training input patch and its high-resolution label."""

    input_patch: VideoCuboid
    label_patch: VideoCuboid
    source_offset: tuple[int, int, int] = field(default=(0, 0, 0))


def slice_cuboid(v: VideoCuboid, axis: int) -> SliceSet:
    """Cut the cuboid along one of the three axes (exact copies).

    axis 1: slice i is S(y, x) = V(i, y, x)   -- N slices of (H, W)
    axis 2: slice j is S(y, t) = V(t, y, j)   -- W slices of (H, N)
    axis 3: slice k is S(x, t) = V(t, k, x)   -- H slices of (W, N)
    """
    vals = v.values
    if axis == 1:
        slices = [vals[t].copy() for t in range(v.n_frames)]
    elif axis == 2:
        slices = [vals[:, :, j].T.copy() for j in range(v.width)]
    elif axis == 3:
        slices = [vals[:, k, :].T.copy() for k in range(v.height)]
    else:
        raise ContractError(f"slice_cuboid: axis must be 1, 2, or 3, got {axis}")
    return SliceSet(axis=axis, slices=slices, source_dims=v.shape)


def reassemble(s: SliceSet) -> VideoCuboid:
    """Exact inverse of :func:`slice_cuboid`."""
    n, h, w = s.source_dims
    expected = {1: (n, (h, w)), 2: (w, (h, n)), 3: (h, (w, n))}
    if s.axis not in expected:
        raise ContractError(f"reassemble: invalid axis {s.axis}")
    count, shape = expected[s.axis]
    if len(s.slices) != count:
        raise ContractError(
            f"reassemble: axis {s.axis} needs {count} slices, got {len(s.slices)}"
        )
    for i, sl in enumerate(s.slices):
        if sl.shape != shape:
            raise ContractError(
                f"reassemble: slice {i} has shape {sl.shape}, expected {shape}"
            )
    vals = np.empty((n, h, w))
    if s.axis == 1:
        for t, sl in enumerate(s.slices):
            vals[t] = sl
    elif s.axis == 2:
        for j, sl in enumerate(s.slices):
            vals[:, :, j] = sl.T
    else:
        for k, sl in enumerate(s.slices):
            vals[:, k, :] = sl.T
    return VideoCuboid(vals, value_max=255.0)


def degrade(v: VideoCuboid, spatial_factor: int = 4) -> VideoCuboid:
    """Drop odd-indexed frames and bicubic-downsample the rest.

    Keeps frames at even zero-based indices (the odd frames of 1-based
    numbering), so an input of 2M+1 frames yields M+1 frames at
    (H / factor, W / factor).
    """
    if v.n_frames % 2 == 0:
        raise ContractError(f"degrade: frame count must be odd, got {v.n_frames}")
    if v.height % spatial_factor or v.width % spatial_factor:
        raise ContractError(
            f"degrade: dims {v.height}x{v.width} not divisible by factor {spatial_factor}"
        )
    target = (v.height // spatial_factor, v.width // spatial_factor)
    kept = v.values[0::2]
    out = np.stack([bicubic.resample_2d(frame, target) for frame in kept])
    return VideoCuboid(out, v.value_max)


def crop_patch_pair(v: VideoCuboid, rng=None, t0: int | None = None,
                    y0: int | None = None, x0: int | None = None,
                    label_size: int = 128, spatial_factor: int = 4) -> PatchPair:
    """Crop a label patch and derive its degraded input.

    Offsets may be given explicitly or drawn from ``rng`` (a seed or a
    numpy Generator); drawn offsets are multiples of the spatial factor and
    t0 is always 0. The label covers all frames of a 7-frame clip.
    """
    if label_size % spatial_factor:
        raise ContractError(
            f"crop_patch_pair: label size {label_size} not divisible by {spatial_factor}"
        )
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    max_y = v.height - label_size
    max_x = v.width - label_size
    if max_y < 0 or max_x < 0:
        raise ContractError(
            f"crop_patch_pair: label {label_size} exceeds clip {v.height}x{v.width}"
        )
    if y0 is None or x0 is None:
        if rng is None:
            raise ContractError("crop_patch_pair: need offsets or an rng to draw them")
        y0 = int(rng.integers(0, max_y // spatial_factor + 1)) * spatial_factor
        x0 = int(rng.integers(0, max_x // spatial_factor + 1)) * spatial_factor
    t0 = 0 if t0 is None else t0
    if t0 != 0:
        raise ContractError(f"crop_patch_pair: t0 must be 0, got {t0}")
    if y0 % spatial_factor or x0 % spatial_factor:
        raise ContractError(f"crop_patch_pair: offsets ({y0},{x0}) must be multiples of {spatial_factor}")
    if y0 > max_y or x0 > max_x or y0 < 0 or x0 < 0:
        raise ContractError(
            f"crop_patch_pair: crop at ({y0},{x0}) size {label_size} exceeds {v.height}x{v.width}"
        )
    label = VideoCuboid(
        v.values[t0:, y0:y0 + label_size, x0:x0 + label_size].copy(), v.value_max
    )
    return PatchPair(degrade(label, spatial_factor), label, (t0, y0, x0))


def bicubic_baseline(v: VideoCuboid, spatial_factor: int = 4) -> VideoCuboid:
    """Deterministic bicubic space-time upscale: (N,H,W) -> (2N-1, 4H, 4W).

    Separable: the temporal axis is resampled to 2N-1 and each frame to
    (factor*H, factor*W) with the shared bicubic convention.
    """
    n, h, w = v.shape
    out = bicubic.resample_axis(v.values, axis=0, n_out=2 * n - 1)
    out = bicubic.resample_axis(out, axis=1, n_out=spatial_factor * h)
    out = bicubic.resample_axis(out, axis=2, n_out=spatial_factor * w)
    return VideoCuboid(out, v.value_max)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma from an (..., 3) array in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ContractError(f"rgb_to_luma: last axis must be 3, got {rgb.shape}")
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def moving_pattern_clip(n_frames: int = 7, height: int = 64, width: int = 64,
                        seed: int = 0) -> VideoCuboid:
    """Deterministic smooth moving test pattern in [0, 255]."""
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    t = np.arange(n_frames)[:, None, None]
    y = np.arange(height)[None, :, None]
    x = np.arange(width)[None, None, :]
    vals = (
        127.5
        + 55.0 * np.sin(2 * np.pi * (x + 1.7 * t) / 17.0 + phases[0])
        * np.cos(2 * np.pi * (y - 1.3 * t) / 23.0 + phases[1])
        + 45.0 * np.sin(2 * np.pi * (x + y + 2.4 * t) / 31.0 + phases[2])
    )
    return VideoCuboid(np.clip(vals, 0.0, 255.0))


# ---------------------------------------------------------------------------
# .cubv container
# ---------------------------------------------------------------------------

_MAGIC = b"CUBV"
_HEADER = struct.Struct("<4sBBBBIII")  # magic, version, dtype, channels, reserved, N, H, W
_DTYPE_U8 = 0
_DTYPE_F32 = 1
_MAX_VOXELS = 1 << 32


def write_cubv(v: VideoCuboid, path, dtype: str = "f32") -> None:
    """Write a cuboid to the little-endian ``.cubv`` container."""
    if dtype == "u8":
        code = _DTYPE_U8
        payload = np.clip(np.rint(v.values), 0, 255).astype("<u1").tobytes()
    elif dtype == "f32":
        code = _DTYPE_F32
        payload = v.values.astype("<f4").tobytes()
    else:
        raise ContractError(f"write_cubv: dtype must be 'u8' or 'f32', got {dtype!r}")
    n, h, w = v.shape
    header = _HEADER.pack(_MAGIC, 1, code, 1, 0, n, h, w)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_cubv(path) -> VideoCuboid:
    """Read a ``.cubv`` container, validating header and payload length."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"truncated header: need {_HEADER.size} bytes, have {len(raw)}", offset=len(raw)
        )
    magic, version, dtype, channels, _reserved, n, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != 1:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype not in (_DTYPE_U8, _DTYPE_F32):
        raise FormatError(f"unknown dtype code {dtype}", offset=5)
    if channels != 1:
        raise FormatError(f"unsupported channel count {channels}", offset=6)
    if min(n, h, w) < 1 or n * h * w > _MAX_VOXELS:
        raise FormatError(f"dimension overflow: {n}x{h}x{w}", offset=8)
    itemsize = 1 if dtype == _DTYPE_U8 else 4
    expected = n * h * w * itemsize
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, found {actual}",
            offset=_HEADER.size + min(actual, expected),
        )
    kind = "<u1" if dtype == _DTYPE_U8 else "<f4"
    vals = np.frombuffer(raw, dtype=kind, offset=_HEADER.size).reshape(n, h, w)
    return VideoCuboid(vals.astype(np.float64), value_max=255.0)

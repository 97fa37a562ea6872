"""PSNR and SSIM plus the per-frame evaluation split.

Frames at even zero-based indices are spatially reconstructed (SSR), frames
at odd indices are temporally interpolated (TSR); the combined figure over
all frames is ST-SR. Metrics run on float luma without integer rounding.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cuboid import VideoCuboid
from .errors import ContractError

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-12
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def psnr(ref: np.ndarray, test: np.ndarray, max_value: float = 255.0) -> float:
    """10 log10(MAX^2 / MSE), capped at 100 dB for near-zero MSE."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ContractError(f"psnr: shape mismatch {ref.shape} vs {test.shape}")
    if max_value <= 0:
        raise ContractError(f"psnr: max_value must be positive, got {max_value}")
    mse = float(np.mean((ref - test) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_value * max_value / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    views = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(views, _WINDOW, axes=([2, 3], [0, 1]))


def ssim(ref: np.ndarray, test: np.ndarray, max_value: float = 255.0) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ContractError(f"ssim: shape mismatch {ref.shape} vs {test.shape}")
    if min(ref.shape) < SSIM_WINDOW:
        raise ContractError(
            f"ssim: frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {ref.shape}"
        )
    c1 = (_K1 * max_value) ** 2
    c2 = (_K2 * max_value) ** 2
    mu_x = _windowed_mean(ref)
    mu_y = _windowed_mean(test)
    xx = _windowed_mean(ref * ref) - mu_x * mu_x
    yy = _windowed_mean(test * test) - mu_y * mu_y
    xy = _windowed_mean(ref * test) - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    )
    return float(score.mean())


@dataclass
class FrameQuality:
    index: int
    kind: str  # "SSR" or "TSR"
    psnr_db: float
    ssim: float


@dataclass
class QualityReport:
    frames: list[FrameQuality]

    def _mean(self, kind: str | None, attr: str) -> float:
        rows = [f for f in self.frames if kind is None or f.kind == kind]
        return float(np.mean([getattr(f, attr) for f in rows]))

    @property
    def ssr_psnr(self) -> float:
        return self._mean("SSR", "psnr_db")

    @property
    def ssr_ssim(self) -> float:
        return self._mean("SSR", "ssim")

    @property
    def tsr_psnr(self) -> float:
        return self._mean("TSR", "psnr_db")

    @property
    def tsr_ssim(self) -> float:
        return self._mean("TSR", "ssim")

    @property
    def stsr_psnr(self) -> float:
        return self._mean(None, "psnr_db")

    @property
    def stsr_ssim(self) -> float:
        return self._mean(None, "ssim")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("frame_index,kind,psnr_db,ssim\n")
        for f in self.frames:
            buf.write(f"{f.index},{f.kind},{f.psnr_db:.4f},{f.ssim:.4f}\n")
        buf.write(f"AGG_SSR,,{self.ssr_psnr:.4f},{self.ssr_ssim:.4f}\n")
        buf.write(f"AGG_TSR,,{self.tsr_psnr:.4f},{self.tsr_ssim:.4f}\n")
        buf.write(f"AGG_STSR,,{self.stsr_psnr:.4f},{self.stsr_ssim:.4f}\n")
        return buf.getvalue()


def frame_kind(index: int) -> str:
    return "SSR" if index % 2 == 0 else "TSR"


def evaluate(ref: VideoCuboid, test: VideoCuboid) -> QualityReport:
    """Per-frame PSNR/SSIM with the SSR/TSR parity split."""
    if ref.shape != test.shape:
        raise ContractError(f"evaluate: shape mismatch {ref.shape} vs {test.shape}")
    if ref.n_frames % 2 == 0:
        raise ContractError(f"evaluate: frame count must be odd, got {ref.n_frames}")
    frames = [
        FrameQuality(
            index=t,
            kind=frame_kind(t),
            psnr_db=psnr(ref.values[t], test.values[t], ref.value_max),
            ssim=ssim(ref.values[t], test.values[t], ref.value_max),
        )
        for t in range(ref.n_frames)
    ]
    return QualityReport(frames)

"""Masked image-quality metrics and judge-based success.

PSNR and SSIM are computed natively over a keep region (the unedited part
of the image, i.e. the complement of the ground-truth edit mask, or the
full image when no ground truth exists). LPIPS and CLIP score delegate to
an optional metric backend; success delegates to the reasoner's judge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .backends import MetricBackend, ReasonerBackend
from .core import BinaryMask, DimMismatch, ImageBuf, Instruction, LoceditError

__all__ = [
    "EmptyKeepRegion",
    "ImageTooSmall",
    "KeepRegion",
    "MetricReport",
    "clip_alignment",
    "lpips",
    "masked_psnr",
    "masked_ssim",
    "psnr_json_value",
    "success",
    "success_rate",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


class EmptyKeepRegion(LoceditError):
    """The keep region contains no evaluable pixel."""


class ImageTooSmall(LoceditError):
    """SSIM needs both dimensions to fit at least one 11x11 window."""


@dataclass(frozen=True)
class KeepRegion:
    """Where consistency metrics are evaluated: 1-bits mark the unedited
    region. ``mask`` None means the whole image (the no-ground-truth
    protocol)."""

    mask: BinaryMask | None = None

    @classmethod
    def full(cls) -> "KeepRegion":
        return cls(None)

    @classmethod
    def from_keep_mask(cls, mask: BinaryMask) -> "KeepRegion":
        return cls(mask)

    @classmethod
    def complement_of_edit_mask(cls, edit_mask: BinaryMask) -> "KeepRegion":
        return cls(edit_mask.complement())

    @property
    def is_full(self) -> bool:
        return self.mask is None

    def selector(self, width: int, height: int) -> np.ndarray:
        """Boolean HxW selector, dimension-checked against the image pair."""
        if self.mask is None:
            return np.ones((height, width), dtype=bool)
        if (self.mask.width, self.mask.height) != (width, height):
            raise DimMismatch(
                f"keep region {self.mask.width}x{self.mask.height} "
                f"does not match image {width}x{height}"
            )
        return self.mask.to_array()


def _check_pair(x: ImageBuf, y: ImageBuf) -> None:
    if (x.width, x.height) != (y.width, y.height):
        raise DimMismatch(
            f"image sizes differ: {x.width}x{x.height} vs {y.width}x{y.height}"
        )


def masked_psnr(x: ImageBuf, y: ImageBuf, keep: KeepRegion) -> float:
    """PSNR in dB over the keep region, all three channels, peak 255.

    Identical keep-region content gives +inf (serialized as "inf").
    """
    _check_pair(x, y)
    selector = keep.selector(x.width, x.height)
    if not selector.any():
        raise EmptyKeepRegion("keep region selects no pixel")
    a = x.to_array()[selector].astype(np.float64)
    b = y.to_array()[selector].astype(np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def _gaussian_kernel_1d() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    kernel = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    return kernel / kernel.sum()


_SSIM_KERNEL_1D = _gaussian_kernel_1d()


def _windowed(plane: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local means, restricted to fully-interior windows."""
    half = SSIM_WINDOW // 2
    out = ndimage.correlate1d(plane, _SSIM_KERNEL_1D, axis=0, mode="constant")
    out = ndimage.correlate1d(out, _SSIM_KERNEL_1D, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """SSIM map over valid window centers for one channel pair."""
    mu_x = _windowed(x)
    mu_y = _windowed(y)
    e_xx = _windowed(x * x)
    e_yy = _windowed(y * y)
    e_xy = _windowed(x * y)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return numerator / denominator


def masked_ssim(x: ImageBuf, y: ImageBuf, keep: KeepRegion) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5), computed per
    channel, averaged over channels, then averaged over the keep pixels
    whose window lies fully inside the image."""
    _check_pair(x, y)
    if x.width < SSIM_WINDOW or x.height < SSIM_WINDOW:
        raise ImageTooSmall(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
            f"got {x.width}x{x.height}"
        )
    selector = keep.selector(x.width, x.height)
    if not selector.any():
        raise EmptyKeepRegion("keep region selects no pixel")
    half = SSIM_WINDOW // 2
    valid_keep = selector[half:-half, half:-half]
    if not valid_keep.any():
        raise EmptyKeepRegion("keep region has no pixel with a full SSIM window")
    a = x.to_array().astype(np.float64)
    b = y.to_array().astype(np.float64)
    channel_maps = [_ssim_map(a[:, :, c], b[:, :, c]) for c in range(3)]
    mean_map = (channel_maps[0] + channel_maps[1] + channel_maps[2]) / 3.0
    return float(np.mean(mean_map[valid_keep]))


def lpips(
    x: ImageBuf, y: ImageBuf, keep: KeepRegion, backend: MetricBackend
) -> float:
    """Perceptual distance via the metric backend.

    LPIPS is patch-based and cannot be restricted post hoc, so for a
    non-full keep region the pixels outside keep are replaced in both
    submitted images by the pixels of x: only keep-region differences can
    contribute (up to receptive-field bleed at the boundary).
    """
    _check_pair(x, y)
    if keep.is_full:
        return backend.lpips(x, y)
    selector = keep.selector(x.width, x.height)
    if not selector.any():
        raise EmptyKeepRegion("keep region selects no pixel")
    neutral = x.to_array().copy()
    neutral[selector] = y.to_array()[selector]
    return backend.lpips(x, ImageBuf(neutral))


def clip_alignment(y: ImageBuf, instruction: Instruction, backend: MetricBackend) -> float:
    """Semantic similarity between the edited image and the instruction,
    returned unmodified from the backend."""
    return backend.clip_score(y, instruction.text)


def success(
    x: ImageBuf, y: ImageBuf, instruction: Instruction, reasoner: ReasonerBackend
) -> tuple[bool, str]:
    """Judge-decided: did the edit fulfil the instruction?"""
    return reasoner.judge_success(x, y, instruction)


def success_rate(verdicts: list[bool]) -> float:
    """Fraction of successful edits; the aggregate Succ figure."""
    if not verdicts:
        raise ValueError("success rate over zero samples")
    return sum(1 for v in verdicts if v) / len(verdicts)


def psnr_json_value(value: float) -> float | str:
    """JSON representation of a PSNR: finite values pass through, +inf
    serializes as the string "inf"."""
    return "inf" if math.isinf(value) else value


@dataclass(frozen=True)
class MetricReport:
    """Per-sample metric row. Optional fields are present iff their backend
    was configured for the run."""

    sample_id: str
    psnr_db: float | None = None
    ssim: float | None = None
    lpips: float | None = None
    clip: float | None = None
    succ: bool | None = None

    def to_document(self) -> dict:
        doc: dict = {"sample_id": self.sample_id}
        if self.psnr_db is not None:
            doc["psnr"] = psnr_json_value(self.psnr_db)
        if self.ssim is not None:
            doc["ssim"] = self.ssim
        if self.lpips is not None:
            doc["lpips"] = self.lpips
        if self.clip is not None:
            doc["clip"] = self.clip
        if self.succ is not None:
            doc["succ"] = self.succ
        return doc

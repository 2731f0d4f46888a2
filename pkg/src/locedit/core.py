"""Core domain types: images, binary masks, prompts, candidates, codecs.

Everything here is immutable after construction and safe to share across
threads. Images are 8-bit RGB rasters kept at native resolution; masks are
per-pixel edit/keep maps where 1 means "may change" and 0 means "must stay".
"""

from __future__ import annotations

import binascii
import hashlib
import io
import struct
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Generic, Iterator, Sequence, TypeVar

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "BinaryMask",
    "Candidate",
    "CandidateSet",
    "DimMismatch",
    "EmptyCandidates",
    "ImageBuf",
    "Instruction",
    "MalformedPng",
    "NonFiniteScore",
    "Prompt",
    "PromptKind",
    "PromptTemplates",
    "UnsupportedDepth",
    "ZeroDimension",
    "decode_image",
    "decode_mask",
    "encode_image",
    "encode_mask",
    "full_mask",
    "render_mask_overlay",
    "select_argmax",
    "sha256_hex",
]

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# zlib level for the canonical encoder: level 1 keeps flat/structured images
# small while staying fast enough that hashing is never the bottleneck.
_PNG_ZLIB_LEVEL = 1


class LoceditError(Exception):
    """Base class for every error raised by this package."""


class MalformedPng(LoceditError):
    """The byte stream is not a decodable PNG."""


class UnsupportedDepth(LoceditError):
    """PNG bit depth other than 8 bits per channel."""


class ZeroDimension(LoceditError):
    """Width or height below 1."""


class DimMismatch(LoceditError):
    """Two rasters that must agree in size do not."""


class EmptyCandidates(LoceditError):
    """A selection was requested over zero candidates."""


class NonFiniteScore(LoceditError):
    """A judge score is NaN or infinite."""


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    crc = binascii.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def _encode_png(array: np.ndarray) -> bytes:
    """Write an 8-bit PNG (RGB for HxWx3, grayscale for HxW), filter type 0.

    Filter-0 rows plus zlib keep encoding deterministic and cheap; output is
    readable by any standards-compliant decoder.
    """
    if array.ndim == 3:
        height, width, _ = array.shape
        color_type = 2
        row_bytes = width * 3
    else:
        height, width = array.shape
        color_type = 0
        row_bytes = width
    raw = np.empty((height, row_bytes + 1), dtype=np.uint8)
    raw[:, 0] = 0
    raw[:, 1:] = array.reshape(height, row_bytes)
    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    idat = zlib.compress(raw.tobytes(), _PNG_ZLIB_LEVEL)
    return (
        _PNG_SIGNATURE
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def _require_dims(width: int, height: int) -> None:
    if width < 1 or height < 1:
        raise ZeroDimension(f"dimensions must be >= 1, got {width}x{height}")


class ImageBuf:
    """An RGB8 raster. PNG bytes and the content hash are computed lazily
    and cached, so repeated hashing of the same image is free."""

    __slots__ = ("_arr", "_png", "_sha")

    def __init__(self, array: np.ndarray):
        arr = np.asarray(array)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValueError("ImageBuf expects a HxWx3 uint8 array")
        _require_dims(arr.shape[1], arr.shape[0])
        arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        self._arr = arr
        self._png: bytes | None = None
        self._sha: str | None = None

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: bytes) -> "ImageBuf":
        _require_dims(width, height)
        if len(pixels) != width * height * 3:
            raise ValueError(
                f"expected {width * height * 3} bytes, got {len(pixels)}"
            )
        arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
        return cls(arr)

    @property
    def width(self) -> int:
        return int(self._arr.shape[1])

    @property
    def height(self) -> int:
        return int(self._arr.shape[0])

    @property
    def pixels(self) -> bytes:
        return self._arr.tobytes()

    def to_array(self) -> np.ndarray:
        """Read-only HxWx3 uint8 view."""
        return self._arr

    def to_png(self) -> bytes:
        if self._png is None:
            self._png = _encode_png(self._arr)
        return self._png

    def sha256(self) -> str:
        if self._sha is None:
            self._sha = sha256_hex(self.to_png())
        return self._sha

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageBuf):
            return NotImplemented
        return self._arr.shape == other._arr.shape and bool(
            (self._arr == other._arr).all()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"ImageBuf({self.width}x{self.height})"


class BinaryMask:
    """A per-pixel map over an image: 1 = pixel may change, 0 = pixel must
    remain unchanged."""

    __slots__ = ("_arr", "_png", "_sha")

    def __init__(self, array: np.ndarray):
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise ValueError("BinaryMask expects a HxW array")
        _require_dims(arr.shape[1], arr.shape[0])
        arr = np.ascontiguousarray(arr.astype(bool, copy=False))
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        self._arr = arr
        self._png: bytes | None = None
        self._sha: str | None = None

    @property
    def width(self) -> int:
        return int(self._arr.shape[1])

    @property
    def height(self) -> int:
        return int(self._arr.shape[0])

    @property
    def bits(self) -> bytes:
        """One byte per pixel, value 0 or 1, row-major."""
        return self._arr.astype(np.uint8).tobytes()

    @property
    def popcount(self) -> int:
        return int(self._arr.sum())

    def to_array(self) -> np.ndarray:
        """Read-only HxW bool view."""
        return self._arr

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self._arr)

    def to_png(self) -> bytes:
        if self._png is None:
            self._png = _encode_png(self._arr.astype(np.uint8) * 255)
        return self._png

    def sha256(self) -> str:
        if self._sha is None:
            self._sha = sha256_hex(self.to_png())
        return self._sha

    def matches(self, image: ImageBuf) -> bool:
        return self.width == image.width and self.height == image.height

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self._arr.shape == other._arr.shape and bool(
            (self._arr == other._arr).all()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, popcount={self.popcount})"


def ensure_same_dims(image: ImageBuf, mask: BinaryMask) -> None:
    """Raise DimMismatch unless mask dims equal image dims."""
    if not mask.matches(image):
        raise DimMismatch(
            f"mask {mask.width}x{mask.height} does not match "
            f"image {image.width}x{image.height}"
        )


def _open_png(data: bytes) -> Image.Image:
    if len(data) < 29 or not data.startswith(_PNG_SIGNATURE):
        raise MalformedPng("not a PNG byte stream")
    # IHDR bit depth sits at byte 24; Pillow silently narrows 16-bit color
    # images so the depth check has to happen on the raw header.
    if data[24] != 8:
        raise UnsupportedDepth(f"bit depth {data[24]} unsupported, expected 8")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise MalformedPng(str(exc)) from exc
    return img


def decode_image(data: bytes) -> ImageBuf:
    """Decode an 8-bit PNG. Alpha is dropped, grayscale and palette images
    are expanded to 3 channels."""
    img = _open_png(data)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return ImageBuf(np.asarray(img, dtype=np.uint8))


def encode_image(image: ImageBuf) -> bytes:
    return image.to_png()


def decode_mask(data: bytes, threshold: int = 128) -> BinaryMask:
    """Decode a mask PNG: a pixel is 1 iff its luma is >= threshold."""
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must be in 0..255, got {threshold}")
    img = _open_png(data)
    if img.mode != "L":
        img = img.convert("L")
    luma = np.asarray(img, dtype=np.uint8)
    return BinaryMask(luma >= threshold)


def encode_mask(mask: BinaryMask) -> bytes:
    """Single-channel PNG with values {0, 255}."""
    return mask.to_png()


def full_mask(width: int, height: int) -> BinaryMask:
    """Mask covering the entire image (every bit 1)."""
    _require_dims(width, height)
    return BinaryMask(np.ones((height, width), dtype=bool))


def select_argmax(scores: Sequence[float]) -> int:
    """Index of the highest score; ties break to the lowest index."""
    if len(scores) == 0:
        raise EmptyCandidates("cannot select from zero candidates")
    values = [float(s) for s in scores]
    for i, value in enumerate(values):
        if not np.isfinite(value):
            raise NonFiniteScore(f"score at index {i} is {value!r}")
    return max(range(len(values)), key=values.__getitem__)


def render_mask_overlay(image: ImageBuf, mask: BinaryMask) -> ImageBuf:
    """Composite the mask onto the image as a half-transparent red layer.

    This is how masks are presented to vision models and to the UI: masked
    pixels become (pixel + red) / 2, unmasked pixels pass through.
    """
    ensure_same_dims(image, mask)
    arr = image.to_array().astype(np.uint16)
    out = arr.copy()
    m = mask.to_array()
    out[m, 0] = (arr[m, 0] + 255) // 2
    out[m, 1] = arr[m, 1] // 2
    out[m, 2] = arr[m, 2] // 2
    return ImageBuf(out.astype(np.uint8))


@dataclass(frozen=True)
class Instruction:
    """A user-issued natural-language edit request."""

    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")


class PromptKind(str, Enum):
    LOCALIZATION = "localization"
    MODIFICATION = "modification"


@dataclass(frozen=True)
class Prompt:
    """A generated intermediate prompt: either a region description
    (localization) or an executable editing plan (modification)."""

    kind: PromptKind
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("prompt text must be non-empty")


T = TypeVar("T")


@dataclass(frozen=True)
class Candidate(Generic[T]):
    index: int
    payload: T
    score: float | None
    seed: int
    backend: str


class CandidateSet(Generic[T]):
    """Ordered candidates with optional judge scores.

    Indices are contiguous from 0. Scores are assigned once, after
    generation; NaN or infinite scores are rejected at assignment time so a
    faulty judge fails loudly instead of skewing selection.
    """

    __slots__ = ("_items",)

    def __init__(self, items: Sequence[Candidate[T]]):
        for i, item in enumerate(items):
            if item.index != i:
                raise ValueError(f"candidate index {item.index} at position {i}")
            if item.score is not None and not np.isfinite(item.score):
                raise NonFiniteScore(f"candidate {i} score {item.score!r}")
        self._items = tuple(items)

    @classmethod
    def build(
        cls,
        payloads: Sequence[T],
        seeds: Sequence[int],
        backend: str,
    ) -> "CandidateSet[T]":
        if len(payloads) != len(seeds):
            raise ValueError("payloads and seeds must align")
        return cls(
            [
                Candidate(index=i, payload=p, score=None, seed=s, backend=backend)
                for i, (p, s) in enumerate(zip(payloads, seeds))
            ]
        )

    def with_scores(self, scores: Sequence[float]) -> "CandidateSet[T]":
        if len(scores) != len(self._items):
            raise ValueError(
                f"{len(scores)} scores for {len(self._items)} candidates"
            )
        for i, s in enumerate(scores):
            if not np.isfinite(s):
                raise NonFiniteScore(f"score at index {i} is {s!r}")
        return CandidateSet(
            [
                Candidate(c.index, c.payload, float(s), c.seed, c.backend)
                for c, s in zip(self._items, scores)
            ]
        )

    @property
    def scores(self) -> list[float | None]:
        return [c.score for c in self._items]

    @property
    def payloads(self) -> list[T]:
        return [c.payload for c in self._items]

    def best_index(self) -> int:
        scores = self.scores
        if any(s is None for s in scores):
            raise ValueError("cannot select before scores are assigned")
        return select_argmax([s for s in scores if s is not None])

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Candidate[T]]:
        return iter(self._items)

    def __getitem__(self, index: int) -> Candidate[T]:
        return self._items[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CandidateSet):
            return NotImplemented
        return self._items == other._items

    __hash__ = None  # type: ignore[assignment]


DEFAULT_LOCALIZATION_TEMPLATE = (
    "You are the localization stage of an image editing system. Given an "
    "image and an editing request, describe the exact region of the image "
    "that must change as a short, specific referring expression (for "
    "example: 'the red car on the left'). If the request adds new content, "
    "describe the surface or area that will host it (for example: 'the "
    "empty plate on the table'). Answer with the region description only."
)

DEFAULT_MODIFICATION_TEMPLATE = (
    "You are the planning stage of an image editing system. The region that "
    "may change is shown highlighted in red. Write one detailed, "
    "self-contained inpainting prompt describing exactly what the "
    "highlighted region should contain after the edit, including style, "
    "colors and context so it blends with the rest of the image. Answer "
    "with the prompt only."
)

DEFAULT_REFLECTION_TEMPLATE = (
    "You are scoring candidates for an image editing system. Rate each "
    "candidate for how well it satisfies the stated goal. Answer with one "
    "integer from 0 to 10 per candidate, one per line, in candidate order, "
    "and nothing else."
)


@dataclass(frozen=True)
class PromptTemplates:
    """The three system messages driving generation and reflection."""

    localization: str = DEFAULT_LOCALIZATION_TEMPLATE
    modification: str = DEFAULT_MODIFICATION_TEMPLATE
    reflection: str = DEFAULT_REFLECTION_TEMPLATE

    def __post_init__(self) -> None:
        for name in ("localization", "modification", "reflection"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} template must be non-empty")

    @classmethod
    def from_mapping(cls, data: dict) -> "PromptTemplates":
        defaults = cls()
        return cls(
            localization=data.get("localization", defaults.localization),
            modification=data.get("modification", defaults.modification),
            reflection=data.get("reflection", defaults.reflection),
        )

    def to_mapping(self) -> dict:
        return {
            "localization": self.localization,
            "modification": self.modification,
            "reflection": self.reflection,
        }

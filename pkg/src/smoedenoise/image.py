"""Grayscale image buffers, patch extraction, and overlap-aware aggregation.

Intensities live in [0, 1] as float64 throughout the library; 8-bit pixel
values are mapped to that range on load and quantized back on save. File
I/O covers binary PGM (P5, maxval 255) and 8-bit PNG (grayscale, or RGB
converted to luma on load). No other formats are supported.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# ITU-R 601 luma coefficients used for RGB -> grayscale conversion on load.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PGM_MAGIC = b"P5"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Raised for image files that parse but are not 8-bit grayscale/RGB."""


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """An immutable 2D grayscale intensity field in [0, 1].

    ``pixels`` is a read-only float64 array of shape (height, width).
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64, copy=True)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be 2D with positive dimensions, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image intensities must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def full(cls, width: int, height: int, value: float) -> "ImageBuffer":
        return cls(np.full((height, width), value, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Patch:
    """A square block of intensities copied out of a source image.

    ``origin`` is the (x, y) top-left pixel coordinate in the source image.
    Values are not range-restricted: decoded model patches may leave [0, 1]
    until final image assembly clamps them.
    """

    origin: tuple[int, int]
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise ValueError(f"patch values must be square 2D, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def k(self) -> int:
        return self.values.shape[0]


def extract_patch(img: ImageBuffer, origin: tuple[int, int], k: int) -> Patch:
    """Copy the k-by-k block with top-left corner ``origin`` out of ``img``."""
    x, y = int(origin[0]), int(origin[1])
    if k < 1:
        raise ValueError(f"patch size must be >= 1, got {k}")
    if x < 0 or x + k > img.width:
        raise ValueError(f"patch x-range [{x}, {x + k}) exceeds image width {img.width}")
    if y < 0 or y + k > img.height:
        raise ValueError(f"patch y-range [{y}, {y + k}) exceeds image height {img.height}")
    return Patch(origin=(x, y), values=img.pixels[y:y + k, x:x + k])


class Accumulator:
    """Per-pixel weighted sums for recombining overlapping patch estimates.

    Pixels never touched by any patch keep a zero weight and are flagged
    uncovered; ``finalize`` fills them from a fallback image.
    """

    def __init__(self, width: int, height: int):
        if width < 1 or height < 1:
            raise ValueError("accumulator dimensions must be positive")
        self.width = width
        self.height = height
        self.numerator = np.zeros((height, width), dtype=np.float64)
        self.denominator = np.zeros((height, width), dtype=np.float64)

    def accumulate(self, patch: Patch, weight: float) -> "Accumulator":
        """Add ``weight * value`` and ``weight`` at every pixel the patch covers."""
        if weight < 0:
            raise ValueError(f"weight must be nonnegative, got {weight}")
        x, y = patch.origin
        k = patch.k
        if x < 0 or y < 0 or x + k > self.width or y + k > self.height:
            raise ValueError(f"patch at {patch.origin} size {k} exceeds accumulator bounds "
                             f"{self.width}x{self.height}")
        self.numerator[y:y + k, x:x + k] += weight * patch.values
        self.denominator[y:y + k, x:x + k] += weight
        return self

    def uncovered(self) -> np.ndarray:
        """Boolean mask of pixels with zero accumulated weight."""
        return self.denominator == 0

    def finalize(self, fallback: ImageBuffer) -> ImageBuffer:
        """Weighted mean per covered pixel, clamped to [0, 1]; fallback elsewhere."""
        if fallback.height != self.height or fallback.width != self.width:
            raise ValueError(f"fallback dimensions {fallback.width}x{fallback.height} do not match "
                             f"accumulator {self.width}x{self.height}")
        covered = self.denominator > 0
        out = fallback.pixels.copy()
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = self.numerator / self.denominator
        out[covered] = np.clip(mean[covered], 0.0, 1.0)
        return ImageBuffer(out)


def quantize_u8(pixels: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to uint8 by nearest-integer rounding (ties up)."""
    return np.floor(pixels * 255.0 + 0.5).astype(np.uint8)


def load_image(path: str | os.PathLike) -> ImageBuffer:
    """Load an 8-bit PGM (binary P5) or PNG file as intensities in [0, 1].

    RGB PNGs are converted to luma (0.299 R + 0.587 G + 0.114 B) before
    scaling by 1/255. Unsupported formats or bit depths raise
    ImageFormatError naming what was detected.
    """
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(PGM_MAGIC):
        return _load_pgm(path)
    if head.startswith(PNG_MAGIC):
        return _load_png(path)
    raise ImageFormatError(f"{path}: not a binary PGM (P5) or PNG file")


def save_image(img: ImageBuffer, path: str | os.PathLike) -> None:
    """Write ``img`` as 8-bit PGM, or 8-bit grayscale PNG for ``.png`` paths.

    Round-tripping through save/load changes each pixel by at most 1/510
    (the nearest-integer quantization error).
    """
    if str(path).lower().endswith(".png"):
        _save_png(img, path)
    else:
        _save_pgm(img, path)


def _load_pgm(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, offset = _pgm_header_fields(data, path)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid PGM dimensions {width}x{height}")
    if maxval != 255:
        depth = 16 if maxval > 255 else 8
        raise ImageFormatError(f"{path}: unsupported PGM maxval {maxval} ({depth}-bit); "
                               "only 8-bit (maxval 255) is supported")
    raster = data[offset:offset + width * height]
    if len(raster) < width * height:
        raise ImageFormatError(f"{path}: truncated PGM raster "
                               f"({len(raster)} of {width * height} bytes)")
    px = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return ImageBuffer(px.astype(np.float64) / 255.0)


def _pgm_header_fields(data: bytes, path) -> tuple[tuple[int, int, int], int]:
    # Header is "P5", then width, height, maxval as whitespace-separated
    # tokens ("#" starts a comment to end of line), then ONE whitespace byte
    # before the raster.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            pos = len(data) if eol == -1 else eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ImageFormatError(f"{path}: malformed PGM header near byte {start}")
        fields.append(int(token))
    return (fields[0], fields[1], fields[2]), pos + 1


def _save_pgm(img: ImageBuffer, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantize_u8(img.pixels).tobytes())


def _load_png(path) -> ImageBuffer:
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            return ImageBuffer(arr.astype(np.float64) / 255.0)
        if mode == "RGB":
            arr = np.asarray(im, dtype=np.uint8).astype(np.float64)
            luma = (arr[..., 0] * LUMA_WEIGHTS[0]
                    + arr[..., 1] * LUMA_WEIGHTS[1]
                    + arr[..., 2] * LUMA_WEIGHTS[2])
            return ImageBuffer(luma / 255.0)
    raise ImageFormatError(f"{path}: unsupported PNG mode '{mode}'; "
                           "only 8-bit grayscale (L) or RGB is supported")


def _save_png(img: ImageBuffer, path) -> None:
    from PIL import Image

    Image.fromarray(quantize_u8(img.pixels), mode="L").save(path, format="PNG")

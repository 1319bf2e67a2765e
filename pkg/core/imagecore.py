"""Image representation, pixel primitives, normalization and the PNG/PPM codecs.

Images are H x W x 3 float64 arrays. Every operation here is pure: it never
mutates its input and returns a new ImageTensor.
"""
import hashlib
import io
import re
import struct
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from core.errors import DataError, ImageDecodeError, InvalidArgumentError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
STD_FLOOR = 1e-8

Rng = np.random.Generator


def make_rng(seed):
    """PCG64 generator: the same seed gives the same draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class ColorSpace(str, Enum):
    SRGB_UNIT = "SRGB_UNIT"
    NORMALIZED = "NORMALIZED"


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray
    color_space: ColorSpace = ColorSpace.SRGB_UNIT

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidArgumentError(f"image must be H x W x 3, got shape {data.shape}")
        if data.shape[0] <= 0 or data.shape[1] <= 0:
            raise InvalidArgumentError("image height and width must be positive")
        if self.color_space == ColorSpace.SRGB_UNIT:
            if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
                raise InvalidArgumentError("SRGB_UNIT image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "color_space", ColorSpace(self.color_space))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return ImageTensor(data, self.color_space)

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.color_space == other.color_space and np.array_equal(self.data, other.data)


def unit_image(data):
    """Wrap an array as an SRGB_UNIT image, clamping to [0, 1]."""
    return ImageTensor(np.clip(data, 0.0, 1.0), ColorSpace.SRGB_UNIT)


def constant_image(height, width, value):
    return ImageTensor(np.full((height, width, 3), value, dtype=np.float64))


def _bilinear_axis(n_in, n_out):
    """Source indices and weights for one axis, half-pixel centers."""
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    return lo, hi, frac


def resize_bilinear(img, h, w):
    if h <= 0 or w <= 0:
        raise InvalidArgumentError(f"target size must be positive, got {h}x{w}")
    if (h, w) == (img.height, img.width):
        return img.with_data(img.data)
    y0, y1, fy = _bilinear_axis(img.height, h)
    x0, x1, fx = _bilinear_axis(img.width, w)
    data = img.data
    fx = fx[None, :, None]
    top = data[y0][:, x0] * (1.0 - fx) + data[y0][:, x1] * fx
    bottom = data[y1][:, x0] * (1.0 - fx) + data[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1.0 - fy) + bottom * fy
    if img.color_space == ColorSpace.SRGB_UNIT:
        out = np.clip(out, 0.0, 1.0)
    return img.with_data(out)


def channel_stats(img):
    """Per-channel mean and population standard deviation."""
    flat = img.data.reshape(-1, 3)
    return flat.mean(axis=0), flat.std(axis=0)


def normalize_per_channel(img, mean=None, std=None):
    """Zero-mean, unit-variance per channel.

    Statistics come from the image itself unless dataset-level mean/std are
    given. A channel with std below 1e-8 is divided by 1 instead.
    """
    if img.color_space != ColorSpace.SRGB_UNIT:
        raise InvalidArgumentError("normalize_per_channel expects an SRGB_UNIT image")
    if mean is None or std is None:
        mean, std = channel_stats(img)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return ImageTensor((img.data - mean) / std, ColorSpace.NORMALIZED)


def quantize(img):
    """Nearest 8-bit value per channel, as uint8."""
    return np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels):
    return ImageTensor(np.asarray(pixels, dtype=np.float64) / 255.0)


def encode_png(img):
    buf = io.BytesIO()
    Image.fromarray(quantize(img)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _scan_png(data):
    """Walk the chunk table; returns the offset of the first IDAT chunk."""
    if not data.startswith(PNG_SIGNATURE):
        raise ImageDecodeError("missing PNG signature", offset=0)
    offset = len(PNG_SIGNATURE)
    first_idat = None
    while True:
        if offset + 8 > len(data):
            raise ImageDecodeError("truncated chunk header", offset=offset)
        length, ctype = struct.unpack(">I4s", data[offset:offset + 8])
        end = offset + 8 + length + 4
        if end > len(data):
            raise ImageDecodeError(f"truncated {ctype!r} chunk", offset=offset)
        body = data[offset + 4:offset + 8 + length]
        (crc,) = struct.unpack(">I", data[end - 4:end])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ImageDecodeError(f"CRC mismatch in {ctype!r} chunk", offset=offset)
        if ctype == b"IDAT" and first_idat is None:
            first_idat = offset
        if ctype == b"IEND":
            return first_idat if first_idat is not None else offset
        offset = end


def decode_png(data):
    idat_offset = _scan_png(data)
    try:
        with Image.open(io.BytesIO(data)) as im:
            pixels = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError, zlib.error, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode PNG pixel data: {exc}", offset=idat_offset) from exc
    return from_uint8(pixels)


_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def encode_ppm(img):
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + quantize(img).tobytes()


def decode_ppm(data):
    match = _PPM_HEADER.match(data)
    if match is None:
        raise ImageDecodeError("malformed P6 header", offset=0)
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ImageDecodeError(f"unsupported maxval {maxval}", offset=match.start(3))
    expected = match.end() + width * height * 3
    if len(data) < expected:
        raise ImageDecodeError("truncated pixel payload", offset=len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=match.end())
    return from_uint8(pixels.reshape(height, width, 3))


def read_image(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if data.startswith(b"P6"):
        return decode_ppm(data)
    return decode_png(data)


def write_image(path, img):
    path = Path(path)
    payload = encode_ppm(img) if path.suffix.lower() == ".ppm" else encode_png(img)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc
    return path


def image_digest(img):
    """sha256 of the quantized pixels; stable across runs and platforms."""
    return hashlib.sha256(quantize(img).tobytes()).hexdigest()

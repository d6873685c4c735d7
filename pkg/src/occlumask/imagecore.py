"""Rasters, Netpbm codecs, resizing and integer alpha compositing.

Three raster kinds are used throughout the package:

* :class:`Image`  -- 8-bit RGB, stored as a ``(height, width, 3)`` uint8 array
* :class:`Sprite` -- 8-bit RGBA, ``(height, width, 4)``
* :class:`BinaryMask` -- boolean occupancy, ``(height, width)``

All three are immutable: the wrapped array is flagged read-only on
construction.  File formats are binary PPM (P6), PAM (P7, ``RGB_ALPHA``) and
PGM (P5), all with maxval 255.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BinaryMask",
    "DecodeError",
    "Image",
    "Sprite",
    "composite",
    "decode_image",
    "encode_image",
    "encode_mask",
    "encode_sprite",
    "load_raster",
    "resize",
    "resize_mask",
    "save_raster",
]

MASK_THRESHOLD = 128


class DecodeError(ValueError):
    """Raised for malformed or unsupported Netpbm streams."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _frozen(arr: np.ndarray, dtype, ndim: int, channels: int | None) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != dtype or arr.flags.writeable or not arr.flags.c_contiguous:
        arr = np.array(arr, dtype=dtype, order="C")
    if arr.ndim != ndim or (channels is not None and arr.shape[-1] != channels):
        raise ValueError(f"expected {ndim}-d array with {channels} channels, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"raster dimensions must be >= 1, got {arr.shape[:2]}")
    arr.flags.writeable = False
    return arr


class _Raster:
    pixels: np.ndarray

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((type(self).__name__, self.pixels.shape, self.pixels.tobytes()))

    def __repr__(self):
        return f"{type(self).__name__}({self.width}x{self.height})"


@dataclass(frozen=True, eq=False, repr=False)
class Image(_Raster):
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(self.pixels, np.uint8, 3, 3))

    @classmethod
    def filled(cls, width: int, height: int, rgb=(0, 0, 0)) -> "Image":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = np.asarray(rgb, dtype=np.uint8)
        return cls(arr)


@dataclass(frozen=True, eq=False, repr=False)
class Sprite(_Raster):
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(self.pixels, np.uint8, 3, 4))

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]


@dataclass(frozen=True, eq=False, repr=False)
class BinaryMask(_Raster):
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(self.pixels, np.bool_, 2, None))

    @property
    def bits(self) -> np.ndarray:
        return self.pixels

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.pixels.sum())


# --------------------------------------------------------------------------
# Netpbm codecs
# --------------------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace separated tokens after the magic number.

    Returns the tokens and the offset of the first payload byte (one
    whitespace byte after the last token).
    """
    pos = 2
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WS:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            break
        tokens.append(data[start:pos])
    if len(tokens) < count:
        return tokens, n
    if pos >= n or data[pos] not in _WS:
        raise DecodeError("header", "missing whitespace before payload")
    return tokens, pos + 1


def _parse_int(token: bytes | None, field: str) -> int:
    if token is None:
        raise DecodeError(field, "missing")
    try:
        value = int(token.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise DecodeError(field, f"not an integer: {token!r}") from None
    return value


def _check_dims(width: int, height: int):
    if width < 1:
        raise DecodeError("width", f"must be >= 1, got {width}")
    if height < 1:
        raise DecodeError("height", f"must be >= 1, got {height}")


def _payload(data: bytes, offset: int, size: int) -> np.ndarray:
    if len(data) - offset < size:
        raise DecodeError(
            "payload", f"truncated: expected {size} bytes, got {len(data) - offset}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=offset)


def _decode_pnm(data: bytes, channels: int):
    tokens, offset = _header_tokens(data, 3)
    tokens += [None] * (3 - len(tokens))
    width = _parse_int(tokens[0], "width")
    height = _parse_int(tokens[1], "height")
    maxval = _parse_int(tokens[2], "maxval")
    _check_dims(width, height)
    if maxval != 255:
        raise DecodeError("maxval", f"unsupported maxval {maxval} (only 255)")
    raw = _payload(data, offset, width * height * channels)
    return raw.reshape((height, width, channels) if channels > 1 else (height, width))


def _decode_pam(data: bytes) -> Sprite:
    fields: dict[str, str] = {}
    offset = data.find(b"\n") + 1
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise DecodeError("ENDHDR", "missing")
        text = data[offset:end].strip()
        offset = end + 1
        if not text or text.startswith(b"#"):
            continue
        if text == b"ENDHDR":
            break
        key, _, value = text.partition(b" ")
        fields[key.decode("ascii", "replace")] = value.strip().decode("ascii", "replace")

    def get(name: str) -> bytes | None:
        return fields[name].encode() if name in fields else None

    width = _parse_int(get("WIDTH"), "WIDTH")
    height = _parse_int(get("HEIGHT"), "HEIGHT")
    depth = _parse_int(get("DEPTH"), "DEPTH")
    maxval = _parse_int(get("MAXVAL"), "MAXVAL")
    _check_dims(width, height)
    if depth != 4:
        raise DecodeError("DEPTH", f"unsupported depth {depth} (only 4)")
    if maxval != 255:
        raise DecodeError("MAXVAL", f"unsupported maxval {maxval} (only 255)")
    if fields.get("TUPLTYPE") != "RGB_ALPHA":
        raise DecodeError("TUPLTYPE", f"unsupported tuple type {fields.get('TUPLTYPE')!r}")
    raw = _payload(data, offset, width * height * 4)
    return Sprite(raw.reshape(height, width, 4))


def decode_image(data: bytes) -> Image | Sprite | BinaryMask:
    """Decode a P6, P7 (RGB_ALPHA) or P5 byte stream.

    P5 grey levels are binarized at >= 128.
    """
    data = bytes(data)
    magic = data[:2]
    if magic == b"P6":
        return Image(_decode_pnm(data, 3))
    if magic == b"P5":
        return BinaryMask(_decode_pnm(data, 1) >= MASK_THRESHOLD)
    if magic == b"P7":
        return _decode_pam(data)
    raise DecodeError("magic", f"unsupported magic number {magic!r}")


def encode_image(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def encode_sprite(sprite: Sprite) -> bytes:
    header = (
        f"P7\nWIDTH {sprite.width}\nHEIGHT {sprite.height}\nDEPTH 4\n"
        "MAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n"
    ).encode("ascii")
    return header + sprite.pixels.tobytes()


def encode_mask(mask: BinaryMask) -> bytes:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + (mask.pixels.astype(np.uint8) * 255).tobytes()


def save_raster(path, raster: Image | Sprite | BinaryMask) -> None:
    if isinstance(raster, Image):
        data = encode_image(raster)
    elif isinstance(raster, Sprite):
        data = encode_sprite(raster)
    else:
        data = encode_mask(raster)
    with open(path, "wb") as fh:
        fh.write(data)


def load_raster(path) -> Image | Sprite | BinaryMask:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


# --------------------------------------------------------------------------
# Resizing
# --------------------------------------------------------------------------


def _bilinear_taps(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_array(arr: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize of an ``(h, w, c)`` uint8 array, rounding half up."""
    h, w = arr.shape[:2]
    if (w, h) == (new_w, new_h):
        return arr.copy()
    x0, x1, fx = _bilinear_taps(w, new_w)
    y0, y1, fy = _bilinear_taps(h, new_h)
    a = arr.astype(np.float64)
    fx = fx[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # floor((dst + 0.5) * n_in / n_out) in exact integer arithmetic
    return ((2 * np.arange(n_out, dtype=np.int64) + 1) * n_in) // (2 * n_out)


def resize(img: Image, new_w: int, new_h: int) -> Image:
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be >= 1, got {new_w}x{new_h}")
    if (img.width, img.height) == (new_w, new_h):
        return img
    return Image(resize_array(img.pixels, new_w, new_h))


def resize_mask(m: BinaryMask, new_w: int, new_h: int) -> BinaryMask:
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be >= 1, got {new_w}x{new_h}")
    if (m.width, m.height) == (new_w, new_h):
        return m
    ys = nearest_index(m.height, new_h)
    xs = nearest_index(m.width, new_w)
    return BinaryMask(m.pixels[ys][:, xs])


# --------------------------------------------------------------------------
# Compositing
# --------------------------------------------------------------------------


def blend(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Integer "over" blend: ``(a*fg + (255-a)*bg + 127) // 255``."""
    a = alpha.astype(np.int32)
    out = (a * fg.astype(np.int32) + (255 - a) * bg.astype(np.int32) + 127) // 255
    return out.astype(np.uint8)


def overlap(base_w: int, base_h: int, sprite_w: int, sprite_h: int, x: int, y: int):
    """Clip a sprite placed at (x, y) to the base frame.

    Returns ``(base_slice, sprite_slice)`` pairs of (row, col) slices, or None
    when the sprite lies entirely outside the frame.
    """
    bx0, by0 = max(x, 0), max(y, 0)
    bx1, by1 = min(x + sprite_w, base_w), min(y + sprite_h, base_h)
    if bx0 >= bx1 or by0 >= by1:
        return None
    base_sl = (slice(by0, by1), slice(bx0, bx1))
    spr_sl = (slice(by0 - y, by1 - y), slice(bx0 - x, bx1 - x))
    return base_sl, spr_sl


def composite(base: Image, sprite: Sprite, x: int, y: int) -> Image:
    """Alpha-composite ``sprite`` onto ``base`` with its top-left at (x, y)."""
    x, y = int(x), int(y)
    clip = overlap(base.width, base.height, sprite.width, sprite.height, x, y)
    if clip is None:
        return base
    base_sl, spr_sl = clip
    out = base.pixels.copy()
    region = sprite.pixels[spr_sl]
    out[base_sl] = blend(region[..., :3], out[base_sl], region[..., 3:4])
    return Image(out)

"""Binary PPM (P6, maxval 255) reader and writer.

The codec is deliberately strict: anything but a well-formed P6 file with
maxval 255 is rejected with a :class:`~minircnn.errors.FormatError` carrying
the byte offset of the defect. Images travel through the pipeline as
channel-major float64 tensors in [0, 1]; values that are exact multiples of
1/255 survive a save/load round trip bit-exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, ShapeError

_WHITESPACE = b" \t\n\r\x0b\x0c"


class _HeaderScanner:
    """Tokenizer for the PNM header (handles '#' comments)."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def skip_separators(self) -> None:
        blob = self.blob
        while self.pos < len(blob):
            c = blob[self.pos:self.pos + 1]
            if c in _WHITESPACE:
                self.pos += 1
            elif c == b"#":
                nl = blob.find(b"\n", self.pos)
                self.pos = len(blob) if nl < 0 else nl + 1
            else:
                return

    def token(self, what: str) -> bytes:
        self.skip_separators()
        start = self.pos
        while self.pos < len(self.blob) and self.blob[self.pos:self.pos + 1] not in _WHITESPACE:
            self.pos += 1
        if self.pos == start:
            raise FormatError(f"missing {what}", offset=start)
        return self.blob[start:self.pos]

    def int_token(self, what: str) -> int:
        start = self.pos
        tok = self.token(what)
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"{what} is not an integer: {tok!r}", offset=start) from None


def load_ppm(path: str | os.PathLike) -> Tensor:
    """Read a binary P6 file into a (3, H, W) float64 tensor in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    scan = _HeaderScanner(blob)
    magic = scan.token("magic")
    if magic != b"P6":
        raise FormatError(f"expected magic P6, got {magic!r}", offset=0)
    width = scan.int_token("width")
    height = scan.int_token("height")
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=2)
    maxval_at = scan.pos
    maxval = scan.int_token("maxval")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=maxval_at)
    # exactly one whitespace byte separates the header from pixel data
    if scan.pos >= len(blob) or blob[scan.pos:scan.pos + 1] not in _WHITESPACE:
        raise FormatError("missing separator before pixel data", offset=scan.pos)
    data_at = scan.pos + 1
    need = width * height * 3
    pixels = blob[data_at:]
    if len(pixels) < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(pixels)}",
                          offset=len(blob))
    if len(pixels) > need:
        raise FormatError(f"{len(pixels) - need} trailing bytes after pixel data",
                          offset=data_at + need)
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return Tensor(arr.transpose(2, 0, 1).astype(np.float64) / 255.0)


def save_ppm(image: Tensor | np.ndarray, path: str | os.PathLike) -> None:
    """Write a (3, H, W) tensor with values in [0, 1] as a binary P6 file."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got shape {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(quantized.transpose(1, 2, 0).tobytes())

"""8-bit RGB image input/output.

Binary PPM (P6, maxval 255) is the native format and needs no dependencies;
PNG goes through a Pillow decode-to-raw import step.  Everything returns
(H, W, 3) uint8 arrays.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header tokens
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFormatError(f"expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB image; PPM natively, PNG via a Pillow import."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    head = p.open("rb").read(8)
    if head[:2] == b"P6":
        return read_ppm(p)
    if head == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        return arr
    raise ImageFormatError(f"{p}: unsupported image format (PPM P6 or PNG expected)")

"""Image and mask I/O.

PPM/PGM (binary P6/P5, maxval 255) is handled here without dependencies and is
bit-exact; PNG goes through Pillow. Float images are in [0, 1] with shape
(H, W, 3) or (H, W); masks are single-channel and thresholded at 128.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

MASK_THRESHOLD = 128


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pnm(path, img) -> Path:
    path = Path(path)
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot write array of shape {a.shape} as PNM")
    h, w = a.shape[:2]
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes())
    return path


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Return the raw uint8 array, (H, W) for P5 and (H, W, 3) for P6."""
    data = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), off = _pnm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError):
        raise DataError(f"malformed PNM header in {path}", code="E_IMAGE_FORMAT") from None
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataError(f"unsupported PNM variant in {path}", code="E_IMAGE_FORMAT")
    ch = 3 if magic == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=off)
    return raw.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def read_image_uint8(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}", code="E_MISSING_FILE", path=str(path))
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB" if im.mode not in ("L", "1", "P") else "L"))


def read_image(path) -> np.ndarray:
    """RGB float image in [0, 1], shape (H, W, 3)."""
    a = read_image_uint8(path)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    a = read_image_uint8(path)
    if a.ndim == 3:
        a = a.mean(axis=2)
    return a >= MASK_THRESHOLD


def write_png(path, img) -> Path:
    from PIL import Image

    path = Path(path)
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    Image.fromarray(a).save(path, format="PNG", optimize=False)
    return path


def write_image(path, img) -> Path:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return write_pnm(path, img)
    return write_png(path, img)

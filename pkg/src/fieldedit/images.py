"""8-bit binary PPM (P6) and PGM (P5) image IO.

Float images in [0, 1] are quantized with round-half-away (via ``np.rint`` on
``x * 255``) and clipped; readers return float64 arrays scaled back to [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm"]


def _quantize(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    q = _quantize(arr)
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected an (H, W) image, got shape {arr.shape}")
    q = _quantize(arr)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _read_netpbm(path: str | Path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    # Header: magic, then whitespace/comment-separated width, height, maxval,
    # then exactly one whitespace byte before the raster.
    if not data.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file: {path}")
    pos = len(magic)
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated header in {path}")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit images are supported (maxval={maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ValueError(f"truncated raster in {path}: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(path, b"P5")

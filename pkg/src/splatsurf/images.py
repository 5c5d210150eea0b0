"""Image file handling: 8-bit PNG and binary PPM in, PFM debug maps out.

Pixel data is converted to linear float64 in [0, 1] on load.  Stored files are
assumed to already be linear (the synthetic generator writes linear values),
so no gamma handling happens here.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM file as an (H, W, 3) float64 array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, pixels: np.ndarray):
    """Write an (H, W, 3) float array in [0, 1] as 8-bit PNG or binary PPM."""
    path = Path(path)
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, data)
        return
    Image.fromarray(data, mode="RGB").save(path)


def save_gray(path, values: np.ndarray):
    """Write an (H, W) float array in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an (H, W, 3) image; (H, W) inputs pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ np.array([0.299, 0.587, 0.114])


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: only binary (P6) PPM is supported")
    # Header: magic, width, height, maxval; separated by whitespace/comments.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        m = re.match(rb"(\s*(?:#[^\n]*\n)*\s*)(\d+)", raw[pos:])
        if not m:
            raise ValueError(f"{path}: malformed PPM header at byte {pos}")
        tokens.append(int(m.group(2)))
        pos += m.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    needed = width * height * 3
    if len(raw) - pos < needed:
        raise ValueError(f"{path}: truncated pixel data at byte {len(raw)} "
                         f"(need {pos + needed})")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=needed, offset=pos)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def _write_ppm(path: Path, data: np.ndarray):
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def save_pfm(path, values: np.ndarray):
    """Write a float map as little-endian PFM ("PF" color, "Pf" grayscale).

    PFM stores rows bottom-to-top; a negative scale marks little-endian data.
    """
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 2:
        header, data = b"Pf", arr[:, :, None]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header, data = b"PF", arr
    else:
        raise ValueError(f"PFM supports HxW or HxWx3 maps, got {arr.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(data[::-1].astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a PFM file back into (H, W) or (H, W, 3) float32."""
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * (3 if color else 1)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    shape = (h, w, 3) if color else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)

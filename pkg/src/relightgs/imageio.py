"""PNG and PFM reading and writing."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def read_png(path: str | Path) -> np.ndarray:
    """8-bit PNG as float64 in [0, 1]; gray images come back (H, W), colour (H, W, 3)."""
    try:
        with Image.open(path) as im:
            a = np.asarray(im if im.mode == "L" else im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: cannot read PNG ({exc})") from None
    return a.astype(np.float64) / 255.0


def read_mask(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    """Binary mask, ``True`` where the pixel value is 255 in any channel."""
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: cannot read mask ({exc})") from None
    if a.shape != tuple(shape):
        raise ValueError(f"{path}: mask is {a.shape[1]}x{a.shape[0]}, image is {shape[1]}x{shape[0]}")
    return a == 255


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write values in [0, 1] verbatim as 8-bit (no gamma applied here)."""
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    """Little-endian PFM, colour for (H, W, 3) and gray for (H, W); top row first."""
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise ValueError("colour PFM needs 3 channels")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def read_pfm(path: str | Path) -> np.ndarray:
    """PFM of either byte order; returns float64, top row first."""
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise ValueError(f"{path}: malformed PFM header")
    color = m.group(1) == b"PF"
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    if scale == 0 or w <= 0 or h <= 0:
        raise ValueError(f"{path}: malformed PFM header")
    c = 3 if color else 1
    dt = np.dtype("<f4" if scale < 0 else ">f4")
    body = data[m.end():]
    n = w * h * c
    if len(body) < n * 4:
        raise ValueError(f"{path}: truncated PFM payload")
    a = np.frombuffer(body[: n * 4], dtype=dt).astype(np.float64)
    a = a.reshape(h, w, c) if color else a.reshape(h, w)
    return a[::-1].copy()

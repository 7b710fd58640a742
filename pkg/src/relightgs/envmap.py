"""Equirectangular environment maps: loading, SH projection, rotation, export."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import sh
from .imageio import read_pfm, read_png, to_uint8, write_pfm, write_png

GAMMA = 2.2
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class EquirectMap:
    """Linear rgb radiance, (H, W, 3); top row is the zenith (+z), azimuth from +x."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError("environment map must be (H, W, 3)")
        if not np.isfinite(a).all():
            raise ValueError("environment map has non-finite values")
        object.__setattr__(self, "data", np.maximum(a, 0.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def pixel_angles(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Polar and azimuthal angle of every pixel centre, each (H, W)."""
    phi = 2.0 * math.pi * (np.arange(width) + 0.5) / width
    theta = math.pi * (np.arange(height) + 0.5) / height
    return np.meshgrid(theta, phi, indexing="ij")


def angles_to_dirs(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def solid_angles(width: int, height: int) -> np.ndarray:
    theta, _ = pixel_angles(width, height)
    return np.sin(theta) * (2.0 * math.pi / width) * (math.pi / height)


def load_map(path: str | Path) -> EquirectMap:
    """PFM (linear) or 8-bit PNG (inverse gamma 2.2); negatives clamp to 0."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        a = read_pfm(path)
        if a.ndim == 2:
            a = np.repeat(a[..., None], 3, axis=-1)
    elif suffix == ".png":
        a = read_png(path)
        if a.ndim == 2:
            a = np.repeat(a[..., None], 3, axis=-1)
        a = a**GAMMA
    else:
        raise ValueError(f"{path}: unsupported environment map format {suffix!r} (use .pfm or .png)")
    return EquirectMap(np.nan_to_num(a, nan=0.0, posinf=0.0, neginf=0.0))


def save_map(path: str | Path, env: EquirectMap) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, env.data)
    elif path.suffix.lower() == ".png":
        write_png(path, np.clip(env.data, 0.0, 1.0) ** (1.0 / GAMMA))
    else:
        raise ValueError(f"{path}: unsupported environment map format (use .pfm or .png)")


def map_to_sh(env: EquirectMap, degree: int = sh.MAX_DEGREE) -> sh.SHCoefficients:
    theta, phi = pixel_angles(env.width, env.height)
    dirs = angles_to_dirs(theta, phi).reshape(-1, 3)
    w = solid_angles(env.width, env.height).reshape(-1)
    return sh.project_to_sh(dirs, env.data.reshape(-1, 3), w, degree)


def sh_to_map(light: sh.SHCoefficients, width: int, height: int) -> EquirectMap:
    """Evaluate ``light`` at every pixel centre; negatives clamp to 0."""
    theta, phi = pixel_angles(width, height)
    dirs = torch.as_tensor(angles_to_dirs(theta, phi))
    return EquirectMap(sh.eval_sh(light, dirs, check=False).numpy())


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    if axis not in AXES:
        raise ValueError(f"rotation axis must be one of x, y, z, got {axis!r}")
    i, j = [k for k in range(3) if k != AXES[axis]]
    c, s = math.cos(angle), math.sin(angle)
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def _row_sample(img: np.ndarray, row: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Linear in azimuth along ``row``; rows -1 and H continue across the pole."""
    h, w = img.shape[:2]
    over = (row < 0) | (row >= h)
    row = np.where(row < 0, 0, np.where(row >= h, h - 1, row))
    x = np.where(over, x + 0.5 * w, x)
    x0 = np.floor(x)
    fx = (x - x0)[..., None]
    x0 = x0.astype(int) % w
    x1 = (x0 + 1) % w
    return img[row, x0] * (1 - fx) + img[row, x1] * fx


def _bilinear(img: np.ndarray, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Sample at continuous angles; azimuth wraps and rows continue over the poles."""
    h, w = img.shape[:2]
    x = phi / (2.0 * math.pi) * w - 0.5
    y = theta / math.pi * h - 0.5
    y0 = np.floor(y)
    fy = (y - y0)[..., None]
    y0 = y0.astype(int)
    return _row_sample(img, y0, x) * (1 - fy) + _row_sample(img, y0 + 1, x) * fy


def rotate_map(env: EquirectMap, angle: float, axis: str = "y") -> EquirectMap:
    """Rotate the lighting by ``angle`` radians about ``axis``.

    Each output pixel looks up the source direction ``R^T d`` with bilinear
    interpolation.
    """
    if angle == 0.0:
        return EquirectMap(env.data.copy())
    R = rotation_matrix(axis, angle)
    theta, phi = pixel_angles(env.width, env.height)
    src = angles_to_dirs(theta, phi) @ R  # rows are R^T d
    st = np.arccos(np.clip(src[..., 2], -1.0, 1.0))
    sp = np.mod(np.arctan2(src[..., 1], src[..., 0]), 2.0 * math.pi)
    return EquirectMap(_bilinear(env.data, st, sp))


def rotate_map_y(env: EquirectMap, angle: float) -> EquirectMap:
    return rotate_map(env, angle, "y")


def map_preview(env: EquirectMap) -> np.ndarray:
    """8-bit gamma-encoded preview of a linear map."""
    return to_uint8(np.clip(env.data, 0.0, 1.0) ** (1.0 / GAMMA))

"""Split-sum BRDF lookup table for a dielectric GGX microfacet model.

Each texel stores ``(F1, F2)`` such that the directional albedo of the
specular lobe is ``F0 * F1 + F2`` with ``F0 = 0.04``.  Rows are indexed by
``cos(theta_v)`` and columns by roughness.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

F0_DIELECTRIC = 0.04
RHO_MIN = 0.03
COS_MIN = 0.02
MAGIC = b"BRDFLUT1"


@dataclass(frozen=True)
class BRDFLookupTable:
    """``grid[i, j] = (F1, F2)`` at ``cos_nodes[i]``, ``rho_nodes[j]``."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 3 or g.shape[0] != g.shape[1] or g.shape[2] != 2:
            raise ValueError(f"LUT grid must be (N, N, 2), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("LUT contains non-finite entries")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    @property
    def cos_nodes(self) -> np.ndarray:
        return np.linspace(COS_MIN, 1.0, self.resolution)

    @property
    def rho_nodes(self) -> np.ndarray:
        return np.linspace(RHO_MIN, 1.0, self.resolution)

    def torch_grid(self, dtype=torch.float64) -> torch.Tensor:
        return torch.from_numpy(self.grid.copy()).to(dtype)


def _radical_inverse(i: np.ndarray) -> np.ndarray:
    bits = i.astype(np.uint32)
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return bits.astype(np.float64) * 2.3283064365386963e-10


def hammersley(n: int) -> np.ndarray:
    i = np.arange(n)
    return np.stack([(i + 0.5) / n, _radical_inverse(i)], axis=-1)


def smith_visibility(n_dot_v, n_dot_l, alpha):
    """Height-correlated Smith term divided by ``4 NoL NoV``."""
    a2 = alpha * alpha
    gv = n_dot_l * np.sqrt(n_dot_v * n_dot_v * (1.0 - a2) + a2)
    gl = n_dot_v * np.sqrt(n_dot_l * n_dot_l * (1.0 - a2) + a2)
    return 0.5 / (gv + gl)


def _integrate_texel(n_dot_v: float, rho: float, xi: np.ndarray) -> tuple[float, float]:
    alpha = rho * rho
    v = np.array([np.sqrt(max(1.0 - n_dot_v * n_dot_v, 0.0)), 0.0, n_dot_v])
    phi = 2.0 * np.pi * xi[:, 0]
    cos_h = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    sin_h = np.sqrt(np.maximum(1.0 - cos_h * cos_h, 0.0))
    h = np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)
    v_dot_h = h @ v
    l = 2.0 * v_dot_h[:, None] * h - v
    n_dot_l = l[:, 2]
    ok = n_dot_l > 0.0
    nl = np.where(ok, n_dot_l, 1.0)
    vh = np.clip(v_dot_h, 0.0, 1.0)
    # estimator of D*G*NoL/(4 NoV) / pdf with pdf = D * NoH / (4 VoH)
    g_vis = 4.0 * smith_visibility(n_dot_v, nl, alpha) * nl * vh / cos_h
    g_vis = np.where(ok, g_vis, 0.0)
    fc = (1.0 - vh) ** 5
    return float(np.mean((1.0 - fc) * g_vis)), float(np.mean(fc * g_vis))


def bake_lut(resolution: int = 64, samples_per_texel: int = 1024, seed: int = 0) -> BRDFLookupTable:
    """Importance-sample the GGX lobe at every texel.

    Samples are a Hammersley set with a per-texel random azimuthal rotation, so the
    table is a pure function of ``(resolution, samples_per_texel, seed)``.
    """
    if resolution < 16:
        raise ValueError("LUT resolution must be at least 16")
    if samples_per_texel < 256:
        raise ValueError("need at least 256 samples per texel")
    base = hammersley(samples_per_texel)
    # rotate only the azimuthal coordinate, the radial one stays stratified
    shifts = np.random.default_rng(seed).random((resolution, resolution))
    cos_nodes = np.linspace(COS_MIN, 1.0, resolution)
    rho_nodes = np.linspace(RHO_MIN, 1.0, resolution)
    grid = np.empty((resolution, resolution, 2))
    for i, nv in enumerate(cos_nodes):
        for j, rho in enumerate(rho_nodes):
            xi = base.copy()
            xi[:, 0] = np.mod(xi[:, 0] + shifts[i, j], 1.0)
            grid[i, j] = _integrate_texel(nv, rho, xi)
    # store at file precision so a saved and reloaded table is bit-identical
    return BRDFLookupTable(grid.astype(np.float32).astype(np.float64))


def _bilinear_coords(x: torch.Tensor, lo: float, n: int):
    t = (x - lo) / (1.0 - lo) * (n - 1)
    i0 = torch.clamp(torch.floor(t.detach()), 0, n - 2).long()
    f = t - i0.to(t.dtype)
    # queries within rounding of a node return the stored value exactly; the
    # gradient is left untouched
    fd = f.detach()
    snap = torch.where(fd.abs() < 1e-9, fd, torch.where((fd - 1).abs() < 1e-9, fd - 1, torch.zeros_like(fd)))
    return i0, f - snap


def sample_lut(lut: BRDFLookupTable | torch.Tensor, roughness, cos_theta):
    """Bilinear lookup of ``(F1, F2)``; differentiable in both arguments.

    ``lut`` may be a table or its (N, N, 2) tensor grid.  Inputs are clamped
    to the grid range.
    """
    grid = lut.torch_grid() if isinstance(lut, BRDFLookupTable) else lut
    n = grid.shape[0]
    rho = torch.as_tensor(roughness, dtype=grid.dtype).clamp(RHO_MIN, 1.0)
    cos = torch.as_tensor(cos_theta, dtype=grid.dtype).clamp(COS_MIN, 1.0)
    i0, ti = _bilinear_coords(cos, COS_MIN, n)
    j0, tj = _bilinear_coords(rho, RHO_MIN, n)
    ti, tj = ti[..., None], tj[..., None]
    v00 = grid[i0, j0]
    v01 = grid[i0, j0 + 1]
    v10 = grid[i0 + 1, j0]
    v11 = grid[i0 + 1, j0 + 1]
    out = (1 - ti) * ((1 - tj) * v00 + tj * v01) + ti * ((1 - tj) * v10 + tj * v11)
    return out[..., 0], out[..., 1]


def specular_albedo(lut, roughness, cos_theta):
    f1, f2 = sample_lut(lut, roughness, cos_theta)
    return F0_DIELECTRIC * f1 + f2


def save_lut(path: str | Path, lut: BRDFLookupTable) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", lut.resolution))
        f.write(lut.grid.astype("<f4").tobytes(order="C"))
    tmp.replace(path)


def load_lut(path: str | Path) -> BRDFLookupTable:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a BRDF LUT file")
    (n,) = struct.unpack("<I", data[8:12])
    body = np.frombuffer(data[12:], dtype="<f4")
    if body.size != n * n * 2:
        raise ValueError(f"{path}: truncated LUT payload")
    return BRDFLookupTable(body.reshape(n, n, 2).astype(np.float64))


@lru_cache(maxsize=4)
def default_lut(resolution: int = 64, samples_per_texel: int = 1024, seed: int = 0) -> BRDFLookupTable:
    """Bake once per process; used whenever no LUT file is supplied."""
    return bake_lut(resolution, samples_per_texel, seed)


def load_or_bake(path: str | Path | None) -> BRDFLookupTable:
    if path is not None and Path(path).exists():
        return load_lut(path)
    return default_lut()

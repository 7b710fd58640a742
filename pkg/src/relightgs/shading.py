"""Per-Gaussian physically based colour.

All functions are batched over a leading Gaussian axis and differentiable.
``view_dirs`` always point from the Gaussian towards the camera.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch

from . import sh
from .brdf import F0_DIELECTRIC, sample_lut

GAMMA = 2.2


class Material(NamedTuple):
    albedo: torch.Tensor  # (N, 3) linear, in [0, 1]
    roughness: torch.Tensor  # (N,) in [0, 1]


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / torch.linalg.norm(v, dim=-1, keepdim=True).clamp_min(eps)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions in (w, x, y, z) order -> (..., 3, 3); normalised first."""
    q = normalize(q)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def gaussian_normal(rotation: torch.Tensor, scales: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
    """Rotation column of the shortest axis, flipped to face the camera.

    Ties between equal scales go to the lowest axis index.
    """
    R = quat_to_rotmat(rotation)
    axis = torch.argmin(scales.detach(), dim=-1)
    n = torch.gather(R, -1, axis[..., None, None].expand(*R.shape[:-1], 1)).squeeze(-1)
    sign = torch.where((n * view_dirs).sum(-1, keepdim=True).detach() < 0, -1.0, 1.0).to(n.dtype)
    return n * sign


def reflect(view_dirs: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
    return 2.0 * (view_dirs * normals).sum(-1, keepdim=True) * normals - view_dirs


def diffuse_color(albedo: torch.Tensor, normals: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """``albedo / pi * max(E(n), 0)`` with ``M`` from :func:`sh.irradiance_matrix`."""
    return albedo / math.pi * sh.irradiance(M, normals).clamp_min(0.0)


def specular_color(
    roughness: torch.Tensor,
    normals: torch.Tensor,
    view_dirs: torch.Tensor,
    light: torch.Tensor,
    lut_grid: torch.Tensor,
    roughness_power: float = 2.0,
) -> torch.Tensor:
    """Blurred light along the mirror direction times the split-sum BRDF term.

    ``light`` is the (3, 25) coefficient tensor of the environment.
    """
    g = sh.blur_multipliers(roughness, sh.MAX_DEGREE, roughness_power).to(light.dtype)  # (N, 25)
    r = reflect(view_dirs, normals)
    basis = sh.eval_sh_basis(normalize(r), sh.MAX_DEGREE, check=False)  # (N, 25)
    radiance = torch.einsum("nj,cj->nc", basis * g, light).clamp_min(0.0)
    cos = (normals * view_dirs).sum(-1)
    f1, f2 = sample_lut(lut_grid, roughness, cos)
    spec = radiance * (F0_DIELECTRIC * f1 + f2)[:, None]
    return torch.where((cos > 0)[:, None], spec, torch.zeros_like(spec))


def gamma_encode(x: torch.Tensor) -> torch.Tensor:
    """``clamp01(x) ** (1/2.2)`` with a finite gradient at zero."""
    x = x.clamp(0.0, 1.0)
    pos = x > 0
    safe = torch.where(pos, x, torch.ones_like(x))
    return torch.where(pos, safe ** (1.0 / GAMMA), torch.zeros_like(x))


def foreground_color(
    material: Material,
    normals: torch.Tensor,
    view_dirs: torch.Tensor,
    light: torch.Tensor,
    lut_grid: torch.Tensor,
    roughness_power: float = 2.0,
) -> torch.Tensor:
    M = sh.irradiance_matrix(light[:, :9])
    diffuse = diffuse_color(material.albedo, normals, M)
    specular = specular_color(material.roughness, normals, view_dirs, light, lut_grid, roughness_power)
    return gamma_encode(diffuse + specular)


def sky_color(sky_light: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Degree-1 sky SH evaluated along ``dirs``, clamped to [0, 1]."""
    if sky_light.shape[-1] != 4:
        raise ValueError("sky SH must be degree 1 (4 coefficients per channel)")
    return sh.eval_sh(sky_light, dirs, check=False).clamp(0.0, 1.0)

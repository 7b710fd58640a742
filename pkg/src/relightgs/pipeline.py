"""Shade every Gaussian for one view and rasterize all outputs in a single pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .raster import CUTOFF_SIGMA, Camera, Projection, expected_depth, project_gaussians, rasterize
from .scene import Scene
from .shading import Material, foreground_color, gaussian_normal, normalize, sky_color


@dataclass
class ViewRender:
    color: torch.Tensor  # (H, W, 3) full render
    fg_color: torch.Tensor  # sky colours zeroed
    sky_color: torch.Tensor  # foreground colours zeroed
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    fg_weight: torch.Tensor  # (H, W) sum of foreground blend weights
    normal_blend: torch.Tensor  # (H, W, 3) sum of w_i n_i over foreground
    weight_sum: torch.Tensor  # (N,)
    gaussian_depth: torch.Tensor  # (N,) camera-space z
    is_sky: torch.Tensor  # (N,)
    proj: Projection
    albedo: torch.Tensor | None = None  # (H, W, 3) when requested


def render_view(
    scene: Scene,
    camera: Camera,
    light: torch.Tensor,
    sky_light: torch.Tensor | None,
    lut_grid: torch.Tensor,
    roughness_power: float = 2.0,
    with_albedo: bool = False,
    cutoff_sigma: float | None = CUTOFF_SIGMA,
) -> ViewRender:
    """Full forward model for one camera.

    ``light`` is the (3, 25) environment, ``sky_light`` the (3, 4) sky SH or
    ``None`` for a white sky.
    """
    dtype = scene.fg_xyz.dtype
    cam_pos = torch.as_tensor(camera.center, dtype=dtype)
    nf = scene.num_fg

    fg_view = normalize(cam_pos - scene.fg_xyz)
    normals = gaussian_normal(scene.fg_rot, scene.fg_log_scale, fg_view)
    fg_rgb = foreground_color(
        Material(scene.fg_albedo, scene.fg_roughness), normals, fg_view, light, lut_grid, roughness_power
    )

    sky_xyz = scene.sky_xyz()
    if sky_light is None:
        sky_rgb = torch.ones(scene.num_sky, 3, dtype=dtype)
    else:
        sky_rgb = sky_color(sky_light, normalize(sky_xyz - cam_pos))

    xyz = torch.cat([scene.fg_xyz, sky_xyz], dim=0)
    proj = project_gaussians(xyz, scene.rotations(), torch.cat([scene.fg_log_scale, scene.sky_log_scale]), camera)

    zf = torch.zeros(nf, 3, dtype=dtype)
    zs = torch.zeros(scene.num_sky, 3, dtype=dtype)
    is_fg = torch.cat([torch.ones(nf, 1, dtype=dtype), torch.zeros(scene.num_sky, 1, dtype=dtype)])
    cols = [
        torch.cat([fg_rgb, zs]),
        torch.cat([zf, sky_rgb]),
        proj.depth[:, None],
        is_fg,
        torch.cat([normals, zs]),
    ]
    if with_albedo:
        cols.append(torch.cat([scene.fg_albedo, zs]))
    feats = torch.cat(cols, dim=-1)
    out, alpha, wsum = rasterize(proj, scene.opacities(), feats, camera, cutoff_sigma)
    fg_c, sky_c = out[..., 0:3], out[..., 3:6]
    return ViewRender(
        color=fg_c + sky_c,
        fg_color=fg_c,
        sky_color=sky_c,
        depth=expected_depth(out[..., 6], alpha),
        alpha=alpha,
        fg_weight=out[..., 7],
        normal_blend=out[..., 8:11],
        weight_sum=wsum,
        gaussian_depth=proj.depth,
        is_sky=scene.is_sky,
        proj=proj,
        albedo=out[..., 11:14] if with_albedo else None,
    )


@dataclass(frozen=True)
class Maps:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    albedo: np.ndarray  # (H, W, 3) clamped to [0, 1]
    normal: np.ndarray  # (H, W, 3) unit world normals, zero without foreground
    alpha: np.ndarray
    fg_weight: np.ndarray


def render_maps(scene, camera, light, sky_light, lut_grid, roughness_power: float = 2.0) -> Maps:
    """Detached colour, depth, albedo and normal maps for one view."""
    with torch.no_grad():
        out = render_view(scene, camera, light, sky_light, lut_grid, roughness_power, with_albedo=True)
    nb = out.normal_blend.numpy()
    norm = np.linalg.norm(nb, axis=-1, keepdims=True)
    normal = np.where(norm > 1e-12, nb / np.maximum(norm, 1e-12), 0.0)
    return Maps(
        color=out.color.numpy(),
        depth=out.depth.numpy(),
        albedo=np.clip(out.albedo.numpy(), 0.0, 1.0),
        normal=normal,
        alpha=out.alpha.numpy(),
        fg_weight=out.fg_weight.numpy(),
    )


def normal_to_rgb(normal: np.ndarray) -> np.ndarray:
    """``(n + 1) / 2``; pixels without a normal stay black."""
    has = np.linalg.norm(normal, axis=-1, keepdims=True) > 0
    return np.where(has, 0.5 * (normal + 1.0), 0.0)

"""Known scenes and lights for round-trip experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import sh
from .dataset import Dataset, View
from .pipeline import render_view
from .raster import Camera
from .scene import Scene, inverse_sigmoid, sample_sky_angles

# GT fg weight below this marks a pixel as pure sky; above 1 - this as pure foreground
MIX_EPS = 0.01
WALL_X = 1.5  # half width
WALL_Z = (-1.0, 1.4)
GT_SKY_RADIUS = 10.0  # true sky sits well behind the wall


def sun_sky_light(sun_dir, sun_rgb, sky_rgb, ground_rgb, sharpness: float = 8.0, n: int = 200_000, seed: int = 0) -> np.ndarray:
    """Degree-4 SH of a smooth sun lobe over a sky/ground gradient; returns (3, 25)."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    s = np.asarray(sun_dir, dtype=np.float64)
    s /= np.linalg.norm(s)
    up = 0.5 * (1.0 + d[:, 2:3])
    base = up * np.asarray(sky_rgb) + (1.0 - up) * np.asarray(ground_rgb)
    lobe = np.exp(sharpness * (d @ s - 1.0))[:, None] * np.asarray(sun_rgb)
    w = np.full(n, 4.0 * math.pi / n)
    return sh.project_to_sh(d, base + lobe, w, 4).numpy()


def sky_sh(zenith_rgb, horizon_rgb) -> np.ndarray:
    """Degree-1 sky: ``horizon`` at the equator blending linearly to ``zenith`` straight up."""
    z, h = np.asarray(zenith_rgb, dtype=np.float64), np.asarray(horizon_rgb, dtype=np.float64)
    c = np.zeros((3, 4))
    c[:, 0] = h * sh.DC_UNIT
    c[:, 2] = (z - h) / sh.C1  # band-1 central basis is C1 * z
    return c


TRAIN_LIGHTS = (
    dict(sun_dir=(0.6, -0.7, 0.5), sun_rgb=(2.0, 1.8, 1.5), sky_rgb=(0.35, 0.45, 0.6), ground_rgb=(0.25, 0.22, 0.2)),
    dict(sun_dir=(-0.7, -0.5, 0.45), sun_rgb=(1.6, 1.2, 0.8), sky_rgb=(0.4, 0.35, 0.35), ground_rgb=(0.2, 0.18, 0.15)),
    dict(sun_dir=(0.1, -0.5, 0.9), sun_rgb=(1.2, 1.3, 1.4), sky_rgb=(0.45, 0.5, 0.55), ground_rgb=(0.3, 0.3, 0.3)),
)
HELD_OUT_LIGHT = dict(sun_dir=(-0.3, -0.8, 0.6), sun_rgb=(1.8, 1.6, 1.3), sky_rgb=(0.4, 0.45, 0.55), ground_rgb=(0.25, 0.22, 0.2))
TRAIN_SKIES = (((0.35, 0.55, 0.9), (0.7, 0.8, 0.9)), ((0.8, 0.5, 0.35), (0.95, 0.75, 0.6)), ((0.6, 0.6, 0.65), (0.8, 0.8, 0.8)))


@dataclass(frozen=True)
class RoundTrip:
    gt: Scene
    data: Dataset
    train_lights: list[np.ndarray]  # (3, 25) per training light
    train_skies: list[np.ndarray]  # (3, 4)
    light_of: dict[str, int]  # image id -> light index
    held_out_light: np.ndarray
    held_out_camera: Camera


def wall_scene(nx: int = 24, nz: int = 16, seed: int = 0, n_sky: int = 400) -> Scene:
    """A gently curved, textured wall facing -y plus a dense half-dome of sky splats."""
    rng = np.random.default_rng(seed)
    u = (np.arange(nx) + 0.5) / nx
    v = (np.arange(nz) + 0.5) / nz
    U, V = np.meshgrid(u, v, indexing="xy")
    x = WALL_X * (2.0 * U.ravel() - 1.0)
    z = WALL_Z[0] + (WALL_Z[1] - WALL_Z[0]) * V.ravel()
    # height field y(x, z): a bulge towards the cameras
    kx, kz = 0.5 * math.pi / WALL_X, math.pi / (WALL_Z[1] - WALL_Z[0])
    bulge = 0.3
    y = -bulge * np.cos(kx * x) * (0.6 + 0.4 * np.sin(kz * (z - WALL_Z[0])))
    xyz = np.stack([x, y, z], axis=1)
    dydx = bulge * kx * np.sin(kx * x) * (0.6 + 0.4 * np.sin(kz * (z - WALL_Z[0])))
    dydz = -bulge * np.cos(kx * x) * 0.4 * kz * np.cos(kz * (z - WALL_Z[0]))
    n = np.stack([dydx, -np.ones_like(x), dydz], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    quat = _quat_from_z(n)

    cx, cz = 2.0 * WALL_X / nx, (WALL_Z[1] - WALL_Z[0]) / nz
    log_scale = np.log(np.tile([0.75 * cx, 0.75 * cz, 0.01 * cx], (len(x), 1)))
    # stripes and a checker give the texture
    checker = ((np.floor(U.ravel() * 5) + np.floor(V.ravel() * 3)) % 2)[:, None]
    stripe = (0.5 + 0.5 * np.sin(6 * math.pi * U.ravel()))[:, None]
    albedo = np.clip(
        checker * np.array([0.75, 0.35, 0.2]) + (1 - checker) * np.array([0.3, 0.55, 0.7]) * (0.6 + 0.4 * stripe),
        0.0, 1.0,
    )
    rough = 0.3 + 0.4 * stripe[:, 0]

    center = 0.5 * (xyz.min(axis=0) + xyz.max(axis=0))
    radius = GT_SKY_RADIUS
    theta, phi = sample_sky_angles(n_sky, rng)
    sky_scale = 1.5 * math.sqrt(math.pi * radius * radius / n_sky)
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    ident = np.tile([1.0, 0.0, 0.0, 0.0], (n_sky, 1))
    return Scene(
        fg_xyz=t(xyz),
        fg_rot=t(quat),
        fg_log_scale=t(log_scale),
        fg_opacity_logit=t(np.full(len(x), inverse_sigmoid(0.99))),
        fg_albedo=t(albedo),
        fg_roughness=t(rough),
        sky_theta=t(theta),
        sky_phi=t(phi),
        sky_rot=t(ident),
        sky_log_scale=t(np.full((n_sky, 3), math.log(sky_scale))),
        sky_opacity_logit=t(np.full(n_sky, inverse_sigmoid(0.98))),
        dome_center=t(center),
        dome_radius=t([radius]),
    )


def _quat_from_z(n: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions rotating +z onto each row of ``n``."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    s = np.linalg.norm(axis, axis=1)
    c = n @ z
    half = 0.5 * np.arctan2(s, c)
    axis = axis / np.maximum(s, 1e-12)[:, None]
    return np.concatenate([np.cos(half)[:, None], np.sin(half)[:, None] * axis], axis=1)


def orbit_cameras(n: int, size: int, rng: np.random.Generator, distance: float = 2.5) -> list[Camera]:
    """Cameras on an arc in front of the wall (y < 0), looking at it, z up."""
    cams = []
    f = 1.1 * size
    for _ in range(n):
        az = rng.uniform(-0.45, 0.45)
        el = rng.uniform(0.0, 0.15)
        eye = np.array([distance * math.sin(az), -distance * math.cos(az) * math.cos(el), 0.4 + distance * math.sin(el)])
        target = np.array([0.0, 0.0, 1.0]) + rng.uniform(-0.1, 0.1, 3)
        cams.append(Camera.look_at(eye, target, (0.0, 0.0, 1.0), f, f, size, size))
    return cams


def render_gt(gt: Scene, cam: Camera, light: np.ndarray, sky: np.ndarray | None, lut_grid: torch.Tensor):
    with torch.no_grad():
        return render_view(gt, cam, torch.as_tensor(light), None if sky is None else torch.as_tensor(sky), lut_grid)


def masks_from_render(out) -> tuple[np.ndarray, np.ndarray]:
    """Sky mask = essentially no foreground weight; mixed or empty pixels are excluded."""
    fgw = out.fg_weight.numpy()
    alpha = out.alpha.numpy()
    sky = (fgw < MIX_EPS) & (alpha > 0.99)
    fg = fgw > 1.0 - MIX_EPS
    return sky, ~(sky | fg)


def observed_colors(points: np.ndarray, views: list[View]) -> np.ndarray:
    """Average nearest-pixel colour of each point over the views that see it."""
    acc = np.zeros((len(points), 3))
    cnt = np.zeros(len(points))
    for v in views:
        cam = v.camera
        p = points @ cam.R.T + cam.t
        u = np.rint(cam.fx * p[:, 0] / p[:, 2] + cam.cx).astype(int)
        w = np.rint(cam.fy * p[:, 1] / p[:, 2] + cam.cy).astype(int)
        ok = (p[:, 2] > cam.near) & (u >= 0) & (u < cam.width) & (w >= 0) & (w < cam.height)
        acc[ok] += v.image[w[ok], u[ok]]
        cnt[ok] += 1
    return np.where(cnt[:, None] > 0, acc / np.maximum(cnt, 1)[:, None], 0.5)


def round_trip(views_per_light: int = 4, size: int = 64, seed: int = 0, lut_grid: torch.Tensor | None = None) -> RoundTrip:
    """Ground-truth scene, rendered training set and a held-out relighting target."""
    from .brdf import default_lut

    lut_grid = default_lut().torch_grid() if lut_grid is None else lut_grid
    rng = np.random.default_rng([seed, 7])
    gt = wall_scene(seed=seed)
    lights = [sun_sky_light(**p, seed=seed + i) for i, p in enumerate(TRAIN_LIGHTS)]
    skies = [sky_sh(*s) for s in TRAIN_SKIES]
    cams = orbit_cameras(views_per_light * len(lights) + 1, size, rng)
    views, light_of = [], {}
    for k, cam in enumerate(cams[:-1]):
        li = k % len(lights)
        out = render_gt(gt, cam, lights[li], skies[li], lut_grid)
        sky_mask, occ = masks_from_render(out)
        image_id = f"img{k:03d}"
        views.append(View(image_id, out.color.numpy().clip(0.0, 1.0), sky_mask, occ, cam))
        light_of[image_id] = li

    # SfM-like seed cloud: jittered surface points coloured by their mean observation
    pts = gt.fg_xyz.numpy() + rng.normal(0.0, 0.01, gt.fg_xyz.shape)
    cols = observed_colors(pts, views)
    held = sun_sky_light(**HELD_OUT_LIGHT, seed=seed + 99)
    return RoundTrip(gt, Dataset(views, pts, cols), lights, skies, light_of, held, cams[-1])

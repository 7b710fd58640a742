"""Small hand-built scenes shared by the tests."""
from __future__ import annotations

import math

import numpy as np
import torch

from relightgs.appearance import AppearanceMLP, EmbeddingTable
from relightgs.dataset import Dataset, View
from relightgs.raster import Camera
from relightgs.scene import Scene


def tiny_camera(size: int = 16, eye=(0.0, -3.0, 0.5), target=(0.0, 0.0, 0.5)) -> Camera:
    return Camera.look_at(eye, target, (0.0, 0.0, 1.0), float(size), float(size), size, size)


def random_quats(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def tiny_scene(n_fg: int = 12, n_sky: int = 6, seed: int = 0, opacity=(0.3, 0.7)) -> Scene:
    """Foreground blobs around the origin with sky splats on the dome straight ahead.

    Scales are distinct per axis so the shortest axis is never tied.
    """
    rng = np.random.default_rng(seed)
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    logit = lambda p: np.log(p / (1.0 - p))
    ls = np.log(rng.uniform(0.05, 0.35, (n_fg, 3)))
    ls += np.array([0.0, 0.02, 0.04])  # break ties
    return Scene(
        fg_xyz=t(rng.uniform([-0.8, -0.5, -0.2], [0.8, 0.5, 1.2], (n_fg, 3))),
        fg_rot=t(random_quats(n_fg, rng)),
        fg_log_scale=t(ls),
        fg_opacity_logit=t(logit(rng.uniform(*opacity, n_fg))),
        fg_albedo=t(rng.uniform(0.1, 0.8, (n_fg, 3))),
        fg_roughness=t(rng.uniform(0.2, 0.9, n_fg)),
        sky_theta=t(rng.uniform(1.15, 1.45, n_sky)),
        sky_phi=t(rng.uniform(1.25, 1.9, n_sky)),
        sky_rot=t(random_quats(n_sky, rng)),
        sky_log_scale=t(np.log(rng.uniform(0.3, 0.7, (n_sky, 3))) + np.array([0.0, 0.02, 0.04])),
        sky_opacity_logit=t(logit(rng.uniform(*opacity, n_sky))),
        dome_center=t([0.0, 0.0, 0.0]),
        dome_radius=t([2.5]),
    )


def tiny_dataset(n_views: int = 3, size: int = 16, seed: int = 0, n_points: int = 40) -> Dataset:
    """Random images around a point blob, enough to exercise the training loop."""
    rng = np.random.default_rng(seed)
    views = []
    for k in range(n_views):
        a = -0.3 + 0.3 * k
        eye = (3.0 * math.sin(a), -3.0 * math.cos(a), 0.5)
        cam = tiny_camera(size, eye=eye)
        img = rng.uniform(0.1, 0.9, (size, size, 3))
        sky = np.zeros((size, size), dtype=bool)
        sky[:3] = True
        occ = np.zeros((size, size), dtype=bool)
        occ[-2:, :4] = True
        views.append(View(f"v{k}", img, sky, occ, cam))
    pts = rng.uniform([-0.8, -0.5, -0.2], [0.8, 0.5, 1.2], (n_points, 3))
    cols = rng.uniform(0.2, 0.8, (n_points, 3))
    return Dataset(views, pts, cols)


def randomized_mlp(ids: list[str], seed: int = 0, head_scale: float = 0.02):
    """MLP and table with non-zero heads so every weight receives gradient."""
    gen = torch.Generator().manual_seed(seed)
    mlp = AppearanceMLP(gen)
    table = EmbeddingTable(ids, generator=gen)
    with torch.no_grad():
        for head in (mlp.sky_head, mlp.light_head):
            head.weight.normal_(0.0, head_scale, generator=gen)
    return mlp, table

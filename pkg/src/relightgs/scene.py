"""Foreground / sky Gaussian banks and the sky dome.

Gaussians are stored as parameter banks (one tensor per attribute) rather
than per-object records; foreground rows and sky rows live in separate
banks, which is what keeps the fg/sky partition fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree

from . import sh
from .shading import quat_to_rotmat

THETA_MAX = math.pi / 2
PHI_MAX = math.pi
RADIUS_EPS = 1e-3
SPLIT_FACTOR = 1.6
INIT_OPACITY = 0.1
INIT_ROUGHNESS = 0.5
SKY_COUNT_SCALE = 40.0


def inverse_sigmoid(x):
    return math.log(x / (1.0 - x))


@dataclass
class Scene:
    fg_xyz: torch.Tensor
    fg_rot: torch.Tensor
    fg_log_scale: torch.Tensor
    fg_opacity_logit: torch.Tensor
    fg_albedo: torch.Tensor
    fg_roughness: torch.Tensor
    sky_theta: torch.Tensor
    sky_phi: torch.Tensor
    sky_rot: torch.Tensor
    sky_log_scale: torch.Tensor
    sky_opacity_logit: torch.Tensor
    dome_center: torch.Tensor
    dome_radius: torch.Tensor  # shape (1,)

    FG_FIELDS = ("fg_xyz", "fg_rot", "fg_log_scale", "fg_opacity_logit", "fg_albedo", "fg_roughness")
    SKY_FIELDS = ("sky_theta", "sky_phi", "sky_rot", "sky_log_scale", "sky_opacity_logit")
    LEARNABLE = FG_FIELDS + SKY_FIELDS + ("dome_radius",)

    @property
    def num_fg(self) -> int:
        return self.fg_xyz.shape[0]

    @property
    def num_sky(self) -> int:
        return self.sky_theta.shape[0]

    @property
    def is_sky(self) -> torch.Tensor:
        return torch.cat([torch.zeros(self.num_fg, dtype=torch.bool), torch.ones(self.num_sky, dtype=torch.bool)])

    def sky_xyz(self) -> torch.Tensor:
        return sky_position(self.sky_theta, self.sky_phi, self.dome_center, self.dome_radius)

    def xyz(self) -> torch.Tensor:
        """All centres, foreground rows first."""
        return torch.cat([self.fg_xyz, self.sky_xyz()], dim=0)

    def rotations(self) -> torch.Tensor:
        return torch.cat([self.fg_rot, self.sky_rot], dim=0)

    def scales(self) -> torch.Tensor:
        return torch.exp(torch.cat([self.fg_log_scale, self.sky_log_scale], dim=0))

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(torch.cat([self.fg_opacity_logit, self.sky_opacity_logit], dim=0))

    def params(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.LEARNABLE}

    def clone(self) -> "Scene":
        return Scene(**{f.name: getattr(self, f.name).detach().clone() for f in fields(self)})

    def to(self, dtype) -> "Scene":
        return Scene(**{f.name: getattr(self, f.name).detach().to(dtype) for f in fields(self)})


def sky_position(theta, phi, center, radius) -> torch.Tensor:
    """Point on the dome, polar angle from +z and azimuth from +x."""
    st = torch.sin(theta)
    d = torch.stack([st * torch.cos(phi), st * torch.sin(phi), torch.cos(theta)], dim=-1)
    return center + radius * d


def covariance(rotation: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """``R S S^T R^T`` for banks of quaternions and log-scales -> (N, 3, 3)."""
    R = quat_to_rotmat(rotation)
    M = R * torch.exp(log_scale)[..., None, :]
    return M @ M.transpose(-1, -2)


def _nn_scale(points: np.ndarray) -> np.ndarray:
    k = min(4, len(points))
    dist, _ = cKDTree(points).query(points, k=k)
    d = dist[:, 1:].mean(axis=1) if k > 1 else np.ones(len(points))
    return np.maximum(d, 1e-4)


def dome_from_points(points: np.ndarray) -> tuple[np.ndarray, float]:
    """AABB midpoint and 99th-percentile distance from the centroid."""
    center = 0.5 * (points.min(axis=0) + points.max(axis=0))
    radius = float(np.percentile(np.linalg.norm(points - points.mean(axis=0), axis=1), 99))
    return center, radius


def sample_sky_angles(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform over the half-azimuth upper hemisphere (uniform height z)."""
    z = rng.uniform(0.0, 1.0, n)
    theta = np.arccos(z)
    phi = rng.uniform(0.0, PHI_MAX, n)
    return theta, phi


def init_scene(
    points: np.ndarray,
    colors: np.ndarray,
    sky_count_scale: float = SKY_COUNT_SCALE,
    rng: np.random.Generator | None = None,
    dtype=torch.float64,
) -> Scene:
    """Seed foreground Gaussians on ``points`` and scatter sky Gaussians on the dome.

    ``colors`` are display-space rgb in [0, 1]; albedo is their linearised value.
    """
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 4:
        raise ValueError("need at least 4 seed points of shape (N, 3)")
    rng = rng or np.random.default_rng(0)
    n = len(points)
    center, radius = dome_from_points(points)
    radius = max(radius, RADIUS_EPS)

    n_sky = max(int(round(sky_count_scale * radius)), 1)
    theta, phi = sample_sky_angles(n_sky, rng)
    # cover the half hemisphere (area pi r^2) with roughly touching splats
    sky_scale = math.sqrt(math.pi * radius * radius / n_sky)

    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    sky_quat = np.zeros((n_sky, 4))
    sky_quat[:, 0] = 1.0
    return Scene(
        fg_xyz=t(points),
        fg_rot=t(quat),
        fg_log_scale=t(np.repeat(np.log(_nn_scale(points))[:, None], 3, axis=1)),
        fg_opacity_logit=t(np.full(n, inverse_sigmoid(INIT_OPACITY))),
        fg_albedo=t(np.clip(colors, 0.0, 1.0) ** 2.2),
        fg_roughness=t(np.full(n, INIT_ROUGHNESS)),
        sky_theta=t(theta),
        sky_phi=t(phi),
        sky_rot=t(sky_quat),
        sky_log_scale=t(np.full((n_sky, 3), math.log(sky_scale))),
        sky_opacity_logit=t(np.full(n_sky, inverse_sigmoid(INIT_OPACITY))),
        dome_center=t(center),
        dome_radius=t([radius]),
    )


@torch.no_grad()
def clamp_constraints(scene: Scene) -> Scene:
    """Project parameters back onto their feasible sets, in place."""
    scene.sky_theta.clamp_(0.0, THETA_MAX)
    scene.sky_phi.clamp_(0.0, PHI_MAX)
    scene.fg_albedo.clamp_(0.0, 1.0)
    scene.fg_roughness.clamp_(0.0, 1.0)
    scene.dome_radius.clamp_(min=RADIUS_EPS)
    return scene


def cartesian_to_dome_angles(points: np.ndarray, center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radially project onto the dome and return clamped (theta, phi)."""
    d = points - center
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    return np.clip(theta, 0.0, THETA_MAX), np.clip(phi, 0.0, PHI_MAX)


def split_sky_gaussians(
    theta: np.ndarray,
    phi: np.ndarray,
    rot: np.ndarray,
    log_scale: np.ndarray,
    center: np.ndarray,
    radius: float,
    rng: np.random.Generator,
    n_children: int = 2,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Children angles and log-scales for each parent sky Gaussian.

    Each child is drawn from the parent's 3D density, pushed radially onto
    the dome and converted back to clamped spherical angles.  Returns
    ``(theta, phi, log_scale)`` with ``n_children`` rows per parent, parents
    repeated in order.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    mean = sky_position(torch.as_tensor(theta), torch.as_tensor(phi), torch.as_tensor(center), radius).numpy()
    R = quat_to_rotmat(torch.as_tensor(rot, dtype=torch.float64)).numpy()
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    mean = np.repeat(mean, n_children, axis=0)
    R = np.repeat(R, n_children, axis=0)
    s = np.repeat(s, n_children, axis=0)
    samples = mean + np.einsum("nij,nj->ni", R, rng.standard_normal(s.shape) * s)
    bad = np.linalg.norm(samples - center, axis=-1) < 1e-9
    while np.any(bad):
        samples[bad] = mean[bad] + np.einsum("nij,nj->ni", R[bad], rng.standard_normal((bad.sum(), 3)) * s[bad])
        bad = np.linalg.norm(samples - center, axis=-1) < 1e-9
    th, ph = cartesian_to_dome_angles(samples, np.asarray(center))
    return th, ph, np.log(s / SPLIT_FACTOR)


def split_sky_gaussian(scene: Scene, index: int, rng: np.random.Generator):
    """Two children ``(theta, phi, rot, log_scale, opacity_logit)`` of one sky Gaussian."""
    th, ph, ls = split_sky_gaussians(
        scene.sky_theta[index : index + 1].detach().numpy(),
        scene.sky_phi[index : index + 1].detach().numpy(),
        scene.sky_rot[index : index + 1].detach().numpy(),
        scene.sky_log_scale[index : index + 1].detach().numpy(),
        scene.dome_center.detach().numpy(),
        float(scene.dome_radius.detach()[0]),
        rng,
    )
    rot = np.repeat(scene.sky_rot[index : index + 1].detach().numpy(), 2, axis=0)
    op = np.repeat(scene.sky_opacity_logit[index : index + 1].detach().numpy(), 2)
    return th, ph, rot, ls, op


# ---------------------------------------------------------------------------
# checkpoint I/O

PLY_PROPS = (
    "x", "y", "z", "qw", "qx", "qy", "qz", "log_sx", "log_sy", "log_sz", "opacity_logit",
    "albedo_r", "albedo_g", "albedo_b", "roughness", "is_sky", "theta", "phi",
)


def save_scene(path: str | Path, scene: Scene, lights: dict[str, tuple] | None = None) -> None:
    """Write the extended PLY plus a ``.dome.txt`` sidecar.

    ``lights`` optionally maps image ids to ``(light_sh, sky_sh)`` pairs that
    are appended to the sidecar as SH blocks.
    """
    path = Path(path)
    nf, ns = scene.num_fg, scene.num_sky
    dtype = [(p, "u1" if p == "is_sky" else "f8") for p in PLY_PROPS]
    rows = np.zeros(nf + ns, dtype=dtype)
    g = lambda t: t.detach().cpu().numpy()
    rows["x"][:nf], rows["y"][:nf], rows["z"][:nf] = g(scene.fg_xyz).T
    if ns:
        sx = g(scene.sky_xyz())
        rows["x"][nf:], rows["y"][nf:], rows["z"][nf:] = sx.T
    q = np.concatenate([g(scene.fg_rot), g(scene.sky_rot)])
    ls = np.concatenate([g(scene.fg_log_scale), g(scene.sky_log_scale)])
    for i, name in enumerate(("qw", "qx", "qy", "qz")):
        rows[name] = q[:, i]
    for i, name in enumerate(("log_sx", "log_sy", "log_sz")):
        rows[name] = ls[:, i]
    rows["opacity_logit"] = np.concatenate([g(scene.fg_opacity_logit), g(scene.sky_opacity_logit)])
    for i, name in enumerate(("albedo_r", "albedo_g", "albedo_b")):
        rows[name][:nf] = g(scene.fg_albedo)[:, i]
    rows["roughness"][:nf] = g(scene.fg_roughness)
    rows["is_sky"][nf:] = 1
    rows["theta"][nf:] = g(scene.sky_theta)
    rows["phi"][nf:] = g(scene.sky_phi)

    tmp = path.with_name(path.name + ".tmp")
    PlyData([PlyElement.describe(rows, "vertex")]).write(str(tmp))
    tmp.replace(path)

    lines = [
        "dome_center " + " ".join(repr(float(v)) for v in g(scene.dome_center)),
        f"dome_radius {float(g(scene.dome_radius)[0])!r}",
    ]
    for image_id, (light, sky) in (lights or {}).items():
        for tag, coeffs in (("light", light), ("sky", sky)):
            c = np.asarray(coeffs.detach().cpu().numpy() if isinstance(coeffs, torch.Tensor) else coeffs)
            lines.append(f"{tag} {image_id}")
            lines.append(f"sh degree {int(round(math.sqrt(c.shape[1]))) - 1}")
            lines += [" ".join(repr(float(v)) for v in row) for row in c]
    side = sidecar_path(path)
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(side)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".dome.txt")


def load_scene(path: str | Path, dtype=torch.float64) -> tuple[Scene, dict[str, tuple[sh.SHCoefficients, sh.SHCoefficients]]]:
    path = Path(path)
    v = PlyData.read(str(path))["vertex"].data
    side = sidecar_path(path).read_text().splitlines()
    center = np.array([float(t) for t in side[0].split()[1:]])
    radius = float(side[1].split()[1])
    lights: dict[str, dict] = {}
    i = 2
    while i < len(side):
        if not side[i].strip():
            i += 1
            continue
        tag, image_id = side[i].split(maxsplit=1)
        degree = int(side[i + 1].split()[2])
        rows = [[float(t) for t in side[i + 2 + k].split()] for k in range(3)]
        lights.setdefault(image_id, {})[tag] = sh.SHCoefficients(degree, torch.tensor(rows, dtype=torch.float64))
        i += 5
    sky = v["is_sky"].astype(bool)
    f, s = ~sky, sky
    col = lambda names, m: np.stack([v[n][m] for n in names], axis=-1).astype(np.float64)
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    scene = Scene(
        fg_xyz=t(col(("x", "y", "z"), f)),
        fg_rot=t(col(("qw", "qx", "qy", "qz"), f)),
        fg_log_scale=t(col(("log_sx", "log_sy", "log_sz"), f)),
        fg_opacity_logit=t(v["opacity_logit"][f]),
        fg_albedo=t(col(("albedo_r", "albedo_g", "albedo_b"), f)),
        fg_roughness=t(v["roughness"][f]),
        sky_theta=t(v["theta"][s]),
        sky_phi=t(v["phi"][s]),
        sky_rot=t(col(("qw", "qx", "qy", "qz"), s)),
        sky_log_scale=t(col(("log_sx", "log_sy", "log_sz"), s)),
        sky_opacity_logit=t(v["opacity_logit"][s]),
        dome_center=t(center),
        dome_radius=t([radius]),
    )
    pairs = {k: (d["light"], d["sky"]) for k, d in lights.items() if "light" in d and "sky" in d}
    return scene, pairs

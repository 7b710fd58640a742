"""CPU Gaussian rasterizer with an analytic backward pass.

Projection (EWA splatting) is plain torch so autograd carries gradients back
to the 3D parameters; the tile rasterizer itself is a numba kernel pair
wrapped in a :class:`torch.autograd.Function`.

Pixel ``(i, j)`` has its centre at image coordinates ``(x=j, y=i)``, in the
same frame as the principal point.  Camera space is x right, y down, z
forward.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numba
import numpy as np
import torch

from .scene import Scene, covariance

# the bundled TBB is too old for numba; the workqueue layer is always available
numba.config.THREADING_LAYER = "workqueue"

TILE = 16
DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_SIGMA = 3.0
FOV_CLAMP = 1.3


class ColorMode(enum.Enum):
    FULL = "full"
    FOREGROUND_ONLY = "fg"
    SKY_ONLY = "sky"


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``R``, ``t`` map world to camera: ``x_c = R x_w + t``."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, near=0.01) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        f = target - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, up)
        r /= np.linalg.norm(r)
        d = np.cross(f, r)  # image y points down
        R = np.stack([r, d, f])
        cx = (width - 1) / 2 if cx is None else cx
        cy = (height - 1) / 2 if cy is None else cy
        return cls(R, -R @ eye, fx, fy, cx, cy, width, height, near)


@dataclass
class Projection:
    mean2d: torch.Tensor  # (N, 2)
    cov2d: torch.Tensor  # (N, 2, 2)
    conic: torch.Tensor  # (N, 3) entries a, b, c of the inverse covariance
    depth: torch.Tensor  # (N,) camera-space z
    visible: np.ndarray  # (N,) bool, not culled


def project_gaussians(xyz: torch.Tensor, rotation: torch.Tensor, log_scale: torch.Tensor, camera: Camera) -> Projection:
    """EWA projection of 3D Gaussians to screen space with 0.3 px dilation."""
    dtype = xyz.dtype
    R = torch.as_tensor(camera.R, dtype=dtype)
    t = torch.as_tensor(camera.t, dtype=dtype)
    p = xyz @ R.T + t
    z = p[:, 2]
    in_front = z.detach() > camera.near
    zs = torch.where(in_front, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    mean2d = torch.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], dim=-1)

    # the Jacobian is evaluated with x/z, y/z clamped to 1.3x the half field of
    # view so splats far off-axis near the camera do not blow up
    lim_x = FOV_CLAMP * (0.5 * camera.width / camera.fx)
    lim_y = FOV_CLAMP * (0.5 * camera.height / camera.fy)
    xj = (x / zs).clamp(-lim_x, lim_x) * zs
    yj = (y / zs).clamp(-lim_y, lim_y) * zs
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([camera.fx / zs, zero, -camera.fx * xj / (zs * zs)], dim=-1),
            torch.stack([zero, camera.fy / zs, -camera.fy * yj / (zs * zs)], dim=-1),
        ],
        dim=-2,
    )
    T = J @ R
    cov3d = covariance(rotation, log_scale)
    cov2d = T @ cov3d @ T.transpose(-1, -2) + DILATION * torch.eye(2, dtype=dtype)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)

    m = mean2d.detach().numpy()
    ex = CUTOFF_SIGMA * np.sqrt(a.detach().numpy())
    ey = CUTOFF_SIGMA * np.sqrt(c.detach().numpy())
    on_screen = (
        (m[:, 0] + ex >= -0.5)
        & (m[:, 0] - ex <= camera.width - 0.5)
        & (m[:, 1] + ey >= -0.5)
        & (m[:, 1] - ey <= camera.height - 0.5)
    )
    visible = in_front.numpy() & on_screen & (det.detach().numpy() > 0)
    return Projection(mean2d, cov2d, conic, z, visible)


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _bin_tiles(means, extent, order, visible, width, height, tile):
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    counts = np.zeros(tx * ty, dtype=np.int64)
    rects = np.zeros((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        if not visible[g]:
            rects[k, 0] = 1
            rects[k, 1] = 0
            continue
        x0 = max(int(np.floor((means[g, 0] - extent[g, 0] + 0.5) / tile)), 0)
        x1 = min(int(np.floor((means[g, 0] + extent[g, 0] + 0.5) / tile)), tx - 1)
        y0 = max(int(np.floor((means[g, 1] - extent[g, 1] + 0.5) / tile)), 0)
        y1 = min(int(np.floor((means[g, 1] + extent[g, 1] + 0.5) / tile)), ty - 1)
        rects[k, 0], rects[k, 1], rects[k, 2], rects[k, 3] = x0, x1, y0, y1
        for yy in range(y0, y1 + 1):
            for xx in range(x0, x1 + 1):
                counts[yy * tx + xx] += 1
    offsets = np.zeros(tx * ty + 1, dtype=np.int64)
    for i in range(tx * ty):
        offsets[i + 1] = offsets[i] + counts[i]
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for yy in range(rects[k, 2], rects[k, 3] + 1):
            for xx in range(rects[k, 0], rects[k, 1] + 1):
                ids[fill[yy * tx + xx]] = g
                fill[yy * tx + xx] += 1
    return offsets, ids


@numba.njit(cache=True, parallel=True)
def _forward(means, conics, opac, feats, offsets, ids, width, height, tile, cutoff):
    n, nf = feats.shape
    tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    out = np.zeros((height, width, nf))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    wsum_tile = np.zeros((n_tiles, n))
    for tid in numba.prange(n_tiles):
        ty0 = (tid // tx) * tile
        tx0 = (tid % tx) * tile
        start, end = offsets[tid], offsets[tid + 1]
        for py in range(ty0, min(ty0 + tile, height)):
            for px in range(tx0, min(tx0 + tile, width)):
                T = 1.0
                last = 0
                for k in range(start, end):
                    g = ids[k]
                    dx = means[g, 0] - px
                    dy = means[g, 1] - py
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power < cutoff or power > 0.0:
                        continue
                    alpha = min(ALPHA_MAX, opac[g] * np.exp(power))
                    test_t = T * (1.0 - alpha)
                    if test_t < T_MIN:
                        break
                    w = alpha * T
                    for ch in range(nf):
                        out[py, px, ch] += w * feats[g, ch]
                    wsum_tile[tid, g] += w
                    T = test_t
                    last = k - start + 1
                t_final[py, px] = T
                n_contrib[py, px] = last
    return out, t_final, n_contrib, wsum_tile


@numba.njit(cache=True, parallel=True)
def _backward(means, conics, opac, feats, offsets, ids, width, height, tile, cutoff, t_final, n_contrib, d_out, d_alpha):
    n, nf = feats.shape
    tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    g_mean = np.zeros((n_tiles, n, 2))
    g_conic = np.zeros((n_tiles, n, 3))
    g_opac = np.zeros((n_tiles, n))
    g_feat = np.zeros((n_tiles, n, nf))
    for tid in numba.prange(n_tiles):
        ty0 = (tid // tx) * tile
        tx0 = (tid % tx) * tile
        start = offsets[tid]
        accum = np.zeros(nf)
        last_feat = np.zeros(nf)
        for py in range(ty0, min(ty0 + tile, height)):
            for px in range(tx0, min(tx0 + tile, width)):
                tf = t_final[py, px]
                T = tf
                last_alpha = 0.0
                accum[:] = 0.0
                last_feat[:] = 0.0
                da_pix = d_alpha[py, px]
                for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = ids[k]
                    dx = means[g, 0] - px
                    dy = means[g, 1] - py
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power < cutoff or power > 0.0:
                        continue
                    G = np.exp(power)
                    raw = opac[g] * G
                    alpha = min(ALPHA_MAX, raw)
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    dl_da = 0.0
                    for ch in range(nf):
                        accum[ch] = last_alpha * last_feat[ch] + (1.0 - last_alpha) * accum[ch]
                        last_feat[ch] = feats[g, ch]
                        dl_da += (feats[g, ch] - accum[ch]) * d_out[py, px, ch]
                        g_feat[tid, g, ch] += w * d_out[py, px, ch]
                    dl_da *= T
                    last_alpha = alpha
                    # accumulated alpha is 1 - prod(1 - alpha_i)
                    dl_da += da_pix * tf / (1.0 - alpha)
                    if raw >= ALPHA_MAX:
                        continue
                    g_opac[tid, g] += G * dl_da
                    dl_dp = opac[g] * G * dl_da
                    g_mean[tid, g, 0] += dl_dp * (-conics[g, 0] * dx - conics[g, 1] * dy)
                    g_mean[tid, g, 1] += dl_dp * (-conics[g, 1] * dx - conics[g, 2] * dy)
                    g_conic[tid, g, 0] += dl_dp * (-0.5 * dx * dx)
                    g_conic[tid, g, 1] += dl_dp * (-dx * dy)
                    g_conic[tid, g, 2] += dl_dp * (-0.5 * dy * dy)
    return g_mean.sum(axis=0), g_conic.sum(axis=0), g_opac.sum(axis=0), g_feat.sum(axis=0)


@dataclass
class _Setup:
    offsets: np.ndarray
    ids: np.ndarray
    width: int
    height: int
    cutoff: float


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conics, opac, feats, setup: _Setup):
        arrs = [a.detach().cpu().numpy().astype(np.float64) for a in (means, conics, opac, feats)]
        out, t_final, n_contrib, wsum_tile = _forward(
            *arrs, setup.offsets, setup.ids, setup.width, setup.height, TILE, setup.cutoff
        )
        ctx.setup = setup
        ctx.arrs = arrs
        ctx.t_final = t_final
        ctx.n_contrib = n_contrib
        dtype = feats.dtype
        alpha = torch.from_numpy(1.0 - t_final).to(dtype)
        wsum = torch.from_numpy(wsum_tile.sum(axis=0)).to(dtype)
        ctx.mark_non_differentiable(wsum)
        return torch.from_numpy(out).to(dtype), alpha, wsum

    @staticmethod
    def backward(ctx, d_out, d_alpha, _d_wsum):
        s = ctx.setup
        d_out = np.ascontiguousarray(d_out.detach().cpu().numpy().astype(np.float64))
        d_alpha = np.ascontiguousarray(d_alpha.detach().cpu().numpy().astype(np.float64))
        g_mean, g_conic, g_opac, g_feat = _backward(
            *ctx.arrs, s.offsets, s.ids, s.width, s.height, TILE, s.cutoff, ctx.t_final, ctx.n_contrib, d_out, d_alpha
        )
        to = lambda a: torch.from_numpy(a).to(torch.float64)
        return to(g_mean), to(g_conic), to(g_opac), to(g_feat), None


def rasterize(proj: Projection, opacity: torch.Tensor, feats: torch.Tensor, camera: Camera, cutoff_sigma: float | None = CUTOFF_SIGMA):
    """Alpha-blend per-Gaussian feature vectors in global depth order.

    Returns ``(features (H, W, F), accumulated alpha (H, W), blend-weight
    sums (N,))``.  ``cutoff_sigma=None`` disables the footprint truncation.
    """
    n = feats.shape[0]
    if n and not (
        torch.isfinite(proj.mean2d).all() and torch.isfinite(proj.conic).all() and torch.isfinite(feats).all()
        and torch.isfinite(opacity).all()
    ):
        bad = ~(
            torch.isfinite(proj.mean2d).all(-1) & torch.isfinite(proj.conic).all(-1)
            & torch.isfinite(feats).all(-1) & torch.isfinite(opacity)
        )
        raise FloatingPointError(f"non-finite Gaussian parameters at index {int(torch.nonzero(bad)[0, 0])}")
    depth = proj.depth.detach().numpy()
    order = np.argsort(depth, kind="stable").astype(np.int64)
    if cutoff_sigma is None:
        ext = np.full((n, 2), 1e9)
        cutoff = -np.inf
    else:
        cov = proj.cov2d.detach().numpy()
        ext = cutoff_sigma * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=-1))
        cutoff = -0.5 * cutoff_sigma * cutoff_sigma
    means_np = proj.mean2d.detach().numpy().astype(np.float64)
    offsets, ids = _bin_tiles(
        np.ascontiguousarray(means_np), np.ascontiguousarray(ext), order, proj.visible, camera.width, camera.height, TILE
    )
    setup = _Setup(offsets, ids, camera.width, camera.height, cutoff)
    return _Rasterize.apply(proj.mean2d, proj.conic, opacity, feats, setup)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    weight_sum: torch.Tensor  # (N,) per-Gaussian total blend weight
    inputs: dict[str, torch.Tensor] = field(default_factory=dict)


def expected_depth(depth_acc: torch.Tensor, alpha_acc: torch.Tensor) -> torch.Tensor:
    """``sum(w d) / sum(w)``, zero where nothing was blended."""
    has = alpha_acc > 0
    safe = torch.where(has, alpha_acc, torch.ones_like(alpha_acc))
    return torch.where(has, depth_acc / safe, torch.zeros_like(depth_acc))


def render(
    scene: Scene,
    camera: Camera,
    colors: torch.Tensor,
    mode: ColorMode = ColorMode.FULL,
    cutoff_sigma: float | None = CUTOFF_SIGMA,
) -> RenderOutput:
    """Rasterize all Gaussians with caller-supplied colours (foreground rows first).

    Every Gaussian participates geometrically; ``mode`` only zeroes colours.
    """
    xyz = scene.xyz()
    proj = project_gaussians(xyz, scene.rotations(), torch.cat([scene.fg_log_scale, scene.sky_log_scale]), camera)
    sky = scene.is_sky[:, None].to(colors.dtype)
    shown = colors
    if mode is ColorMode.FOREGROUND_ONLY:
        shown = colors * (1 - sky)
    elif mode is ColorMode.SKY_ONLY:
        shown = colors * sky
    feats = torch.cat([shown, proj.depth[:, None]], dim=-1)
    out, alpha, wsum = rasterize(proj, scene.opacities(), feats, camera, cutoff_sigma)
    return RenderOutput(
        color=out[..., :3],
        depth=expected_depth(out[..., 3], alpha),
        alpha=alpha,
        weight_sum=wsum,
        inputs={**scene.params(), "colors": colors},
    )


def render_backward(output: RenderOutput, d_color=None, d_depth=None, d_alpha=None) -> dict[str, torch.Tensor]:
    """Gradients of ``<d_color, color> + <d_depth, depth> + <d_alpha, alpha>``.

    Returns one gradient per learnable scene tensor plus ``colors``.  The
    forward pass must have been run with gradient tracking on the inputs.
    """
    outs, grads = [], []
    for t, g in ((output.color, d_color), (output.depth, d_depth), (output.alpha, d_alpha)):
        if g is not None:
            outs.append(t)
            grads.append(torch.as_tensor(g, dtype=t.dtype))
    names = [k for k, v in output.inputs.items() if v.requires_grad]
    if not names or not any(t.requires_grad for t in outs):
        raise RuntimeError("no retained forward state: render inputs were not tracking gradients")
    res = torch.autograd.grad(outs, [output.inputs[k] for k in names], grads, retain_graph=True, allow_unused=True)
    return {
        k: (torch.zeros_like(output.inputs[k]) if g is None else g) for k, g in zip(names, res)
    }

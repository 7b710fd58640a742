"""Training objectives and the scheduled weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import sh

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
VISIBLE_WEIGHT = 1e-3


@dataclass(frozen=True)
class LossWeights:
    rec_l1: float = 0.8
    light: float = 1.0
    normal: float = 0.05
    scale: float = 1.0
    fg_sky: float = 0.5
    sky_depth: float = 0.005
    gamma_sky_depth: float = 0.02
    light_samples: int = 256
    warmup_iters: int = 500
    geometry_start: int = 2000
    # penalise fg colour on non-sky pixels and sky colour on sky pixels, as printed
    literal_fg_sky_masks: bool = False

    def __post_init__(self):
        for name in ("rec_l1", "light", "normal", "scale", "fg_sky", "sky_depth", "gamma_sky_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.light_samples < 1:
            raise ValueError("light_samples must be >= 1")


# summation order: ascending weight, fixed for determinism
TERM_ORDER = ("sky_depth", "normal", "fg_sky", "light", "scale", "rec")


def active_terms(iteration: int, w: LossWeights) -> tuple[str, ...]:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < w.warmup_iters:
        return ("fg_sky",)
    if iteration < w.geometry_start:
        return ("sky_depth", "fg_sky", "light", "rec")
    return TERM_ORDER


def term_weight(name: str, w: LossWeights) -> float:
    return 1.0 if name == "rec" else getattr(w, name)


def total_loss(terms: dict[str, torch.Tensor], w: LossWeights, iteration: int):
    """Weighted, scheduled sum; returns ``(total, breakdown)``.

    ``terms`` must hold every term active at ``iteration``; others are ignored.
    The breakdown maps each active term to its unweighted value plus ``total``.
    """
    active = active_terms(iteration, w)
    total = None
    breakdown = {}
    for name in TERM_ORDER:
        if name not in active:
            continue
        if name not in terms:
            raise KeyError(f"loss term {name!r} is active at iteration {iteration} but was not supplied")
        v = torch.as_tensor(terms[name], dtype=torch.float64)
        part = v * term_weight(name, w)
        total = part if total is None else total + part
        breakdown[name] = float(v.detach())
    breakdown["total"] = float(total.detach())
    return total, breakdown


# ---------------------------------------------------------------------------
# image terms


def _valid(mask_excluded, shape) -> torch.Tensor:
    if mask_excluded is None:
        return torch.ones(shape[:2], dtype=torch.bool)
    m = torch.as_tensor(np.asarray(mask_excluded) if not isinstance(mask_excluded, torch.Tensor) else mask_excluded)
    if m.shape != shape[:2]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match image {tuple(shape[:2])}")
    return ~(m.bool())


def masked_mean(x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels (and any trailing channels)."""
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel is masked out")
    v = valid.to(x.dtype)
    if x.dim() == 3:
        return (x * v[..., None]).sum() / (n * x.shape[-1])
    return (x * v).sum() / n


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    r = size // 2
    k = torch.exp(-(torch.arange(-r, r + 1, dtype=torch.float64) ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def _symmetric_index(n: int, r: int) -> torch.Tensor:
    idx = np.arange(-r, n + r)
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    return torch.as_tensor(idx)


def _blur(x: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Separable filter over the first two axes with half-sample symmetric padding."""
    r = k.shape[0] // 2
    h, w = x.shape[:2]
    xp = x[_symmetric_index(h, r)]
    y = sum(k[i] * xp[i : i + h] for i in range(k.shape[0]))
    yp = y[:, _symmetric_index(w, r)]
    return sum(k[i] * yp[:, i : i + w] for i in range(k.shape[0]))


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel, per-channel SSIM of two (H, W, C) images on a [0, 1] range."""
    k = gaussian_window().to(a.dtype)
    mu_a, mu_b = _blur(a, k), _blur(b, k)
    var_a = _blur(a * a, k) - mu_a * mu_a
    var_b = _blur(b * b, k) - mu_b * mu_b
    cov = _blur(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def masked_ssim(a: torch.Tensor, b: torch.Tensor, excluded=None) -> torch.Tensor:
    """SSIM on the full image, averaged over included window centres."""
    return masked_mean(ssim_map(a, b), _valid(excluded, a.shape))


def loss_rec(render: torch.Tensor, target: torch.Tensor, occluder_mask=None, lam: float = 0.8) -> torch.Tensor:
    """``lam * L1 + (1 - lam) * (1 - SSIM) / 2`` over non-occluded pixels.

    A fully occluded image contributes exactly 0.
    """
    if render.shape != target.shape:
        raise ValueError("render and target must have the same shape")
    target = torch.as_tensor(target, dtype=render.dtype)
    valid = _valid(occluder_mask, render.shape)
    if not bool(valid.any()):
        return render.sum() * 0.0
    l1 = masked_mean((render - target).abs(), valid)
    dssim = (1.0 - masked_mean(ssim_map(render, target), valid)) / 2.0
    return lam * l1 + (1.0 - lam) * dssim


def fg_sky_terms(fg_render, sky_render, sky_mask, occluder_mask=None, literal: bool = False):
    """Foreground leakage onto sky pixels and sky leakage onto foreground pixels.

    With ``literal=True`` the masks are swapped.
    """
    sky = torch.as_tensor(np.asarray(sky_mask) if not isinstance(sky_mask, torch.Tensor) else sky_mask)
    if sky.shape != fg_render.shape[:2]:
        raise ValueError("sky mask shape does not match the render")
    sky = sky.to(fg_render.dtype)
    if literal:
        sky = 1.0 - sky
    valid = _valid(occluder_mask, fg_render.shape)
    if not bool(valid.any()):
        zero = fg_render.sum() * 0.0 + sky_render.sum() * 0.0
        return zero, zero
    fg_term = masked_mean((sky[..., None] * fg_render).abs(), valid)
    sky_term = masked_mean(((1.0 - sky)[..., None] * sky_render).abs(), valid)
    return fg_term, sky_term


def loss_fg_sky(fg_render, sky_render, sky_mask, occluder_mask=None, literal: bool = False) -> torch.Tensor:
    fg_term, sky_term = fg_sky_terms(fg_render, sky_render, sky_mask, occluder_mask, literal)
    return fg_term + sky_term


# ---------------------------------------------------------------------------
# light, geometry and depth terms


def sample_upper_hemisphere(n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.uniform(0.0, 1.0, n)
    phi = rng.uniform(0.0, 2 * math.pi, n)
    s = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


def loss_light(light: torch.Tensor, n_samples: int, rng: np.random.Generator) -> torch.Tensor:
    """Mean squared negative radiance over upper-hemisphere samples."""
    coeffs = light.coeffs if isinstance(light, sh.SHCoefficients) else light
    dirs = torch.as_tensor(sample_upper_hemisphere(n_samples, rng), dtype=coeffs.dtype)
    rad = sh.eval_sh(coeffs, dirs, check=False)
    return (rad.clamp_max(0.0) ** 2).sum(-1).mean()


def depth_normals(depth: torch.Tensor, alpha: torch.Tensor, camera) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space surface normals from a depth map by central differences.

    Returns ``(normals (H, W, 3), valid (H, W))``; border pixels and pixels
    whose 4-neighbourhood has no coverage are invalid (zero normal).
    """
    h, w = depth.shape
    dtype = depth.dtype
    u = torch.arange(w, dtype=dtype)[None, :].expand(h, w)
    v = torch.arange(h, dtype=dtype)[:, None].expand(h, w)
    pts = torch.stack([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth], dim=-1)
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = torch.cross(dy, dx, dim=-1)
    norm = torch.linalg.norm(n, dim=-1, keepdim=True)
    cov = alpha.detach() > 0
    inner = cov[1:-1, 1:-1] & cov[1:-1, 2:] & cov[1:-1, :-2] & cov[2:, 1:-1] & cov[:-2, 1:-1]
    inner = inner & (norm[..., 0].detach() > 0)
    n = torch.where(inner[..., None], n / torch.where(inner[..., None], norm, torch.ones_like(norm)), torch.zeros_like(n))
    n_world = n @ torch.as_tensor(camera.R, dtype=dtype)
    normals = torch.nn.functional.pad(n_world.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    valid = torch.zeros(h, w, dtype=torch.bool)
    valid[1:-1, 1:-1] = inner
    return normals, valid


def loss_normal(normal_blend: torch.Tensor, fg_weight: torch.Tensor, ref_normals: torch.Tensor, valid: torch.Tensor, occluder_mask=None) -> torch.Tensor:
    """Mean over valid pixels of ``sum_i w_i (1 - n_i . N)``.

    ``normal_blend`` is ``sum_i w_i n_i`` and ``fg_weight`` is ``sum_i w_i``
    over the foreground Gaussians blended into each pixel.
    """
    keep = valid & _valid(occluder_mask, normal_blend.shape)
    per_pixel = fg_weight - (normal_blend * ref_normals).sum(-1)
    if int(keep.sum()) == 0:
        return per_pixel.sum() * 0.0
    return masked_mean(per_pixel, keep)


def loss_scale(fg_log_scale: torch.Tensor) -> torch.Tensor:
    """Sum over foreground Gaussians of the smallest axis scale."""
    return torch.exp(fg_log_scale).min(dim=-1).values.sum()


def mean_visible_depth(depths: torch.Tensor, weight_sum: torch.Tensor, select: torch.Tensor):
    """Mean camera depth of the selected Gaussians with blend weight above 1e-3, or None."""
    vis = select & (weight_sum.detach() > VISIBLE_WEIGHT)
    if not bool(vis.any()):
        return None
    return depths[vis].mean()


def loss_sky_depth(mean_fg_depth, mean_sky_depth, gamma: float = 0.02) -> torch.Tensor:
    """``exp(-gamma (d_sky - d_fg))``; 0 when either side has no visible Gaussian."""
    if mean_fg_depth is None or mean_sky_depth is None:
        return torch.zeros((), dtype=torch.float64)
    return torch.exp(-gamma * (torch.as_tensor(mean_sky_depth) - torch.as_tensor(mean_fg_depth)))

"""Independent reference computations used by the tests.

Nothing here imports the package's SH tables, BRDF baker or SSIM; each
oracle is derived from scipy, plain numpy or scikit-image.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import sph_harm_y


def real_sh_scipy(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH from scipy's complex harmonics with the Condon-Shortley phase removed."""
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    out = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            y = sph_harm_y(l, am, theta, phi) * (-1.0) ** am
            if m > 0:
                out.append(math.sqrt(2.0) * y.real)
            elif m < 0:
                out.append(math.sqrt(2.0) * y.imag)
            else:
                out.append(y.real)
    return np.stack(out, axis=-1)


def uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def mc_irradiance(coeffs: np.ndarray, normal: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo ``int L(w) max(n.w, 0) dw`` with uniform sphere samples; (3,)."""
    degree = int(round(math.sqrt(coeffs.shape[1]))) - 1
    d = uniform_sphere(n, rng)
    L = real_sh_scipy(d, degree) @ coeffs.T
    cos = np.maximum(d @ normal, 0.0)
    return 4.0 * math.pi * np.mean(L * cos[:, None], axis=0)


# ---------------------------------------------------------------------------
# split-sum BRDF integral, written from the textbook formulas


def ggx_d(n_dot_h, alpha):
    a2 = alpha * alpha
    t = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * t * t)


def smith_g2_height_correlated(n_dot_v, n_dot_l, alpha):
    """``G2 = 1 / (1 + Lambda(v) + Lambda(l))`` with the GGX Lambda."""
    a2 = alpha * alpha

    def lam(c):
        t2 = (1.0 - c * c) / np.maximum(c * c, 1e-300)
        return 0.5 * (np.sqrt(1.0 + a2 * t2) - 1.0)

    return 1.0 / (1.0 + lam(n_dot_v) + lam(n_dot_l))


def brdf_integrals_mc(rho: float, cos_v: float, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """(F1, F2) by Monte-Carlo over half vectors with a warped polar angle.

    theta_h = (pi/2) u^4 crowds samples towards the normal so that narrow
    lobes are resolved without sampling the GGX distribution itself.
    """
    alpha = rho * rho
    v = np.array([math.sqrt(max(1.0 - cos_v * cos_v, 0.0)), 0.0, cos_v])
    u = rng.random(n)
    phi = 2.0 * math.pi * rng.random(n)
    th = 0.5 * math.pi * u**4
    jac = 0.5 * math.pi * 4.0 * u**3 * 2.0 * math.pi  # d(theta) d(phi) per unit square
    h = np.stack([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi), np.cos(th)], axis=1)
    vh = h @ v
    l = 2.0 * vh[:, None] * h - v
    nl = l[:, 2]
    ok = (nl > 0) & (vh > 0)
    nl_s = np.where(ok, nl, 1.0)
    D = ggx_d(h[:, 2], alpha)
    G = smith_g2_height_correlated(cos_v, nl_s, alpha)
    spec = D * G / (4.0 * nl_s * cos_v)  # BRDF with F = 1
    # dw_l = 4 (v.h) dw_h, dw_h = sin(theta_h) dtheta dphi
    w = np.where(ok, spec * nl_s * 4.0 * vh * np.sin(th) * jac, 0.0)
    fc = (1.0 - np.clip(vh, 0.0, 1.0)) ** 5
    return float(np.mean(w * (1.0 - fc))), float(np.mean(w * fc))


def brdf_integrals_uniform(rho: float, cos_v: float, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """(F1, F2) with uniform hemisphere sampling of the light direction."""
    alpha = rho * rho
    v = np.array([math.sqrt(max(1.0 - cos_v * cos_v, 0.0)), 0.0, cos_v])
    d = uniform_sphere(n, rng)
    d[:, 2] = np.abs(d[:, 2])
    h = d + v
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    nl = d[:, 2]
    vh = h @ v
    D = ggx_d(h[:, 2], alpha)
    G = smith_g2_height_correlated(cos_v, np.maximum(nl, 1e-12), alpha)
    w = D * G / (4.0 * cos_v) * 2.0 * math.pi  # f * NoL / pdf, NoL cancels
    fc = (1.0 - np.clip(vh, 0.0, 1.0)) ** 5
    return float(np.mean(w * (1.0 - fc))), float(np.mean(w * fc))


# ---------------------------------------------------------------------------
# images


def skimage_ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    from skimage.metrics import structural_similarity

    _, full = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        data_range=1.0, channel_axis=-1, full=True,
    )
    return full


def central_diff(f, x: np.ndarray, h: float) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g

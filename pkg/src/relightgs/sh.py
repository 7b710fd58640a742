"""Real spherical harmonics up to degree 4.

Coefficients are stored band-major, index ``j = l*(l+1) + m`` with
``m = -l..l``.  The basis has no Condon-Shortley phase, so e.g.
``Y_1^{-1} = c*y``, ``Y_1^0 = c*z`` and ``Y_1^1 = c*x``.

Everything here is written against torch so the same code path is used for
training (autograd) and for plain evaluation.  Numpy inputs are accepted and
converted on the way in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAX_DEGREE = 4

# normalisation constants of the real basis
C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
C1 = 0.4886025119029199
C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005, 1.0925484305920792, 0.5462742152960396)
C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)
C4 = (
    2.5033429417967046,
    1.7701307697799304,
    0.9461746957575601,
    0.6690465435572892,
    0.10578554691520431,
    0.6690465435572892,
    0.47308734787878004,
    1.7701307697799304,
    0.6258357354491761,
)

# DC coefficient of a constant unit function
DC_UNIT = 2.0 * math.sqrt(math.pi)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def band_of_index(degree: int) -> np.ndarray:
    """Band number ``l`` for each coefficient slot."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(degree + 1)])


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_degree(degree: int) -> None:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")


@dataclass(frozen=True)
class SHCoefficients:
    """Per-channel SH expansion, ``coeffs`` has shape (3, (degree+1)**2)."""

    degree: int
    coeffs: torch.Tensor

    def __post_init__(self):
        _check_degree(self.degree)
        c = _as_tensor(self.coeffs)
        if c.shape != (3, num_coeffs(self.degree)):
            raise ValueError(
                f"degree {self.degree} needs coeffs of shape (3, {num_coeffs(self.degree)}), got {tuple(c.shape)}"
            )
        if not torch.isfinite(c).all():
            raise ValueError("SH coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, degree: int) -> "SHCoefficients":
        return cls(degree, torch.zeros(3, num_coeffs(degree), dtype=torch.float64))

    @classmethod
    def constant(cls, rgb, degree: int = MAX_DEGREE) -> "SHCoefficients":
        """Light of uniform radiance ``rgb`` in every direction."""
        c = torch.zeros(3, num_coeffs(degree), dtype=torch.float64)
        c[:, 0] = _as_tensor(rgb).to(torch.float64) * DC_UNIT
        return cls(degree, c)

    def truncate(self, degree: int) -> "SHCoefficients":
        if degree > self.degree:
            raise ValueError("cannot truncate to a higher degree")
        return SHCoefficients(degree, self.coeffs[:, : num_coeffs(degree)])

    def numpy(self) -> np.ndarray:
        return self.coeffs.detach().cpu().numpy().copy()


def check_unit(dirs: torch.Tensor, tol: float = 1e-9) -> None:
    norm = torch.linalg.norm(dirs.detach(), dim=-1)
    if not torch.all(torch.abs(norm - 1.0) <= tol):
        raise ValueError("direction vectors must be unit length")


def eval_sh_basis(dirs, degree: int, check: bool = True) -> torch.Tensor:
    """Basis values at unit directions ``dirs`` (..., 3) -> (..., (degree+1)**2)."""
    _check_degree(degree)
    d = _as_tensor(dirs)
    if d.shape[-1] != 3:
        raise ValueError("directions must have a trailing dimension of 3")
    if check:
        check_unit(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [torch.full_like(x, C0)]
    if degree >= 1:
        out += [C1 * y, C1 * z, C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (3.0 * zz - 1.0),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]
    if degree >= 4:
        out += [
            C4[0] * x * y * (xx - yy),
            C4[1] * y * z * (3.0 * xx - yy),
            C4[2] * x * y * (7.0 * zz - 1.0),
            C4[3] * y * z * (7.0 * zz - 3.0),
            C4[4] * (35.0 * zz * zz - 30.0 * zz + 3.0),
            C4[5] * x * z * (7.0 * zz - 3.0),
            C4[6] * (xx - yy) * (7.0 * zz - 1.0),
            C4[7] * x * z * (xx - 3.0 * yy),
            C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)),
        ]
    return torch.stack(out, dim=-1)


def eval_sh(light: SHCoefficients | torch.Tensor, dirs, check: bool = True) -> torch.Tensor:
    """Radiance of an SH light along ``dirs`` (..., 3) -> (..., 3), unclamped.

    ``light`` may also be a raw (3, n) coefficient tensor, which keeps the
    autograd graph intact during training.
    """
    coeffs = light.coeffs if isinstance(light, SHCoefficients) else light
    degree = int(round(math.sqrt(coeffs.shape[-1]))) - 1
    basis = eval_sh_basis(dirs, degree, check=check)
    return basis.to(coeffs.dtype) @ coeffs.T


def project_to_sh(dirs, values, weights, degree: int) -> SHCoefficients:
    """Quadrature projection ``c[ch, j] = sum_k w_k * v_k[ch] * Y_j(d_k)``.

    ``dirs`` (K, 3), ``values`` (K, 3), ``weights`` (K,) solid angles.
    Directions not sampled are treated as zero radiance.
    """
    _check_degree(degree)
    d = _as_tensor(dirs).reshape(-1, 3)
    v = _as_tensor(values).reshape(-1, 3).to(torch.float64)
    w = _as_tensor(weights).reshape(-1).to(torch.float64)
    if d.shape[0] == 0:
        raise ValueError("cannot project an empty sample set")
    if not (d.shape[0] == v.shape[0] == w.shape[0]):
        raise ValueError("dirs, values and weights must have matching lengths")
    basis = eval_sh_basis(d, degree).to(torch.float64)
    return SHCoefficients(degree, (v * w[:, None]).T @ basis)


def blur_multipliers(roughness, degree: int = MAX_DEGREE, roughness_power: float = 2.0) -> torch.Tensor:
    """Per-coefficient low-pass factors ``exp(-l(l+1) s^2)`` with ``s = roughness**roughness_power``.

    ``roughness`` may be a scalar or a tensor of shape (N,), giving (N, n).
    The default power 2 makes the blur strength the square of the roughness;
    ``roughness_power=1`` gives the plain ``exp(-l(l+1) rho^2)`` kernel.
    """
    r = _as_tensor(roughness)
    if torch.any((r.detach() < 0) | (r.detach() > 1)):
        raise ValueError("roughness must lie in [0, 1]")
    bands = torch.as_tensor(band_of_index(degree), dtype=r.dtype)
    s = r ** roughness_power
    return torch.exp(-(bands * (bands + 1)) * (s[..., None] ** 2))


def sh_gaussian_blur(light: SHCoefficients, roughness: float, roughness_power: float = 2.0) -> SHCoefficients:
    if light.degree != MAX_DEGREE:
        raise ValueError("blur expects a degree-4 light")
    g = blur_multipliers(roughness, light.degree, roughness_power)
    return SHCoefficients(light.degree, light.coeffs * g.to(light.coeffs.dtype))


# Convolution of a band-limited light with the clamped cosine, pi * (1, 2/3, 1/4)
# per band, folded into the basis constants.
_A0, _A1, _A2 = math.pi, 2.0 * math.pi / 3.0, math.pi / 4.0
K1 = _A2 * C2[4]  # 0.429043
K2 = _A1 * C1 / 2.0  # 0.511664
K3 = _A2 * C2[2] * 3.0  # 0.743125
K4 = _A0 * C0  # 0.886227
K5 = _A2 * C2[2]  # 0.247708


def irradiance_matrix(light_deg2: SHCoefficients | torch.Tensor) -> torch.Tensor:
    """Per-channel 4x4 matrices M with ``E(n) = [n,1]^T M [n,1]`` -> (3, 4, 4)."""
    c = light_deg2.coeffs if isinstance(light_deg2, SHCoefficients) else light_deg2
    if c.shape[-1] != 9:
        raise ValueError(f"irradiance matrix needs 9 coefficients per channel, got {c.shape[-1]}")
    L00, L1m1, L10, L11, L2m2, L2m1, L20, L21, L22 = c.unbind(-1)
    rows = [
        [K1 * L22, K1 * L2m2, K1 * L21, K2 * L11],
        [K1 * L2m2, -K1 * L22, K1 * L2m1, K2 * L1m1],
        [K1 * L21, K1 * L2m1, K3 * L20, K2 * L10],
        [K2 * L11, K2 * L1m1, K2 * L10, K4 * L00 - K5 * L20],
    ]
    return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)


def irradiance(M: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
    """Evaluate the quadratic form for normals (..., 3) -> (..., 3)."""
    nh = torch.cat([normals, torch.ones_like(normals[..., :1])], dim=-1)
    return torch.einsum("...i,cij,...j->...c", nh, M.to(nh.dtype), nh)


def save_sh(path: str | Path, light: SHCoefficients) -> None:
    c = light.numpy()
    lines = [f"sh degree {light.degree}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in c]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sh(path: str | Path) -> SHCoefficients:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[:2] != ["sh", "degree"]:
        raise ValueError(f"{path}: expected header 'sh degree L'")
    degree = int(head[2])
    if len(lines) != 4:
        raise ValueError(f"{path}: expected 3 coefficient rows")
    rows = [[float(t) for t in ln.split()] for ln in lines[1:]]
    return SHCoefficients(degree, torch.tensor(rows, dtype=torch.float64))

import math

import numpy as np
import pytest
import torch

from helpers import tiny_camera, tiny_scene
from oracles import central_diff
from relightgs import raster as R
from relightgs.scene import Scene

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
IDENT = [1.0, 0.0, 0.0, 0.0]


def axis_camera(size=16, f=20.0):
    # camera at the origin looking down +z, principal point on a pixel centre
    return R.Camera(np.eye(3), np.zeros(3), f, f, 8.0, 8.0, size, size)


def fg_scene(xyz, log_scale, opacity, quat=None):
    n = len(xyz)
    quat = np.tile(IDENT, (n, 1)) if quat is None else quat
    logit = np.log(np.asarray(opacity) / (1 - np.asarray(opacity)))
    z = lambda *s: torch.zeros(*s, dtype=torch.float64)
    return Scene(T(xyz), T(quat), T(log_scale), T(logit), z(n, 3), z(n), z(0), z(0), z(0, 4), z(0, 3), z(0),
                 T([0.0, 0.0, 0.0]), T([1.0]))


def test_on_axis_projection():
    cam = axis_camera()
    p = R.project_gaussians(T([[0.0, 0.0, 4.0]]), T([IDENT]), T(np.log([[0.1, 0.1, 0.1]])), cam)
    assert p.mean2d[0].tolist() == [8.0, 8.0] and p.depth.item() == 4.0
    expect = (20.0**2 * 0.01 / 16.0 + 0.3) * np.eye(2)
    np.testing.assert_allclose(p.cov2d[0].numpy(), expect, rtol=1e-12)


def test_mean_jacobian_fd():
    cam = tiny_camera(32, eye=(0.4, -3.0, 0.9))
    x0 = np.array([0.2, -0.1, 0.6])
    q, ls = T([IDENT]), T([[-2.0, -2.0, -2.0]])
    x = T(x0[None]).requires_grad_(True)
    m = R.project_gaussians(x, q, ls, cam).mean2d[0]
    J = np.stack([torch.autograd.grad(m[k], x, retain_graph=True)[0][0].numpy() for k in range(2)])
    for k in range(2):
        f = lambda v: R.project_gaussians(T(v[None]), q, ls, cam).mean2d[0, k].item()
        np.testing.assert_allclose(central_diff(f, x0.copy(), 1e-6), J[k], atol=1e-5)


def test_single_opaque_gaussian():
    cam = axis_camera()
    sc = fg_scene([[0, 0, 4.0]], [[-1.0, -1.0, -1.0]], [0.999999])
    out = R.render(sc, cam, T([[0.2, 0.5, 0.9]]))
    np.testing.assert_allclose(out.color[8, 8].numpy(), R.ALPHA_MAX * np.array([0.2, 0.5, 0.9]), rtol=1e-12)
    assert out.depth[8, 8].item() == pytest.approx(4.0)


def test_two_colocated_half_opaque():
    cam = axis_camera()
    sc = fg_scene([[0, 0, 4.0], [0, 0, 4.0001]], [[-1.0] * 3, [-1.0] * 3], [0.5, 0.5])
    c1, c2 = np.array([1.0, 0.0, 0.2]), np.array([0.0, 1.0, 0.6])
    out = R.render(sc, cam, T([c1, c2]))
    np.testing.assert_allclose(out.color[8, 8].numpy(), 0.5 * c1 + 0.25 * c2, rtol=1e-12)
    assert out.alpha[8, 8].item() == pytest.approx(0.75)


def test_empty_scene():
    cam = axis_camera()
    sc = fg_scene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    out = R.render(sc, cam, torch.zeros(0, 3, dtype=torch.float64))
    assert torch.all(out.color == 0) and torch.all(out.alpha == 0) and torch.all(out.depth == 0)


def test_alpha_is_one_minus_transmittance():
    sc = tiny_scene(8, 0, seed=1)
    cam = tiny_camera()
    proj = R.project_gaussians(sc.xyz(), sc.rotations(), sc.fg_log_scale, cam)
    out = R.render(sc, cam, torch.rand(8, 3, dtype=torch.float64), cutoff_sigma=None)
    # brute force: every Gaussian over every pixel in depth order
    order = np.argsort(proj.depth.detach().numpy())
    m, con = proj.mean2d.detach().numpy(), proj.conic.detach().numpy()
    op = sc.opacities().numpy()
    for (i, j) in [(3, 3), (8, 8), (12, 5)]:
        tr = 1.0
        for k in order:
            d = np.array([j, i]) - m[k]
            a = min(R.ALPHA_MAX, op[k] * math.exp(-0.5 * (con[k, 0] * d[0] ** 2 + 2 * con[k, 1] * d[0] * d[1] + con[k, 2] * d[1] ** 2)))
            if tr * (1 - a) < R.T_MIN:
                break
            tr *= 1 - a
        assert out.alpha[i, j].item() == pytest.approx(1 - tr, abs=1e-12)
    assert torch.all((out.alpha >= 0) & (out.alpha <= 1))


def test_color_mode_superposition():
    sc = tiny_scene()
    cam = tiny_camera()
    cols = torch.rand(sc.num_fg + sc.num_sky, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    full = R.render(sc, cam, cols, R.ColorMode.FULL).color
    fg = R.render(sc, cam, cols, R.ColorMode.FOREGROUND_ONLY).color
    sky = R.render(sc, cam, cols, R.ColorMode.SKY_ONLY).color
    assert (full - fg - sky).abs().max().item() < 1e-12


def test_depth_near_far():
    cam = axis_camera(32)
    sc = fg_scene([[-0.6, 0, 3.0], [0.6, 0, 6.0]], [[-1.5] * 3, [-0.8] * 3], [0.99, 0.99])
    out = R.render(sc, cam, T(np.ones((2, 3))))
    near_px = out.depth[8, 4].item()
    far_px = out.depth[8, 12].item()
    assert 0 < near_px < far_px


def test_non_finite_reports_index():
    sc = fg_scene([[0, 0, 4.0], [0, 0, 5.0], [np.nan, 0, 5.0]], [[-1.0] * 3] * 3, [0.5] * 3)
    with pytest.raises(FloatingPointError, match="index 2"):
        R.render(sc, axis_camera(), T(np.ones((3, 3))))


def test_deterministic():
    sc = tiny_scene(seed=3)
    cam = tiny_camera()
    cols = T(np.random.default_rng(0).uniform(size=(18, 3)))
    a = R.render(sc, cam, cols)
    b = R.render(sc, cam, cols)
    assert a.color.numpy().tobytes() == b.color.numpy().tobytes()
    assert a.weight_sum.numpy().tobytes() == b.weight_sum.numpy().tobytes()


def test_fov_clamp_bounds_offaxis_footprint():
    cam = axis_camera(16, 16.0)
    # a splat near the camera, far outside the view cone
    p = R.project_gaussians(T([[5.0, 0.0, 0.5]]), T([IDENT]), T([[-2.0] * 3]), cam)
    lim = R.FOV_CLAMP * 0.5 * 16 / 16.0
    J00, J02 = 16.0 / 0.5, -16.0 * lim / 0.5
    s2 = math.exp(-4.0)
    assert p.cov2d[0, 0, 0].item() == pytest.approx((J00**2 + J02**2) * s2 + 0.3)


def _grad_scene():
    sc = tiny_scene(6, 2, seed=5)
    for name in Scene.LEARNABLE:
        setattr(sc, name, getattr(sc, name).clone().requires_grad_(True))
    return sc


def test_render_backward_zero_upstream():
    sc = _grad_scene()
    cols = torch.rand(8, 3, dtype=torch.float64).requires_grad_(True)
    out = R.render(sc, tiny_camera(), cols)
    g = R.render_backward(out, d_color=torch.zeros(16, 16, 3), d_depth=torch.zeros(16, 16), d_alpha=torch.zeros(16, 16))
    assert all(torch.all(v == 0) for v in g.values())


def test_render_backward_requires_state():
    sc = tiny_scene(4, 1)
    out = R.render(sc, tiny_camera(), torch.rand(5, 3, dtype=torch.float64))
    with pytest.raises(RuntimeError):
        R.render_backward(out, d_color=torch.ones(16, 16, 3))


def test_culled_gaussian_zero_gradient():
    sc = tiny_scene(4, 1, seed=6)
    sc.fg_xyz[0] = T([0.0, -10.0, 0.5])  # behind the camera
    for name in Scene.LEARNABLE:
        setattr(sc, name, getattr(sc, name).clone().requires_grad_(True))
    cols = torch.rand(5, 3, dtype=torch.float64).requires_grad_(True)
    out = R.render(sc, tiny_camera(), cols)
    g = R.render_backward(out, d_color=torch.ones(16, 16, 3), d_depth=torch.ones(16, 16), d_alpha=torch.ones(16, 16))
    for name in ("fg_xyz", "fg_rot", "fg_log_scale", "fg_opacity_logit"):
        assert torch.all(g[name][0] == 0)
    assert torch.all(g["colors"][0] == 0)


def test_render_backward_finite_differences():
    """8 Gaussians at 16x16 against central differences, h = 1e-4."""
    base = tiny_scene(6, 2, seed=5)
    cam = tiny_camera()
    rng = np.random.default_rng(7)
    cols0 = rng.uniform(0.1, 0.9, (8, 3))
    dc, dd, da = rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16)), rng.normal(size=(16, 16))

    def objective(sc, cols):
        out = R.render(sc, cam, cols)
        return out, (out.color * T(dc)).sum() + (out.depth * T(dd)).sum() + (out.alpha * T(da)).sum()

    sc = base.clone()
    for name in Scene.LEARNABLE:
        setattr(sc, name, getattr(sc, name).requires_grad_(True))
    cols = T(cols0).requires_grad_(True)
    out, _ = objective(sc, cols)
    grads = R.render_backward(out, d_color=dc, d_depth=dd, d_alpha=da)

    checks = {name: getattr(base, name).numpy() for name in Scene.LEARNABLE if name not in ("fg_albedo", "fg_roughness")}
    checks["colors"] = cols0
    for name, x0 in checks.items():
        def f(x, name=name):
            sc2 = base.clone()
            c = T(cols0)
            if name == "colors":
                c = T(x)
            else:
                setattr(sc2, name, T(x))
            with torch.no_grad():
                return objective(sc2, c)[1].item()

        fd = central_diff(f, x0.copy(), 1e-4)
        ad = grads[name].numpy()
        assert np.all(np.abs(ad - fd) <= 1e-4 * np.abs(fd) + 1e-7), (name, np.abs(ad - fd).max())

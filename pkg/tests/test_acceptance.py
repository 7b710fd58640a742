"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers and
its runtime.  The round-trip fit is shared by criteria 6, 7 and 8.
"""
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from helpers import randomized_mlp, tiny_camera, tiny_dataset, tiny_scene
from oracles import brdf_integrals_mc, real_sh_scipy, uniform_sphere
from relightgs import brdf, sh
from relightgs.dataset import View
from relightgs.losses import LossWeights, TERM_ORDER, active_terms, fg_sky_terms, total_loss
from relightgs.metrics import masked_metrics
from relightgs.pipeline import render_view
from relightgs.raster import ColorMode, render
from relightgs.synthetic import masks_from_render, render_gt, round_trip
from relightgs.trainer import LOG_FILE, SCENE_FILE, WEIGHTS_FILE, TrainConfig, compute_terms, fit, lut_for

ROUND_TRIP_ITERS = 3000


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str, seconds: float):
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)")
        return ok

    return emit


def test_01_sh_orthonormality(report):
    t = time.perf_counter()
    d = torch.as_tensor(uniform_sphere(1_000_000, np.random.default_rng(1)))
    B = sh.eval_sh_basis(d, 4)
    G = (4.0 * math.pi / len(d)) * (B.T @ B)
    err = float((G - torch.eye(25, dtype=G.dtype)).abs().max())
    dt = time.perf_counter() - t
    ok = report(1, err < 5e-3 and dt < 10, f"max |Gram - I| = {err:.2e} (limit 5e-3)", dt)
    assert ok


def test_02_diffuse_oracle(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    n = 1_000_000
    d = uniform_sphere(n, rng)
    Y = real_sh_scipy(d, 2)  # shared sample set; every query is its own 10^6-sample estimate
    worst = 0.0
    for _ in range(100):
        c = 0.3 * rng.standard_normal((3, 9))
        c[:, 0] = rng.uniform(1.5, 3.0, 3)
        normal = uniform_sphere(1, rng)[0]
        M = sh.irradiance_matrix(sh.SHCoefficients(2, torch.as_tensor(c)))
        ours = sh.irradiance(M, torch.as_tensor(normal)).numpy()
        L = Y @ c.T
        ref = 4.0 * math.pi * np.mean(L * np.maximum(d @ normal, 0.0)[:, None], axis=0)
        worst = max(worst, float(np.max(np.abs(ours - ref) / np.abs(ref))))
    dt = time.perf_counter() - t
    ok = report(2, worst < 5e-3 and dt < 60, f"max relative error {worst:.2e} over 100 cases (limit 5e-3)", dt)
    assert ok


def test_03_split_sum_lut(report, lut):
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        rho = rng.uniform(brdf.RHO_MIN, 1.0)
        cos_v = rng.uniform(brdf.COS_MIN, 1.0)
        ours = float(brdf.specular_albedo(lut, rho, cos_v))
        f1, f2 = brdf_integrals_mc(rho, cos_v, 1_000_000, rng)
        ref = brdf.F0_DIELECTRIC * f1 + f2
        worst = max(worst, abs(ours - ref) / ref)
    dt = time.perf_counter() - t
    ok = report(3, worst < 0.03 and dt < 120, f"max relative error {worst:.2e} over 20 points (limit 3e-2)", dt)
    assert ok


def test_04_blur_exactness(report):
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    bands = sh.band_of_index(4)
    worst = 0.0
    for rho in rng.uniform(0.0, 1.0, 10):
        light = sh.SHCoefficients(4, torch.as_tensor(rng.standard_normal((3, 25))))
        out = sh.sh_gaussian_blur(light, float(rho))
        s = rho**2
        for l in range(5):
            sel = torch.as_tensor(bands == l)
            e0 = float((light.coeffs[:, sel] ** 2).sum())
            e1 = float((out.coeffs[:, sel] ** 2).sum())
            g = math.exp(-l * (l + 1) * s * s)
            # amplitude ratio is the multiplier, energy ratio its square
            worst = max(worst, abs(math.sqrt(e1 / e0) - g), abs(e1 / e0 - g * g))
    dt = time.perf_counter() - t
    ok = report(4, worst <= 1e-12, f"max deviation {worst:.1e} (limit 1e-12)", dt)
    assert ok


def _sample_entries(grad: torch.Tensor, k: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``k`` entries with non-zero gradient plus one arbitrary entry."""
    g = grad.reshape(-1).numpy()
    nz = np.flatnonzero(g != 0)
    pick = list(rng.choice(nz, size=min(k, len(nz)), replace=False)) if len(nz) else []
    pick.append(int(rng.integers(len(g))))
    return np.unique(pick)


def test_05_gradient_suite(report):
    t = time.perf_counter()
    scene = tiny_scene(n_fg=12, n_sky=6, seed=11, opacity=(0.15, 0.35))
    ds = tiny_dataset(n_views=1)
    v = ds.views[0]
    view = View(v.image_id, v.image, v.sky_mask, v.occluder_mask, tiny_camera())
    mlp, table = randomized_mlp(ds.image_ids, seed=3)
    with torch.no_grad():
        # the LUT lookup is bilinear, so keep every roughness mid-cell where the
        # loss is smooth in it
        n = lut_for(TrainConfig()).shape[1]
        step = (1.0 - brdf.RHO_MIN) / (n - 1)
        cell = torch.floor((scene.fg_roughness - brdf.RHO_MIN) / step)
        scene.fg_roughness.copy_(brdf.RHO_MIN + (cell + 0.5) * step)
        # darken the zenith below zero so the light term is live
        mlp.light_head.bias.view(3, 25)[:, 2] = -1.5 * mlp.light_head.bias.view(3, 25)[:, 0]
    cfg = TrainConfig(loss_light_samples=64)
    w = cfg.loss_weights()
    it = w.geometry_start
    active = active_terms(it, w)
    assert set(active) == set(TERM_ORDER)
    lut = lut_for(cfg)
    for name in scene.LEARNABLE:
        getattr(scene, name).requires_grad_(True)
    state = SimpleNamespace(config=cfg, scene=scene)

    def loss():
        light, sky = mlp(table(view.image_id))
        out = render_view(scene, view.camera, light, sky, lut, cfg.roughness_power, cutoff_sigma=None)
        terms = compute_terms(state, out, view, light, active, np.random.default_rng(5))
        return total_loss(terms, w, it)

    total, parts = loss()
    total.backward()
    live = [k for k in TERM_ORDER if parts[k] != 0]
    groups = {name: getattr(scene, name) for name in scene.LEARNABLE}
    groups.update({f"mlp.{k}": p for k, p in mlp.named_parameters()})
    groups["embedding"] = table.weight

    rng = np.random.default_rng(0)
    h = 1e-5  # rounding error stays far below the absolute floor
    worst, checked, failures = 0.0, 0, []
    for name, p in groups.items():
        flat = p.data.view(-1)
        g = p.grad.reshape(-1)
        for i in _sample_entries(p.grad, 4, rng):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                fp = loss()[1]["total"]
                flat[i] = old - h
                fm = loss()[1]["total"]
                flat[i] = old
            fd = (fp - fm) / (2 * h)
            a = float(g[i])
            tol = max(1e-4 * max(abs(a), abs(fd)), 1e-7)
            worst = max(worst, abs(a - fd) / tol)
            checked += 1
            if abs(a - fd) > tol:
                failures.append(f"{name}[{i}] {a:.6e} vs {fd:.6e}")
    dt = time.perf_counter() - t
    ok = not failures and len(live) == len(TERM_ORDER) and dt < 300
    detail = f"{checked} entries in {len(groups)} groups, worst error/tolerance {worst:.2e}, live terms {live}"
    report(5, ok, detail + (f"; {failures[:3]}" if failures else ""), dt)
    assert ok


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    t = time.perf_counter()
    rt = round_trip()
    cfg = TrainConfig(iterations=ROUND_TRIP_ITERS)
    out = tmp_path_factory.mktemp("round_trip")
    state = fit(cfg, rt.data, out)
    return SimpleNamespace(rt=rt, state=state, cfg=cfg, lut=lut_for(cfg), seconds=time.perf_counter() - t)


def test_06_round_trip_relighting(report, fitted):
    t = time.perf_counter()
    rt, scene, lut = fitted.rt, fitted.state.scene, fitted.lut
    cam = rt.held_out_camera
    gt = render_gt(rt.gt, cam, rt.held_out_light, None, lut)
    sky, mixed = masks_from_render(gt)
    with torch.no_grad():
        out = render_view(scene, cam, torch.as_tensor(rt.held_out_light), None, lut)
    m = masked_metrics(out.color.numpy(), gt.color.numpy(), sky | mixed)
    dt = time.perf_counter() - t + fitted.seconds
    ok = m.psnr >= 28.0 and m.ssim >= 0.90 and dt < 1800
    report(6, ok, f"held-out relight PSNR {m.psnr:.2f} dB, SSIM {m.ssim:.4f} after {fitted.cfg.iterations} iterations "
                  f"(limits 28 dB, 0.90)", dt)
    assert ok


def test_07_sky_separation(report, fitted):
    t = time.perf_counter()
    rt, state, lut = fitted.rt, fitted.state, fitted.lut
    scene = state.scene
    leaks = []
    with torch.no_grad():
        for v in rt.data.views:
            light, sky = state.mlp(state.table(v.image_id))
            out = render_view(scene, v.camera, light, sky, lut)
            leak, _ = fg_sky_terms(out.fg_color, out.sky_color, v.sky_mask, v.occluder_mask)
            leaks.append(float(leak))
        th, ph = scene.sky_theta.numpy(), scene.sky_phi.numpy()
        r = torch.linalg.norm(scene.sky_xyz() - scene.dome_center, dim=-1).numpy()
    dome_err = float(np.abs(r - float(scene.dome_radius.detach()[0])).max())
    in_range = bool(np.all((th >= 0) & (th <= math.pi / 2) & (ph >= 0) & (ph <= math.pi)))
    dt = time.perf_counter() - t
    ok = max(leaks) < 1e-3 and in_range and dome_err <= 1e-9
    report(7, ok, f"max fg leakage {max(leaks):.2e} (limit 1e-3), {scene.num_sky} sky Gaussians in range: {in_range}, "
                  f"dome error {dome_err:.1e}", dt)
    assert ok


def test_08_color_mode_superposition(report, fitted):
    t = time.perf_counter()
    rt, state, lut = fitted.rt, fitted.state, fitted.lut
    scene = state.scene
    worst = 0.0
    with torch.no_grad():
        for v in rt.data.views[:3] + [SimpleNamespace(image_id=rt.data.views[0].image_id, camera=rt.held_out_camera)]:
            light, sky = state.mlp(state.table(v.image_id))
            shaded = render_view(scene, v.camera, light, sky, lut)
            worst = max(worst, float((shaded.color - shaded.fg_color - shaded.sky_color).abs().max()))
            colors = torch.rand(scene.num_fg + scene.num_sky, 3, dtype=torch.float64,
                                generator=torch.Generator().manual_seed(8))
            full = render(scene, v.camera, colors, ColorMode.FULL).color
            fg = render(scene, v.camera, colors, ColorMode.FOREGROUND_ONLY).color
            sk = render(scene, v.camera, colors, ColorMode.SKY_ONLY).color
            worst = max(worst, float((full - fg - sk).abs().max()))
    dt = time.perf_counter() - t
    ok = report(8, worst <= 1e-6, f"max |Full - (FG + Sky)| = {worst:.1e} (limit 1e-6)", dt)
    assert ok


def test_09_loss_weight_arithmetic(report):
    t = time.perf_counter()
    w = LossWeights()
    one = {k: torch.tensor(1.0, dtype=torch.float64) for k in TERM_ORDER}
    totals = [total_loss(one, w, it)[1]["total"] for it in (2000, 2001, 10_000)]
    dt = time.perf_counter() - t
    ok = report(9, all(x == 3.555 for x in totals), f"total with unit terms = {totals[0]!r} (expected 3.555)", dt)
    assert ok


def test_10_determinism(report, tmp_path):
    t = time.perf_counter()
    rt = round_trip(views_per_light=2, size=32)
    cfg = TrainConfig(iterations=700, densify_start=500, densify_stop=700, densify_interval=100, seed=4)
    for d in ("a", "b"):
        fit(cfg, rt.data, tmp_path / d)
    same = {
        name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in (SCENE_FILE, WEIGHTS_FILE, LOG_FILE, SCENE_FILE.replace(".ply", ".dome.txt"))
        if (tmp_path / "a" / name).exists()
    }
    dt = time.perf_counter() - t
    ok = report(10, all(same.values()) and len(same) >= 3, f"bit-identical checkpoint files: {same}", dt)
    assert ok

"""Command-line front end."""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import brdf, envmap, sh
from .dataset import load_dataset, parse_camera, read_cameras
from .imageio import read_mask, read_png, write_pfm, write_png
from .metrics import masked_metrics, write_report
from .pipeline import normal_to_rgb, render_maps
from .trainer import fit, load_checkpoint, load_config


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line diagnostics instead of usage dumps
        raise CLIError(message)


# ---------------------------------------------------------------------------
# shared helpers


def _lut(path: str | None) -> torch.Tensor:
    return brdf.load_or_bake(path).torch_grid()


def _pad_light(light: sh.SHCoefficients) -> torch.Tensor:
    c = torch.zeros(3, sh.num_coeffs(sh.MAX_DEGREE), dtype=torch.float64)
    c[:, : light.coeffs.shape[1]] = light.coeffs
    return c


def _env_light(path: str, rotate_deg: float, axis: str) -> torch.Tensor:
    env = envmap.load_map(path)
    if rotate_deg:
        env = envmap.rotate_map(env, math.radians(rotate_deg), axis)
    return envmap.map_to_sh(env).coeffs


def _camera(args):
    if args.pose:
        return parse_camera(args.pose.split())
    if not (args.cameras and args.camera_id):
        raise CLIError("give --pose, or --cameras with --camera-id")
    cams = read_cameras(args.cameras)
    if args.camera_id not in cams:
        raise CLIError(f"camera id {args.camera_id!r} not found in {args.cameras}")
    return cams[args.camera_id]


def _lights(args, mlp, table):
    """``(light (3, 25), sky (3, 4) or None for white)`` from the light flags."""
    chosen = [x for x in (args.light_id, args.sh, args.envmap) if x]
    if len(chosen) != 1:
        raise CLIError("give exactly one of --light-id, --sh, --envmap")
    trained_sky = None
    if args.light_id:
        with torch.no_grad():
            light, trained_sky = mlp(table(args.light_id))
    elif args.sh:
        light = _pad_light(sh.load_sh(args.sh))
    else:
        light = _env_light(args.envmap, args.rotate, args.axis)
    sky_mode = args.sky or ("trained" if args.light_id else "white")
    if sky_mode == "white":
        return light, None
    if trained_sky is None:
        if not args.sky_id:
            raise CLIError("--sky trained needs --light-id or --sky-id")
    if args.sky_id:
        with torch.no_grad():
            _, trained_sky = mlp(table(args.sky_id))
    return light, trained_sky


def _write_maps(out_dir: Path, maps, prefix: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_png(out_dir / f"{prefix}color.png", maps.color)
    write_pfm(out_dir / f"{prefix}depth.pfm", maps.depth)
    write_png(out_dir / f"{prefix}albedo.png", maps.albedo)
    write_png(out_dir / f"{prefix}normal.png", normal_to_rgb(maps.normal))


# ---------------------------------------------------------------------------
# commands


def cmd_bake_lut(args) -> None:
    lut = brdf.bake_lut(args.resolution, args.samples, args.seed)
    brdf.save_lut(args.out, lut)
    print(f"wrote {args.out} ({lut.resolution}x{lut.resolution})")


def cmd_fit(args) -> None:
    cfg = load_config(args.config)
    data = load_dataset(args.data)

    def progress(it, b):
        if args.log_every and it % args.log_every == 0:
            print(f"iter {it} total {b['total']:.6f} psnr {b['psnr']:.2f}", flush=True)

    state = fit(cfg, data, args.out, resume=args.resume, progress=progress)
    print(f"wrote checkpoint to {args.out} at iteration {state.iteration}")


def cmd_render(args) -> None:
    scene, mlp, table, _ = load_checkpoint(args.checkpoint)
    light, sky = _lights(args, mlp, table)
    maps = render_maps(scene, _camera(args), light, sky, _lut(args.lut), args.roughness_power)
    _write_maps(Path(args.out), maps)
    print(f"wrote maps to {args.out}")


def cmd_relight(args) -> None:
    if args.steps < 1:
        raise CLIError("--steps must be >= 1")
    scene, mlp, table, _ = load_checkpoint(args.checkpoint)
    cam = _camera(args)
    lut = _lut(args.lut)
    env = envmap.load_map(args.envmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.steps):
        angle = 2.0 * math.pi * k / args.steps
        light = envmap.map_to_sh(envmap.rotate_map(env, angle, args.axis)).coeffs
        maps = render_maps(scene, cam, light, None, lut, args.roughness_power)
        write_png(out / f"relight_{k:03d}.png", maps.color)
    print(f"wrote {args.steps} frames to {out}")


def _test_light(root: Path, image_id: str, trained: bool, mlp, table):
    for ext in (".txt", ".sh"):
        p = root / "lights" / f"{image_id}{ext}"
        if p.exists():
            return _pad_light(sh.load_sh(p)), None
    for ext in (".pfm", ".png"):
        p = root / "envmaps" / f"{image_id}{ext}"
        if p.exists():
            return envmap.map_to_sh(envmap.load_map(p)).coeffs, None
    if trained:
        with torch.no_grad():
            return mlp(table(image_id))
    raise CLIError(f"test view {image_id!r} has no light (lights/{image_id}.txt or envmaps/{image_id}.pfm|png)")


def cmd_eval(args) -> None:
    root = Path(args.test)
    cams = read_cameras(root / "cameras.txt")
    if not cams:
        raise CLIError(f"{root}: empty test set")
    scene, mlp, table, _ = load_checkpoint(args.checkpoint)
    lut = _lut(args.lut)
    rows = {}
    for image_id in sorted(cams):
        cam = cams[image_id]
        target = read_png(root / "images" / f"{image_id}.png")
        if target.ndim == 2:
            target = np.repeat(target[..., None], 3, axis=-1)
        excluded = np.zeros(target.shape[:2], dtype=bool)
        for sub in ("masks_sky", "masks_occluder", "masks_eval"):
            p = root / sub / f"{image_id}.png"
            if p.exists():
                excluded |= read_mask(p, target.shape[:2])
        light, sky = _test_light(root, image_id, args.trained_lights, mlp, table)
        maps = render_maps(scene, cam, light, sky, lut, args.roughness_power)
        rows[image_id] = masked_metrics(maps.color, target, excluded)
    write_report(args.out, rows)
    print(f"wrote {args.out} ({len(rows)} views)")


def cmd_envmap_to_sh(args) -> None:
    light = _env_light(args.envmap, args.rotate, args.axis)
    sh.save_sh(args.out, sh.SHCoefficients(sh.MAX_DEGREE, light).truncate(args.degree))
    print(f"wrote {args.out}")


def cmd_sh_to_envmap(args) -> None:
    env = envmap.sh_to_map(sh.load_sh(args.sh), args.width, args.height)
    envmap.save_map(args.out, env)
    print(f"wrote {args.out}")


def cmd_rotate_envmap(args) -> None:
    env = envmap.rotate_map(envmap.load_map(args.envmap), math.radians(args.angle), args.axis)
    envmap.save_map(args.out, env)
    print(f"wrote {args.out}")


# ---------------------------------------------------------------------------
# parser


def _add_camera(p) -> None:
    p.add_argument("--cameras", help="cameras.txt to look the camera up in")
    p.add_argument("--camera-id", help="camera id within --cameras")
    p.add_argument("--pose", help="inline camera: 'fx fy cx cy w h' plus 12 numbers of [R|t]")


def _add_common(p) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by fit")
    p.add_argument("--lut", help="BRDF LUT file (baked on demand when absent)")
    p.add_argument("--roughness-power", type=float, default=2.0, help="blur strength exponent on roughness")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="relightgs", description="Relightable Gaussian splatting for outdoor photo collections.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bake-lut", help="bake the split-sum BRDF table")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bake_lut)

    p = sub.add_parser("fit", help="train on a dataset directory")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render colour, depth, albedo and normal maps")
    _add_common(p)
    _add_camera(p)
    p.add_argument("--light-id", help="use the light learned for this training image")
    p.add_argument("--sh", help="SH light file")
    p.add_argument("--envmap", help="environment map (.pfm or .png)")
    p.add_argument("--rotate", type=float, default=0.0, help="environment rotation in degrees")
    p.add_argument("--axis", default="y", choices=sorted(envmap.AXES))
    p.add_argument("--sky", choices=("trained", "white"))
    p.add_argument("--sky-id", help="training image whose sky colour to use")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="render a sweep of environment rotations")
    _add_common(p)
    _add_camera(p)
    p.add_argument("--envmap", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--axis", default="y", choices=sorted(envmap.AXES))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("eval", help="masked metrics on a test set")
    _add_common(p)
    p.add_argument("--test", required=True, help="test directory (cameras.txt, images/, lights/ or envmaps/, masks)")
    p.add_argument("--trained-lights", action="store_true", help="fall back to learned lights for training ids")
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("envmap-to-sh", help="project an environment map to SH")
    p.add_argument("--envmap", required=True)
    p.add_argument("--degree", type=int, default=sh.MAX_DEGREE)
    p.add_argument("--rotate", type=float, default=0.0, help="rotation in degrees before projection")
    p.add_argument("--axis", default="y", choices=sorted(envmap.AXES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_envmap_to_sh)

    p = sub.add_parser("sh-to-envmap", help="evaluate SH onto an equirectangular map")
    p.add_argument("--sh", required=True)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--out", required=True, help=".pfm or .png")
    p.set_defaults(func=cmd_sh_to_envmap)

    p = sub.add_parser("rotate-envmap", help="rotate an environment map in the pixel domain")
    p.add_argument("--envmap", required=True)
    p.add_argument("--angle", type=float, required=True, help="degrees")
    p.add_argument("--axis", default="y", choices=sorted(envmap.AXES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotate_envmap)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (CLIError, ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

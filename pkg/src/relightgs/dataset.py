"""On-disk training sets: images, masks, cameras and the seed point cloud."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_mask, read_png, write_png
from .raster import Camera


@dataclass(frozen=True)
class View:
    image_id: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    sky_mask: np.ndarray  # (H, W) bool, True = sky
    occluder_mask: np.ndarray  # (H, W) bool, True = excluded
    camera: Camera


@dataclass(frozen=True)
class Dataset:
    views: list[View]
    points: np.ndarray  # (P, 3)
    colors: np.ndarray  # (P, 3) in [0, 1]

    def view(self, image_id: str) -> View:
        for v in self.views:
            if v.image_id == image_id:
                return v
        raise KeyError(f"unknown image id {image_id!r}")

    @property
    def image_ids(self) -> list[str]:
        return [v.image_id for v in self.views]


def _lines(path: Path):
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def parse_camera(tokens: list[str]) -> Camera:
    """``fx fy cx cy w h`` followed by a row-major 3x4 world-to-camera ``[R | t]``."""
    if len(tokens) != 18:
        raise ValueError(f"expected 18 numbers after the id, got {len(tokens)}")
    v = [float(t) for t in tokens]
    Rt = np.array(v[6:], dtype=np.float64).reshape(3, 4)
    return Camera(Rt[:, :3], Rt[:, 3], v[0], v[1], v[2], v[3], int(v[4]), int(v[5]))


def format_camera(image_id: str, cam: Camera) -> str:
    Rt = np.concatenate([cam.R, cam.t[:, None]], axis=1).ravel()
    head = [image_id, repr(cam.fx), repr(cam.fy), repr(cam.cx), repr(cam.cy), str(cam.width), str(cam.height)]
    return " ".join(head + [repr(float(x)) for x in Rt])


def read_cameras(path: str | Path) -> dict[str, Camera]:
    path = Path(path)
    cams: dict[str, Camera] = {}
    try:
        rows = list(_lines(path))
    except OSError as exc:
        raise ValueError(f"{path}: cannot read cameras ({exc.strerror})") from None
    for no, tok in rows:
        try:
            cams[tok[0]] = parse_camera(tok[1:])
        except ValueError as exc:
            raise ValueError(f"{path}:{no}: {exc}") from None
    return cams


def read_points(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """``x y z r g b`` rows; colours above 1 are taken as 8-bit and divided by 255."""
    path = Path(path)
    try:
        rows = [(no, [float(t) for t in tok]) for no, tok in _lines(path)]
    except OSError as exc:
        raise ValueError(f"{path}: cannot read points ({exc.strerror})") from None
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    for no, r in rows:
        if len(r) != 6:
            raise ValueError(f"{path}:{no}: expected 6 numbers, got {len(r)}")
    a = np.array([r for _, r in rows], dtype=np.float64).reshape(-1, 6)
    xyz, rgb = a[:, :3], a[:, 3:]
    if rgb.size and rgb.max() > 1.0:
        rgb = rgb / 255.0
    return xyz, np.clip(rgb, 0.0, 1.0)


def load_dataset(root: str | Path) -> Dataset:
    """Read a dataset directory; mask files are optional (absent means nothing masked)."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root}: dataset directory not found")
    cams = read_cameras(root / "cameras.txt")
    points, colors = read_points(root / "points.txt")
    views = []
    for image_id in sorted(cams):
        cam = cams[image_id]
        img_path = root / "images" / f"{image_id}.png"
        img = read_png(img_path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, camera says {cam.width}x{cam.height}")
        masks = []
        for sub in ("masks_sky", "masks_occluder"):
            p = root / sub / f"{image_id}.png"
            masks.append(read_mask(p, img.shape[:2]) if p.exists() else np.zeros(img.shape[:2], dtype=bool))
        views.append(View(image_id, img, masks[0], masks[1], cam))
    if not views:
        raise ValueError(f"{root / 'cameras.txt'}: no cameras listed")
    return Dataset(views, points, colors)


def write_dataset(root: str | Path, views: list[View], points: np.ndarray, colors: np.ndarray) -> None:
    """Inverse of :func:`load_dataset`; colours are written in [0, 1]."""
    root = Path(root)
    for sub in ("images", "masks_sky", "masks_occluder"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for v in views:
        write_png(root / "images" / f"{v.image_id}.png", v.image)
        write_png(root / "masks_sky" / f"{v.image_id}.png", v.sky_mask.astype(np.float64))
        write_png(root / "masks_occluder" / f"{v.image_id}.png", v.occluder_mask.astype(np.float64))
        lines.append(format_camera(v.image_id, v.camera))
    (root / "cameras.txt").write_text("\n".join(lines) + "\n")
    pts = np.concatenate([points, colors], axis=1)
    (root / "points.txt").write_text("\n".join(" ".join(repr(float(x)) for x in row) for row in pts) + "\n")

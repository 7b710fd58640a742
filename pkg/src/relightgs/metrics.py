"""Masked image metrics and their CSV report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .losses import ssim_map

PSNR_CAP = 99.0


@dataclass(frozen=True)
class Metrics:
    psnr: float
    ssim: float
    mse: float
    mae: float


def psnr_from_mse(mse: float) -> float:
    return PSNR_CAP if mse <= 0 else min(PSNR_CAP, -10.0 * math.log10(mse))


def masked_metrics(render: np.ndarray, target: np.ndarray, excluded: np.ndarray | None = None) -> Metrics:
    """PSNR, SSIM, MSE and MAE over pixels not in ``excluded``.

    SSIM is computed on the whole image and averaged over included window
    centres.  Images are (H, W, 3) on a [0, 1] range.
    """
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError(f"shape mismatch: {render.shape} vs {target.shape}")
    keep = np.ones(render.shape[:2], dtype=bool) if excluded is None else ~np.asarray(excluded, dtype=bool)
    if keep.shape != render.shape[:2]:
        raise ValueError("mask shape does not match the images")
    if not keep.any():
        raise ValueError("every pixel is excluded")
    d = render[keep] - target[keep]
    mse = float(np.mean(d * d))
    mae = float(np.mean(np.abs(d)))
    s = ssim_map(torch.from_numpy(render), torch.from_numpy(target)).numpy()
    return Metrics(psnr_from_mse(mse), float(s[keep].mean()), mse, mae)


def average(reports: list[Metrics]) -> Metrics:
    if not reports:
        raise ValueError("no metrics to average")
    return Metrics(*(float(np.mean([getattr(r, f) for r in reports])) for f in ("psnr", "ssim", "mse", "mae")))


def format_report(rows: dict[str, Metrics]) -> str:
    """CSV with one row per image id (sorted) and a trailing ``avg`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "psnr", "ssim", "mse", "mae"])
    ordered = [rows[k] for k in sorted(rows)]
    for k in sorted(rows):
        m = rows[k]
        w.writerow([k, repr(m.psnr), repr(m.ssim), repr(m.mse), repr(m.mae)])
    avg = average(ordered)
    w.writerow(["avg", repr(avg.psnr), repr(avg.ssim), repr(avg.mse), repr(avg.mae)])
    return buf.getvalue()


def write_report(path: str | Path, rows: dict[str, Metrics]) -> None:
    text = format_report(rows)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)

"""PSNR / SSIM scoring, directory evaluation, output ensembling and flip TTA."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.signal import correlate

from .events_io import ImagePlane, quantize, read_image

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

FLIPS = ("identity", "hflip", "vflip", "hvflip")


class ScoreRow(NamedTuple):
    name: str
    psnr: float
    ssim: float


def _pixels(img) -> np.ndarray:
    """HxWxC float64 array from an ImagePlane or an HxW / HxWxC array."""
    arr = img.data if isinstance(img, ImagePlane) else np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64, copy=False)


def _prepare(a, b, luma=False, quantized=False):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if quantized:
        a = quantize(a) / 255.0
        b = quantize(b) / 255.0
    if luma:
        a = a.mean(axis=2, keepdims=True)
        b = b.mean(axis=2, keepdims=True)
    return a, b


def psnr(a, b, peak: float = 1.0, luma: bool = False, quantized: bool = False) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs score the 100 dB cap."""
    a, b = _prepare(a, b, luma, quantized)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> float:
    def filt(x):
        return correlate(x, win, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b, luma: bool = False, quantized: bool = False) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on the [0, 1] scale.

    Computed per channel over valid window positions, then channel-averaged.
    """
    a, b = _prepare(a, b, luma, quantized)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[0]}x{a.shape[1]} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    vals = [_ssim_channel(a[:, :, c], b[:, :, c], win) for c in range(a.shape[2])]
    return float(np.mean(vals))


_PNM_SUFFIXES = (".ppm", ".pgm", ".pnm")


def _pnm_files(d: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in _PNM_SUFFIXES}


def evaluate_dir(pred_dir, gt_dir, luma: bool = False) -> tuple[list[ScoreRow], ScoreRow]:
    """Score every ground-truth image against the same-named prediction."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory {d} does not exist")
    gts = _pnm_files(gt_dir)
    preds = _pnm_files(pred_dir)
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for {', '.join(missing)}")
    if not gts:
        raise ValueError(f"no PNM images in {gt_dir}")
    rows = []
    for name in sorted(gts):
        a, b = read_image(preds[name]), read_image(gts[name])
        rows.append(ScoreRow(name, psnr(a, b, luma=luma), ssim(a, b, luma=luma)))
    mean = ScoreRow("MEAN", float(np.mean([r.psnr for r in rows])),
                    float(np.mean([r.ssim for r in rows])))
    return rows, mean


def scores_to_csv(rows: Sequence[ScoreRow], mean: ScoreRow) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name", "psnr_db", "ssim"))
    for r in [*rows, mean]:
        w.writerow((r.name, f"{r.psnr:.6f}", f"{r.ssim:.6f}"))
    return buf.getvalue()


def ensemble_average(outputs: Sequence) -> ImagePlane:
    """Per-pixel mean of several outputs, clamped to [0, 1].

    Values are sorted per pixel before averaging so the result does not depend
    on input order, and the mean is taken as offsets from the smallest value so
    identical inputs return exactly themselves.
    """
    arrs = [_pixels(o) for o in outputs]
    if not arrs:
        raise ValueError("need at least one output")
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("outputs differ in shape")
    stack = np.sort(np.stack(arrs), axis=0)
    base = stack[0]
    avg = base + (stack - base).sum(axis=0) / len(arrs)
    return ImagePlane(np.clip(avg, 0.0, 1.0))


def _flip(arr: np.ndarray, op: str) -> np.ndarray:
    """Flip the last two (row, column) axes."""
    if op == "identity":
        return arr
    if op == "hflip":
        return np.ascontiguousarray(arr[..., ::-1])
    if op == "vflip":
        return np.ascontiguousarray(arr[..., ::-1, :])
    if op == "hvflip":
        return np.ascontiguousarray(arr[..., ::-1, ::-1])
    raise ValueError(f"unknown flip {op!r}")


def tta_flip_infer(model: Callable, img, voxels) -> ImagePlane:
    """Average ``model`` over the flip group, undoing each flip on the output.

    ``model(img_chw, voxels_bhw)`` returns a CHW array; ``img`` may be an
    ImagePlane or a CHW array.
    """
    chw = img.chw() if isinstance(img, ImagePlane) else np.asarray(img)
    vox = np.asarray(voxels)
    outs = []
    for op in FLIPS:
        y = np.asarray(model(_flip(chw, op), _flip(vox, op)), dtype=np.float64)
        outs.append(ImagePlane.from_chw(_flip(y, op)))
    return ensemble_average(outs)

"""Synthetic (sharp, blurry, events) triples from translating patterns.

Frames are a pattern shifted by a constant velocity with bilinear sampling
and wraparound.  The blurry image is the mean of all subframes, the sharp
target is the middle subframe, and events come from a contrast-threshold
model on log intensity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .events_io import EventStream, ImagePlane, write_events, write_image

PATTERNS = ("checker", "gradient", "textured-noise")


@dataclass(frozen=True)
class Scene:
    pattern: str = "checker"
    velocity: tuple[float, float] = (1.0, 0.0)
    frames: int = 9
    height: int = 64
    width: int = 64
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.frames < 2:
            raise ValueError("a scene needs at least 2 frames")


@dataclass(frozen=True)
class EventModel:
    contrast: float = 0.2
    log_eps: float = 1e-3

    def __post_init__(self):
        if not self.contrast > 0:
            raise ValueError("contrast threshold must be positive")


def make_pattern(scene: Scene) -> np.ndarray:
    """Base HxWxC texture in [0, 1], deterministic under ``scene.seed``."""
    rng = np.random.default_rng(scene.seed)
    H, W, C = scene.height, scene.width, scene.channels
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if scene.pattern == "checker":
        cell = int(rng.integers(4, 13))
        base = ((yy // cell + xx // cell) % 2).astype(np.float64)
        base = 0.15 + 0.7 * base
    elif scene.pattern == "gradient":
        # periodic so wraparound has no seam
        fy, fx = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        base = 0.5 + 0.2 * np.sin(2 * np.pi * fx * xx / W + phase[0]) \
            + 0.2 * np.sin(2 * np.pi * fy * yy / H + phase[1])
    else:
        noise = gaussian_filter(rng.random((H, W)), sigma=float(rng.uniform(1.0, 2.5)), mode="wrap")
        noise -= noise.min()
        noise /= max(noise.max(), 1e-12)
        base = 0.1 + 0.8 * noise
    tint = rng.uniform(0.6, 1.0, size=C)
    return np.clip(base[:, :, None] * tint, 0.0, 1.0)


def shift_wrap(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate by (dx, dy) pixels with bilinear sampling and wraparound."""
    H, W = img.shape[:2]
    sx, sy = dx % W, dy % H
    ix, fx = int(np.floor(sx)), sx - np.floor(sx)
    iy, fy = int(np.floor(sy)), sy - np.floor(sy)
    a = np.roll(img, (iy, ix), axis=(0, 1))
    if fx == 0 and fy == 0:
        return a
    b = np.roll(a, 1, axis=1)
    c = np.roll(a, 1, axis=0)
    d = np.roll(b, 1, axis=0)
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def render_sequence(scene: Scene) -> list[ImagePlane]:
    base = make_pattern(scene)
    vx, vy = scene.velocity
    return [ImagePlane(shift_wrap(base, k * vx, k * vy)) for k in range(scene.frames)]


def integrate_blur(frames) -> ImagePlane:
    """Exposure average: per-pixel mean of the frames."""
    arrs = [f.data if isinstance(f, ImagePlane) else np.asarray(f, dtype=np.float64) for f in frames]
    if not arrs:
        raise ValueError("need at least one frame")
    # offsets from the first frame, so a static sequence averages to itself exactly
    base = arrs[0]
    return ImagePlane(base + np.sum(np.stack(arrs) - base, axis=0) / len(arrs))


def _intensity(frame) -> np.ndarray:
    arr = frame.data if isinstance(frame, ImagePlane) else np.asarray(frame, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def generate_events(frames, model: EventModel, timestamps) -> EventStream:
    """Contrast-threshold events between consecutive frames.

    Per pixel a reference log level is kept; each crossing of
    ``ref + p*C`` inside an interval emits one event at the linearly
    interpolated time and moves the reference by ``p*C``.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    if len(ts) != len(frames):
        raise ValueError("need one timestamp per frame")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    C = model.contrast
    logs = [np.log(_intensity(f) + model.log_eps) for f in frames]
    H, W = logs[0].shape
    ref = logs[0].copy()
    chunks = []
    for k in range(len(frames) - 1):
        prev, new = logs[k], logs[k + 1]
        diff = new - ref
        n = np.floor(np.abs(diff) / C).astype(np.int64)
        ys, xs = np.nonzero(n)
        if len(ys):
            counts = n[ys, xs]
            pol = np.sign(diff[ys, xs]).astype(np.int64)
            # expand to one row per event
            rep = np.repeat(np.arange(len(ys)), counts)
            j = np.arange(len(rep)) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            level = ref[ys, xs][rep] + pol[rep] * j * C
            span = (new - prev)[ys, xs][rep]
            # a crossing can survive rounding in a flat interval; stamp it at the start
            safe = np.where(span != 0, span, 1.0)
            frac = np.where(span != 0, (level - prev[ys, xs][rep]) / safe, 0.0)
            frac = np.clip(frac, 0.0, 1.0)
            t = ts[k] + np.round(frac * (ts[k + 1] - ts[k])).astype(np.int64)
            t = np.minimum(t, ts[k + 1])
            chunks.append(np.stack([t, xs[rep], ys[rep], pol[rep]], axis=1))
            ref[ys, xs] += pol * counts * C
    if chunks:
        ev = np.concatenate(chunks)
        ev = ev[np.argsort(ev[:, 0], kind="stable")]
    else:
        ev = np.zeros((0, 4), dtype=np.int64)
    return EventStream(ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3], W, H,
                       (int(ts[0]), int(ts[-1])))


def exposure_timestamps(frames: int, exposure_us: int = 40_000) -> np.ndarray:
    return np.round(np.linspace(0, exposure_us, frames)).astype(np.int64)


def synthesize(scene: Scene, model: EventModel | None = None, exposure_us: int = 40_000):
    """Return (sharp, blur, events) for one scene; sharp is subframe ``N // 2``."""
    model = model or EventModel()
    frames = render_sequence(scene)
    events = generate_events(frames, model, exposure_timestamps(scene.frames, exposure_us))
    return frames[scene.frames // 2], integrate_blur(frames), events


MANIFEST_HEADER = ("name", "pattern", "vx", "vy", "frames", "C", "seed")


def random_scene(rng: np.random.Generator, size=(64, 64), frames: int = 9,
                 max_speed: float = 1.5) -> Scene:
    pattern = PATTERNS[int(rng.integers(0, len(PATTERNS)))]
    speed = rng.uniform(0.5, max_speed)
    angle = rng.uniform(0, 2 * np.pi)
    vx = round(float(speed * np.cos(angle)), 4)
    vy = round(float(speed * np.sin(angle)), 4)
    return Scene(pattern, (vx, vy), frames, size[0], size[1], int(rng.integers(0, 2 ** 31 - 1)))


def make_dataset(n_scenes: int, out_dir, seed: int = 0, contrast: float = 0.2,
                 size=(64, 64), frames: int = 9, max_speed: float = 1.5) -> Path:
    """Write ``n_scenes`` training triples plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = EventModel(contrast)
    rows = []
    for i in range(n_scenes):
        scene = random_scene(rng, size, frames, max_speed)
        name = f"scene_{i:04d}"
        sharp, blur, events = synthesize(scene, model)
        write_image(out / f"{name}.sharp.ppm", sharp)
        write_image(out / f"{name}.blur.ppm", blur)
        write_events(out / f"{name}.events.csv", events)
        rows.append((name, scene.pattern, scene.velocity[0], scene.velocity[1],
                     scene.frames, contrast, scene.seed))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)
    return manifest

"""Event-to-tensor representations.

All grids are signed ``(bins, height, width)`` float64 arrays: each bin holds
the polarity mass that landed in its temporal slice.
"""

from __future__ import annotations

from typing import Mapping, NamedTuple

import numpy as np

from .events_io import EventStream

TRANSFORMS = ("hflip", "vflip", "rot90", "rot180", "rot270")


class MultiWindowVoxels(NamedTuple):
    long: np.ndarray
    mid: np.ndarray
    short: np.ndarray


class SplitVoxels(NamedTuple):
    forward: np.ndarray
    backward: np.ndarray


class EdgeMap(NamedTuple):
    e: np.ndarray
    m: np.ndarray
    tau: float


def voxelize(stream: EventStream, bins: int) -> np.ndarray:
    """Bilinear-in-time voxel grid.

    Each event is placed at ``t* = (bins-1) (t - t0) / (t1 - t0)`` and split
    between the two neighbouring bins with weights ``1 - |b - t*|``.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    if len(stream) == 0:
        return grid
    t0, t1 = stream.window
    if t1 == t0:
        raise ValueError("degenerate window: t_start == t_end")

    ts = (bins - 1) * (stream.t - t0).astype(np.float64) / float(t1 - t0)
    lo = np.floor(ts).astype(np.int64)
    frac = ts - lo
    pol = stream.p.astype(np.float64)
    flat = grid.reshape(-1)
    plane = stream.height * stream.width
    pix = stream.y * stream.width + stream.x

    ok = (lo >= 0) & (lo < bins)
    np.add.at(flat, lo[ok] * plane + pix[ok], pol[ok] * (1.0 - frac[ok]))
    hi = lo + 1
    ok = (hi >= 0) & (hi < bins) & (frac > 0)
    np.add.at(flat, hi[ok] * plane + pix[ok], pol[ok] * frac[ok])
    return grid


def scer(stream: EventStream, bins: int) -> np.ndarray:
    """Symmetric cumulative event representation.

    For ``j = 1..bins/2`` with ``d_j = j (t1 - t0) / bins`` around the window
    midpoint ``tm``, channel ``bins/2 - j`` counts signed events in
    ``[tm - d_j, tm]`` and channel ``bins/2 - 1 + j`` counts ``(tm, tm + d_j]``.
    Events exactly at the midpoint belong to the left half.
    """
    if bins < 2 or bins % 2:
        raise ValueError(f"SCER needs an even number of bins >= 2, got {bins}")
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    if len(stream) == 0:
        return grid
    t0, t1 = stream.window
    half = bins // 2
    span = t1 - t0
    # integer comparisons scaled by 2*bins so the midpoint and the nested
    # boundaries stay exact
    t2b = 2 * bins * stream.t
    mid2b = bins * (t0 + t1)
    pol = stream.p.astype(np.float64)
    pix = stream.y * stream.width + stream.x
    left = t2b <= mid2b
    for j in range(1, half + 1):
        reach = 2 * j * span
        in_left = left & (t2b >= mid2b - reach)
        in_right = ~left & (t2b <= mid2b + reach)
        np.add.at(grid[half - j].reshape(-1), pix[in_left], pol[in_left])
        np.add.at(grid[half - 1 + j].reshape(-1), pix[in_right], pol[in_right])
    return grid


def concat_streams(streams) -> EventStream:
    """Join time-contiguous streams of one sensor into a single stream."""
    streams = list(streams)
    if not streams:
        raise ValueError("no streams to concatenate")
    first = streams[0]
    for a, b in zip(streams, streams[1:]):
        if (b.width, b.height) != (first.width, first.height):
            raise ValueError("streams come from different sensor sizes")
        if a.window[1] != b.window[0]:
            raise ValueError(f"windows not contiguous: {a.window} then {b.window}")
    return EventStream(
        np.concatenate([s.t for s in streams]),
        np.concatenate([s.x for s in streams]),
        np.concatenate([s.y for s in streams]),
        np.concatenate([s.p for s in streams]),
        first.width, first.height,
        (first.window[0], streams[-1].window[1]),
    )


def multi_window_voxelize(frames: Mapping[int, EventStream], t: int,
                          T_l: int = 5, T_m: int = 1, T_s: int = 0,
                          b: int = 7) -> MultiWindowVoxels:
    """Long/mid/short voxel grids over frames ``[t-T, t+T]``."""

    def window(T):
        missing = [i for i in range(t - T, t + T + 1) if i not in frames]
        if missing:
            raise KeyError(f"missing frames {missing} for window T={T} around t={t}")
        return voxelize(concat_streams(frames[i] for i in range(t - T, t + T + 1)), b)

    return MultiWindowVoxels(window(T_l), window(T_m), window(T_s))


def split_voxels(stream: EventStream, M: int = 9) -> SplitVoxels:
    """Split an ``(M+1)``-bin grid into forward and time-reversed backward halves."""
    if M < 1 or M % 2 == 0:
        raise ValueError(f"M must be odd so M+1 bins split evenly, got {M}")
    full = voxelize(stream, M + 1)
    half = (M + 1) // 2
    return SplitVoxels(full[:half].copy(), full[half:][::-1].copy())


def center_slices(bins: int) -> tuple[int, int]:
    if bins < 2:
        raise ValueError(f"motion edge needs >= 2 bins, got {bins}")
    lo = (bins - 1) // 2
    return lo, lo + 1


def motion_edge(grid: np.ndarray, tau: float) -> EdgeMap:
    """Product of the two slices nearest the exposure center, plus its mask."""
    grid = np.asarray(grid)
    lo, hi = center_slices(grid.shape[-3])
    e = grid[..., lo, :, :] * grid[..., hi, :, :]
    return EdgeMap(e, (e > tau).astype(e.dtype), float(tau))


def transform_events(stream: EventStream, op: str) -> EventStream:
    """Apply a flip or quarter-turn rotation to event coordinates.

    ``rot90`` turns the image clockwise as displayed (row 0 at the top):
    ``(x, y) -> (H-1-y, x)`` and the sensor becomes ``H x W``.
    """
    W, H = stream.width, stream.height
    x, y = stream.x, stream.y
    if op == "hflip":
        nx, ny, nw, nh = W - 1 - x, y, W, H
    elif op == "vflip":
        nx, ny, nw, nh = x, H - 1 - y, W, H
    elif op == "rot90":
        nx, ny, nw, nh = H - 1 - y, x, H, W
    elif op == "rot180":
        nx, ny, nw, nh = W - 1 - x, H - 1 - y, W, H
    elif op == "rot270":
        nx, ny, nw, nh = y, W - 1 - x, H, W
    else:
        raise ValueError(f"unknown transform {op!r}")
    return EventStream(stream.t.copy(), nx, ny, stream.p.copy(), nw, nh, stream.window)


def spatial_transform(arr, op: str, axes=(-2, -1)) -> np.ndarray:
    """Index remap on a dense array matching :func:`transform_events`.

    ``axes`` names the (row, column) axes; defaults fit CHW / BHW layouts.
    """
    arr = np.asarray(arr)
    ay, ax = axes
    if op == "hflip":
        out = np.flip(arr, axis=ax)
    elif op == "vflip":
        out = np.flip(arr, axis=ay)
    elif op == "rot90":
        out = np.rot90(arr, k=-1, axes=(ay, ax))
    elif op == "rot180":
        out = np.rot90(arr, k=2, axes=(ay, ax))
    elif op == "rot270":
        out = np.rot90(arr, k=1, axes=(ay, ax))
    elif op == "identity":
        out = arr
    else:
        raise ValueError(f"unknown transform {op!r}")
    return np.ascontiguousarray(out)


def inverse_transform(op: str) -> str:
    return {"rot90": "rot270", "rot270": "rot90"}.get(op, op)

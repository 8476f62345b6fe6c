"""Losses, AdamW, cosine schedule, patch sampling and the training loop."""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .events_io import EventStream, ImagePlane, read_events, read_image
from .kunet import ModelConfig, checkpoint_state, init_params, kunet_forward, predict
from .representations import EdgeMap, motion_edge, spatial_transform, transform_events, voxelize

PSNR_EPS = 1e-8
ADAM_EPS = 1e-8
EDGE_EPS = 1e-12

LOG_HEADER = ("iter", "loss", "loss_psnr", "loss_rec", "loss_edge", "lr", "seconds")


@dataclass
class TrainConfig:
    batch_size: int = 8
    patch: int = 64
    iters: int = 500
    lr_max: float = 2e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    enlarge: int = 6
    w_psnr: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    w_edge: float = 0.0
    tau_edge: float = 0.1
    augment: int = 1
    ckpt_every: int = 0
    prefetch: int = 1
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            cast = int if f.type in ("int", int) else float
            setattr(self, f.name, cast(getattr(self, f.name)))
        for name in ("w_psnr", "lambda1", "lambda2", "w_edge", "lr_max", "lr_min", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.patch < 1 or self.iters < 1 or self.enlarge < 1:
            raise ValueError("batch_size, patch, iters and enlarge must be positive")


# -- config files ----------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"config line {lineno}: empty key or value")
        out[key] = value
    return out


def config_keys() -> tuple[set[str], set[str]]:
    return {f.name for f in fields(ModelConfig)}, {f.name for f in fields(TrainConfig)}


def build_configs(values: Mapping[str, object]) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat key map into model and training configs; unknown keys raise."""
    model_keys, train_keys = config_keys()
    unknown = sorted(set(values) - model_keys - train_keys)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    try:
        mcfg = ModelConfig(**{k: int(float(v)) for k, v in values.items() if k in model_keys})
        tcfg = TrainConfig(**{k: float(v) for k, v in values.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise ValueError(f"invalid config value: {exc}") from None
    if tcfg.patch % 2 ** mcfg.levels:
        raise ValueError(f"patch {tcfg.patch} not divisible by 2^levels = {2 ** mcfg.levels}")
    return mcfg, tcfg


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path, encoding="utf-8") as f:
        return build_configs(parse_config_text(f.read()))


def format_config(mcfg: ModelConfig, tcfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in asdict(mcfg).items()]
    lines += [f"{k} = {v}" for k, v in asdict(tcfg).items()]
    return "\n".join(lines) + "\n"


# -- losses ----------------------------------------------------------------

def _check_shapes(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def loss_reconstruction(pred: Tensor, gt, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """``lambda1 * mean|pred-gt| + lambda2 * mean (pred-gt)^2``."""
    gt = dc.as_tensor(gt, pred)
    _check_shapes(pred, gt)
    diff = dc.sub(pred, gt)
    l1 = dc.mean(dc.abs_(diff))
    l2 = dc.mean(dc.square(diff))
    return dc.add(dc.scale(l1, lambda1), dc.scale(l2, lambda2))


def loss_psnr(pred: Tensor, gt, weight: float = 0.5) -> Tensor:
    """``weight * 10 log10(MSE + 1e-8)``; minimising it maximises PSNR."""
    gt = dc.as_tensor(gt, pred)
    _check_shapes(pred, gt)
    mse = dc.mean(dc.square(dc.sub(pred, gt)))
    return dc.scale(dc.log(dc.add(mse, PSNR_EPS)), weight * 10.0 / math.log(10.0))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_magnitude(img: Tensor) -> Tensor:
    """Sobel gradient magnitude of the channel-mean luma; drops the channel axis."""
    luma = dc.mean(img, axis=-3, keepdims=True)
    kernels = np.stack([_SOBEL_X, _SOBEL_X.T])[:, None].astype(img.dtype)
    g = dc.conv2d(luma, Tensor(kernels), stride=1, pad=1)
    return dc.sqrt(dc.add(dc.sum_(dc.square(g), axis=-3), EDGE_EPS))


def loss_motion_edge(pred: Tensor, edge: EdgeMap) -> Tensor:
    """``mean((sobel(pred) * m - e)^2)`` against a motion-edge map."""
    e = dc.as_tensor(np.asarray(edge.e), pred)
    m = dc.as_tensor(np.asarray(edge.m), pred)
    if pred.shape[:-3] + pred.shape[-2:] != e.shape or e.shape != m.shape:
        raise ValueError(f"prediction {pred.shape} does not match edge map {e.shape}")
    mag = sobel_magnitude(pred)
    return dc.mean(dc.square(dc.sub(dc.mul(mag, m), e)))


# -- optimiser -------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float, betas=(0.9, 0.99),
               weight_decay: float = 1e-4) -> None:
    """In-place AdamW update with decoupled weight decay."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = 1.0 - lr * weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = p.data * decay - lr * step


def cosine_lr(t: int, T: int, lr_max: float, lr_min: float) -> float:
    if T <= 0:
        raise ValueError("total steps must be positive")
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside [0, {T}]")
    if t == 0:
        return lr_max
    w = 0.5 * (1.0 + math.cos(math.pi * t / T))
    return lr_min + w * (lr_max - lr_min)


# -- data ------------------------------------------------------------------

class Sample(NamedTuple):
    name: str
    blur: ImagePlane
    sharp: ImagePlane
    events: EventStream


def load_dataset(dataset_dir) -> list[Sample]:
    """Read every ``<name>.blur.ppm / .sharp.ppm / .events.csv`` triple, sorted by name."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    names = sorted(p.name[: -len(".blur.ppm")] for p in root.glob("*.blur.ppm"))
    samples = []
    for name in names:
        sharp = root / f"{name}.sharp.ppm"
        events = root / f"{name}.events.csv"
        for path in (sharp, events):
            if not path.exists():
                raise FileNotFoundError(f"missing {path.name} for sample {name}")
        samples.append(Sample(name, read_image(root / f"{name}.blur.ppm"),
                              read_image(sharp), read_events(events)))
    return samples


def crop_events(stream: EventStream, x0: int, y0: int, w: int, h: int) -> EventStream:
    keep = (stream.x >= x0) & (stream.x < x0 + w) & (stream.y >= y0) & (stream.y < y0 + h)
    return EventStream(stream.t[keep], stream.x[keep] - x0, stream.y[keep] - y0,
                       stream.p[keep], w, h, stream.window)


def sample_patch(img: ImagePlane, gt: ImagePlane, events: EventStream, patch: int,
                 rng: np.random.Generator, bins: int = 6, augment: bool = True):
    """Crop one aligned (blur, sharp, voxel) training triple.

    Returns CHW arrays; voxelisation happens after cropping and augmentation.
    """
    H, W = img.height, img.width
    if patch > min(H, W):
        raise ValueError(f"patch {patch} larger than image {H}x{W}")
    if (gt.height, gt.width) != (H, W) or (events.height, events.width) != (H, W):
        raise ValueError("image, ground truth and events disagree on size")
    y0 = int(rng.integers(0, H - patch + 1))
    x0 = int(rng.integers(0, W - patch + 1))
    a = img.data[y0:y0 + patch, x0:x0 + patch]
    b = gt.data[y0:y0 + patch, x0:x0 + patch]
    ev = crop_events(events, x0, y0, patch, patch)
    if augment:
        ops = []
        if rng.random() < 0.5:
            ops.append("hflip")
        k = int(rng.integers(0, 4))
        if k:
            ops.append(("rot90", "rot180", "rot270")[k - 1])
        for op in ops:
            a = spatial_transform(a, op, axes=(0, 1))
            b = spatial_transform(b, op, axes=(0, 1))
            ev = transform_events(ev, op)
    return (np.ascontiguousarray(a.transpose(2, 0, 1)),
            np.ascontiguousarray(b.transpose(2, 0, 1)),
            voxelize(ev, bins))


def virtual_epoch(n: int, enlarge: int, epoch: int, seed: int) -> np.ndarray:
    """Sample order for one enlarged epoch: every sample ``enlarge`` times, shuffled."""
    rng = np.random.default_rng([seed, 1, epoch])
    return rng.permutation(np.tile(np.arange(n), enlarge))


def batch_indices(iteration: int, batch_size: int, n: int, enlarge: int, seed: int) -> list[int]:
    per_epoch = n * enlarge
    out = []
    for k in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(k, per_epoch)
        out.append(int(virtual_epoch(n, enlarge, epoch, seed)[pos]))
    return out


def make_batch(samples, iteration: int, mcfg: ModelConfig, tcfg: TrainConfig, dtype=np.float32):
    """Assemble batch ``iteration`` with its own random stream derived from the seed."""
    rng = np.random.default_rng([tcfg.seed, 2, iteration])
    idx = batch_indices(iteration, tcfg.batch_size, len(samples), tcfg.enlarge, tcfg.seed)
    blur, sharp, vox = zip(*(sample_patch(samples[i].blur, samples[i].sharp, samples[i].events,
                                          tcfg.patch, rng, mcfg.event_bins, bool(tcfg.augment))
                             for i in idx))
    return (np.stack(blur).astype(dtype), np.stack(sharp).astype(dtype),
            np.stack(vox).astype(dtype))


# -- training loop -----------------------------------------------------------

def total_loss(pred: Tensor, sharp, vox, tcfg: TrainConfig):
    """Weighted objective and its (psnr, rec, edge) parts."""
    lp = loss_psnr(pred, sharp, tcfg.w_psnr)
    lr_ = loss_reconstruction(pred, sharp, tcfg.lambda1, tcfg.lambda2)
    total = dc.add(lp, lr_)
    le = None
    if tcfg.w_edge > 0:
        le = dc.scale(loss_motion_edge(pred, motion_edge(vox, tcfg.tau_edge)), tcfg.w_edge)
        total = dc.add(total, le)
    return total, lp, lr_, le


def train_step(params, opt: OptimizerState, blur, sharp, vox, mcfg, tcfg, lr):
    for p in params.values():
        p.zero_grad()
    with dc.Tape() as tape:
        pred = kunet_forward(Tensor(blur), Tensor(vox), params, mcfg)
        total, lp, lrec, le = total_loss(pred, sharp, vox, tcfg)
    dc.backward(tape, total)
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adamw_step(params, grads, opt, lr, (tcfg.beta1, tcfg.beta2), tcfg.weight_decay)
    return (total.item(), lp.item(), lrec.item(), 0.0 if le is None else le.item())


def save_checkpoint(path, params, mcfg: ModelConfig, opt: OptimizerState | None = None):
    state = checkpoint_state(params, mcfg)
    if opt is not None:
        for name in params:
            if name in opt.m:
                state[f"opt.m.{name}"] = opt.m[name]
                state[f"opt.v.{name}"] = opt.v[name]
        state["opt.step"] = np.array([opt.step], dtype=np.float64)
    data = dc.save_tensors(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class TrainResult(NamedTuple):
    checkpoint: Path
    log: Path
    params: dict
    history: list


def train(mcfg: ModelConfig, tcfg: TrainConfig, dataset_dir, out_dir, progress=None) -> TrainResult:
    """Run the full loop; writes ``final.kunt`` and ``metrics.csv`` into ``out_dir``."""
    samples = load_dataset(dataset_dir)
    if not samples:
        raise ValueError(f"no training samples in {dataset_dir}")
    if tcfg.patch % 2 ** mcfg.levels:
        raise ValueError(f"patch {tcfg.patch} not divisible by 2^levels = {2 ** mcfg.levels}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    params = init_params(mcfg, tcfg.seed)
    opt = OptimizerState()
    history = []
    log_path = out / "metrics.csv"
    start = time.perf_counter()

    pool = ThreadPoolExecutor(max_workers=1) if tcfg.prefetch else None

    def fetch(i):
        if pool is None:
            return make_batch(samples, i, mcfg, tcfg)
        return pool.submit(make_batch, samples, i, mcfg, tcfg)

    try:
        with open(log_path, "w", newline="") as logf:
            writer = csv.writer(logf)
            writer.writerow(LOG_HEADER)
            pending = fetch(0)
            for i in range(tcfg.iters):
                batch = pending.result() if pool is not None else pending
                # at most two batches in flight: this one and the next
                if i + 1 < tcfg.iters:
                    pending = fetch(i + 1)
                lr = cosine_lr(i, tcfg.iters, tcfg.lr_max, tcfg.lr_min)
                losses = train_step(params, opt, *batch, mcfg, tcfg, lr)
                row = (i + 1, *losses, lr, time.perf_counter() - start)
                history.append(row)
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                if progress is not None:
                    progress(row)
                if tcfg.ckpt_every and (i + 1) % tcfg.ckpt_every == 0 and i + 1 < tcfg.iters:
                    save_checkpoint(out / f"ckpt_{i + 1:06d}.kunt", params, mcfg, opt)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    ckpt = out / "final.kunt"
    save_checkpoint(ckpt, params, mcfg, opt)
    return TrainResult(ckpt, log_path, params, history)


def deblur(params, mcfg: ModelConfig, blur: ImagePlane, events: EventStream,
           tta: bool = False) -> ImagePlane:
    """Run the network on a full frame and return the clamped prediction."""
    from .metrics_eval import tta_flip_infer

    vox = voxelize(events, mcfg.event_bins)

    def model(img, v):
        return predict(img, v, params, mcfg)

    if tta:
        return tta_flip_infer(model, blur, vox)
    out = model(blur.chw(), vox).astype(np.float64)
    return ImagePlane.from_chw(np.clip(out, 0.0, 1.0))

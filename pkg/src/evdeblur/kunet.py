"""Dual-encoder U-Net with bottleneck fusion and a KANLinear transformer block.

Parameters live in a flat ``{name: Tensor}`` dict with canonical names such as
``img_enc.0.conv1.w``, ``fuse.w`` or ``attn.q.W_spline``; the forward pass is a
plain function of (inputs, params, config).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .kan import KanLayerParams, SplineGrid, kan_forward

# order of the integers stored in the "meta.config" checkpoint tensor
CONFIG_ORDER = ("base_channels", "levels", "event_bins", "heads", "token_dim",
                "kan_grid", "kan_order", "image_channels", "blocks", "zero_head")

KAN_LAYERS = ("q", "k", "v", "o", "ff1", "ff2")


@dataclass
class ModelConfig:
    base_channels: int = 8
    levels: int = 3
    event_bins: int = 6
    heads: int = 4
    token_dim: int = 32
    kan_grid: int = 8
    kan_order: int = 3
    image_channels: int = 3
    blocks: int = 1
    zero_head: int = 0

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, int(getattr(self, f.name)))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.event_bins < 1:
            raise ValueError("event_bins must be >= 1")
        if self.base_channels < 1 or self.token_dim < 1 or self.heads < 1:
            raise ValueError("channel counts and heads must be positive")
        if self.token_dim % self.heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def grid(self) -> SplineGrid:
        return SplineGrid(-1.0, 1.0, self.kan_grid, self.kan_order)

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in CONFIG_ORDER], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "ModelConfig":
        vals = [int(round(float(v))) for v in np.asarray(arr).reshape(-1)]
        return cls(**dict(zip(CONFIG_ORDER, vals)))

    def as_dict(self):
        return asdict(self)


def block_prefix(i: int) -> str:
    return "attn" if i == 0 else f"attn{i}"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every parameter name and shape, in canonical order."""
    shapes: dict[str, tuple] = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    for branch, cin in (("img_enc", cfg.image_channels), ("evt_enc", cfg.event_bins)):
        for i in range(cfg.levels):
            c = cfg.channels(i)
            conv(f"{branch}.{i}.conv1", cin if i == 0 else c, c, 3)
            conv(f"{branch}.{i}.conv2", c, c, 3)
            conv(f"{branch}.{i}.down", c, cfg.channels(i + 1), 3)
    conv("fuse", 2 * cfg.channels(cfg.levels), cfg.token_dim, 1)

    d, nb = cfg.token_dim, cfg.grid.n_basis
    for b in range(cfg.blocks):
        pre = block_prefix(b)
        for ln in ("ln1", "ln2"):
            shapes[f"{pre}.{ln}.gamma"] = (d,)
            shapes[f"{pre}.{ln}.beta"] = (d,)
        for name, din, dout in (("q", d, d), ("k", d, d), ("v", d, d), ("o", d, d),
                                ("ff1", d, 2 * d), ("ff2", 2 * d, d)):
            shapes[f"{pre}.{name}.W_base"] = (dout, din)
            shapes[f"{pre}.{name}.W_spline"] = (dout, din * nb)

    for i in reversed(range(cfg.levels)):
        c = cfg.channels(i)
        prev = cfg.token_dim if i == cfg.levels - 1 else cfg.channels(i + 1)
        conv(f"dec.{i}.conv1", prev + c, c, 3)
        conv(f"dec.{i}.conv2", c, c, 3)
    conv("head", cfg.channels(0), cfg.image_channels, 3)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    nb = cfg.grid.n_basis
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".beta"):
            arr = np.zeros(shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".W_base"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".W_spline"):
            arr = rng.standard_normal(shape) * (0.1 / np.sqrt(nb))
        elif name == "head.w":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = np.zeros(shape) if cfg.zero_head else rng.standard_normal(shape) * (0.1 / np.sqrt(fan_in))
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def count_parameters(params) -> int:
    """Total number of scalars over all parameter tensors."""
    values: Iterable = params.values() if isinstance(params, Mapping) else params
    return int(sum(int(np.prod(np.shape(v.data if isinstance(v, Tensor) else v))) for v in values))


def kan_layer(params: Mapping[str, Tensor], prefix: str, cfg: ModelConfig) -> KanLayerParams:
    return KanLayerParams(params[f"{prefix}.W_base"], params[f"{prefix}.W_spline"], cfg.grid)


def _conv(x, params, name, stride=1):
    w = params[f"{name}.w"]
    return dc.conv2d(x, w, params[f"{name}.b"], stride=stride, pad=w.shape[-1] // 2)


def _conv_block(x, params, name):
    x = dc.silu(_conv(x, params, f"{name}.conv1"))
    return dc.silu(_conv(x, params, f"{name}.conv2"))


def attention_block(tokens: Tensor, params: Mapping[str, Tensor], n_heads: int,
                    cfg: ModelConfig, prefix: str = "attn", eps: float = 1e-5,
                    return_attention: bool = False):
    """Pre-norm transformer block with KANLinear projections.

    ``tokens`` is ``(T, d)`` or ``(N, T, d)``; no positional encoding.
    """
    d = tokens.shape[-1]
    if d % n_heads:
        raise ValueError(f"token dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = tokens.shape[:-2]
    T = tokens.shape[-2]

    h = dc.layer_norm(tokens, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"], eps)

    def heads(name):
        y = kan_forward(h, kan_layer(params, f"{prefix}.{name}", cfg))
        y = y.reshape(*lead, T, n_heads, dh)
        nd = y.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return dc.transpose(y, perm)  # (..., heads, T, dh)

    q, k, v = heads("q"), heads("k"), heads("v")
    nd = k.ndim
    kt = dc.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = dc.scale(dc.matmul(q, kt), 1.0 / float(np.sqrt(dh)))
    attn = dc.softmax_rows(scores)
    ctx = dc.matmul(attn, v)
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    ctx = dc.transpose(ctx, perm).reshape(*lead, T, d)
    x = dc.add(tokens, kan_forward(ctx, kan_layer(params, f"{prefix}.o", cfg)))

    h2 = dc.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"], eps)
    ff = kan_forward(h2, kan_layer(params, f"{prefix}.ff1", cfg))
    ff = kan_forward(dc.silu(ff), kan_layer(params, f"{prefix}.ff2", cfg))
    out = dc.add(x, ff)
    if return_attention:
        return out, attn.data
    return out


def kunet_forward(img, voxels, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Deblur ``img`` (3xHxW or Nx3xHxW) guided by ``voxels`` (BxHxW or NxBxHxW)."""
    img, voxels = dc.as_tensor(img), dc.as_tensor(voxels)
    if img.ndim not in (3, 4) or voxels.ndim != img.ndim:
        raise ValueError(f"image {img.shape} and voxels {voxels.shape} must both be 3-D or 4-D")
    H, W = img.shape[-2:]
    f = 2 ** cfg.levels
    if H % f or W % f:
        raise ValueError(f"H and W must be divisible by 2^levels = {f}, got {H}x{W}")
    if img.shape[-3] != cfg.image_channels:
        raise ValueError(f"expected {cfg.image_channels} image channels, got {img.shape[-3]}")
    if voxels.shape[-3] != cfg.event_bins:
        raise ValueError(f"expected {cfg.event_bins} event bins, got {voxels.shape[-3]}")
    if voxels.shape[-2:] != (H, W) or voxels.shape[:-3] != img.shape[:-3]:
        raise ValueError(f"voxels {voxels.shape} do not match image {img.shape}")

    skips = []
    xi, xe = img, voxels
    for i in range(cfg.levels):
        xi = _conv_block(xi, params, f"img_enc.{i}")
        skips.append(xi)
        xi = _conv(xi, params, f"img_enc.{i}.down", stride=2)
        xe = _conv_block(xe, params, f"evt_enc.{i}")
        xe = _conv(xe, params, f"evt_enc.{i}.down", stride=2)

    x = _conv(dc.concat_channels(xi, xe), params, "fuse")
    if cfg.blocks:
        d, h, w = x.shape[-3:]
        lead = x.shape[:-3]
        nd = x.ndim
        swap = tuple(range(nd - 3)) + (nd - 2, nd - 3)
        tokens = dc.transpose(x.reshape(*lead, d, h * w), swap)
        for b in range(cfg.blocks):
            tokens = attention_block(tokens, params, cfg.heads, cfg, prefix=block_prefix(b))
        x = dc.transpose(tokens, swap).reshape(*lead, d, h, w)

    for i in reversed(range(cfg.levels)):
        x = dc.concat_channels(dc.up2_nearest(x), skips[i])
        x = _conv_block(x, params, f"dec.{i}")
    return dc.add(img, _conv(x, params, "head"))


def predict(img: np.ndarray, voxels: np.ndarray, params, cfg: ModelConfig) -> np.ndarray:
    """Tape-free forward on arrays, in the parameter dtype."""
    dtype = next(iter(params.values())).dtype
    out = kunet_forward(Tensor(np.asarray(img, dtype=dtype)),
                        Tensor(np.asarray(voxels, dtype=dtype)), params, cfg)
    return out.data


def checkpoint_state(params: Mapping[str, Tensor], cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Arrays for a KUNT checkpoint: parameters, grid metadata and ``meta.config``."""
    state = {name: t.data for name, t in params.items()}
    for b in range(cfg.blocks):
        for layer in KAN_LAYERS:
            state[f"{block_prefix(b)}.{layer}.grid_meta"] = cfg.grid.meta()
    state["meta.config"] = cfg.to_array()
    return state


def params_from_state(state: Mapping[str, np.ndarray], dtype=np.float32):
    """Rebuild (params, config) from a loaded checkpoint dict."""
    if "meta.config" not in state:
        raise ValueError("checkpoint has no meta.config entry")
    cfg = ModelConfig.from_array(state["meta.config"])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in state:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = np.asarray(state[name])
        if arr.shape != shape:
            raise ValueError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params, cfg

"""B-spline bases and the KANLinear layer.

A KANLinear layer computes ``silu(x) @ W_base.T + B(x) @ W_spline.T`` where
``B(x)`` stacks, for each input coordinate, the ``G + p`` degree-``p``
B-spline basis values on a uniform knot vector extended ``p`` knots past
each end of ``[g_min, g_max]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass(frozen=True)
class SplineGrid:
    g_min: float = -1.0
    g_max: float = 1.0
    intervals: int = 8
    order: int = 3

    def __post_init__(self):
        if self.intervals < 1:
            raise ValueError(f"intervals must be positive, got {self.intervals}")
        if self.order < 0:
            raise ValueError(f"order must be >= 0, got {self.order}")
        if not self.g_max > self.g_min:
            raise ValueError("g_max must exceed g_min")

    @property
    def spacing(self) -> float:
        return (self.g_max - self.g_min) / self.intervals

    @property
    def knots(self) -> np.ndarray:
        p, G = self.order, self.intervals
        return self.g_min + (np.arange(G + 2 * p + 1, dtype=np.float64) - p) * self.spacing

    @property
    def n_basis(self) -> int:
        return self.intervals + self.order

    def meta(self) -> np.ndarray:
        return np.array([self.g_min, self.g_max, self.intervals, self.order], dtype=np.float64)

    @classmethod
    def from_meta(cls, meta) -> "SplineGrid":
        g_min, g_max, G, p = (float(v) for v in np.asarray(meta).reshape(-1))
        return cls(g_min, g_max, int(round(G)), int(round(p)))


def _cox_de_boor(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    """All degree-``degree`` bases over ``knots`` at ``x``; shape ``x.shape + (n,)``."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    t = knots
    basis = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    for k in range(1, degree + 1):
        left_den = t[k:-1] - t[:-(k + 1)]
        right_den = t[k + 1:] - t[1:-k]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x - t[:-(k + 1)]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[k + 1:] - x) / right_den, 0.0)
        basis = left * basis[..., :-1] + right * basis[..., 1:]
    return basis


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Basis values ``N_{k,p}(x)`` for ``k = 0..G+p-1``; broadcasts over ``x``."""
    return _cox_de_boor(x, grid.knots, grid.order)


def bspline_basis_derivative(x, grid: SplineGrid) -> np.ndarray:
    """``d/dx N_{k,p}(x)`` from the degree ``p-1`` bases."""
    p = grid.order
    x = np.asarray(x, dtype=np.float64)
    if p == 0:
        return np.zeros(x.shape + (grid.n_basis,))
    t = grid.knots
    lower = _cox_de_boor(x, t, p - 1)  # G + p + 1 functions
    left_den = t[p:-1] - t[:-(p + 1)]
    right_den = t[p + 1:] - t[1:-p]
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(left_den > 0, lower[..., :-1] / left_den, 0.0)
        right = np.where(right_den > 0, lower[..., 1:] / right_den, 0.0)
    return p * (left - right)


def spline_features(x: Tensor, grid: SplineGrid) -> Tensor:
    """Differentiable ``(..., in) -> (..., in * (G+p))`` basis expansion."""
    xd = x.data
    dtype = xd.dtype
    basis = bspline_basis(xd, grid)
    out = basis.reshape(*xd.shape[:-1], -1).astype(dtype)

    def bw(g):
        deriv = bspline_basis_derivative(xd, grid)
        g = g.reshape(*xd.shape, grid.n_basis)
        return ((g * deriv).sum(axis=-1).astype(dtype),)

    return dc.make_op(out, (x,), bw)


@dataclass
class KanLayerParams:
    W_base: Tensor    # out x in
    W_spline: Tensor  # out x (in * (G + p))
    grid: SplineGrid

    @property
    def in_dim(self) -> int:
        return self.W_base.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W_base.shape[0]

    def tensors(self, prefix: str = "kan.layer") -> dict[str, Tensor]:
        return {f"{prefix}.W_base": self.W_base, f"{prefix}.W_spline": self.W_spline}

    def state(self, prefix: str = "kan.layer") -> dict[str, np.ndarray]:
        """Arrays for a KUNT container, including ``grid_meta``."""
        out = {k: v.data for k, v in self.tensors(prefix).items()}
        out[f"{prefix}.grid_meta"] = self.grid.meta()
        return out


def kan_init(in_dim: int, out_dim: int, G: int = 8, p: int = 3, seed: int = 0,
             dtype=np.float64) -> KanLayerParams:
    if in_dim < 1 or out_dim < 1:
        raise ValueError("layer dimensions must be positive")
    grid = SplineGrid(-1.0, 1.0, G, p)
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    w_base = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    w_spline = rng.standard_normal((out_dim, in_dim * grid.n_basis)) * (0.1 / np.sqrt(grid.n_basis))
    return KanLayerParams(Tensor(w_base.astype(dtype), requires_grad=True),
                          Tensor(w_spline.astype(dtype), requires_grad=True), grid)


def kan_forward(x: Tensor, params: KanLayerParams) -> Tensor:
    """Apply a KANLinear layer to ``x`` of shape ``(..., in)``."""
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"expected last dim {params.in_dim}, got {x.shape}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, params.in_dim)
    base = dc.matmul(dc.silu(flat), dc.transpose(params.W_base))
    spline = dc.matmul(spline_features(flat, params.grid), dc.transpose(params.W_spline))
    return dc.add(base, spline).reshape(*lead, params.out_dim)

"""Uniform fake quantizers with learnable step sizes and their level sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .autodiff import Tensor, _emit, round_half_away

Kind = Literal["weight", "activation"]

SCALE_FLOOR = 1e-8


def bounds(bits: int, kind: str) -> tuple[int, int]:
    """Integer clip range ``(n_min, n_max)`` for a bit-width and quantizer kind."""
    if bits < 2:
        raise ValueError(f"bit-width must be >= 2, got {bits}")
    if kind == "weight":
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    if kind == "activation":
        return 0, 2**bits - 1
    raise ValueError(f"unknown quantizer kind {kind!r}")


@dataclass
class QuantSpec:
    """One quantizer: bit-width, kind and a learnable scalar step size."""

    bits: int
    kind: Kind
    scale: Tensor

    def __post_init__(self):
        self.n_min, self.n_max = bounds(self.bits, self.kind)

    @property
    def gamma(self) -> float:
        return float(self.scale.data.reshape(-1)[0])


@dataclass(frozen=True)
class BRS:
    """Bit-width representation set: the 2^b weight levels ``gamma * k``."""

    bits: int
    gamma: float
    levels: np.ndarray

    def __len__(self) -> int:
        return len(self.levels)


def brs(bits: int, gamma: float) -> BRS:
    if bits < 2:
        raise ValueError(f"bit-width must be >= 2, got {bits}")
    if not gamma > 0:
        raise ValueError(f"scale must be positive, got {gamma}")
    n_min, n_max = bounds(bits, "weight")
    levels = np.arange(n_min, n_max + 1, dtype=np.float64) * gamma
    return BRS(bits, float(gamma), levels)


def quantize_values(x: np.ndarray, gamma: float, n_min: int, n_max: int) -> np.ndarray:
    """Forward of the fake quantizer on raw arrays (no graph)."""
    if not gamma > 0:
        raise ValueError(f"quantize: scale must be positive, got {gamma}")
    g = np.asarray(gamma, dtype=x.dtype)
    z = x / g
    return (round_half_away(np.clip(z, n_min, n_max)) * g).astype(x.dtype)


def lsq_grad_scale(numel: int, n_max: int) -> float:
    return 1.0 / np.sqrt(numel * n_max)


def quantize(x: Tensor, spec: QuantSpec, grad_scale: float | None = None) -> Tensor:
    """Fake-quantize ``x``: ``round(clip(x/gamma, n_min, n_max)) * gamma``.

    Backward follows the straight-through estimator for ``x`` (gradient
    passes where ``x/gamma`` is inside the clip range) and the LSQ rule for
    the scale, multiplied by ``1/sqrt(numel * n_max)`` unless ``grad_scale``
    overrides it.
    """
    scale = spec.scale
    gamma = scale.data.reshape(())
    if not gamma > 0:
        raise ValueError(f"quantize: scale must be positive, got {float(gamma)}")
    gamma = gamma.astype(x.dtype)
    z = x.data / gamma
    below = z < spec.n_min
    above = z > spec.n_max
    inside = ~(below | above)
    q = round_half_away(np.clip(z, spec.n_min, spec.n_max))
    out = (q * gamma).astype(x.dtype)
    gs = lsq_grad_scale(x.size, spec.n_max) if grad_scale is None else grad_scale

    def rule(g):
        gx = g * inside
        dscale = np.where(inside, q - z, np.where(below, spec.n_min, spec.n_max))
        gg = np.sum(g * dscale, dtype=np.float64) * gs
        return gx.astype(x.dtype), np.full(scale.shape, gg, dtype=scale.dtype)

    return _emit("quantize", out, (x, scale), rule)


def quantize_backward(upstream: np.ndarray, x: np.ndarray, spec: QuantSpec, grad_scale: float | None = None):
    """Closed-form gradients of :func:`quantize` as ``(grad_x, grad_gamma)``."""
    gamma = spec.gamma
    z = x / gamma
    below, above = z < spec.n_min, z > spec.n_max
    inside = ~(below | above)
    gs = lsq_grad_scale(x.size, spec.n_max) if grad_scale is None else grad_scale
    grad_x = upstream * inside
    dscale = np.where(inside, round_half_away(z) - z, np.where(below, spec.n_min, spec.n_max))
    return grad_x, float(np.sum(upstream * dscale)) * gs


def distance_to_level(w, levels: BRS) -> tuple[np.ndarray, np.ndarray]:
    """Nearest BRS level to each ``w`` and the absolute distance to it.

    Exact midpoints resolve to the lower level.
    """
    w = np.asarray(w, dtype=np.float64)
    n_min, n_max = bounds(levels.bits, "weight")
    k = np.clip(np.ceil(w / levels.gamma - 0.5), n_min, n_max)
    nearest = k * levels.gamma
    return nearest, np.abs(w - nearest)


def init_scale(w, bits: int, kind: str = "weight") -> float:
    """LSQ-style initial step size ``2*mean|w| / sqrt(n_max)``, floored at 1e-8."""
    arr = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("init_scale: empty tensor")
    _, n_max = bounds(bits, kind)
    return max(2.0 * float(np.abs(arr).mean()) / np.sqrt(n_max), SCALE_FLOOR)

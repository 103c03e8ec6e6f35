"""Feature alignment between the smallest sampled bit-width and the max-bit reference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class IDMHead:
    """Per-channel affine adapters for the low-bit (S) and reference (H) branches."""

    channels: int
    q: float = 0.0
    eps: float = 1e-5
    gain_s: Tensor = field(default=None)
    shift_s: Tensor = field(default=None)
    gain_h: Tensor = field(default=None)
    shift_h: Tensor = field(default=None)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("IDM stabilizer must be positive")
        c = self.channels
        if self.gain_s is None:
            self.gain_s = Tensor(np.ones(c, np.float32), requires_grad=True, name="idm.gain_s")
        if self.shift_s is None:
            self.shift_s = Tensor(np.zeros(c, np.float32), requires_grad=True, name="idm.shift_s")
        if self.gain_h is None:
            self.gain_h = Tensor(np.ones(c, np.float32), requires_grad=True, name="idm.gain_h")
        if self.shift_h is None:
            self.shift_h = Tensor(np.zeros(c, np.float32), requires_grad=True, name="idm.shift_h")
        for t in self.parameters():
            if t.shape != (c,):
                raise ShapeError(f"IDM head vectors must have length {c}, got {t.shape}")

    def parameters(self) -> list[Tensor]:
        return [self.gain_s, self.shift_s, self.gain_h, self.shift_h]


def _channel_view(v: Tensor, ndim: int) -> Tensor:
    return ad.reshape(v, (1, v.shape[0]) + (1,) * (ndim - 2))


def standardize(o: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel ``(o - mean) / sqrt(var + eps)`` over batch and spatial axes."""
    mu = ad.channel_mean(o)
    var = ad.channel_var(o)
    return ad.div(ad.sub(o, mu), ad.sqrt(ad.add(var, eps)))


def _branch(o: Tensor, gain: Tensor, shift: Tensor, head: IDMHead) -> Tensor:
    z = standardize(o, head.eps)
    z = ad.add(ad.mul(z, _channel_view(gain, o.ndim)), _channel_view(shift, o.ndim))
    return ad.maximum(z, head.q)


def idm_loss(o_s: Tensor, o_h: Tensor, head: IDMHead) -> Tensor:
    """Mean absolute gap between rectified, adapted, standardized features.

    ``o_h`` is treated as a fixed target; no gradient flows back through it.
    """
    if o_s.shape != o_h.shape:
        raise ShapeError(f"idm_loss: shapes {o_s.shape} and {o_h.shape} differ")
    if o_s.ndim < 2 or o_s.shape[1] != head.channels:
        raise ShapeError(f"idm_loss: expected {head.channels} channels, got shape {o_s.shape}")
    low = _branch(o_s, head.gain_s, head.shift_s, head)
    high = _branch(ad.detach(o_h), head.gain_h, head.shift_h, head)
    return ad.mean(ad.abs_(ad.sub(low, high)))


def idm_site_selection(policy, layer: int, space, frozen_bits=(), reference=None) -> bool:
    """Whether the IDM term applies to ``layer`` under ``policy``.

    Active iff the sampled weight bit is the layer's smallest unfrozen
    candidate. Fixed layers never participate.
    """
    if reference is None:
        raise ValueError("idm_site_selection: the max-bit reference forward is missing")
    if space.fixed[layer]:
        return False
    frozen = set(frozen_bits)
    available = [b for b in space.weight_bits[layer] if b not in frozen]
    if len(available) < 1:
        return False
    return policy[layer][0] == min(available)

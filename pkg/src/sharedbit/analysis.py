"""Desk-scale diagnostics: scalar regression probe, distance traces, output densities, loss perturbation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .quant import QuantSpec, brs, distance_to_level, quantize, quantize_values
from .supernet import Policy, Supernet


# ---------------------------------------------------------------------------
# scalar regression probe


@dataclass
class RegressionRun:
    bits: tuple[int, ...]
    seed: int
    w_star: float
    gammas: dict[int, float]
    latent: np.ndarray  # (steps,) w before each update
    quantized: dict[int, np.ndarray]  # bit -> (steps,)
    gradnorm: dict[int, np.ndarray]  # bit -> (steps,) |dL_b/dw| on that step's batch
    sampled: np.ndarray  # (steps,) bit used for the update

    @property
    def steps(self) -> int:
        return len(self.latent)


def regress_scales(bits: Sequence[int], gamma_ref: float = 0.125, ref_bits: int = 4) -> dict[int, float]:
    """Per-bit step sizes covering the same range as ``ref_bits`` at ``gamma_ref``."""
    return {b: gamma_ref * 2.0 ** (ref_bits - b) for b in bits}


def draw_target(rng: np.random.Generator, gammas: dict[int, float], ref_bits: int = 4) -> float:
    """A ``ref_bits`` level inside every coarser bit's range, on none of its levels or rounding bounds."""
    g = gammas[ref_bits]
    coarse = {b: gammas[b] for b in gammas if b < ref_bits}
    lo, hi = -(2 ** (ref_bits - 1)), 2 ** (ref_bits - 1) - 1
    for b, c in coarse.items():
        lo = max(lo, int(np.ceil(-(2 ** (b - 1)) * c / g)))
        hi = min(hi, int(np.floor((2 ** (b - 1) - 1) * c / g)))
    def clear(w: float, c: float) -> bool:
        frac = (w / c) % 1.0
        return min(frac, abs(frac - 0.5), 1.0 - frac) > 1e-9

    options = [k * g for k in range(lo, hi + 1) if all(clear(k * g, c) for c in coarse.values())]
    if not options:
        raise ValueError("no level satisfies the target constraints")
    return float(options[int(rng.integers(len(options)))])


def regress2d(
    bits: Sequence[int],
    seed: int = 0,
    steps: int = 2000,
    lr: float = 0.01,
    batch: int = 64,
    gamma_ref: float = 0.125,
    ref_bits: int = 4,
    w_star: Optional[float] = None,
    w_init: Optional[float] = None,
) -> RegressionRun:
    """SGD on a scalar ``w`` minimising ``mean((x*w_star - x*Q_b(w))^2)``, x ~ N(0, 1).

    Each step draws a fresh batch and one bit uniformly from ``bits``; the
    update uses that bit's gradient while gradients for every bit are
    recorded. Step sizes are fixed, one per bit, all spanning the same range.
    """
    bits = tuple(sorted(set(int(b) for b in bits)))
    if not bits:
        raise ValueError("regress2d: bit set must be non-empty")
    gammas = regress_scales(bits, gamma_ref, ref_bits)
    setup_rng, x_rng, bit_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if w_star is None:
        w_star = draw_target(setup_rng, regress_scales(sorted(set(bits) | {2, ref_bits}), gamma_ref, ref_bits), ref_bits)
    if w_init is None:
        w_init = float(setup_rng.uniform(-0.5, 0.5)) * gamma_ref * 2 ** (ref_bits - 1)
    specs = {b: QuantSpec(b, "weight", Tensor(np.array([gammas[b]]))) for b in bits}
    w = float(w_init)
    latent = np.empty(steps)
    quant = {b: np.empty(steps) for b in bits}
    grads = {b: np.empty(steps) for b in bits}
    sampled = np.empty(steps, dtype=np.int64)
    for t in range(steps):
        x = Tensor(x_rng.normal(size=batch))
        chosen = bits[int(bit_rng.integers(len(bits)))]
        latent[t] = w
        g_used = 0.0
        for b in bits:
            wt = Tensor(np.array([w]), requires_grad=True)
            with Tape() as tape:
                q = quantize(wt, specs[b], grad_scale=0.0)
                err = ad.sub(ad.mul(x, w_star), ad.mul(x, q))
                tape.backward(ad.mean(ad.mul(err, err)))
            g = float(wt.grad[0])
            quant[b][t] = float(q.data[0])
            grads[b][t] = abs(g)
            if b == chosen:
                g_used = g
        sampled[t] = chosen
        w -= lr * g_used
    return RegressionRun(bits, seed, float(w_star), gammas, latent, quant, grads, sampled)


def count_boundary_crossings(trajectory, levels) -> int:
    """Consecutive steps whose nearest level differs."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.size == 0:
        raise ValueError("count_boundary_crossings: empty trajectory")
    nearest, _ = distance_to_level(traj, levels)
    return int(np.count_nonzero(nearest[1:] != nearest[:-1]))


def gradient_variance(run: RegressionRun, bit: int, burn_in: Optional[int] = None) -> float:
    """Variance over steps of the per-step gradient magnitude for ``bit``.

    The first ``burn_in`` steps (default a quarter of the run) are skipped so
    the initial approach to the target does not dominate.
    """
    start = run.steps // 4 if burn_in is None else burn_in
    return float(np.var(run.gradnorm[bit][start:]))


def write_regress_csv(path, run: RegressionRun) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "latent_w", "sampled_bit"] + [f"qw_{b}" for b in run.bits] + [f"gradnorm_{b}" for b in run.bits])
        for t in range(run.steps):
            w.writerow(
                [t, repr(float(run.latent[t])), int(run.sampled[t])]
                + [repr(float(run.quantized[b][t])) for b in run.bits]
                + [repr(float(run.gradnorm[b][t])) for b in run.bits]
            )


# ---------------------------------------------------------------------------
# distance traces


@dataclass
class DistanceTrace:
    """Trainer hook recording ``||W_l - Q_b(W_l)||`` for chosen bits every ``every`` steps."""

    layer: int
    bits: Sequence[int]
    every: int = 1
    rows: list[tuple[int, int, float]] = field(default_factory=list)  # (step, bit, distance)

    def check(self, net: Supernet) -> None:
        if not 0 <= self.layer < len(net.layers):
            raise ValueError(f"layer {self.layer} does not exist (model has {len(net.layers)})")
        missing = [b for b in self.bits if b not in net.layers[self.layer].w_quant]
        if missing:
            raise ValueError(f"layer {self.layer} has no quantizer for bits {missing}")

    def record(self, net: Supernet, step: int) -> None:
        layer = net.layers[self.layer]
        w = layer.weight.data.astype(np.float64)
        for b in self.bits:
            self.rows.append((step, b, float(np.linalg.norm(w - layer.quantized_weight(b)))))

    def __call__(self, trainer, metrics=None) -> None:
        if trainer.step % self.every == 0:
            self.record(trainer.net, trainer.step)

    def series(self, bit: int) -> np.ndarray:
        return np.array([d for _, b, d in self.rows if b == bit])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "layer", "bit", "distance"])
            for step, b, d in self.rows:
                w.writerow([step, self.layer, b, repr(float(d))])


def weight_distance_trace(net: Supernet, layer: int, bits: Sequence[int], every: int = 1) -> DistanceTrace:
    trace = DistanceTrace(layer, tuple(bits), every)
    trace.check(net)
    return trace


# ---------------------------------------------------------------------------
# output densities


@dataclass
class DensityReport:
    layer: int
    bit: int
    edges: np.ndarray
    probs: np.ndarray
    step: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "bit", "bin_lo", "bin_hi", "prob"])
            for lo, hi, p in zip(self.edges[:-1], self.edges[1:], self.probs):
                w.writerow([self.layer, self.bit, repr(float(lo)), repr(float(hi)), repr(float(p))])


def layer_outputs(net: Supernet, policy: Policy, layer: int, x: np.ndarray) -> np.ndarray:
    """Pre-activation output of ``layer`` using the batch's own normalisation statistics."""
    res = net.forward(policy, x, mode="calib", collect=[])
    return res.pre[layer].data.astype(np.float64).reshape(-1)


def output_density(
    net: Supernet, layer: int, bits: Sequence[int], x: np.ndarray, bins: int = 64, step: int = 0
) -> list[DensityReport]:
    """Histograms of one layer's output with that layer at each bit and the rest at max."""
    if bins < 2:
        raise ValueError("output_density: need at least 2 bins")
    if not 0 <= layer < len(net.layers):
        raise ValueError(f"layer {layer} does not exist")
    base = net.space.max_policy()
    outs = {}
    for b in bits:
        ba = b if b in net.space.act_bits[layer] else base[layer][1]
        if b not in net.space.weight_bits[layer]:
            raise ValueError(f"layer {layer}: {b}-bit is not a weight candidate")
        outs[b] = layer_outputs(net, base.replace(layer, b, ba), layer, x)
    lo = min(v.min() for v in outs.values())
    hi = max(v.max() for v in outs.values())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    reports = []
    for b in bits:
        counts, _ = np.histogram(outs[b], bins=edges)
        reports.append(DensityReport(layer, b, edges, counts / counts.sum(), step))
    return reports


def symmetric_kl(p, q, eps: float = 1e-10) -> float:
    """KL(p||q) + KL(q||p) with additive smoothing so empty bins stay finite."""
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))


# ---------------------------------------------------------------------------
# loss perturbation


def _policy_loss(net: Supernet, policy: Policy, x, y) -> float:
    return ad.softmax_cross_entropy(net.forward(policy, x, mode="calib", collect=[]).logits, y).item()


def loss_perturbation_probe(net: Supernet, high: Policy, low: Policy, x: np.ndarray, y: np.ndarray, lr: float) -> float:
    """Change in the ``high``-policy loss after one plain SGD step on the ``low``-policy loss.

    Only latent weights move; they are restored before returning. Both
    losses use the batch's own normalisation statistics, so running
    statistics are untouched.
    """
    weights = net.latent_weights()
    saved = [w.data for w in weights]
    before = _policy_loss(net, high, x, y)
    for w in weights:
        w.grad = None
    with Tape() as tape:
        res = net.forward(low, x, mode="calib", collect=[])
        tape.backward(ad.softmax_cross_entropy(res.logits, y))
    try:
        for w, old in zip(weights, saved):
            g = w.grad if w.grad is not None else 0.0
            w.data = (old - lr * g).astype(old.dtype)
        after = _policy_loss(net, high, x, y)
    finally:
        for w, old in zip(weights, saved):
            w.data = old
        for p in net.parameters():
            p.grad = None
    return after - before


def write_rows(path, header: Sequence[str], rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        w.writerows(rows)


def quantized_members(values, bits: int, gamma: float) -> bool:
    """Whether every value sits on a level of ``brs(bits, gamma)`` to within an ulp."""
    levels = brs(bits, gamma).levels
    v = np.asarray(values, dtype=np.float64)
    gap = np.min(np.abs(v[:, None] - levels[None, :]), axis=1)
    return bool(np.all(gap <= np.spacing(np.maximum(np.abs(v), gamma))))


__all__ = [
    "RegressionRun",
    "regress2d",
    "regress_scales",
    "count_boundary_crossings",
    "gradient_variance",
    "write_regress_csv",
    "DistanceTrace",
    "weight_distance_trace",
    "DensityReport",
    "output_density",
    "symmetric_kl",
    "loss_perturbation_probe",
    "quantized_members",
    "quantize_values",
]

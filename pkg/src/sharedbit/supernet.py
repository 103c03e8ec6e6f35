"""Weight-sharing quantized network trained over sampled mixed-precision policies."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .idm import IDMHead, idm_loss, idm_site_selection
from .quant import SCALE_FLOOR, QuantSpec, init_scale, quantize

FIXED_BITS = 8


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "fc"
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_hw: tuple[int, int] = (1, 1)
    out_hw: tuple[int, int] = (1, 1)
    bn: bool = True
    relu: bool = True

    @property
    def macs(self) -> int:
        if self.kind == "conv":
            return self.out_ch * self.in_ch * self.kernel**2 * self.out_hw[0] * self.out_hw[1]
        return self.in_ch * self.out_ch

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        return (self.in_ch, self.out_ch)


@dataclass(frozen=True)
class Topology:
    input_shape: tuple[int, int, int]
    classes: int
    layers: tuple[LayerSpec, ...]
    raw: dict = field(default_factory=dict, compare=False, hash=False)

    @classmethod
    def from_dict(cls, cfg: dict) -> "Topology":
        c, h, w = (int(v) for v in cfg["input"])
        classes = int(cfg["classes"])
        entries = cfg["layers"]
        if not entries:
            raise ValueError("topology needs at least one layer")
        specs = []
        flat = False
        for i, e in enumerate(entries):
            last = i == len(entries) - 1
            kind = e["type"]
            if kind == "conv":
                if flat:
                    raise ValueError(f"layer {i}: conv after fc is not supported")
                k, s, p = int(e.get("kernel", 3)), int(e.get("stride", 1)), int(e.get("padding", 1))
                oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if oh <= 0 or ow <= 0:
                    raise ValueError(f"layer {i}: kernel {k} does not fit input {h}x{w}")
                out = int(e["out"])
                specs.append(LayerSpec("conv", c, out, k, s, p, (h, w), (oh, ow), bn=not last, relu=not last))
                c, h, w = out, oh, ow
            elif kind == "fc":
                in_f = c * h * w if not flat else c
                out = classes if last else int(e["out"])
                specs.append(LayerSpec("fc", in_f, out, bn=not last and e.get("bn", True), relu=not last))
                c, h, w, flat = out, 1, 1, True
            else:
                raise ValueError(f"layer {i}: unknown type {kind!r}")
        if specs[-1].kind != "fc" or specs[-1].out_ch != classes:
            raise ValueError("the last layer must be an fc classifier")
        return cls((int(cfg["input"][0]), int(cfg["input"][1]), int(cfg["input"][2])), classes, tuple(specs), cfg)

    def to_dict(self) -> dict:
        return self.raw

    def fingerprint(self) -> str:
        blob = json.dumps([self.input_shape, self.classes, [s.__dict__ for s in self.layers]], sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.layers)


REFERENCE_TOPOLOGIES = {
    # 2 conv + 2 fc
    "cnn4": {
        "input": [1, 28, 28],
        "classes": 10,
        "layers": [
            {"type": "conv", "out": 8, "kernel": 3, "stride": 2, "padding": 1},
            {"type": "conv", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
            {"type": "fc", "out": 32},
            {"type": "fc"},
        ],
    },
    "minivgg8": {
        "input": [1, 28, 28],
        "classes": 10,
        "layers": [
            {"type": "conv", "out": 8, "kernel": 3, "stride": 2, "padding": 1},
            {"type": "conv", "out": 8, "kernel": 3, "stride": 1, "padding": 1},
            {"type": "conv", "out": 16, "kernel": 3, "stride": 2, "padding": 1},
            {"type": "conv", "out": 16, "kernel": 3, "stride": 1, "padding": 1},
            {"type": "conv", "out": 32, "kernel": 3, "stride": 2, "padding": 1},
            {"type": "conv", "out": 32, "kernel": 3, "stride": 1, "padding": 1},
            {"type": "fc", "out": 32},
            {"type": "fc"},
        ],
    },
}


# ---------------------------------------------------------------------------
# search space and policies


@dataclass(frozen=True)
class BitSpace:
    """Per-layer sorted weight/activation bit candidates; fixed layers hold only 8."""

    weight_bits: tuple[tuple[int, ...], ...]
    act_bits: tuple[tuple[int, ...], ...]
    fixed: tuple[bool, ...]

    @classmethod
    def uniform(cls, n_layers: int, weight_bits: Sequence[int], act_bits: Sequence[int], fix_ends: bool = True) -> "BitSpace":
        wb, ab = tuple(sorted(set(weight_bits))), tuple(sorted(set(act_bits)))
        if not wb or not ab:
            raise ValueError("bit candidate sets must be non-empty")
        if min(wb + ab) < 2:
            raise ValueError("bit candidates must be >= 2")
        fixed = tuple(fix_ends and (i == 0 or i == n_layers - 1) for i in range(n_layers))
        return cls(
            tuple((FIXED_BITS,) if f else wb for f in fixed),
            tuple((FIXED_BITS,) if f else ab for f in fixed),
            fixed,
        )

    def __len__(self) -> int:
        return len(self.fixed)

    def max_policy(self) -> "Policy":
        return Policy(tuple((w[-1], a[-1]) for w, a in zip(self.weight_bits, self.act_bits)))

    def min_policy(self) -> "Policy":
        return Policy(tuple((w[0], a[0]) for w, a in zip(self.weight_bits, self.act_bits)))

    def uniform_policy(self, bits: int) -> "Policy":
        """Every searchable layer at (bits, bits); fixed layers stay at 8."""
        out = []
        for w, a, f in zip(self.weight_bits, self.act_bits, self.fixed):
            if f:
                out.append((w[0], a[0]))
            else:
                if bits not in w or bits not in a:
                    raise ValueError(f"{bits}-bit is not a candidate")
                out.append((bits, bits))
        return Policy(tuple(out))

    def validate(self, policy: "Policy") -> None:
        if len(policy) != len(self):
            raise ValueError(f"policy has {len(policy)} layers, model has {len(self)}")
        for i, (bw, ba) in enumerate(policy):
            if bw not in self.weight_bits[i] or ba not in self.act_bits[i]:
                raise ValueError(f"layer {i}: bits ({bw}, {ba}) outside candidates")


@dataclass(frozen=True)
class Policy:
    """Per-layer (weight bit, activation bit) pairs."""

    bits: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple((int(w), int(a)) for w, a in self.bits))

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def __getitem__(self, i):
        return self.bits[i]

    def replace(self, layer: int, bw: int, ba: int) -> "Policy":
        b = list(self.bits)
        b[layer] = (bw, ba)
        return Policy(tuple(b))

    def to_json(self) -> list[list[int]]:
        return [[w, a] for w, a in self.bits]

    @classmethod
    def from_json(cls, data) -> "Policy":
        try:
            pairs = tuple((int(p[0]), int(p[1])) for p in data)
            if any(len(p) != 2 for p in data):
                raise ValueError
        except (TypeError, ValueError, IndexError, KeyError):
            raise ValueError("policy must be a JSON array of [weight_bits, act_bits] pairs") from None
        return cls(pairs)

    def __str__(self) -> str:
        return " ".join(f"{w}/{a}" for w, a in self.bits)


# ---------------------------------------------------------------------------
# freezing and sampling


@dataclass(frozen=True)
class FreezeEntry:
    layer: int
    bit: int
    expiry: int


class FreezeMask:
    """(layer, weight bit) pairs excluded from sampling until their expiry step."""

    def __init__(self, entries: Iterable[FreezeEntry] = ()):
        self.entries: list[FreezeEntry] = list(entries)

    def purge(self, step: int) -> None:
        self.entries = [e for e in self.entries if e.expiry > step]

    def frozen_bits(self, layer: int) -> set[int]:
        return {e.bit for e in self.entries if e.layer == layer}

    def available(self, space: BitSpace, layer: int) -> tuple[int, ...]:
        frozen = self.frozen_bits(layer)
        return tuple(b for b in space.weight_bits[layer] if b not in frozen)

    def add(self, entry: FreezeEntry, space: BitSpace) -> bool:
        """Freeze ``entry`` unless it would leave the layer without candidates."""
        if space.fixed[entry.layer]:
            return False
        avail = self.available(space, entry.layer)
        if entry.bit not in avail or len(avail) <= 1:
            return False
        self.entries.append(entry)
        return True

    def __contains__(self, pair) -> bool:
        layer, bit = pair
        return any(e.layer == layer and e.bit == bit for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[list[int]]:
        return [[e.layer, e.bit, e.expiry] for e in self.entries]

    @classmethod
    def from_json(cls, data) -> "FreezeMask":
        return cls(FreezeEntry(int(a), int(b), int(c)) for a, b, c in data)


@dataclass
class SamplerConfig:
    mc_samples: int = 2
    seed: int = 0
    include_max_policy: bool = True
    lowest_bit_weight: float = 1.0  # relative sampling weight of each layer's lowest candidate

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.lowest_bit_weight <= 0:
            raise ValueError("lowest_bit_weight must be positive")


def _draw(rng: np.random.Generator, options: Sequence[int], lowest_weight: float) -> int:
    if len(options) == 1:
        return options[0]
    if lowest_weight == 1.0:
        return options[int(rng.integers(len(options)))]
    p = np.ones(len(options))
    p[0] = lowest_weight
    return options[int(rng.choice(len(options), p=p / p.sum()))]


def sample_policy(
    space: BitSpace,
    freeze_mask: Optional[FreezeMask],
    rng: np.random.Generator,
    lowest_bit_weight: float = 1.0,
) -> Policy:
    """Independent per-layer draw over unfrozen weight bits and all activation bits."""
    out = []
    for layer in range(len(space)):
        wopts = freeze_mask.available(space, layer) if freeze_mask is not None else space.weight_bits[layer]
        if not wopts:
            raise ValueError(f"layer {layer}: no unfrozen weight-bit candidates left")
        low_w = lowest_bit_weight if wopts[0] == space.weight_bits[layer][0] else 1.0
        bw = _draw(rng, wopts, low_w)
        ba = _draw(rng, space.act_bits[layer], lowest_bit_weight)
        out.append((bw, ba))
    return Policy(tuple(out))


class Sampler:
    def __init__(self, space: BitSpace, config: SamplerConfig):
        self.space = space
        self.config = config
        self.rng = np.random.default_rng(config.seed)

    def sample(self, freeze_mask: Optional[FreezeMask] = None) -> Policy:
        return sample_policy(self.space, freeze_mask, self.rng, self.config.lowest_bit_weight)


# ---------------------------------------------------------------------------
# layers and network


class SharedLayer:
    """One quantized layer holding a single latent weight tensor for every bit-width."""

    def __init__(self, index: int, spec: LayerSpec, w_bits: Sequence[int], a_bits: Sequence[int], rng, idm_q=0.0, idm_eps=1e-5, fixed=False):
        self.index = index
        self.spec = spec
        fan_in = spec.in_ch * spec.kernel**2 if spec.kind == "conv" else spec.in_ch
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True, name=f"l{index}.weight")
        self.bias = None if spec.bn else Tensor(np.zeros(spec.out_ch, np.float32), requires_grad=True, name=f"l{index}.bias")
        if spec.bn:
            self.bn_weight = Tensor(np.ones(spec.out_ch, np.float32), requires_grad=True, name=f"l{index}.bn_weight")
            self.bn_bias = Tensor(np.zeros(spec.out_ch, np.float32), requires_grad=True, name=f"l{index}.bn_bias")
            self.running_mean = np.zeros(spec.out_ch, np.float32)
            self.running_var = np.ones(spec.out_ch, np.float32)
        self.w_quant = {
            b: QuantSpec(b, "weight", Tensor(np.array([init_scale(w, b)], np.float32), requires_grad=True, name=f"l{index}.w{b}.scale"))
            for b in w_bits
        }
        self.a_quant = {
            b: QuantSpec(b, "activation", Tensor(np.array([1.0], np.float32), requires_grad=True, name=f"l{index}.a{b}.scale"))
            for b in a_bits
        }
        self.fixed = fixed
        self.idm = None if fixed else IDMHead(spec.out_ch, q=idm_q, eps=idm_eps)

    @property
    def macs(self) -> int:
        return self.spec.macs

    def scales(self) -> list[Tensor]:
        return [q.scale for q in self.w_quant.values()] + [q.scale for q in self.a_quant.values()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(self.weight.name, self.weight)]
        if self.bias is not None:
            out.append((self.bias.name, self.bias))
        if self.spec.bn:
            out += [(self.bn_weight.name, self.bn_weight), (self.bn_bias.name, self.bn_bias)]
        out += [(s.name, s) for s in self.scales()]
        if self.idm is not None:
            out += [(f"l{self.index}.{t.name}", t) for t in self.idm.parameters()]
        return out

    def quantized_weight(self, bits: int) -> np.ndarray:
        from .quant import quantize_values

        q = self.w_quant[bits]
        return quantize_values(self.weight.data, q.gamma, q.n_min, q.n_max)

    def forward(self, x: Tensor, bw: int, ba: int, mode: str, bn_stats=None, collect=None):
        """Returns (pre-activation output, layer output)."""
        xq = quantize(x, self.a_quant[ba])
        wq = quantize(self.weight, self.w_quant[bw])
        if self.spec.kind == "conv":
            y = ad.conv2d(xq, wq, self.spec.stride, self.spec.padding)
        else:
            if xq.ndim != 2:
                xq = ad.reshape(xq, (xq.shape[0], -1))
            y = ad.matmul(xq, wq)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        if self.spec.bn:
            if mode == "eval":
                stats = bn_stats if bn_stats is not None else (self.running_mean, self.running_var)
                y, _, _ = ad.batchnorm(y, self.bn_weight, self.bn_bias, stats=stats)
            else:
                y, mu, var = ad.batchnorm(y, self.bn_weight, self.bn_bias)
                if mode == "train":
                    self.running_mean = (0.9 * self.running_mean + 0.1 * mu).astype(np.float32)
                    self.running_var = (0.9 * self.running_var + 0.1 * var).astype(np.float32)
                    if not (np.isfinite(self.running_mean).all() and np.isfinite(self.running_var).all()):
                        raise ad.NonFiniteError(f"layer {self.index}: batchnorm running statistics overflowed")
                elif collect is not None:
                    collect.append((mu, var))
        out = ad.relu(y) if self.spec.relu else y
        return y, out


@dataclass
class ForwardResult:
    logits: Tensor
    pre: list[Tensor]
    inputs: list[Tensor]


class Supernet:
    """The shared-weight model plus its bit space."""

    def __init__(self, topology: Topology, space: BitSpace, seed: int = 0, idm_q: float = 0.0, idm_eps: float = 1e-5):
        if len(space) != len(topology):
            raise ValueError(f"bit space covers {len(space)} layers, topology has {len(topology)}")
        self.topology = topology
        self.space = space
        rng = np.random.default_rng(seed)
        self.layers = [
            SharedLayer(i, s, space.weight_bits[i], space.act_bits[i], rng, idm_q, idm_eps, fixed=space.fixed[i])
            for i, s in enumerate(topology.layers)
        ]
        self.act_scales_ready = False

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def macs(self) -> list[int]:
        return [layer.macs for layer in self.layers]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [p for layer in self.layers for p in layer.named_parameters()]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def latent_weights(self) -> list[Tensor]:
        return [layer.weight for layer in self.layers]

    def bn_state(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(l.running_mean, l.running_var) for l in self.layers if l.spec.bn]

    def fingerprint(self) -> str:
        blob = json.dumps(
            [self.topology.fingerprint(), self.space.weight_bits, self.space.act_bits, self.space.fixed]
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def forward(self, policy: Policy, x, mode: str = "eval", bn_stats=None, collect=None) -> ForwardResult:
        """Run the network under ``policy``.

        ``mode`` is ``train`` (batch stats, running stats updated), ``calib``
        (batch stats, appended to ``collect``) or ``eval`` (running stats, or
        per-layer ``bn_stats`` when given).
        """
        if len(policy) != len(self.layers):
            raise ValueError(f"policy has {len(policy)} layers, model has {len(self.layers)}")
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[1:] != self.topology.input_shape:
            raise ad.ShapeError(f"forward: input shape {h.shape[1:]} != {self.topology.input_shape}")
        pre, inputs = [], []
        bn_i = 0
        for layer, (bw, ba) in zip(self.layers, policy):
            stats = None
            if layer.spec.bn and bn_stats is not None:
                stats = bn_stats[bn_i]
            if layer.spec.bn:
                bn_i += 1
            inputs.append(h)
            y, h = layer.forward(h, bw, ba, mode, stats, collect)
            pre.append(y)
        return ForwardResult(h, pre, inputs)

    def calibrate_activation_scales(self, x) -> None:
        """Initialize every activation step size from one batch under the max policy."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer, (bw, ba) in zip(self.layers, self.space.max_policy()):
            for b, q in layer.a_quant.items():
                q.scale.data = np.array([init_scale(np.maximum(h.data, 0), b, "activation")], np.float32)
            _, h = layer.forward(h, bw, ba, "calib", None, [])
        self.act_scales_ready = True

    def clamp_scales(self) -> None:
        for layer in self.layers:
            for s in layer.scales():
                if s.data[0] < SCALE_FLOOR:
                    s.data = np.array([SCALE_FLOOR], np.float32)


# ---------------------------------------------------------------------------
# training


def fairness_decay_mask(policy: Policy, space: BitSpace) -> list[float]:
    """1.0 where a layer's sampled weight bit is its largest candidate, else 0.0."""
    return [1.0 if bw == space.weight_bits[i][-1] else 0.0 for i, (bw, _) in enumerate(policy)]


@dataclass
class StepMetrics:
    policies: list[Policy]
    losses: list[float]
    idm_losses: dict[int, float]
    mean_loss: float
    decay: list[float]


def _decay_multipliers(net: Supernet, per_layer: Sequence[float]) -> dict:
    mults = {p: 0.0 for p in net.parameters()}
    for layer, m in zip(net.layers, per_layer):
        mults[layer.weight] = m
    return mults


def train_step(
    net: Supernet,
    optimizer: ad.SGD,
    batch: tuple[np.ndarray, np.ndarray],
    sampler: Sampler,
    freeze_mask: Optional[FreezeMask] = None,
    step: int = 0,
    idm_weight: float = 0.0,
    fairness: bool = True,
    policies: Optional[Sequence[Policy]] = None,
) -> StepMetrics:
    """One optimizer step averaged over sampled policies.

    Every policy's objective is cross-entropy plus, for layers whose sampled
    weight bit is the smallest unfrozen candidate, ``idm_weight`` times the
    IDM alignment loss against the max-bit reference forward of the same
    batch. Gradients are averaged over all forwarded policies, the max-bit
    reference included when the sampler is configured for it.
    """
    x, y = batch
    x = Tensor(x)
    space = net.space
    if freeze_mask is not None:
        freeze_mask.purge(step)
    if policies is None:
        policies = [sampler.sample(freeze_mask) for _ in range(sampler.config.mc_samples)]
    policies = list(policies)
    max_pol = space.max_policy()
    include_max = sampler.config.include_max_policy
    run = ([max_pol] if include_max else []) + policies
    n = len(run)
    for p in net.parameters():
        p.grad = None

    reference = None
    if idm_weight > 0 and not include_max:
        reference = [ad.detach(t) for t in net.forward(max_pol, x, mode="calib").pre]

    losses: list[float] = []
    idm_acc: dict[int, list[float]] = {}
    for k, policy in enumerate(run):
        is_ref = include_max and k == 0
        try:
            with Tape() as tape:
                res = net.forward(policy, x, mode="train")
                ce = ad.softmax_cross_entropy(res.logits, y)
                total = ce
                if is_ref:
                    reference = [ad.detach(t) for t in res.pre]
                elif idm_weight > 0:
                    for l, layer in enumerate(net.layers):
                        frozen = freeze_mask.frozen_bits(l) if freeze_mask is not None else ()
                        if idm_site_selection(policy, l, space, frozen, reference):
                            term = idm_loss(res.pre[l], reference[l], layer.idm)
                            idm_acc.setdefault(l, []).append(term.item())
                            total = ad.add(total, ad.mul(term, idm_weight))
                obj = ad.mul(total, 1.0 / n)
                tape.backward(obj)
        except NonFiniteError as err:
            raise NumericalError(f"non-finite loss at step {step} under policy [{policy}]: {err}") from err
        losses.append(ce.item())

    if fairness:
        masks = [fairness_decay_mask(p, space) for p in run]
        decay = [float(np.mean([m[l] for m in masks])) for l in range(len(space))]
    else:
        decay = [1.0] * len(space)
    touched = [p for p in net.parameters() if p.grad is not None]
    optimizer.step(touched, _decay_multipliers(net, decay))
    net.clamp_scales()
    return StepMetrics(
        policies=run,
        losses=losses,
        idm_losses={l: float(np.mean(v)) for l, v in idm_acc.items()},
        mean_loss=float(np.mean(losses)),
        decay=decay,
    )


# ---------------------------------------------------------------------------
# evaluation helpers


def bn_recalibrate(net: Supernet, policy: Policy, batches: Sequence, install: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """Recompute batchnorm statistics for ``policy`` as the average over ``batches``.

    Parameters are untouched. Returns per-BN-layer (mean, var); with
    ``install`` they also replace the network's running statistics.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("bn_recalibrate: need at least one calibration batch")
    sums = None
    for xb in batches:
        xb = xb[0] if isinstance(xb, tuple) else xb
        collect: list = []
        net.forward(policy, xb, mode="calib", collect=collect)
        if sums is None:
            sums = [[m.copy(), v.copy()] for m, v in collect]
        else:
            for acc, (m, v) in zip(sums, collect):
                acc[0] += m
                acc[1] += v
    stats = [((m / len(batches)).astype(np.float32), (v / len(batches)).astype(np.float32)) for m, v in sums]
    if install:
        for layer, (m, v) in zip([l for l in net.layers if l.spec.bn], stats):
            layer.running_mean, layer.running_var = m.copy(), v.copy()
    return stats


def predict(net: Supernet, policy: Policy, x: np.ndarray, bn_stats=None, batch_size: int = 500) -> np.ndarray:
    """Logits for ``x`` in eval mode."""
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(net.forward(policy, x[i : i + batch_size], mode="eval", bn_stats=bn_stats).logits.data)
    return np.concatenate(outs)


def evaluate(net: Supernet, policy: Policy, x: np.ndarray, y: np.ndarray, bn_stats=None) -> tuple[float, float]:
    """(mean cross-entropy, top-1 accuracy) of ``policy`` on ``(x, y)``."""
    logits = predict(net, policy, x, bn_stats).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(y)), y].mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc

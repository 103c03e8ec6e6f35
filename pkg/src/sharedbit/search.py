"""Inference-only bidirectional greedy search over per-layer bit-widths."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .supernet import BitSpace, Policy, Supernet, bn_recalibrate, evaluate


class InfeasibleBudgetError(ValueError):
    """The BitOps budget cannot be met by any policy in the space."""


def bitops(policy: Policy, macs: Sequence[int]) -> float:
    """Sum over layers of MACs x weight bits x activation bits."""
    if len(policy) != len(macs):
        raise ValueError(f"policy has {len(policy)} layers, model has {len(macs)}")
    return float(sum(m * bw * ba for m, (bw, ba) in zip(macs, policy)))


@dataclass(frozen=True)
class Move:
    layer: int
    direction: int  # +1 up, -1 down
    policy: Policy


def _shift(options: Sequence[int], bit: int, d: int) -> Optional[int]:
    i = options.index(bit) + d
    return options[i] if 0 <= i < len(options) else None


def neighbors(policy: Policy, space: BitSpace, coupled: bool = True) -> list[Move]:
    """One-level moves of a single non-fixed layer.

    Coupled mode moves weight and activation bits together (two moves per
    layer); uncoupled mode moves them separately (up to four per layer, with
    directions +-1 for weights and +-2 for activations).
    """
    out = []
    for l, (bw, ba) in enumerate(policy):
        if space.fixed[l]:
            continue
        wopts, aopts = space.weight_bits[l], space.act_bits[l]
        if coupled:
            for d in (+1, -1):
                nw, na = _shift(wopts, bw, d), _shift(aopts, ba, d)
                if nw is not None and na is not None:
                    out.append(Move(l, d, policy.replace(l, nw, na)))
        else:
            for d in (+1, -1):
                nw = _shift(wopts, bw, d)
                if nw is not None:
                    out.append(Move(l, d, policy.replace(l, nw, ba)))
            for d in (+1, -1):
                na = _shift(aopts, ba, d)
                if na is not None:
                    out.append(Move(l, 2 * d, policy.replace(l, bw, na)))
    return out


def minmax(values: Sequence[float]) -> np.ndarray:
    """Scale to [0, 1]; a constant vector maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass
class SearchConfig:
    lam: float = 1.5
    budget: float = float("inf")
    max_steps: int = 100
    val_size: int = 2000
    calib_batches: int = 8
    calib_batch_size: int = 64
    recalibrate: bool = True
    coupled: bool = True
    workers: int = 1
    revisit: bool = True  # False: previously visited policies cannot be accepted again

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.budget > 0:
            raise ValueError("budget must be positive")


@dataclass
class StepRecord:
    step: int
    accepted_layer: int
    direction: int
    bw: int
    ba: int
    loss: float
    bitops: float
    J: float
    candidates: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "accepted_layer": self.accepted_layer,
            "direction": self.direction,
            "bw": self.bw,
            "ba": self.ba,
            "loss": self.loss,
            "bitops": self.bitops,
            "J": self.J,
        }


@dataclass
class SearchState:
    policy: Policy
    step: int = 0
    loss: Optional[float] = None
    trajectory: list[StepRecord] = field(default_factory=list)
    history: list[tuple[Policy, float, float]] = field(default_factory=list)  # accepted (policy, loss, bitops)
    evaluated: list[tuple[Policy, float, float]] = field(default_factory=list)  # every candidate scored


Evaluator = Callable[[Policy], float]


def greedy_step(
    state: SearchState,
    config: SearchConfig,
    space: BitSpace,
    evaluate_fn: Evaluator,
    macs: Sequence[int],
    pool: Optional[ThreadPoolExecutor] = None,
) -> SearchState:
    """Evaluate all neighbors, accept the argmin of normalized loss + lambda * normalized BitOps."""
    moves = neighbors(state.policy, space, config.coupled)
    if not moves:
        raise ValueError("greedy_step: empty neighborhood")
    if pool is not None:
        losses = list(pool.map(evaluate_fn, [m.policy for m in moves]))
    else:
        losses = [evaluate_fn(m.policy) for m in moves]
    ops = [bitops(m.policy, macs) for m in moves]
    j = minmax(losses) + config.lam * minmax(ops)
    pick = j
    if not config.revisit:
        seen = {state.policy} | {p for p, _, _ in state.history}
        fresh = np.array([m.policy not in seen for m in moves])
        if fresh.any():
            pick = np.where(fresh, j, np.inf)
    i = int(np.argmin(pick))  # first minimum wins ties
    m = moves[i]
    table = [(k, losses[k], ops[k], float(j[k])) for k in range(len(moves))]
    bw, ba = m.policy[m.layer]
    rec = StepRecord(state.step + 1, m.layer, m.direction, bw, ba, float(losses[i]), ops[i], float(j[i]), table)
    state.trajectory.append(rec)
    state.history.append((m.policy, float(losses[i]), ops[i]))
    state.evaluated.extend((mv.policy, float(losses[k]), ops[k]) for k, mv in enumerate(moves))
    state.policy = m.policy
    state.loss = float(losses[i])
    state.step += 1
    return state


def search(
    init: Policy,
    config: SearchConfig,
    space: BitSpace,
    evaluate_fn: Evaluator,
    macs: Sequence[int],
) -> tuple[Policy, SearchState]:
    """Greedy moves from ``init`` until BitOps <= budget or ``max_steps`` is hit.

    If the step limit is reached first, the lowest-loss policy evaluated along
    the way that meets the budget is returned; if none did, the budget is
    reported infeasible.
    """
    floor = bitops(space.min_policy(), macs)
    if floor > config.budget:
        raise InfeasibleBudgetError(f"budget {config.budget:g} is below the all-min-bit BitOps {floor:g}")
    space.validate(init)
    state = SearchState(init)
    init_ops = bitops(init, macs)
    if init_ops <= config.budget:
        state.loss = float(evaluate_fn(init))
        state.history.append((init, state.loss, init_ops))
        return init, state
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while state.step < config.max_steps:
            greedy_step(state, config, space, evaluate_fn, macs, pool)
            if bitops(state.policy, macs) <= config.budget:
                return state.policy, state
    finally:
        if pool is not None:
            pool.shutdown()
    feasible = [(loss, k, p) for k, (p, loss, ops) in enumerate(state.evaluated) if ops <= config.budget]
    if not feasible:
        raise InfeasibleBudgetError(f"no evaluated policy met budget {config.budget:g} within {config.max_steps} steps")
    best = min(feasible)[2]
    return best, state


class PolicyEvaluator:
    """Validation loss of a policy on a fixed subset, with per-policy BN recalibration.

    Results are cached; each call works on its own statistics copy, so
    concurrent calls are safe.
    """

    def __init__(self, net: Supernet, x_val: np.ndarray, y_val: np.ndarray, calib: Sequence[np.ndarray], recalibrate: bool = True):
        self.net = net
        self.x_val = x_val
        self.y_val = y_val
        self.calib = list(calib)
        self.recalibrate = recalibrate
        self.cache: dict[Policy, tuple[float, float]] = {}

    def metrics(self, policy: Policy) -> tuple[float, float]:
        hit = self.cache.get(policy)
        if hit is not None:
            return hit
        stats = bn_recalibrate(self.net, policy, self.calib) if self.recalibrate else None
        out = evaluate(self.net, policy, self.x_val, self.y_val, bn_stats=stats)
        self.cache[policy] = out
        return out

    def __call__(self, policy: Policy) -> float:
        return self.metrics(policy)[0]


def write_trajectory(path, state: SearchState) -> None:
    with open(path, "w") as fh:
        for rec in state.trajectory:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

"""Epoch loop around :func:`train_step` with scheduling, logging and bit-exact resume."""

from __future__ import annotations

import csv
import json
import logging
import math
from typing import Callable, Optional

import numpy as np

from .autodiff import SGD, cosine_lr
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset
from .scheduler import BitScheduler, ScheduleConfig
from .supernet import FreezeMask, Policy, Sampler, Supernet, bn_recalibrate, evaluate, train_step

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "epoch", "lr", "mean_loss", "policy_losses", "policies", "idm_loss", "frozen", "criterion"]


def calibration_batches(ds: Dataset, n_batches: int, batch_size: int, seed: int = 0) -> list[np.ndarray]:
    """A fixed draw of ``n_batches`` input batches for BN recalibration."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    return [ds.x[perm[i * batch_size : (i + 1) * batch_size]] for i in range(n_batches) if i * batch_size < len(ds)]


def evaluate_policy(net: Supernet, policy: Policy, ds: Dataset, calib: Optional[list] = None) -> tuple[float, float]:
    """(loss, accuracy) after recalibrating batchnorm for ``policy`` on ``calib`` batches."""
    stats = bn_recalibrate(net, policy, calib) if calib else None
    return evaluate(net, policy, ds.x, ds.y, bn_stats=stats)


class Trainer:
    def __init__(self, cfg: RunConfig, train: Dataset, net: Optional[Supernet] = None, log_path=None):
        self.cfg = cfg
        o = cfg.optimizer
        self.net = net or Supernet(cfg.topology(), cfg.space(), seed=cfg.seed, idm_q=cfg.idm.q, idm_eps=cfg.idm.eps)
        self.train = train
        self.steps_per_epoch = len(train) // o.batch_size
        if self.steps_per_epoch < 1:
            raise ValueError(f"training set of {len(train)} samples is smaller than one batch")
        self.total_steps = o.epochs * self.steps_per_epoch
        self.warmup_steps = o.warmup_epochs * self.steps_per_epoch
        self.optimizer = SGD(self.net.parameters(), o.lr, o.momentum, o.weight_decay)
        s_sampler, s_data = np.random.SeedSequence(cfg.seed).spawn(2)
        self.sampler = Sampler(self.net.space, cfg.sampler)
        self.sampler.rng = np.random.default_rng(s_sampler)
        self.data_rng = np.random.default_rng(s_data)
        self.scheduler: Optional[BitScheduler] = None
        if cfg.schedule.enabled:
            searchable = sum(not f for f in self.net.space.fixed)
            k0 = cfg.schedule.k0 if cfg.schedule.k0 is not None else math.ceil(searchable / 2)
            sc = ScheduleConfig(
                k0=min(k0, searchable),
                total_steps=self.total_steps,
                period=max(1, round(cfg.schedule.period_epochs * self.steps_per_epoch)),
                duration=max(1, round(cfg.schedule.duration_epochs * self.steps_per_epoch)),
                epsilon=cfg.schedule.epsilon,
                mode=cfg.schedule.mode,
            )
            self.scheduler = BitScheduler(sc)
        self.mask = self.scheduler.mask if self.scheduler else FreezeMask()
        self.step = 0
        self.epoch = 0
        self.losses: list[float] = []
        self.hooks: list[Callable[["Trainer", object], None]] = []
        self.log_path = log_path

    @property
    def idm_weight(self) -> float:
        return self.cfg.idm.weight if self.cfg.idm.enabled else 0.0

    def _log_row(self, writer, lr, metrics, report) -> None:
        writer.writerow(
            {
                "step": self.step,
                "epoch": self.epoch,
                "lr": repr(float(lr)),
                "mean_loss": repr(float(metrics.mean_loss)),
                "policy_losses": ";".join(repr(float(v)) for v in metrics.losses),
                "policies": ";".join(str(p) for p in metrics.policies),
                "idm_loss": ";".join(f"{l}:{float(v)!r}" for l, v in sorted(metrics.idm_losses.items())),
                "frozen": ";".join(f"{e.layer}:{e.bit}" for e in self.mask.entries),
                "criterion": "" if report is None else ";".join(f"{l}:{float(s)!r}" for l, s in sorted(report.scores.items())),
            }
        )

    def run(self, until_epoch: Optional[int] = None) -> list[float]:
        """Train up to ``until_epoch`` (default: the configured epoch count)."""
        o = self.cfg.optimizer
        until = o.epochs if until_epoch is None else min(until_epoch, o.epochs)
        if not self.net.act_scales_ready:
            self.net.calibrate_activation_scales(self.train.x[: o.batch_size])
        fh = writer = None
        if self.log_path is not None:
            fresh = self.step == 0
            fh = open(self.log_path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(fh, LOG_FIELDS)
            if fresh:
                fh.write("# config: " + json.dumps(self.cfg.to_dict(), sort_keys=True) + "\n")
                writer.writeheader()
        try:
            while self.epoch < until:
                perm = self.data_rng.permutation(len(self.train))
                for b in range(self.steps_per_epoch):
                    idx = perm[b * o.batch_size : (b + 1) * o.batch_size]
                    lr = cosine_lr(self.step, self.total_steps, o.lr, self.warmup_steps)
                    self.optimizer.lr = lr
                    report = self.scheduler.apply(self.net, self.step) if self.scheduler else None
                    metrics = train_step(
                        self.net,
                        self.optimizer,
                        (self.train.x[idx], self.train.y[idx]),
                        self.sampler,
                        self.mask,
                        self.step,
                        idm_weight=self.idm_weight,
                        fairness=o.fairness,
                    )
                    self.losses.append(metrics.mean_loss)
                    if writer is not None:
                        self._log_row(writer, lr, metrics, report)
                    for hook in self.hooks:
                        hook(self, metrics)
                    self.step += 1
                self.epoch += 1
                log.info("epoch %d done, mean loss %.4f", self.epoch, float(np.mean(self.losses[-self.steps_per_epoch :])))
        finally:
            if fh is not None:
                fh.close()
        return self.losses

    # ------------------------------------------------------------------
    # persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, p in self.net.named_parameters():
            arrays[f"param/{name}"] = p.data
        for i, layer in enumerate(self.net.layers):
            if layer.spec.bn:
                arrays[f"bn/{i}/mean"] = layer.running_mean
                arrays[f"bn/{i}/var"] = layer.running_var
        for (name, _), buf in zip(self.net.named_parameters(), self.optimizer.state_arrays()):
            arrays[f"opt/{name}"] = buf
        return arrays

    def save(self, path) -> None:
        meta = {
            "step": self.step,
            "epoch": self.epoch,
            "optimizer_steps": self.optimizer.step_count,
            "act_scales_ready": self.net.act_scales_ready,
            "sampler_rng": self.sampler.rng.bit_generator.state,
            "data_rng": self.data_rng.bit_generator.state,
            "freeze_mask": self.mask.to_json(),
            "config": self.cfg.to_dict(),
        }
        save_checkpoint(path, self.state_arrays(), self.net.fingerprint(), meta)

    @classmethod
    def load(cls, path, cfg: RunConfig, train: Dataset, log_path=None) -> "Trainer":
        t = cls(cfg, train, log_path=log_path)
        header, arrays = load_checkpoint(path, t.net.fingerprint())
        t.restore(header, arrays)
        return t

    def restore(self, header: dict, arrays: dict[str, np.ndarray]) -> None:
        load_model_arrays(self.net, arrays)
        named = self.net.named_parameters()
        meta = header["meta"]
        self.optimizer.load_state_arrays([arrays[f"opt/{n}"] for n, _ in named], meta["optimizer_steps"])
        self.step, self.epoch = meta["step"], meta["epoch"]
        self.sampler.rng.bit_generator.state = meta["sampler_rng"]
        self.data_rng.bit_generator.state = meta["data_rng"]
        self.mask.entries = FreezeMask.from_json(meta["freeze_mask"]).entries


def load_model_arrays(net: Supernet, arrays: dict[str, np.ndarray]) -> None:
    for name, p in net.named_parameters():
        key = f"param/{name}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise KeyError(f"checkpoint lacks a compatible entry for {name}")
        p.data = arrays[key].copy()
    for i, layer in enumerate(net.layers):
        if layer.spec.bn:
            layer.running_mean = arrays[f"bn/{i}/mean"].copy()
            layer.running_var = arrays[f"bn/{i}/var"].copy()
    net.act_scales_ready = True


def load_model(path, cfg: RunConfig) -> Supernet:
    """Rebuild the supernet described by ``cfg`` and fill it from a checkpoint."""
    net = Supernet(cfg.topology(), cfg.space(), seed=cfg.seed, idm_q=cfg.idm.q, idm_eps=cfg.idm.eps)
    _, arrays = load_checkpoint(path, net.fingerprint())
    load_model_arrays(net, arrays)
    return net

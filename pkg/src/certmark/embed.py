"""Watermark embedding: warm-up training, then noise-replay trigger training.

Each epoch runs one optimizer pass over the training set; after the warm-up
epochs every trigger batch gets k extra descent steps with the noise level
ramped as sigma_i = (i/k) * max_noise, each step using a gradient averaged
over t Gaussian parameter draws.

The published pseudocode zeroes the gradient accumulator once per trigger
batch yet rescales by 1/(k t) and steps inside the ramp loop, which keeps
feeding rescaled stale gradients into later steps; the prose instead
describes one cleanly averaged gradient per noise level. Default semantics
here follow the prose (reset per level, divide by t);
``literal_accumulation=True`` reproduces the pseudocode verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, TriggerSet


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class EmbedConfig:
    tau: float = 0.05                 # learning rate
    max_noise: float = 1.0            # ceiling of the sigma ramp
    replay_count: int = 20            # k: ramp length per trigger batch
    noise_samples: int = 100          # t: draws averaged per gradient
    warmup_epochs: int = 5
    total_epochs: int = 100
    batch_size: int = 64
    trigger_batch_size: int | None = None  # None: full trigger set per batch
    literal_accumulation: bool = False
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.replay_count < 1:
            raise ValueError("replay_count must be >= 1")
        if self.noise_samples < 1:
            raise ValueError("noise_samples must be >= 1")
        if self.max_noise < 0.0:
            raise ValueError("max_noise must be >= 0")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_obj(self):
        return {
            "tau": self.tau, "max_noise": self.max_noise,
            "replay_count": self.replay_count, "noise_samples": self.noise_samples,
            "warmup_epochs": self.warmup_epochs, "total_epochs": self.total_epochs,
            "batch_size": self.batch_size, "trigger_batch_size": self.trigger_batch_size,
            "literal_accumulation": self.literal_accumulation,
            "momentum": self.momentum, "weight_decay": self.weight_decay,
            "seed": self.seed,
        }

    @staticmethod
    def from_obj(obj) -> "EmbedConfig":
        return EmbedConfig(
            tau=float(obj.get("tau", 0.05)),
            max_noise=float(obj.get("max_noise", 1.0)),
            replay_count=int(obj.get("replay_count", 20)),
            noise_samples=int(obj.get("noise_samples", 100)),
            warmup_epochs=int(obj.get("warmup_epochs", 5)),
            total_epochs=int(obj.get("total_epochs", 100)),
            batch_size=int(obj.get("batch_size", 64)),
            trigger_batch_size=obj.get("trigger_batch_size"),
            literal_accumulation=bool(obj.get("literal_accumulation", False)),
            momentum=float(obj.get("momentum", 0.9)),
            weight_decay=float(obj.get("weight_decay", 1e-4)),
            seed=int(obj.get("seed", 0)),
        )


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    test_acc: float | None
    trigger_acc: float
    l2_from_init: float

    def to_obj(self):
        return {"epoch": self.epoch, "train_acc": self.train_acc,
                "test_acc": self.test_acc, "trigger_acc": self.trigger_acc,
                "l2_from_init": self.l2_from_init}


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    replay_sigmas: list[float] = field(default_factory=list)

    def to_lines(self) -> list[str]:
        import json
        return [json.dumps(r.to_obj(), sort_keys=True) for r in self.records]


def replay_sigma_schedule(cfg: EmbedConfig) -> list[float]:
    """The ramp sigma_i = (i/k) * max_noise for i = 1..k."""
    return [(i / cfg.replay_count) * cfg.max_noise for i in range(1, cfg.replay_count + 1)]


def _derive_seed(*parts) -> int:
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1)[0])


def noise_averaged_gradient(spec: nn.ModelSpec, params: np.ndarray,
                            images: np.ndarray, labels: np.ndarray,
                            sigma: float, t: int, seed: int) -> np.ndarray:
    """Mean trigger-batch gradient over t draws of theta + N(0, sigma^2 I).

    sigma = 0 collapses to the plain gradient (all draws identical).
    """
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if t < 1:
        raise ValueError("t must be >= 1")
    if sigma == 0.0:
        _, g = nn.loss_and_grad(spec, params, images, labels)
        return g
    params = np.asarray(params, dtype=np.float32)
    acc = np.zeros(params.shape[0], dtype=np.float64)
    for j in range(t):
        rng = np.random.default_rng(np.random.SeedSequence(
            [int(seed) & 0xFFFFFFFFFFFFFFFF, j]))
        noise = rng.standard_normal(params.shape[0], dtype=np.float32) * np.float32(sigma)
        _, g = nn.loss_and_grad(spec, params + noise, images, labels)
        acc += g
    return (acc / t).astype(np.float32)


def _iter_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def embed_watermark(spec: nn.ModelSpec, params: np.ndarray, train: Dataset,
                    triggers: TriggerSet, cfg: EmbedConfig,
                    opt: nn.OptimizerState | None = None, *,
                    test: Dataset | None = None,
                    on_replay=None) -> tuple[np.ndarray, TrainingLog]:
    """Train on `train` while embedding `triggers`; returns final params and
    a per-epoch log (train/test/trigger accuracy, l2 distance from init).

    `on_replay(epoch, i, sigma)` is called before every replay step, mostly
    for tests that pin the ramp.
    """
    if np.any(triggers.target_labels >= spec.classes):
        raise ValueError("trigger target labels exceed the class count")
    params = np.asarray(params, dtype=np.float32).copy()
    init = params.copy()
    if opt is None:
        opt = nn.make_optimizer("sgd-momentum", cfg.tau, params.shape[0],
                                momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    log = TrainingLog(replay_sigmas=replay_sigma_schedule(cfg))
    k, t = cfg.replay_count, cfg.noise_samples
    tbs = cfg.trigger_batch_size or len(triggers)

    for epoch in range(1, cfg.total_epochs + 1):
        shuffle_rng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed & 0xFFFFFFFFFFFFFFFF, 1, epoch]))
        for idx in _iter_batches(len(train), cfg.batch_size, shuffle_rng):
            loss, g = nn.loss_and_grad(spec, params, train.images[idx], train.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            params, opt = nn.optimizer_step(opt, params, g)

        if epoch > cfg.warmup_epochs:
            trig_rng = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed & 0xFFFFFFFFFFFFFFFF, 2, epoch]))
            for tb_idx, idx in enumerate(_iter_batches(len(triggers), tbs, trig_rng)):
                imgs, labs = triggers.images[idx], triggers.target_labels[idx]
                g_acc = np.zeros(params.shape[0], dtype=np.float64)
                for i in range(1, k + 1):
                    sigma_i = (i / k) * cfg.max_noise
                    if on_replay is not None:
                        on_replay(epoch, i, sigma_i)
                    draw_seed = _derive_seed(cfg.seed, 3, epoch, tb_idx, i)
                    if cfg.literal_accumulation:
                        # pseudocode-verbatim: accumulate t draws on top of
                        # the (already rescaled) running gradient, divide the
                        # whole by k*t, step, and keep the result around
                        for j in range(t):
                            rng = np.random.default_rng(np.random.SeedSequence(
                                [draw_seed & 0xFFFFFFFFFFFFFFFF, j]))
                            noise = (rng.standard_normal(params.shape[0], dtype=np.float32)
                                     * np.float32(sigma_i))
                            loss, g = nn.loss_and_grad(spec, params + noise, imgs, labs)
                            if not np.isfinite(loss):
                                raise DivergenceError(f"non-finite trigger loss at epoch {epoch}")
                            g_acc += g
                        g_acc /= (k * t)
                        step_grad = g_acc.astype(np.float32)
                    else:
                        step_grad = noise_averaged_gradient(spec, params, imgs, labs,
                                                            sigma_i, t, draw_seed)
                    # replay steps are plain tau-scaled descent, kept outside
                    # the momentum optimizer: k consecutive same-batch steps
                    # through momentum compound ~1/(1-momentum)x and collapse
                    # the net onto the trigger label
                    if not np.all(np.isfinite(step_grad)):
                        raise DivergenceError(f"non-finite replay gradient at epoch {epoch}")
                    params = (params.astype(np.float64)
                              - cfg.tau * step_grad.astype(np.float64)).astype(np.float32)

        record = EpochRecord(
            epoch=epoch,
            train_acc=nn.accuracy(spec, params, train),
            test_acc=None if test is None else nn.accuracy(spec, params, test),
            trigger_acc=nn.accuracy(spec, params, triggers),
            l2_from_init=nn.l2_distance(params, init),
        )
        log.records.append(record)
    return params, log

"""Watermark-removal adversaries with l2-trajectory instrumentation.

Finetuning on ground-truth labels, hard/soft-label distillation (optionally
l2-regularized), projected gradient ascent in an l2 parameter ball, and the
simple weight perturbations (prune / shift / quantize). Every training
attack records, per epoch, the cumulative l2 distance from the initial
parameters, the per-epoch step distance, and raw (plus optionally smoothed)
trigger accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset, TriggerSet
from .smoothing import SmoothingConfig, sample_accuracies, smoothed_trigger_accuracy

ATTACK_KINDS = ("finetune", "distill-hard", "distill-soft", "pgd",
                "prune", "shift", "quantize")
PERTURBATION_KINDS = ("prune", "shift", "quantize")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    lr: float = 1e-4
    epochs: int = 10
    reg_lambda: float = 0.0
    radius: float | None = None   # pgd only
    pgd_steps: int = 40
    batch_size: int = 64
    magnitude: float | None = None  # perturbation attacks
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}")
        if self.kind == "pgd" and (self.radius is None or self.radius <= 0):
            raise ValueError("pgd attack requires a positive radius")
        if self.kind != "pgd" and self.radius is not None:
            raise ValueError("radius is only meaningful for the pgd attack")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_obj(self):
        obj = {"kind": self.kind, "lr": self.lr, "epochs": self.epochs,
               "reg_lambda": self.reg_lambda, "radius": self.radius,
               "pgd_steps": self.pgd_steps, "batch_size": self.batch_size,
               "magnitude": self.magnitude, "seed": self.seed}
        return obj

    @staticmethod
    def from_obj(obj) -> "AttackConfig":
        return AttackConfig(
            kind=obj["kind"], lr=float(obj.get("lr", 1e-4)),
            epochs=int(obj.get("epochs", 10)),
            reg_lambda=float(obj.get("reg_lambda", 0.0)),
            radius=None if obj.get("radius") is None else float(obj["radius"]),
            pgd_steps=int(obj.get("pgd_steps", 40)),
            batch_size=int(obj.get("batch_size", 64)),
            magnitude=None if obj.get("magnitude") is None else float(obj["magnitude"]),
            seed=int(obj.get("seed", 0)),
        )


@dataclass
class TrajectoryRecord:
    epoch: int
    l2_from_init: float
    l2_step: float
    trigger_acc_raw: float | None
    trigger_acc_smoothed: float | None
    test_acc: float | None

    def to_obj(self):
        return {"epoch": self.epoch, "l2_from_init": self.l2_from_init,
                "l2_step": self.l2_step, "trigger_acc_raw": self.trigger_acc_raw,
                "trigger_acc_smoothed": self.trigger_acc_smoothed,
                "test_acc": self.test_acc}


@dataclass
class AttackTrajectory:
    kind: str
    records: list[TrajectoryRecord] = field(default_factory=list)
    final_params: np.ndarray | None = None
    diverged: bool = False

    def to_lines(self) -> list[str]:
        import json
        return [json.dumps(r.to_obj(), sort_keys=True) for r in self.records]


def _record(spec, params, init, prev, epoch, triggers, test, smoothing):
    smoothed = None
    if smoothing is not None and triggers is not None:
        fn = lambda th: nn.accuracy(spec, th, triggers)
        smoothed = smoothed_trigger_accuracy(sample_accuracies(fn, params, smoothing))
    return TrajectoryRecord(
        epoch=epoch,
        l2_from_init=nn.l2_distance(params, init),
        l2_step=nn.l2_distance(params, prev),
        trigger_acc_raw=None if triggers is None else nn.accuracy(spec, params, triggers),
        trigger_acc_smoothed=smoothed,
        test_acc=None if test is None else nn.accuracy(spec, params, test),
    )


def _train_attack(spec, params, images, labels_or_probs, soft, cfg,
                  triggers, test, smoothing):
    params = np.asarray(params, dtype=np.float32).copy()
    init = params.copy()
    opt = nn.make_optimizer("adam", cfg.lr, params.shape[0])
    traj = AttackTrajectory(kind=cfg.kind)
    traj.records.append(_record(spec, params, init, init, 0, triggers, test, smoothing))
    for epoch in range(1, cfg.epochs + 1):
        prev = params.copy()
        shuffle_rng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed & 0xFFFFFFFFFFFFFFFF, 11, epoch]))
        order = shuffle_rng.permutation(images.shape[0])
        for lo in range(0, images.shape[0], cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if soft:
                loss, g = nn.soft_loss_and_grad(spec, params, images[idx],
                                                labels_or_probs[idx])
            else:
                loss, g = nn.loss_and_grad(spec, params, images[idx],
                                           labels_or_probs[idx])
            if not np.isfinite(loss):
                traj.diverged = True
                traj.final_params = params
                return traj
            if cfg.reg_lambda > 0.0:
                g = g + (2.0 * cfg.reg_lambda) * params
            params, opt = nn.optimizer_step(opt, params, g)
        traj.records.append(_record(spec, params, init, prev, epoch,
                                    triggers, test, smoothing))
    traj.final_params = params
    return traj


def finetune_attack(spec: nn.ModelSpec, params: np.ndarray, labeled: Dataset,
                    cfg: AttackConfig, *, triggers: TriggerSet | None = None,
                    test: Dataset | None = None,
                    smoothing: SmoothingConfig | None = None) -> AttackTrajectory:
    """Adam training on the adversary's own ground-truth labels."""
    if cfg.kind != "finetune":
        raise ValueError(f"finetune_attack got config kind {cfg.kind!r}")
    return _train_attack(spec, params, labeled.images, labeled.labels, False,
                         cfg, triggers, test, smoothing)


def distill_attack(spec: nn.ModelSpec, victim_params: np.ndarray,
                   unlabeled: Dataset, cfg: AttackConfig, *,
                   triggers: TriggerSet | None = None,
                   test: Dataset | None = None,
                   smoothing: SmoothingConfig | None = None) -> AttackTrajectory:
    """Retrain a copy of the victim on the frozen victim's own predictions.

    Hard label: argmax classes; soft label: full softmax distributions,
    trained with cross-entropy against them. reg_lambda > 0 adds
    reg_lambda * ||theta||^2 to the loss.
    """
    if cfg.kind not in ("distill-hard", "distill-soft"):
        raise ValueError(f"distill_attack got config kind {cfg.kind!r}")
    victim = np.asarray(victim_params, dtype=np.float32)
    if cfg.kind == "distill-hard":
        labels = nn.predict(spec, victim, unlabeled.images)
        return _train_attack(spec, victim, unlabeled.images, labels, False,
                             cfg, triggers, test, smoothing)
    logits = np.concatenate([nn.forward(spec, victim, unlabeled.images[lo:lo + 256])
                             for lo in range(0, len(unlabeled), 256)])
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return _train_attack(spec, victim, unlabeled.images, probs, True,
                         cfg, triggers, test, smoothing)


def pgd_parameter_attack(spec: nn.ModelSpec, params: np.ndarray, images,
                         labels=None, *, cfg: AttackConfig) -> tuple[np.ndarray, float]:
    """Projected gradient ascent on the loss over parameters inside the
    l2 ball of cfg.radius around the starting point.

    Steps are normalized to length lr * radius before projection; returns
    the in-ball iterate with the lowest accuracy on the given data.
    """
    if cfg.kind != "pgd":
        raise ValueError(f"pgd_parameter_attack got config kind {cfg.kind!r}")
    if labels is None:
        images, labels = images.images, images.labels
    theta0 = np.asarray(params, dtype=np.float32)
    theta = theta0.copy()
    radius = float(cfg.radius)
    step_len = cfg.lr * radius
    worst = theta.copy()
    worst_acc = nn.accuracy(spec, theta, images, labels)
    for _ in range(cfg.pgd_steps):
        _, g = nn.loss_and_grad(spec, theta, images, labels)
        norm = float(np.linalg.norm(g.astype(np.float64)))
        if norm == 0.0:
            break
        theta = theta + (step_len / norm) * g
        delta = theta.astype(np.float64) - theta0.astype(np.float64)
        dist = float(np.linalg.norm(delta))
        if dist > radius:
            theta = (theta0.astype(np.float64) + delta * (radius / dist)).astype(np.float32)
        acc = nn.accuracy(spec, theta, images, labels)
        if acc < worst_acc:
            worst_acc = acc
            worst = theta.copy()
    assert nn.l2_distance(worst, theta0) <= radius + 1e-5
    return worst, worst_acc


def perturbation_attack(params: np.ndarray, kind: str, magnitude: float,
                        seed: int = 0, spec: nn.ModelSpec | None = None) -> np.ndarray:
    """Simple weight perturbations: prune | shift | quantize.

    prune: zero the `magnitude` fraction of smallest-|w| entries.
    shift: add Gaussian noise with std `magnitude`.
    quantize: round each parameter tensor to 2**magnitude uniform levels
    over its [min, max] (needs `spec` for tensor boundaries).
    """
    if kind not in PERTURBATION_KINDS:
        raise ValueError(f"unknown perturbation kind {kind!r}, expected one of {PERTURBATION_KINDS}")
    params = np.asarray(params, dtype=np.float32)
    if kind == "prune":
        if not 0.0 <= magnitude < 1.0:
            raise ValueError("prune fraction must lie in [0, 1)")
        out = params.copy()
        n_zero = int(np.floor(magnitude * params.shape[0]))
        if n_zero > 0:
            idx = np.argpartition(np.abs(params), n_zero - 1)[:n_zero]
            out[idx] = 0.0
        return out
    if kind == "shift":
        if magnitude < 0.0:
            raise ValueError("shift std must be >= 0")
        rng = np.random.default_rng(np.random.SeedSequence(
            [int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5F1F7]))
        noise = rng.standard_normal(params.shape[0], dtype=np.float32) * np.float32(magnitude)
        return params + noise
    # quantize
    bits = int(magnitude)
    if bits < 2:
        raise ValueError("quantize needs bits >= 2")
    if spec is None:
        raise ValueError("quantize needs the ModelSpec to locate tensor boundaries")
    out = params.astype(np.float64).copy()
    levels = 2 ** bits - 1
    for tensor in nn.unflatten_params(spec, out):
        lo, hi = float(tensor.min()), float(tensor.max())
        if hi <= lo:
            continue
        step = (hi - lo) / levels
        np.copyto(tensor, lo + np.rint((tensor - lo) / step) * step)
    return out.astype(np.float32)


def l2_trajectory(trajectory: AttackTrajectory) -> list[dict]:
    """Per-epoch distance table: cumulative l2 from init plus per-epoch
    step increments."""
    if not trajectory.records:
        raise ValueError("empty trajectory")
    return [{"epoch": r.epoch, "l2_from_init": r.l2_from_init, "l2_step": r.l2_step}
            for r in trajectory.records]


def run_attack(spec: nn.ModelSpec, params: np.ndarray, adversary: Dataset,
               cfg: AttackConfig, *, triggers: TriggerSet | None = None,
               test: Dataset | None = None,
               smoothing: SmoothingConfig | None = None) -> AttackTrajectory:
    """Dispatch any attack kind into a trajectory with a final checkpoint."""
    if cfg.kind == "finetune":
        return finetune_attack(spec, params, adversary, cfg, triggers=triggers,
                               test=test, smoothing=smoothing)
    if cfg.kind in ("distill-hard", "distill-soft"):
        return distill_attack(spec, params, adversary, cfg, triggers=triggers,
                              test=test, smoothing=smoothing)
    init = np.asarray(params, dtype=np.float32)
    traj = AttackTrajectory(kind=cfg.kind)
    traj.records.append(_record(spec, init, init, init, 0, triggers, test, smoothing))
    if cfg.kind == "pgd":
        final, _ = pgd_parameter_attack(spec, init, triggers if triggers is not None else adversary,
                                        cfg=cfg)
    else:
        if cfg.magnitude is None:
            raise ValueError(f"{cfg.kind} attack needs a magnitude")
        final = perturbation_attack(init, cfg.kind, cfg.magnitude, cfg.seed, spec)
    traj.records.append(_record(spec, final, init, init, 1, triggers, test, smoothing))
    traj.final_params = final
    return traj

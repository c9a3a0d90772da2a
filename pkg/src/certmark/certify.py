"""Certificate production and soundness verification.

certify_grid draws one Monte Carlo accuracy sample set and turns it into a
per-radius table of certified lower bounds on the smoothed trigger
accuracy. verify_certificate replays attacked models against a report and
flags any whose re-estimated smoothed median undercuts the certified bound
by more than a finite-sample allowance. sweep_noise_tradeoff runs the full
embed-then-certify pipeline across noise levels.

Reports serialize to JSON with stable key order; with fixed seeds the
bytes are reproducible. The generated_at stamp honors SOURCE_DATE_EPOCH
and stays null otherwise so that rerunning a pipeline yields identical
files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import nn
from .data import Dataset, TriggerSet
from .embed import DivergenceError, EmbedConfig, embed_watermark
from .smoothing import (
    AccuracySample,
    SmoothingConfig,
    certified_lower_bound,
    gaussian_cdf,
    sample_accuracies,
    smoothed_trigger_accuracy,
)

REPORT_SCHEMA = "certmark-report/1"


@dataclass(frozen=True)
class CertificateEntry:
    radius: float
    radius_over_sigma: float
    p_lower: float
    order_index: int | None
    certified_accuracy: float | None

    def to_obj(self):
        return {"radius": self.radius, "radius_over_sigma": self.radius_over_sigma,
                "p_lower": self.p_lower, "order_index": self.order_index,
                "certified_accuracy": self.certified_accuracy}


@dataclass(frozen=True)
class CertificateReport:
    model_digest: str
    smoothing: SmoothingConfig
    entries: tuple[CertificateEntry, ...]
    median_smoothed_accuracy: float
    max_sampled_accuracy: float
    generated_at: str | None = None

    def __post_init__(self):
        radii = [e.radius for e in self.entries]
        if radii != sorted(radii):
            raise ValueError("report entries must be sorted by radius")
        certified = [e.certified_accuracy for e in self.entries
                     if e.certified_accuracy is not None]
        if any(b > a + 1e-12 for a, b in zip(certified, certified[1:])):
            raise ValueError("certified accuracy must be non-increasing across radii")
        for e in self.entries:
            expect = gaussian_cdf(-e.radius / self.smoothing.sigma)
            if abs(e.p_lower - expect) > 1e-10:
                raise ValueError(f"entry radius {e.radius}: p_lower {e.p_lower} "
                                 f"inconsistent with Phi(-radius/sigma) = {expect}")

    def to_obj(self):
        return {
            "schema": REPORT_SCHEMA,
            "model_digest": self.model_digest,
            "smoothing": self.smoothing.to_obj(),
            "median_smoothed_accuracy": self.median_smoothed_accuracy,
            "max_sampled_accuracy": self.max_sampled_accuracy,
            "entries": [e.to_obj() for e in self.entries],
            "generated_at": self.generated_at,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_obj(obj) -> "CertificateReport":
        if obj.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {obj.get('schema')!r}")
        entries = tuple(
            CertificateEntry(
                radius=float(e["radius"]),
                radius_over_sigma=float(e["radius_over_sigma"]),
                p_lower=float(e["p_lower"]),
                order_index=None if e["order_index"] is None else int(e["order_index"]),
                certified_accuracy=(None if e["certified_accuracy"] is None
                                    else float(e["certified_accuracy"])),
            )
            for e in obj["entries"]
        )
        return CertificateReport(
            model_digest=obj["model_digest"],
            smoothing=SmoothingConfig.from_obj(obj["smoothing"]),
            entries=entries,
            median_smoothed_accuracy=float(obj["median_smoothed_accuracy"]),
            max_sampled_accuracy=float(obj["max_sampled_accuracy"]),
            generated_at=obj.get("generated_at"),
        )

    @staticmethod
    def from_json(text: str) -> "CertificateReport":
        return CertificateReport.from_obj(json.loads(text))


def _timestamp() -> str | None:
    # deterministic unless the caller opts into real timestamps via the
    # reproducible-builds convention
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()


def trigger_accuracy_fn(spec: nn.ModelSpec, triggers: TriggerSet):
    """The trigger-set accuracy function theta -> f(theta)."""
    return lambda theta: nn.accuracy(spec, theta, triggers)


def certify_grid(spec: nn.ModelSpec, params: np.ndarray, triggers: TriggerSet,
                 cfg: SmoothingConfig, radii, jobs: int = 1) -> CertificateReport:
    """One n-sample Monte Carlo draw, reused to bound every radius.

    Radii must be non-negative ascending; a radius the sample size cannot
    certify is recorded with a null bound rather than dropped.
    """
    radii = [float(r) for r in radii]
    if any(r < 0 for r in radii) or radii != sorted(radii):
        raise ValueError("radii must be non-negative and ascending")
    samples = sample_accuracies(trigger_accuracy_fn(spec, triggers), params, cfg,
                                jobs=jobs)
    entries = []
    for r in radii:
        res = certified_lower_bound(samples, cfg, r)
        entries.append(CertificateEntry(
            radius=r,
            radius_over_sigma=r / cfg.sigma,
            p_lower=gaussian_cdf(-r / cfg.sigma),
            order_index=None if res is None else res.order_index,
            certified_accuracy=None if res is None else res.bound,
        ))
    return CertificateReport(
        model_digest=nn.model_digest(spec, params),
        smoothing=cfg,
        entries=tuple(entries),
        median_smoothed_accuracy=smoothed_trigger_accuracy(samples),
        max_sampled_accuracy=float(samples.sorted_accuracies[-1]),
        generated_at=_timestamp(),
    )


@dataclass(frozen=True)
class AttackedModel:
    name: str
    params: np.ndarray
    l2_from_certified: float


@dataclass(frozen=True)
class Violation:
    model_name: str
    radius: float
    certified_accuracy: float
    estimated_median: float
    allowance: float

    def to_obj(self):
        return {"model": self.model_name, "radius": self.radius,
                "certified_accuracy": self.certified_accuracy,
                "estimated_median": self.estimated_median,
                "allowance": self.allowance}


def median_allowance(samples: AccuracySample) -> float:
    """Upward spread covering 3 standard errors of the median order
    statistic (the index has std ~ 0.5 sqrt(n))."""
    n = samples.n
    mid = int(math.floor(0.5 * n))
    hi = min(n - 1, mid + int(math.ceil(1.5 * math.sqrt(n))))
    return float(samples.sorted_accuracies[hi] - samples.sorted_accuracies[mid])


def verify_certificate(spec: nn.ModelSpec, report: CertificateReport,
                       attacked: list[AttackedModel], triggers: TriggerSet,
                       cfg: SmoothingConfig, jobs: int = 1) -> list[Violation]:
    """Check attacked models against every report radius that covers them.

    A model at distance d is covered by entries with d < radius. Its
    smoothed median trigger accuracy is re-estimated with fresh seeds; a
    violation is flagged only when estimate + allowance still falls below
    the certified bound, where the allowance absorbs the re-estimate's own
    Monte Carlo error. Models outside all radii are skipped.
    """
    if cfg.sigma != report.smoothing.sigma:
        raise ValueError("verification must smooth at the certified sigma")
    fn = trigger_accuracy_fn(spec, triggers)
    violations = []
    for model in attacked:
        covering = [e for e in report.entries
                    if model.l2_from_certified < e.radius
                    and e.certified_accuracy is not None]
        if not covering:
            continue
        samples = sample_accuracies(fn, model.params, cfg, jobs=jobs)
        estimate = smoothed_trigger_accuracy(samples)
        allowance = median_allowance(samples)
        for entry in covering:
            if estimate + allowance < entry.certified_accuracy - 1e-12:
                violations.append(Violation(
                    model_name=model.name, radius=entry.radius,
                    certified_accuracy=entry.certified_accuracy,
                    estimated_median=estimate, allowance=allowance))
    return violations


@dataclass
class SweepRow:
    sigma: float
    test_acc: float | None
    report: CertificateReport | None
    error: str | None = None

    def to_obj(self):
        return {"sigma": self.sigma, "test_acc": self.test_acc,
                "report": None if self.report is None else self.report.to_obj(),
                "error": self.error}


def sweep_noise_tradeoff(spec: nn.ModelSpec, init_params: np.ndarray,
                         train: Dataset, test: Dataset | None,
                         triggers: TriggerSet, sigmas,
                         embed_cfg: EmbedConfig, smooth_cfg: SmoothingConfig,
                         radii, jobs: int = 1) -> list[SweepRow]:
    """Embed-then-certify per noise level: the embedding ramp ceiling and
    the certification sigma move together. Divergent levels are recorded
    and the sweep continues."""
    sigmas = [float(s) for s in sigmas]
    if any(s <= 0 for s in sigmas) or sigmas != sorted(sigmas):
        raise ValueError("sigmas must be positive ascending")
    rows = []
    for sigma in sigmas:
        e_cfg = replace(embed_cfg, max_noise=sigma)
        s_cfg = replace(smooth_cfg, sigma=sigma)
        try:
            params, _ = embed_watermark(spec, init_params, train, triggers, e_cfg,
                                        test=test)
            report = certify_grid(spec, params, triggers, s_cfg, radii, jobs=jobs)
            rows.append(SweepRow(
                sigma=sigma,
                test_acc=None if test is None else nn.accuracy(spec, params, test),
                report=report))
        except DivergenceError as exc:
            rows.append(SweepRow(sigma=sigma, test_acc=None, report=None,
                                 error=str(exc)))
    return rows

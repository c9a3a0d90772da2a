"""Experiment configuration: one JSON file describing a full pipeline run.

The config resolves into concrete datasets, a model spec, a trigger set
and the embed/smoothing/attack settings. Command-line flags override
config values; the resolved form is written back into the run directory so
later subcommands (certify, attack, verify, report) can rebuild exactly
the same objects.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .attacks import AttackConfig
from .data import (
    Dataset,
    TriggerSet,
    digit_glyph_dataset,
    load_idx,
    make_trigger_set,
    split_owner_adversary,
    synthetic_dataset,
)
from .embed import EmbedConfig
from .smoothing import SmoothingConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (usage error)."""


_MODEL_PRESETS = {"small_cnn": nn.small_cnn, "small_mlp": nn.small_mlp}


@dataclass
class ResolvedData:
    full: Dataset
    owner: Dataset
    adversary: Dataset
    test: Dataset | None


@dataclass
class Experiment:
    raw: dict
    seed: int
    spec: nn.ModelSpec
    embed_cfg: EmbedConfig
    smoothing_cfg: SmoothingConfig
    radii: list[float]
    attack_cfgs: dict[str, AttackConfig]
    baseline: bool

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    # data and triggers are rebuilt on demand so every subcommand sees the
    # exact same seeded objects
    def build_data(self) -> ResolvedData:
        return _build_data(self.raw.get("dataset", {}), self.seed)

    def build_triggers(self, resolved: ResolvedData) -> TriggerSet:
        return _build_triggers(self.raw.get("trigger", {}), resolved, self.spec,
                               self.seed)


def load_experiment(path, *, seed_override: int | None = None) -> Experiment:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    return resolve_experiment(raw, seed_override=seed_override)


def resolve_experiment(raw: dict, *, seed_override: int | None = None) -> Experiment:
    raw = copy.deepcopy(raw)
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    seed = int(raw.get("seed", 0))
    raw["seed"] = seed

    dataset_obj = raw.get("dataset")
    if not isinstance(dataset_obj, dict):
        raise ConfigError("config needs a 'dataset' object")
    _validate_dataset_obj(dataset_obj)

    spec = _build_spec(raw.get("model", {}), dataset_obj)
    raw["model"] = {"resolved": spec.to_obj(), **{k: v for k, v in raw.get("model", {}).items()}}

    try:
        embed_cfg = EmbedConfig.from_obj({**raw.get("embed", {}), "seed": seed})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"embed config invalid: {exc}")

    smooth_obj = raw.get("smoothing", {})
    if "sigma" not in smooth_obj:
        smooth_obj = {**smooth_obj, "sigma": embed_cfg.max_noise if embed_cfg.max_noise > 0 else 1.0}
    try:
        smoothing_cfg = SmoothingConfig(
            sigma=float(smooth_obj["sigma"]),
            n=int(smooth_obj.get("n", 10000)),
            confidence=float(smooth_obj.get("confidence", 0.99)),
            root_seed=int(smooth_obj.get("root_seed", seed)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"smoothing config invalid: {exc}")

    radii = raw.get("radii", [0.0])
    if not isinstance(radii, list) or not radii:
        raise ConfigError("'radii' must be a non-empty list")
    radii = [float(r) for r in radii]
    if radii != sorted(radii) or any(r < 0 for r in radii):
        raise ConfigError("'radii' must be non-negative ascending")

    attack_cfgs = {}
    for i, entry in enumerate(raw.get("attacks", [])):
        name = entry.get("name") or f"{entry.get('kind', 'attack')}-{i}"
        if name in attack_cfgs:
            raise ConfigError(f"duplicate attack name {name!r}")
        try:
            attack_cfgs[name] = AttackConfig.from_obj({"seed": seed, **entry})
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"attack {name!r} invalid: {exc}")

    return Experiment(raw=raw, seed=seed, spec=spec, embed_cfg=embed_cfg,
                      smoothing_cfg=smoothing_cfg, radii=radii,
                      attack_cfgs=attack_cfgs,
                      baseline=bool(raw.get("baseline", False)))


def _validate_dataset_obj(obj):
    kind = obj.get("kind")
    if kind in ("synthetic", "digits"):
        return
    if kind == "idx":
        for key in ("images", "labels"):
            path = obj.get(key)
            if not path:
                raise ConfigError(f"idx dataset needs '{key}'")
            if not os.path.exists(path):
                raise ConfigError(f"dataset not found: {path}")
        for key in ("test_images", "test_labels"):
            path = obj.get(key)
            if path and not os.path.exists(path):
                raise ConfigError(f"dataset not found: {path}")
        return
    raise ConfigError(f"unknown dataset kind {kind!r} (expected synthetic | digits | idx)")


def _dataset_dims(obj) -> tuple[int, int, int]:
    if obj.get("kind") == "idx":
        # peek at the header for dims
        import struct
        with open(obj["images"], "rb") as fh:
            head = fh.read(16)
        _, _, rows, cols = struct.unpack(">iiii", head)
        return (rows, cols, 1)
    return tuple(obj.get("dims", (16, 16, 1)))


def _dataset_classes(obj) -> int:
    if obj.get("kind") == "digits":
        return 10
    if obj.get("kind") == "idx":
        return int(obj.get("classes", 10))
    return int(obj.get("classes", 10))


def _build_spec(model_obj, dataset_obj) -> nn.ModelSpec:
    dims = _dataset_dims(dataset_obj)
    classes = _dataset_classes(dataset_obj)
    if "resolved" in model_obj:
        return nn.ModelSpec.from_obj(model_obj["resolved"])
    if "layers" in model_obj:
        try:
            return nn.ModelSpec.from_obj({
                "input": model_obj.get("input", list(dims)),
                "classes": model_obj.get("classes", classes),
                "layers": model_obj["layers"]})
        except ValueError as exc:
            raise ConfigError(f"model invalid: {exc}")
    preset = model_obj.get("preset", "small_cnn")
    if preset not in _MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {preset!r} (expected {sorted(_MODEL_PRESETS)})")
    return _MODEL_PRESETS[preset](tuple(model_obj.get("input", dims)),
                                  int(model_obj.get("classes", classes)))


def _build_data(obj, seed) -> ResolvedData:
    kind = obj.get("kind")
    if kind == "synthetic":
        full = synthetic_dataset(seed, int(obj.get("n", 1200)),
                                 _dataset_classes(obj), dims=_dataset_dims(obj))
        test_n = int(obj.get("test_n", 0))
        test = synthetic_dataset(seed + 1, test_n, _dataset_classes(obj),
                                 dims=_dataset_dims(obj)) if test_n else None
    elif kind == "digits":
        full = digit_glyph_dataset(seed, int(obj.get("n", 2000)), dims=_dataset_dims(obj))
        test_n = int(obj.get("test_n", 0))
        test = digit_glyph_dataset(seed + 1, test_n, dims=_dataset_dims(obj)) if test_n else None
    else:  # idx, already validated
        full = load_idx(obj["images"], obj["labels"])
        if obj.get("max_n"):
            full = full.subset(np.arange(min(int(obj["max_n"]), len(full))))
        test = None
        if obj.get("test_images"):
            test = load_idx(obj["test_images"], obj["test_labels"])
            if obj.get("test_max_n"):
                test = test.subset(np.arange(min(int(obj["test_max_n"]), len(test))))
    owner, adversary = split_owner_adversary(full, seed)
    return ResolvedData(full=full, owner=owner, adversary=adversary, test=test)


def _build_triggers(obj, resolved: ResolvedData, spec, seed) -> TriggerSet:
    scheme = obj.get("scheme", "embedded-content")
    count = int(obj.get("count", 64))
    trig_seed = int(obj.get("seed", seed))
    unrelated = None
    if scheme == "unrelated":
        unrelated_obj = obj.get("unrelated")
        if not unrelated_obj:
            raise ConfigError("unrelated trigger scheme needs an 'unrelated' dataset object")
        _validate_dataset_obj(unrelated_obj)
        unrelated = _build_data(unrelated_obj, trig_seed).full
    try:
        return make_trigger_set(
            scheme, resolved.owner, obj.get("target_label", 0), count, trig_seed,
            unrelated=unrelated,
            noise_std=float(obj.get("noise_std", 0.25)),
            input_dims=spec.input_shape)
    except ValueError as exc:
        raise ConfigError(f"trigger config invalid: {exc}")

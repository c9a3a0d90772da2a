"""certmark command line: embed | certify | attack | verify | report.

A run directory accumulates the pipeline's artifacts under fixed names
(config.json, model.ckpt, triggers.bin, training.log, report.json,
attacks/<name>/...). Every subcommand is deterministic given the config
seeds: rerunning overwrites artifacts with byte-identical files.

Exit codes: 0 success, 1 verification/consistency failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .attacks import ATTACK_KINDS, AttackConfig, run_attack
from .certify import AttackedModel, certify_grid, verify_certificate
from .data import load_trigger_set, save_trigger_set
from .embed import DivergenceError, embed_watermark
from .experiment import ConfigError, Experiment, load_experiment
from .smoothing import SmoothingConfig, sample_accuracies, smoothed_trigger_accuracy
from .report import render_certified_table, write_report_outputs


def _jobs_default() -> int:
    env = os.environ.get("CERTMARK_JOBS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _add_common(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=_jobs_default(),
                   help="worker cap for Monte Carlo fan-out (env CERTMARK_JOBS)")
    p.add_argument("--out", default=".", help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certmark",
        description="Certifiable backdoor watermarks via parameter-space randomized smoothing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed", help="split data, train and embed the watermark")
    _add_common(p)
    p.add_argument("--dry-run", action="store_true",
                   help="print the resolved config and exit")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("certify", help="certify trigger accuracy over a radius grid")
    _add_common(p)
    p.add_argument("--model", default="model.ckpt", help="checkpoint inside the run dir")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--n", type=int, default=None, help="Monte Carlo sample count")
    p.add_argument("--confidence", type=float, default=None)
    p.add_argument("--radii", default=None, help="comma-separated ascending radii")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", help="run a removal attack against a checkpoint")
    _add_common(p)
    p.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    p.add_argument("--name", default=None, help="artifact directory name")
    p.add_argument("--model", default="model.ckpt", help="checkpoint inside the run dir")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--reg-lambda", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=None, help="pgd ball radius")
    p.add_argument("--pgd-steps", type=int, default=40)
    p.add_argument("--magnitude", type=float, default=None,
                   help="prune fraction | shift std | quantize bits")
    p.add_argument("--smoothed", action="store_true",
                   help="record smoothed trigger accuracy every epoch (slow)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="check attacked checkpoints against a report")
    _add_common(p)
    p.add_argument("checkpoints", nargs="*",
                   help="attacked checkpoints (default: attacks/*/attacked.ckpt)")
    p.add_argument("--n", type=int, default=None,
                   help="Monte Carlo samples per re-estimate")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="render tables, CSVs and figures for a run")
    p.add_argument("run_dir", help="run directory with pipeline artifacts")
    p.add_argument("--out", default=None, help="output directory (default RUN_DIR/report)")
    p.set_defaults(func=cmd_report)

    return parser


# ---------------------------------------------------------------------------
# helpers

def _load_run_experiment(args) -> Experiment:
    config_path = args.config or os.path.join(args.out, "config.json")
    if not os.path.exists(config_path):
        raise ConfigError(f"config not found: {config_path} "
                          "(run `certmark embed` first or pass --config)")
    return load_experiment(config_path, seed_override=args.seed)


def _write_lines(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines))


def _smoothing_with(exp: Experiment, *, sigma=None, n=None, confidence=None,
                    root_seed=None) -> SmoothingConfig:
    base = exp.smoothing_cfg
    return SmoothingConfig(
        sigma=base.sigma if sigma is None else sigma,
        n=base.n if n is None else n,
        confidence=base.confidence if confidence is None else confidence,
        root_seed=base.root_seed if root_seed is None else root_seed)


# ---------------------------------------------------------------------------
# subcommands

def cmd_embed(args) -> int:
    if not args.config:
        raise ConfigError("embed needs --config")
    exp = load_experiment(args.config, seed_override=args.seed)
    if args.dry_run:
        sys.stdout.write(exp.to_json())
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = exp.build_data()
    triggers = exp.build_triggers(resolved)

    (out / "config.json").write_text(exp.to_json())
    save_trigger_set(out / "triggers.bin", triggers)

    init = nn.init_params(exp.spec, exp.seed)
    params, log = embed_watermark(exp.spec, init, resolved.owner, triggers,
                                  exp.embed_cfg, test=resolved.test)
    nn.save_checkpoint(out / "model.ckpt", exp.spec, params)
    _write_lines(out / "training.log", log.to_lines())
    final = log.records[-1]
    print(f"embedded: train_acc={final.train_acc:.3f} "
          f"trigger_acc={final.trigger_acc:.3f} l2_from_init={final.l2_from_init:.3f}")

    if exp.baseline:
        from dataclasses import replace
        base_cfg = replace(exp.embed_cfg, max_noise=0.0)
        base_params, base_log = embed_watermark(exp.spec, init, resolved.owner,
                                                triggers, base_cfg, test=resolved.test)
        nn.save_checkpoint(out / "baseline.ckpt", exp.spec, base_params)
        _write_lines(out / "baseline-training.log", base_log.to_lines())
        print(f"baseline embedded: trigger_acc={base_log.records[-1].trigger_acc:.3f}")
    return 0


def cmd_certify(args) -> int:
    exp = _load_run_experiment(args)
    out = Path(args.out)
    params, _ = nn.load_checkpoint(out / args.model, exp.spec)
    triggers = load_trigger_set(out / "triggers.bin")
    cfg = _smoothing_with(exp, sigma=args.sigma, n=args.n, confidence=args.confidence)
    radii = exp.radii if args.radii is None else [float(r) for r in args.radii.split(",")]
    report = certify_grid(exp.spec, params, triggers, cfg, radii, jobs=args.jobs)
    (out / "report.json").write_text(report.to_json())
    print(render_certified_table([(args.model, report)]))
    print(f"median smoothed trigger accuracy: {report.median_smoothed_accuracy:.4f}")
    return 0


def cmd_attack(args) -> int:
    exp = _load_run_experiment(args)
    out = Path(args.out)
    params, _ = nn.load_checkpoint(out / args.model, exp.spec)
    triggers = load_trigger_set(out / "triggers.bin")
    resolved = exp.build_data()

    cfg = AttackConfig(kind=args.kind, lr=args.lr, epochs=args.epochs,
                       reg_lambda=args.reg_lambda, radius=args.radius,
                       pgd_steps=args.pgd_steps, magnitude=args.magnitude,
                       seed=exp.seed if args.seed is None else args.seed)
    name = args.name or _default_attack_name(args)
    smoothing = (_smoothing_with(exp, root_seed=exp.seed + 1) if args.smoothed else None)
    traj = run_attack(exp.spec, params, resolved.adversary, cfg,
                      triggers=triggers, test=resolved.test, smoothing=smoothing)

    attack_dir = out / "attacks" / name
    attack_dir.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(attack_dir / "attacked.ckpt", exp.spec, traj.final_params)
    _write_lines(attack_dir / "trajectory.log", traj.to_lines())

    final_smoothed = traj.records[-1].trigger_acc_smoothed
    if final_smoothed is None:
        eval_cfg = _smoothing_with(exp, root_seed=exp.seed + 1)
        samples = sample_accuracies(
            lambda th: nn.accuracy(exp.spec, th, triggers),
            traj.final_params, eval_cfg, jobs=args.jobs)
        final_smoothed = smoothed_trigger_accuracy(samples)
    meta = {
        "name": name, "group": args.name or _default_attack_name(args, group=True),
        "kind": cfg.kind, "lr": cfg.lr, "epochs": cfg.epochs,
        "reg_lambda": cfg.reg_lambda, "radius": cfg.radius,
        "magnitude": cfg.magnitude, "seed": cfg.seed, "model": args.model,
        "diverged": traj.diverged,
        "l2_from_init": traj.records[-1].l2_from_init,
        "final_trigger_acc_raw": traj.records[-1].trigger_acc_raw,
        "final_trigger_acc_smoothed": final_smoothed,
        "final_test_acc": traj.records[-1].test_acc,
    }
    (attack_dir / "attack.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"attack {name}: l2_from_init={meta['l2_from_init']:.4f} "
          f"trigger_raw={meta['final_trigger_acc_raw']:.3f} "
          f"trigger_smoothed={final_smoothed:.3f}")
    return 1 if traj.diverged else 0


def _default_attack_name(args, group=False) -> str:
    name = f"{args.kind}-lr{args.lr:g}"
    if args.kind == "pgd" and args.radius is not None:
        name = f"pgd-r{args.radius:g}"
    if args.kind in ("prune", "shift", "quantize"):
        name = f"{args.kind}-m{args.magnitude:g}"
    if not group and args.model == "baseline.ckpt":
        name += "-baseline"
    return name


def cmd_verify(args) -> int:
    exp = _load_run_experiment(args)
    out = Path(args.out)
    report_path = out / "report.json"
    if not report_path.exists():
        raise ConfigError(f"report not found: {report_path} (run `certmark certify` first)")
    from .certify import CertificateReport
    report = CertificateReport.from_json(report_path.read_text())
    params, _ = nn.load_checkpoint(out / "model.ckpt", exp.spec)
    if nn.model_digest(exp.spec, params) != report.model_digest:
        print("error: report was generated for a different model checkpoint",
              file=sys.stderr)
        return 1
    triggers = load_trigger_set(out / "triggers.bin")

    paths = [Path(p) for p in args.checkpoints]
    if not paths:
        paths = sorted((out / "attacks").glob("*/attacked.ckpt"))
    attacked = []
    skipped = []
    max_radius = max((e.radius for e in report.entries), default=0.0)
    for path in paths:
        a_params, _ = nn.load_checkpoint(path, exp.spec)
        dist = nn.l2_distance(a_params, params)
        name = str(path.parent.name if path.name == "attacked.ckpt" else path.name)
        if dist >= max_radius:
            skipped.append((name, dist))
            print(f"{name}: distance {dist:.4f} skipped (outside all radii)")
            continue
        attacked.append(AttackedModel(name, a_params, dist))

    cfg = _smoothing_with(exp, n=args.n,
                          root_seed=(exp.seed if args.seed is None else args.seed) + 104729)
    violations = verify_certificate(exp.spec, report, attacked, triggers, cfg,
                                    jobs=args.jobs)
    summary = {
        "checked": [{"name": m.name, "l2_from_certified": m.l2_from_certified}
                    for m in attacked],
        "skipped": [{"name": n_, "l2_from_certified": d} for n_, d in skipped],
        "violations": [v.to_obj() for v in violations],
    }
    (out / "verify.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for m in attacked:
        print(f"{m.name}: distance {m.l2_from_certified:.4f} checked")
    if violations:
        for v in violations:
            print(f"VIOLATION {v.model_name} at radius {v.radius:g}: "
                  f"estimate {v.estimated_median:.4f} + allowance {v.allowance:.4f} "
                  f"< certified {v.certified_accuracy:.4f}", file=sys.stderr)
        return 1
    print(f"verified: {len(attacked)} checked, {len(skipped)} skipped, 0 violations")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    out_dir = Path(args.out) if args.out else run_dir / "report"
    written = write_report_outputs(run_dir, out_dir)
    from .report import load_artifacts
    found, missing = load_artifacts(run_dir)
    if not written:
        print("no artifacts", file=sys.stderr)
        return 1
    tables = out_dir / "tables.txt"
    if tables.exists():
        print(tables.read_text())
    if missing:
        print("missing artifacts: " + ", ".join(missing))
    print("wrote: " + ", ".join(str(out_dir / w) for w in written))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except nn.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Run-directory reporting: aligned text tables, CSV files and figures.

Collects the artifacts a pipeline run leaves behind (certificate report,
training log, attack trajectories, optional noise sweep) and renders the
three table layouts used throughout this project: certified accuracy per
radius, l2 movement per attack epoch, and trigger accuracy after attacks.
Figures are written as PNG next to the delimited output.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .certify import CertificateReport


@dataclass
class AttackArtifact:
    name: str
    meta: dict          # attack.json contents
    trajectory: list[dict]  # trajectory.log records


def _fmt(value, pct=False):
    if value is None:
        return "-"
    if pct:
        return f"{100.0 * value:.1f}%"
    return f"{value:.4g}"


def _align(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        lines.append("  ".join(str(c).rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# certified accuracy grid

def render_certified_table(reports: list[tuple[str, CertificateReport]]) -> str:
    radii = sorted({e.radius for _, rep in reports for e in rep.entries})
    header = ["model", "sigma"] + [f"r={r:g}" for r in radii]
    rows = [header]
    for name, rep in reports:
        by_radius = {e.radius: e.certified_accuracy for e in rep.entries}
        rows.append([name, f"{rep.smoothing.sigma:g}"]
                    + [_fmt(by_radius.get(r), pct=True) for r in radii])
    return "Certified trigger-set accuracy by l2 radius\n" + _align(rows)


def certified_grid_csv(report: CertificateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["radius", "radius_over_sigma", "p_lower", "order_index",
                "certified_accuracy"])
    for e in report.entries:
        w.writerow([e.radius, e.radius_over_sigma, e.p_lower,
                    "" if e.order_index is None else e.order_index,
                    "" if e.certified_accuracy is None else e.certified_accuracy])
    return buf.getvalue()


def plot_certified_grid(report: CertificateReport, path) -> None:
    radii = [e.radius for e in report.entries]
    acc = [0.0 if e.certified_accuracy is None else e.certified_accuracy
           for e in report.entries]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.step(radii, acc, where="post", marker="o", color="tab:blue")
    ax.set_xlabel(r"$\ell_2$ radius")
    ax.set_ylabel("certified trigger accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.set_title(f"sigma={report.smoothing.sigma:g}, n={report.smoothing.n}, "
                 f"c={report.smoothing.confidence:g}")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "certmark"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# l2 movement

def render_l2_table(artifacts: list[AttackArtifact]) -> str:
    max_epoch = max((len(a.trajectory) - 1 for a in artifacts), default=0)
    header = ["attack", "lr"] + [str(e) for e in range(1, max_epoch + 1)]
    rows = [header]
    for a in artifacts:
        cells = [a.name, _fmt(a.meta.get("lr"))]
        for rec in a.trajectory[1:]:
            cells.append(_fmt(rec.get("l2_from_init")))
        cells += ["-"] * (len(header) - len(cells))
        rows.append(cells)
    return "l2 distance from initial parameters after each attack epoch\n" + _align(rows)


def trajectories_csv(artifacts: list[AttackArtifact]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "epoch", "l2_from_init", "l2_step", "trigger_acc_raw",
                "trigger_acc_smoothed", "test_acc"])
    for a in artifacts:
        for rec in a.trajectory:
            w.writerow([a.name, rec.get("epoch"), rec.get("l2_from_init"),
                        rec.get("l2_step"),
                        _none(rec.get("trigger_acc_raw")),
                        _none(rec.get("trigger_acc_smoothed")),
                        _none(rec.get("test_acc"))])
    return buf.getvalue()


def _none(v):
    return "" if v is None else v


def plot_trajectories(artifacts: list[AttackArtifact], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for a in artifacts:
        epochs = [r["epoch"] for r in a.trajectory]
        ax1.plot(epochs, [r["l2_from_init"] for r in a.trajectory],
                 marker=".", label=a.name)
        accs = [r.get("trigger_acc_raw") for r in a.trajectory]
        if any(v is not None for v in accs):
            ax2.plot(epochs, accs, marker=".", label=a.name)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel(r"$\ell_2$ from initial parameters")
    ax1.grid(alpha=0.3)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("trigger accuracy")
    ax2.set_ylim(-0.02, 1.02)
    ax2.grid(alpha=0.3)
    handles, labels = ax1.get_legend_handles_labels()
    if handles:
        ax1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "certmark"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# trigger accuracy after attacks

def render_attack_summary(artifacts: list[AttackArtifact]) -> str:
    header = ["attack", "lr", "epochs", "baseline", "black-box", "white-box"]
    rows = [header]
    grouped: dict[str, dict] = {}
    for a in artifacts:
        key = a.meta.get("group", a.name)
        grouped.setdefault(key, {"lr": a.meta.get("lr"),
                                 "epochs": a.meta.get("epochs")})
        final = dict(a.trajectory[-1]) if a.trajectory else {}
        if final.get("trigger_acc_raw") is None:
            final["trigger_acc_raw"] = a.meta.get("final_trigger_acc_raw")
        if final.get("trigger_acc_smoothed") is None:
            final["trigger_acc_smoothed"] = a.meta.get("final_trigger_acc_smoothed")
        slot = "baseline" if a.meta.get("model") == "baseline.ckpt" else "marked"
        grouped[key][slot] = final
    for key, info in grouped.items():
        base = info.get("baseline", {})
        marked = info.get("marked", {})
        rows.append([
            key, _fmt(info.get("lr")), _fmt(info.get("epochs")),
            _fmt(base.get("trigger_acc_raw"), pct=True),
            _fmt(marked.get("trigger_acc_raw"), pct=True),
            _fmt(marked.get("trigger_acc_smoothed"), pct=True),
        ])
    return ("Trigger-set accuracy after removal attacks "
            "(baseline = zero-noise embedding; black-box = raw accuracy of the "
            "marked model; white-box = smoothed)\n" + _align(rows))


def attack_summary_csv(artifacts: list[AttackArtifact]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "model", "lr", "epochs", "final_trigger_acc_raw",
                "final_trigger_acc_smoothed", "final_test_acc", "l2_from_init"])
    for a in artifacts:
        final = a.trajectory[-1] if a.trajectory else {}
        w.writerow([a.name, a.meta.get("model"), a.meta.get("lr"),
                    a.meta.get("epochs"), _none(final.get("trigger_acc_raw")),
                    _none(final.get("trigger_acc_smoothed")),
                    _none(final.get("test_acc")), _none(final.get("l2_from_init"))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# noise trade-off

def render_tradeoff_table(sweep_rows: list[dict]) -> str:
    radii = sorted({e["radius"] for row in sweep_rows if row.get("report")
                    for e in row["report"]["entries"]})
    header = ["sigma", "test acc"] + [f"r={r:g}" for r in radii]
    rows = [header]
    for row in sweep_rows:
        if row.get("error"):
            rows.append([f"{row['sigma']:g}", f"diverged: {row['error']}"]
                        + ["-"] * len(radii))
            continue
        by_radius = {e["radius"]: e["certified_accuracy"]
                     for e in row["report"]["entries"]}
        rows.append([f"{row['sigma']:g}", _fmt(row.get("test_acc"), pct=True)]
                    + [_fmt(by_radius.get(r), pct=True) for r in radii])
    return "Certified accuracy vs noise level\n" + _align(rows)


def tradeoff_csv(sweep_rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sigma", "test_acc", "radius", "certified_accuracy", "error"])
    for row in sweep_rows:
        if row.get("error"):
            w.writerow([row["sigma"], "", "", "", row["error"]])
            continue
        for e in row["report"]["entries"]:
            w.writerow([row["sigma"], _none(row.get("test_acc")), e["radius"],
                        _none(e["certified_accuracy"]), ""])
    return buf.getvalue()


def plot_tradeoff(sweep_rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax2 = ax.twinx()
    sigmas, tests = [], []
    for row in sweep_rows:
        if row.get("error"):
            continue
        entries = row["report"]["entries"]
        radii = [e["radius"] for e in entries]
        acc = [0.0 if e["certified_accuracy"] is None else e["certified_accuracy"]
               for e in entries]
        ax.plot(radii, acc, marker="o", label=f"sigma={row['sigma']:g}")
        sigmas.append(row["sigma"])
        tests.append(row.get("test_acc"))
    if any(t is not None for t in tests):
        ax2.plot(sigmas, tests, linestyle="--", color="gray", marker="x")
        ax2.set_ylabel("test accuracy", color="gray")
    ax.set_xlabel(r"$\ell_2$ radius")
    ax.set_ylabel("certified trigger accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "certmark"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# run-directory assembly

def load_artifacts(run_dir):
    """Collect whatever a run directory holds; returns (found, missing)."""
    from pathlib import Path

    run = Path(run_dir)
    found = {}
    missing = []
    report_path = run / "report.json"
    if report_path.exists():
        found["report"] = CertificateReport.from_json(report_path.read_text())
    else:
        missing.append("report.json")
    training = run / "training.log"
    if training.exists():
        found["training"] = [json.loads(line) for line in training.read_text().splitlines()]
    else:
        missing.append("training.log")
    sweep = run / "sweep.json"
    if sweep.exists():
        found["sweep"] = json.loads(sweep.read_text())
    attacks_dir = run / "attacks"
    artifacts = []
    if attacks_dir.is_dir():
        for sub in sorted(attacks_dir.iterdir()):
            meta_path = sub / "attack.json"
            traj_path = sub / "trajectory.log"
            if not meta_path.exists() or not traj_path.exists():
                missing.append(str(sub.relative_to(run)))
                continue
            artifacts.append(AttackArtifact(
                name=sub.name,
                meta=json.loads(meta_path.read_text()),
                trajectory=[json.loads(line) for line in traj_path.read_text().splitlines()]))
    if artifacts:
        found["attacks"] = artifacts
    else:
        missing.append("attacks/")
    return found, missing


def write_report_outputs(run_dir, out_dir) -> list[str]:
    """Render every table/CSV/figure the artifacts allow; returns the list
    of files written (relative names)."""
    from pathlib import Path

    found, missing = load_artifacts(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    sections = []

    if "report" in found:
        rep = found["report"]
        sections.append(render_certified_table([("model", rep)]))
        (out / "certified_grid.csv").write_text(certified_grid_csv(rep))
        plot_certified_grid(rep, out / "certified_grid.png")
        written += ["certified_grid.csv", "certified_grid.png"]
    if "attacks" in found:
        arts = found["attacks"]
        sections.append(render_l2_table(arts))
        sections.append(render_attack_summary(arts))
        (out / "trajectories.csv").write_text(trajectories_csv(arts))
        (out / "attack_summary.csv").write_text(attack_summary_csv(arts))
        plot_trajectories(arts, out / "trajectories.png")
        written += ["trajectories.csv", "attack_summary.csv", "trajectories.png"]
    if "sweep" in found:
        sections.append(render_tradeoff_table(found["sweep"]))
        (out / "tradeoff.csv").write_text(tradeoff_csv(found["sweep"]))
        plot_tradeoff(found["sweep"], out / "tradeoff.png")
        written += ["tradeoff.csv", "tradeoff.png"]

    if sections:
        (out / "tables.txt").write_text("\n\n".join(sections) + "\n")
        written.append("tables.txt")
    return written

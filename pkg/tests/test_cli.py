import json
import shutil

import numpy as np
import pytest

from certmark import nn
from certmark.cli import main
from certmark.data import load_trigger_set


TINY_CONFIG = {
    "seed": 5,
    "dataset": {"kind": "synthetic", "n": 160, "classes": 4, "dims": [8, 8, 1],
                "test_n": 60},
    "model": {"preset": "small_mlp"},
    "trigger": {"scheme": "embedded-content", "count": 12, "target_label": 1},
    "embed": {"tau": 0.05, "max_noise": 0.03, "replay_count": 2, "noise_samples": 3,
              "warmup_epochs": 1, "total_epochs": 3, "batch_size": 32},
    "baseline": False,
    "smoothing": {"sigma": 0.03, "n": 120, "confidence": 0.95},
    "radii": [0.0, 0.005, 0.01],
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One embedded+certified run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "exp.json"
    config.write_text(json.dumps(TINY_CONFIG))
    out = root / "run"
    assert main(["embed", "--config", str(config), "--out", str(out)]) == 0
    assert main(["certify", "--out", str(out)]) == 0
    return out


def _config_file(tmp_path, overrides=None):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    for key, value in (overrides or {}).items():
        cfg[key] = value
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# embed

def test_embed_missing_dataset_exits_2(tmp_path, capsys):
    cfg = _config_file(tmp_path, {"dataset": {"kind": "idx", "images": "/nonexistent/im.idx",
                                              "labels": "/nonexistent/lb.idx"}})
    code = main(["embed", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "dataset not found" in capsys.readouterr().err


def test_embed_dry_run_prints_config_without_artifacts(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    out = tmp_path / "run"
    code = main(["embed", "--config", str(cfg), "--out", str(out), "--dry-run"])
    assert code == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["seed"] == 5
    assert "resolved" in resolved["model"]
    assert not out.exists()


def test_embed_missing_config_exits_2(tmp_path, capsys):
    code = main(["embed", "--out", str(tmp_path)])
    assert code == 2
    assert "config" in capsys.readouterr().err


def test_embed_writes_run_artifacts(run_dir):
    for name in ("config.json", "model.ckpt", "triggers.bin", "training.log"):
        assert (run_dir / name).exists()
    lines = (run_dir / "training.log").read_text().splitlines()
    assert len(lines) == TINY_CONFIG["embed"]["total_epochs"]
    assert all("trigger_acc" in json.loads(line) for line in lines)


def test_embed_idempotent_byte_identical(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    cfg = _config_file(tmp_path)
    out = tmp_path / "run"
    assert main(["embed", "--config", str(cfg), "--out", str(out)]) == 0
    first = {n: (out / n).read_bytes()
             for n in ("config.json", "model.ckpt", "triggers.bin", "training.log")}
    assert main(["embed", "--config", str(cfg), "--out", str(out)]) == 0
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob, name


# ---------------------------------------------------------------------------
# certify

def test_certify_single_radius_flag(run_dir, capsys):
    assert main(["certify", "--out", str(run_dir), "--radii", "0"]) == 0
    report = json.loads((run_dir / "report.json").read_text())
    assert len(report["entries"]) == 1
    assert report["entries"][0]["radius"] == 0.0
    # restore the shared grid report for later tests
    assert main(["certify", "--out", str(run_dir)]) == 0


def test_certify_deterministic_reports(run_dir, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    assert main(["certify", "--out", str(run_dir)]) == 0
    first = (run_dir / "report.json").read_bytes()
    assert main(["certify", "--out", str(run_dir)]) == 0
    assert (run_dir / "report.json").read_bytes() == first


def test_certify_digest_mismatch_refused(run_dir, tmp_path, capsys):
    other = nn.small_mlp((6, 6, 1), 3, hidden=4)
    wrong = tmp_path / "wrong.ckpt"
    nn.save_checkpoint(wrong, other, nn.init_params(other, 0))
    shutil.copy(wrong, run_dir / "wrong.ckpt")
    code = main(["certify", "--out", str(run_dir), "--model", "wrong.ckpt"])
    assert code == 1
    assert "digest" in capsys.readouterr().err
    (run_dir / "wrong.ckpt").unlink()


def test_certify_without_run_exits_2(tmp_path, capsys):
    code = main(["certify", "--out", str(tmp_path)])
    assert code == 2
    assert "config not found" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# attack

def test_attack_zero_epochs_single_record(run_dir):
    assert main(["attack", "--out", str(run_dir), "--kind", "finetune",
                 "--epochs", "0", "--name", "noop"]) == 0
    lines = (run_dir / "attacks" / "noop" / "trajectory.log").read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["l2_from_init"] == 0.0


def test_attack_unknown_kind_exits_2(run_dir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--out", str(run_dir), "--kind", "meltdown"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "finetune" in err and "distill-hard" in err and "pgd" in err


def test_attack_pgd_checkpoint_within_radius(run_dir):
    radius = 0.02
    assert main(["attack", "--out", str(run_dir), "--kind", "pgd",
                 "--radius", str(radius), "--lr", "0.2", "--pgd-steps", "8",
                 "--name", "pgd-test"]) == 0
    spec_obj = json.loads((run_dir / "config.json").read_text())["model"]["resolved"]
    spec = nn.ModelSpec.from_obj(spec_obj)
    base, _ = nn.load_checkpoint(run_dir / "model.ckpt", spec)
    attacked, _ = nn.load_checkpoint(run_dir / "attacks" / "pgd-test" / "attacked.ckpt", spec)
    assert nn.l2_distance(attacked, base) <= radius + 1e-5


def test_attack_writes_metadata(run_dir):
    assert main(["attack", "--out", str(run_dir), "--kind", "finetune",
                 "--epochs", "1", "--lr", "0.0001", "--name", "ft1"]) == 0
    meta = json.loads((run_dir / "attacks" / "ft1" / "attack.json").read_text())
    assert meta["kind"] == "finetune"
    assert meta["final_trigger_acc_smoothed"] is not None
    assert meta["model"] == "model.ckpt"


# ---------------------------------------------------------------------------
# verify

def test_verify_unattacked_checkpoint_passes(run_dir, capsys):
    code = main(["verify", "--out", str(run_dir), str(run_dir / "model.ckpt"),
                 "--n", "60"])
    assert code == 0
    assert "0 violations" in capsys.readouterr().out


def test_verify_out_of_ball_skipped(run_dir, tmp_path, capsys):
    spec_obj = json.loads((run_dir / "config.json").read_text())["model"]["resolved"]
    spec = nn.ModelSpec.from_obj(spec_obj)
    base, _ = nn.load_checkpoint(run_dir / "model.ckpt", spec)
    far = base + np.float32(0.5)
    far_path = tmp_path / "far.ckpt"
    nn.save_checkpoint(far_path, spec, far)
    code = main(["verify", "--out", str(run_dir), str(far_path), "--n", "40"])
    out = capsys.readouterr().out
    assert code == 0
    assert "skipped (outside all radii)" in out


def test_verify_discovers_attack_checkpoints(run_dir, capsys):
    code = main(["verify", "--out", str(run_dir), "--n", "60"])
    assert code == 0
    summary = json.loads((run_dir / "verify.json").read_text())
    assert summary["violations"] == []
    assert len(summary["checked"]) + len(summary["skipped"]) >= 2


# ---------------------------------------------------------------------------
# report

def test_report_empty_dir_exits_1(tmp_path, capsys):
    code = main(["report", str(tmp_path)])
    assert code == 1
    assert "no artifacts" in capsys.readouterr().err


def test_report_renders_tables_csv_and_figures(run_dir, capsys):
    code = main(["report", str(run_dir)])
    assert code == 0
    out = capsys.readouterr().out
    assert "Certified trigger-set accuracy" in out
    report_dir = run_dir / "report"
    for name in ("tables.txt", "certified_grid.csv", "certified_grid.png",
                 "trajectories.csv", "attack_summary.csv", "trajectories.png"):
        assert (report_dir / name).exists(), name
    header = (report_dir / "certified_grid.csv").read_text().splitlines()[0]
    assert header == "radius,radius_over_sigma,p_lower,order_index,certified_accuracy"


def test_report_missing_run_dir_exits_2(tmp_path, capsys):
    code = main(["report", str(tmp_path / "nope")])
    assert code == 2


# ---------------------------------------------------------------------------
# misc plumbing

def test_jobs_env_fallback(monkeypatch):
    monkeypatch.setenv("CERTMARK_JOBS", "3")
    from certmark.cli import build_parser
    args = build_parser().parse_args(["certify"])
    assert args.jobs == 3
    monkeypatch.setenv("CERTMARK_JOBS", "junk")
    args = build_parser().parse_args(["certify"])
    assert args.jobs == 1


def test_seed_override_changes_artifacts(tmp_path):
    cfg = _config_file(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["embed", "--config", str(cfg), "--out", str(out_a), "--seed", "5"]) == 0
    assert main(["embed", "--config", str(cfg), "--out", str(out_b), "--seed", "6"]) == 0
    assert (out_a / "model.ckpt").read_bytes() != (out_b / "model.ckpt").read_bytes()

import json

import numpy as np
import pytest

from certmark import attacks, certify, data, embed, nn
from certmark.smoothing import SmoothingConfig, gaussian_cdf


@pytest.fixture(scope="module")
def trained():
    dims, classes = (8, 8, 1), 4
    ds = data.synthetic_dataset(3, 200, classes, dims=dims)
    owner, adversary = data.split_owner_adversary(ds, 3)
    trig = data.make_trigger_set("embedded-content", owner, 1, 16, seed=3)
    spec = nn.small_mlp(dims, classes, hidden=24)
    cfg = embed.EmbedConfig(tau=0.05, max_noise=0.02, replay_count=3, noise_samples=4,
                            warmup_epochs=1, total_epochs=6, batch_size=32, seed=3)
    params, _ = embed.embed_watermark(spec, nn.init_params(spec, 3), owner, trig, cfg)
    return spec, params, owner, adversary, trig


SMOOTH = SmoothingConfig(sigma=0.02, n=400, confidence=0.99, root_seed=17)


# ---------------------------------------------------------------------------
# certify_grid

def test_zero_radius_entry_bounds_the_median(trained):
    spec, params, _, _, trig = trained
    report = certify.certify_grid(spec, params, trig, SMOOTH, [0.0])
    assert len(report.entries) == 1
    entry = report.entries[0]
    assert entry.p_lower == 0.5
    assert entry.order_index is not None
    # confidence-backed index sits near but below n/2
    assert SMOOTH.n // 2 - 40 <= entry.order_index <= SMOOTH.n // 2
    assert entry.certified_accuracy <= report.median_smoothed_accuracy


def test_grid_certified_accuracy_non_increasing(trained):
    spec, params, _, _, trig = trained
    radii = [0.0, 0.005, 0.01, 0.02, 0.04]
    report = certify.certify_grid(spec, params, trig, SMOOTH, radii)
    vals = [e.certified_accuracy for e in report.entries if e.certified_accuracy is not None]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert report.max_sampled_accuracy >= max(vals)
    for e in report.entries:
        assert abs(e.p_lower - gaussian_cdf(-e.radius / SMOOTH.sigma)) < 1e-10
        assert abs(e.radius_over_sigma - e.radius / SMOOTH.sigma) < 1e-12


def test_grid_rejects_unsorted_radii(trained):
    spec, params, _, _, trig = trained
    with pytest.raises(ValueError, match="ascending"):
        certify.certify_grid(spec, params, trig, SMOOTH, [0.1, 0.05])
    with pytest.raises(ValueError, match="ascending"):
        certify.certify_grid(spec, params, trig, SMOOTH, [-0.1, 0.05])


def test_report_bytes_reproducible(trained, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    spec, params, _, _, trig = trained
    a = certify.certify_grid(spec, params, trig, SMOOTH, [0.0, 0.01])
    b = certify.certify_grid(spec, params, trig, SMOOTH, [0.0, 0.01])
    assert a.to_json() == b.to_json()
    assert a.generated_at is None
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    c = certify.certify_grid(spec, params, trig, SMOOTH, [0.0, 0.01])
    assert c.generated_at == "2023-11-14T22:13:20+00:00"


def test_report_json_roundtrip(trained):
    spec, params, _, _, trig = trained
    report = certify.certify_grid(spec, params, trig, SMOOTH, [0.0, 0.01, 0.05])
    back = certify.CertificateReport.from_json(report.to_json())
    assert back == report


# ---------------------------------------------------------------------------
# published-table-shaped fixtures (serialization vectors only; desk-scale
# models do not reproduce these numbers)

def _fixture_report(sigma, radii, accuracies, test_digest="f" * 64):
    entries = tuple(
        certify.CertificateEntry(
            radius=r, radius_over_sigma=r / sigma,
            p_lower=gaussian_cdf(-r / sigma),
            order_index=None,
            certified_accuracy=a)
        for r, a in zip(radii, accuracies))
    return certify.CertificateReport(
        model_digest=test_digest,
        smoothing=SmoothingConfig(sigma=sigma, n=10000, confidence=0.99, root_seed=0),
        entries=entries,
        median_smoothed_accuracy=max(accuracies),
        max_sampled_accuracy=1.0)


def test_table2_shaped_fixture_roundtrips():
    radii = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2]
    accuracies = [1.00, 1.00, 1.00, 0.93, 0.51, 0.05]
    report = _fixture_report(1.0, radii, accuracies)
    text = report.to_json()
    back = certify.CertificateReport.from_json(text)
    assert [e.certified_accuracy for e in back.entries] == accuracies
    assert json.loads(text)["schema"] == "certmark-report/1"


def test_table3_shaped_fixture_roundtrips():
    radii = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4]
    accuracies = [1.00, 1.00, 1.00, 1.00, 0.98, 0.74, 0.24]
    row = certify.SweepRow(sigma=1.2, test_acc=0.8418,
                           report=_fixture_report(1.2, radii, accuracies))
    obj = row.to_obj()
    assert obj["sigma"] == 1.2 and obj["test_acc"] == 0.8418
    entry = obj["report"]["entries"][-2]
    assert entry["radius"] == 1.2 and entry["certified_accuracy"] == 0.74


def test_report_validation_rejects_inconsistencies():
    with pytest.raises(ValueError, match="non-increasing"):
        _fixture_report(1.0, [0.2, 0.4], [0.5, 0.9])
    good = _fixture_report(1.0, [0.2, 0.4], [0.9, 0.5])
    obj = good.to_obj()
    obj["entries"][0]["p_lower"] = 0.123
    with pytest.raises(ValueError, match="inconsistent"):
        certify.CertificateReport.from_obj(obj)
    obj2 = good.to_obj()
    obj2["schema"] = "something-else"
    with pytest.raises(ValueError, match="schema"):
        certify.CertificateReport.from_obj(obj2)


# ---------------------------------------------------------------------------
# verify_certificate

def test_verify_unperturbed_model_has_no_violations(trained):
    spec, params, _, _, trig = trained
    report = certify.certify_grid(spec, params, trig, SMOOTH, [0.0, 0.01, 0.02])
    fresh = SmoothingConfig(sigma=SMOOTH.sigma, n=SMOOTH.n,
                            confidence=SMOOTH.confidence, root_seed=99)
    attacked = [certify.AttackedModel("original", params, 0.0)]
    assert certify.verify_certificate(spec, report, attacked, trig, fresh) == []


def test_verify_skips_out_of_ball_models(trained):
    spec, params, _, _, trig = trained
    report = certify.certify_grid(spec, params, trig, SMOOTH, [0.01, 0.02])
    far = params.copy()
    far += np.float32(1.0)  # way outside every radius
    dist = nn.l2_distance(far, params)
    assert dist > 0.02 * 1.5
    fresh = SmoothingConfig(sigma=SMOOTH.sigma, n=50, confidence=0.99, root_seed=7)
    attacked = [certify.AttackedModel("far", far, dist)]
    assert certify.verify_certificate(spec, report, attacked, trig, fresh) == []


def test_verify_flags_fabricated_violation(trained):
    spec, params, _, _, trig = trained
    report = certify.certify_grid(spec, params, trig, SMOOTH, [0.02])
    # a zeroed model inside the claimed ball would break the certificate;
    # fabricate the distance tag to force the re-estimate path
    zeroed = np.zeros_like(params)
    fresh = SmoothingConfig(sigma=SMOOTH.sigma, n=100, confidence=0.99, root_seed=5)
    attacked = [certify.AttackedModel("zeroed", zeroed, 0.0)]
    violations = certify.verify_certificate(spec, report, attacked, trig, fresh)
    assert len(violations) == 1
    v = violations[0]
    assert v.model_name == "zeroed" and v.radius == 0.02
    assert v.estimated_median + v.allowance < v.certified_accuracy


def test_verify_pgd_attacks_respect_certificate(trained):
    spec, params, _, _, trig = trained
    radii = [0.01, 0.02, 0.05]
    report = certify.certify_grid(spec, params, trig, SMOOTH, radii)
    attacked = []
    for i, r in enumerate(radii):
        cfg = attacks.AttackConfig(kind="pgd", lr=0.1, radius=0.9 * r,
                                   pgd_steps=15, seed=i)
        worst, _ = attacks.pgd_parameter_attack(spec, params, trig, cfg=cfg)
        attacked.append(certify.AttackedModel(f"pgd-{r}", worst,
                                              nn.l2_distance(worst, params)))
    fresh = SmoothingConfig(sigma=SMOOTH.sigma, n=400, confidence=0.99, root_seed=123)
    assert certify.verify_certificate(spec, report, attacked, trig, fresh) == []


def test_verify_rejects_sigma_mismatch(trained):
    spec, params, _, _, trig = trained
    report = certify.certify_grid(spec, params, trig, SMOOTH, [0.01])
    other = SmoothingConfig(sigma=0.5, n=50, confidence=0.99, root_seed=1)
    with pytest.raises(ValueError, match="sigma"):
        certify.verify_certificate(spec, report, [], trig, other)


# ---------------------------------------------------------------------------
# noise trade-off sweep

def test_single_sigma_sweep_equals_one_run(trained):
    spec, params, owner, _, trig = trained
    e_cfg = embed.EmbedConfig(tau=0.05, max_noise=0.0, replay_count=2, noise_samples=2,
                              warmup_epochs=1, total_epochs=2, batch_size=32, seed=4)
    s_cfg = SmoothingConfig(sigma=1.0, n=60, confidence=0.9, root_seed=21)
    init = nn.init_params(spec, 4)
    rows = certify.sweep_noise_tradeoff(spec, init, owner, None, trig, [0.02],
                                        e_cfg, s_cfg, [0.0, 0.005])
    assert len(rows) == 1 and rows[0].error is None
    from dataclasses import replace as dc_replace
    direct_params, _ = embed.embed_watermark(spec, init, owner, trig,
                                             dc_replace(e_cfg, max_noise=0.02))
    direct = certify.certify_grid(spec, direct_params, trig,
                                  dc_replace(s_cfg, sigma=0.02), [0.0, 0.005])
    assert rows[0].report == direct


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_records_divergence_and_continues(trained):
    spec, params, owner, _, trig = trained
    e_cfg = embed.EmbedConfig(tau=1e18, max_noise=0.0, replay_count=1, noise_samples=1,
                              warmup_epochs=0, total_epochs=2, batch_size=32, seed=4)
    s_cfg = SmoothingConfig(sigma=1.0, n=20, confidence=0.9, root_seed=2)
    rows = certify.sweep_noise_tradeoff(spec, nn.init_params(spec, 4), owner, None,
                                        trig, [0.01, 0.02], e_cfg, s_cfg, [0.0])
    assert len(rows) == 2
    assert all(r.error is not None and r.report is None for r in rows)


def test_sweep_rejects_bad_sigmas(trained):
    spec, params, owner, _, trig = trained
    e_cfg = embed.EmbedConfig()
    s_cfg = SmoothingConfig(sigma=1.0, n=10)
    with pytest.raises(ValueError, match="ascending"):
        certify.sweep_noise_tradeoff(spec, params, owner, None, trig, [0.2, 0.1],
                                     e_cfg, s_cfg, [0.0])

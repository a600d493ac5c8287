"""Metrics and cost accounting.

PSNR oracles are closed forms (constant-difference images). SSIM is checked
against closed forms on constant images, an exact self-similarity identity,
and scikit-image's implementation on textured pairs. FLOPs are checked
against a shape-walking oracle that hooks the real conv layers.
"""

import csv
import json

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from sipl_kit.backbone import BackboneConfig
from sipl_kit.degrade import apply_degradation, gen_clean
from sipl_kit.errors import ImageTooSmall, ShapeMismatch
from sipl_kit.evalkit import (aggregate_metrics, cost_report, count_flops,
                              count_params, degraded_input_metrics,
                              evaluate_iterative, param_breakdown,
                              plot_psnr_vs_iteration, psnr, render_cost_table,
                              render_table, ssim, write_csv,
                              write_metrics_jsonl, _conv_flops, _fusion_flops)
from sipl_kit.privfusion import ProxyFusion
from sipl_kit.restore import RestorationModel

from conftest import tiny_model


# ---------------------------------------------------------------------------
# psnr

def test_psnr_closed_form():
    a = np.zeros((16, 16, 3))
    b = np.full((16, 16, 3), 0.1)
    # MSE = 0.01 -> 10*log10(1/0.01) = 20 dB
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, b, peak=0.1) == pytest.approx(0.0, abs=1e-12)


def test_psnr_sentinel_and_cap():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a.copy()) == 100.0
    tiny = a + 1e-9
    assert psnr(a, tiny) == 100.0  # above the cap, clamped


def test_psnr_symmetry_and_type():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    assert type(psnr(a, b)) is float


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_psnr_sigma25_noise():
    vals = []
    for seed in range(8):
        clean = gen_clean(seed, 96, 96)
        spec_seed = 1000 + seed
        from sipl_kit.degrade import DegradationSpec
        noisy = apply_degradation(
            clean, DegradationSpec(("noise",), {"noise": {"sigma": 25.0}}, spec_seed))
        vals.append(psnr(clean, noisy))
    assert abs(float(np.mean(vals)) - 20.172) < 0.3


# ---------------------------------------------------------------------------
# ssim

def test_ssim_self_is_exactly_one():
    img = gen_clean(4, 32, 32)
    assert ssim(img, img.copy()) == 1.0


def test_ssim_constant_zero_vs_one():
    a = np.zeros((16, 16, 3))
    b = np.ones((16, 16, 3))
    c1 = 0.01 ** 2
    assert ssim(a, b) == pytest.approx(c1 / (1.0 + c1), abs=1e-9)


def test_ssim_constant_shift_closed_form():
    # zero variance: ssim = (2*mu_a*mu_b + c1)/(mu_a^2 + mu_b^2 + c1)
    a = np.full((16, 16, 3), 0.4)
    b = np.full((16, 16, 3), 0.6)
    c1 = 1e-4
    want = (2 * 0.4 * 0.6 + c1) / (0.4 ** 2 + 0.6 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(want, abs=1e-9)


def test_ssim_matches_skimage():
    for seed in range(4):
        a = gen_clean(seed, 48, 48)
        rng = np.random.default_rng(seed)
        b = np.clip(a + rng.standard_normal(a.shape) * 0.08, 0, 1).astype(np.float32)
        ours = ssim(a, b)
        ref = structural_similarity(
            a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
            data_range=1.0, channel_axis=2)
        assert ours == pytest.approx(ref, abs=1e-5)
        assert 0.0 < ours < 1.0


def test_ssim_grayscale_input():
    a = gen_clean(2, 24, 24)[..., 0]
    rng = np.random.default_rng(0)
    b = np.clip(a + rng.standard_normal(a.shape) * 0.05, 0, 1)
    ours = ssim(a, b)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ours == pytest.approx(ref, abs=1e-5)


def test_ssim_too_small():
    with pytest.raises(ImageTooSmall):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


# ---------------------------------------------------------------------------
# parameter accounting

def test_param_breakdown_matches_torch():
    model = tiny_model()
    parts = param_breakdown(model)
    assert parts["total"] == sum(p.numel() for p in model.parameters())
    assert parts["total"] == parts["backbone"] + parts["privfusion"]
    assert count_params(model) == parts["total"]


def test_param_breakdown_no_fusion():
    model = tiny_model(fusion_mode="none")
    parts = param_breakdown(model)
    assert parts["privfusion"] == 0
    assert parts["total"] == parts["backbone"]


def test_dictionary_param_count_default_width():
    # 64 entries x 64 channels + 7 projections of 64x64
    fusion = ProxyFusion(64, 64)
    assert fusion.param_count() == 32_768


def test_default_model_under_one_million_params():
    model = RestorationModel(BackboneConfig(), fusion_mode="proxy")
    assert count_params(model) < 1_000_000


# ---------------------------------------------------------------------------
# flops accounting

def test_conv_flops_closed_form():
    # 3x3 conv, 16 -> 16 channels, 64x64 output, 2 flops per MAC
    assert _conv_flops(64, 64, 16, 16, 3) == 2 * 64 * 64 * 16 * 16 * 9
    assert _conv_flops(64, 64, 16, 16, 3) == 18_874_368


def test_backbone_flops_match_shape_walking_oracle():
    model = tiny_model(fusion_mode="none")
    counted = []

    def hook(mod, args, out):
        if isinstance(mod, torch.nn.Conv2d):
            _, _, ho, wo = out.shape
            counted.append(2 * ho * wo * mod.out_channels * mod.in_channels
                           * mod.kernel_size[0] * mod.kernel_size[1])
        elif isinstance(mod, torch.nn.ConvTranspose2d):
            _, _, hi, wi = args[0].shape
            counted.append(2 * hi * wi * mod.in_channels * mod.out_channels
                           * mod.kernel_size[0] * mod.kernel_size[1])

    handles = [m.register_forward_hook(hook) for m in model.backbone.modules()
               if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))]
    with torch.no_grad():
        model.backbone(torch.zeros(1, 3, 32, 48))
    for h in handles:
        h.remove()
    assert count_flops(model, (32, 48), pi_enabled=False) == sum(counted)


def test_fusion_flops_match_matmul_enumeration():
    n, c, length = 8, 16, 24
    mm = lambda m, k, p: 2 * m * k * p
    expected = (
        mm(n, c, c)            # dictionary @ Wq1
        + mm(length, c, c) * 2  # privileged tokens @ Wk1, @ Wv1
        + mm(n, c, length)      # stage-1 scores
        + 5 * n * length        # stage-1 softmax
        + mm(n, length, c)      # stage-1 probs @ v
        + mm(length, c, c)      # degraded tokens @ Wq2
        + mm(n, c, c) * 2       # priors @ Wk2, @ Wv2
        + mm(length, c, n)      # stage-2 scores
        + 5 * length * n        # stage-2 softmax
        + mm(length, n, c)      # stage-2 probs @ v
        + mm(length, c, c)      # output projection
    )
    assert _fusion_flops(n, c, length) == expected


def test_pi_pass_adds_encoder_and_fusion():
    model = tiny_model()
    h, w = 32, 32
    nopi = count_flops(model, (h, w), pi_enabled=False)
    pi = count_flops(model, (h, w), pi_enabled=True)
    assert pi > nopi
    from sipl_kit.evalkit import _backbone_flops
    parts = _backbone_flops(model.cfg, h, w)
    f = model.cfg.downsample_factor
    tokens = (h // f) * (w // f)
    assert pi - nopi == parts["encoder"] + _fusion_flops(
        model.n_dict_entries, model.cfg.bottleneck_channels, tokens)


def test_pi_flops_require_fusion():
    model = tiny_model(fusion_mode="none")
    with pytest.raises(ValueError):
        count_flops(model, (32, 32), pi_enabled=True)


def test_cost_report_additivity_exact():
    model = tiny_model()
    report = cost_report(model, (64, 64))
    for t in range(4):
        assert report.flops_iterative(t) == (
            report.flops_forward_nopi + t * report.flops_forward_pi)
        assert isinstance(report.flops_iterative(t), int)
    with pytest.raises(ValueError):
        report.flops_iterative(-1)
    assert report.single_pass_overhead > 0
    rec = report.to_record()
    json.dumps(rec)  # serializable
    assert rec["params"] == count_params(model)


# ---------------------------------------------------------------------------
# aggregation + rendering

def test_aggregate_metrics_weighted_overall():
    samples = [("a", 10.0, 0.5), ("a", 20.0, 0.7), ("a", 30.0, 0.9),
               ("b", 40.0, 1.0)]
    r = aggregate_metrics("x", 0, samples)
    assert r.per_task["a"] == {"psnr_mean": 20.0, "ssim_mean": pytest.approx(0.7), "n": 3}
    assert r.per_task["b"]["n"] == 1
    o = r.overall
    assert o["n"] == 4
    assert o["psnr_mean"] == pytest.approx((10 + 20 + 30 + 40) / 4)
    assert o["ssim_mean"] == pytest.approx((0.5 + 0.7 + 0.9 + 1.0) / 4)


def test_degraded_input_metrics_floor(mini_corpus):
    r = degraded_input_metrics(mini_corpus, "test")
    assert set(r.per_task) == {"noise25", "rain"}
    assert 5.0 < r.overall["psnr_mean"] < 40.0
    assert 0.0 < r.overall["ssim_mean"] < 1.0


def test_evaluate_iterative_fresh_model_stays_at_floor(mini_corpus):
    model = tiny_model()
    reports = evaluate_iterative(model, mini_corpus, "test", t_max=2, label="init")
    assert len(reports) == 3
    floor = degraded_input_metrics(mini_corpus, "test")
    for r in reports:
        assert r.overall["psnr_mean"] == pytest.approx(floor.overall["psnr_mean"])
    assert [r.iteration for r in reports] == [0, 1, 2]


def test_render_table_and_csv(tmp_path):
    samples = [("noise25", 21.5, 0.62), ("rain", 24.0, 0.81)]
    reports = [aggregate_metrics("run", t, samples) for t in range(2)]
    table = render_table(reports)
    assert "noise25 PSNR/SSIM" in table and "overall PSNR/SSIM" in table
    assert "21.50/0.6200" in table

    csv_path = str(tmp_path / "m.csv")
    write_csv(reports, csv_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["label", "iteration"]
    assert len(rows) == 3

    jsonl_path = str(tmp_path / "m.jsonl")
    write_metrics_jsonl(reports, jsonl_path)
    with open(jsonl_path) as fh:
        recs = [json.loads(line) for line in fh]
    assert recs[0]["overall"]["n"] == 2
    assert recs[1]["iteration"] == 1


def test_plot_svg_bytes_reproducible(tmp_path):
    series = {"a": [(0, 20.0), (1, 21.0)], "b": [(0, 19.5), (1, 20.5)]}
    p1, p2 = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
    plot_psnr_vs_iteration(series, p1)
    plot_psnr_vs_iteration(series, p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_render_cost_table_includes_convention():
    model = tiny_model()
    text = render_cost_table({"tiny": cost_report(model, (64, 64))})
    assert text.startswith("# convention:")
    assert "mac=2" in text
    assert "tiny" in text

"""
Tests for FLOPs accounting, parameter counts and latency measurement
"""

from src.cdira_model import CdiraModel
from src.config import build_config
from src.flops import conv_flops, flops_estimate, linear_flops, measure_latency


def test_layer_formulas():
    assert linear_flops(10, 5) == 100
    assert conv_flops(3, 16, 3, 3, 64, 64) == 3_538_944


def test_default_config_hand_counts():
    report = flops_estimate(build_config({}), n_classes=10)
    assert report.f_global == 36_619_392
    assert report.f_roi_extra == 677_888
    assert report.params_inference == 429_349
    assert 0 < report.f_roi_extra < report.f_global


def test_breakdowns_sum_to_totals():
    report = flops_estimate(build_config({}), n_classes=10)
    assert sum(report.global_breakdown.values()) == report.f_global
    assert sum(report.roi_breakdown.values()) == report.f_roi_extra


def test_param_count_matches_model(config):
    model = CdiraModel(config, n_classes=3, seed=0, n_domains=4)
    report = flops_estimate(config, n_classes=3, n_domains=4)
    assert report.params == model.parameter_count()
    assert report.params_inference == report.params - model.params.count("domain.")


def test_expected_flops_interpolates():
    report = flops_estimate(build_config({}), n_classes=10)
    assert report.expected(0.0) == report.f_global
    assert report.expected(1.0) == report.f_global + report.f_roi_extra
    assert report.expected(0.25) == report.f_global + 0.25 * report.f_roi_extra


def test_measure_latency(model, images):
    latency = measure_latency(model, images[0], runs=3, warmup=1)
    assert latency.global_ms > 0 and latency.fused_ms > 0
    assert (latency.runs, latency.warmup) == (3, 1)
    assert model.roi_evaluations == 4

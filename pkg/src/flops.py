"""
Efficiency accounting: analytic FLOPs per path, parameter counts and single-image latency
"""

import logging
import statistics
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from src.autodiff import no_grad
from src.backbone import layer_names
from src.config import RunConfig

logger = logging.getLogger(__name__)


def conv_flops(c_in: int, c_out: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    return 2 * c_in * c_out * kh * kw * h_out * w_out


def linear_flops(n_in: int, n_out: int) -> int:
    return 2 * n_in * n_out


def conv_params(c_in: int, c_out: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def linear_params(n_in: int, n_out: int) -> int:
    return n_out * n_in + n_out


@dataclass
class FlopsReport:
    """Per-path FLOPs with the layer breakdown they were summed from"""
    f_global: int
    f_roi_extra: int
    params: int
    params_inference: int
    global_breakdown: Dict[str, int] = field(default_factory=dict)
    roi_breakdown: Dict[str, int] = field(default_factory=dict)

    def expected(self, usage: float) -> float:
        """Mean FLOPs per image when a fraction `usage` takes the fused path"""
        return self.f_global + usage * self.f_roi_extra

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class LatencyReport:
    global_ms: float
    fused_ms: float
    runs: int
    warmup: int


def flops_estimate(config: RunConfig, n_classes: int, n_domains: Optional[int] = None) -> FlopsReport:
    """
    Analytic FLOPs (2 per multiply-accumulate) for both inference paths

    F_global covers backbone, GAP, global head and routing head; F_roi_extra covers
    saliency, Top-K pooling, ROI refinement and the fused head. GAP, saliency and
    pooling are charged at C_f*H*W scale (saliency twice: square and add).
    """
    bb = config.backbone
    m = config.model
    k = bb.kernel_size
    size = bb.input_size
    glob: "OrderedDict[str, int]" = OrderedDict()
    params = 0
    for name, c_in, c_out, stride in layer_names(bb):
        size = -(-size // stride)
        glob[name] = conv_flops(c_in, c_out, k, k, size, size)
        params += conv_params(c_in, c_out, k)

    c_f, height, width = bb.feature_channels, *bb.output_hw()
    cells = c_f * height * width
    glob["gap"] = cells
    glob["global.hidden"] = linear_flops(c_f, m.global_hidden)
    glob["global.out"] = linear_flops(m.global_hidden, n_classes)
    glob["route.hidden"] = linear_flops(c_f, m.route_hidden)
    glob["route.out"] = linear_flops(m.route_hidden, 1)

    roi: "OrderedDict[str, int]" = OrderedDict()
    roi["saliency"] = 2 * cells
    roi["topk_pool"] = cells
    roi["roi.refine"] = linear_flops(c_f, m.roi_dim)
    roi["fused.hidden"] = linear_flops(c_f + m.roi_dim, m.fused_hidden)
    roi["fused.out"] = linear_flops(m.fused_hidden, n_classes)

    params += (
        linear_params(c_f, m.global_hidden) + linear_params(m.global_hidden, n_classes)
        + linear_params(c_f, m.route_hidden) + linear_params(m.route_hidden, 1)
        + linear_params(c_f, m.roi_dim)
        + linear_params(c_f + m.roi_dim, m.fused_hidden) + linear_params(m.fused_hidden, n_classes)
    )
    domain = 0
    if n_domains is not None:
        domain = linear_params(c_f, m.domain_hidden) + linear_params(m.domain_hidden, n_domains)

    return FlopsReport(
        f_global=int(sum(glob.values())),
        f_roi_extra=int(sum(roi.values())),
        params=params + domain,
        params_inference=params,
        global_breakdown=dict(glob),
        roi_breakdown=dict(roi)
    )


def measure_latency(model, image: np.ndarray, runs: int = 100, warmup: int = 10) -> LatencyReport:
    """Median single-image wall-clock time of the global path and of the full fused path, one BLAS thread"""
    batch = np.asarray(image)[None] if np.asarray(image).ndim == 3 else np.asarray(image)[:1]

    def global_path():
        g = model.pooled(model.features(batch))
        model.global_logits(g)
        model.routing_logit(g)

    def fused_path():
        f = model.features(batch)
        g = model.pooled(f)
        model.global_logits(g)
        model.routing_logit(g)
        model.roi_path(f, g)

    timings = {}
    with threadpool_limits(limits=1), no_grad():
        for name, fn in (("global", global_path), ("fused", fused_path)):
            for _ in range(warmup):
                fn()
            samples = []
            for _ in range(runs):
                start = time.perf_counter()
                fn()
                samples.append(time.perf_counter() - start)
            timings[name] = statistics.median(samples) * 1000.0
    logger.info("latency global %.3f ms, fused %.3f ms (median of %d)", timings["global"], timings["fused"], runs)
    return LatencyReport(global_ms=timings["global"], fused_ms=timings["fused"], runs=runs, warmup=warmup)


def print_report(report: FlopsReport, latency: Optional[LatencyReport] = None, usage: Optional[float] = None):
    print("\n" + "=" * 60)
    print("EFFICIENCY REPORT")
    print("=" * 60)
    print(f"  Params (M):        {report.params / 1e6:.4f}  (inference {report.params_inference / 1e6:.4f})")
    print(f"  F_global:          {report.f_global:,}")
    print(f"  F_roi_extra:       {report.f_roi_extra:,}")
    print(f"  F_global (GFLOPs): {report.f_global / 1e9:.4f}")
    if usage is not None:
        print(f"  Expected @ usage {usage:.3f}: {report.expected(usage):,.0f}")
    if latency is not None:
        print(f"  Latency global:    {latency.global_ms:.3f} ms")
        print(f"  Latency fused:     {latency.fused_ms:.3f} ms")

"""
Dynamic-routing inference and evaluation harness
Confidence-gated (or routing-head-gated) inference, metrics, tau sweeps, class-wise ROI usage,
corruption robustness and the post-hoc domain probe
"""

import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import precision_recall_fscore_support
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from src.autodiff import Tensor, no_grad, sigmoid
from src.cdira_model import CdiraModel, predict
from src.degradations import DegradeSpec, degrade_batch
from src.flops import FlopsReport, flops_estimate

logger = logging.getLogger(__name__)

MODES = ("confidence", "routing_head")
ALL_FUSED_TAU = 1.0


@dataclass
class RouteRecord:
    """Routing evidence for one sample"""
    sample_id: int
    c_g: float
    a: float
    p_roi: float
    path: str  # "global" | "fused"
    flops_charged: int
    pred: int
    latency: float = 0.0


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    classes: List[int]
    support: List[int]
    per_class_precision: List[float]
    per_class_recall: List[float]
    per_class_f1: List[float]
    absent_classes: List[int]
    roi_usage: Optional[float] = None
    roi_usage_per_class: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ClasswiseUsage:
    overall: float
    per_class: Dict[int, float]
    counts: Dict[int, int]

    def to_frame(self) -> pd.DataFrame:
        rows = [{"class": c, "count": self.counts[c], "roi_usage": self.per_class[c]} for c in sorted(self.per_class)]
        return pd.DataFrame(rows, columns=["class", "count", "roi_usage"])


@dataclass
class GlobalPass:
    """Global-path outputs for a whole split, kept so several thresholds can reuse them"""
    features: np.ndarray  # (N, C_f, H, W)
    g: np.ndarray  # (N, C_f)
    pred: np.ndarray
    confidence: np.ndarray
    a: np.ndarray
    p_roi: np.ndarray


def parse_grid(text: str) -> List[float]:
    """'start:stop:step' (inclusive stop) or a comma list"""
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"grid must be start:stop:step with a positive step, got {text!r}")
        start, stop, step = parts
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(v) for v in text.split(",") if v.strip()]


def is_fused(c_g: float, p_roi: float, tau: float, mode: str) -> bool:
    if mode == "confidence":
        return tau >= ALL_FUSED_TAU or c_g < tau
    if mode == "routing_head":
        return p_roi >= 0.5
    raise ValueError(f"routing mode must be one of {MODES}, got {mode!r}")


def infer(image: np.ndarray, model: CdiraModel, tau: float, mode: str = "confidence",
          flops: Optional[FlopsReport] = None, sample_id: int = 0) -> Tuple[int, RouteRecord]:
    """
    Single-image dynamic routing

    Easy samples (c_g >= tau in confidence mode) return the global prediction without
    touching saliency, pooling or the fused head.
    """
    if not 0 < tau <= ALL_FUSED_TAU:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    flops = flops or flops_estimate(model.config, model.n_classes)
    start = time.perf_counter()
    with no_grad():
        f = model.features(image)
        g = model.pooled(f)
        glob = model.global_head(g)
        a, p_roi = model.routing_head(g)
        c_g, a_val, p_val = float(glob.confidence[0]), float(a.data.reshape(-1)[0]), float(p_roi.reshape(-1)[0])
        if is_fused(c_g, p_val, tau, mode):
            fused, _ = model.roi_path(f, g)
            pred, path, charged = int(fused.data.argmax(axis=1)[0]), "fused", flops.f_global + flops.f_roi_extra
        else:
            pred, path, charged = int(glob.pred[0]), "global", flops.f_global
    record = RouteRecord(
        sample_id=sample_id, c_g=c_g, a=a_val, p_roi=p_val, path=path, flops_charged=charged, pred=pred,
        latency=time.perf_counter() - start
    )
    return pred, record


class RoutingEvaluator:
    """Batched routing over a split; fused predictions are computed once per sample and reused"""

    def __init__(self, model: CdiraModel, batch_size: int = 128, threads: int = 1,
                 flops: Optional[FlopsReport] = None, progress: bool = False):
        """
        Args:
            model: trained model
            batch_size: images per forward pass
            threads: worker threads for the global pass (results merged in sample order)
            flops: precomputed FLOPs report; derived from the model config when omitted
            progress: show tqdm progress bars over the batched passes
        """
        self.model = model
        self.batch_size = batch_size
        self.threads = max(1, threads)
        self.progress = progress
        self.flops = flops or flops_estimate(model.config, model.n_classes, model.n_domains)
        self._fused: Dict[int, int] = {}
        self._pass: Optional[GlobalPass] = None
        self._pass_key: Optional[tuple] = None

    def global_pass(self, images: np.ndarray) -> GlobalPass:
        key = (images.shape, zlib.crc32(np.ascontiguousarray(images).tobytes()))
        if self._pass is not None and self._pass_key == key:
            return self._pass

        def run(start: int):
            f = self.model.features(images[start:start + self.batch_size])
            g = self.model.pooled(f)
            logits = self.model.global_logits(g).data
            a = self.model.routing_logit(g).data.reshape(-1)
            return f.data, g.data, logits, a

        starts = list(range(0, len(images), self.batch_size))
        # the grad switch is process-wide, so it is flipped once around all workers
        with no_grad():
            if self.threads > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    parts = list(tqdm(pool.map(run, starts), total=len(starts), desc="global pass",
                                      disable=not self.progress, leave=False))
            else:
                parts = [run(s) for s in tqdm(starts, desc="global pass", disable=not self.progress, leave=False)]
        a = np.concatenate([p[3] for p in parts])
        glob = predict(np.concatenate([p[2] for p in parts]))
        self._pass = GlobalPass(
            features=np.concatenate([p[0] for p in parts]),
            g=np.concatenate([p[1] for p in parts]),
            pred=glob.pred,
            confidence=glob.confidence,
            a=a,
            p_roi=sigmoid(Tensor(a)).data
        )
        self._pass_key = key
        self._fused = {}
        return self._pass

    def fused_predictions(self, gp: GlobalPass, index: np.ndarray) -> np.ndarray:
        """Fused-head predictions for the given rows, evaluating only rows not seen before"""
        todo = np.array([i for i in index if int(i) not in self._fused], dtype=np.int64)
        with no_grad():
            starts = range(0, len(todo), self.batch_size)
            for start in tqdm(starts, desc="ROI path", disable=not self.progress, leave=False):
                rows = todo[start:start + self.batch_size]
                fused, _ = self.model.roi_path(Tensor(gp.features[rows]), Tensor(gp.g[rows]))
                for row, pred in zip(rows, fused.data.argmax(axis=1)):
                    self._fused[int(row)] = int(pred)
        return np.array([self._fused[int(i)] for i in index], dtype=np.int64)

    def route(self, images: np.ndarray, tau: float, mode: str = "confidence",
              sample_ids: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, List[RouteRecord]]:
        gp = self.global_pass(images)
        n = len(gp.pred)
        ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
        fused_mask = np.array([is_fused(gp.confidence[i], gp.p_roi[i], tau, mode) for i in range(n)], dtype=bool)
        preds = gp.pred.copy()
        hard = np.flatnonzero(fused_mask)
        if hard.size:
            preds[hard] = self.fused_predictions(gp, hard)
        f_global, f_fused = self.flops.f_global, self.flops.f_global + self.flops.f_roi_extra
        records = [
            RouteRecord(
                sample_id=int(ids[i]), c_g=float(gp.confidence[i]), a=float(gp.a[i]), p_roi=float(gp.p_roi[i]),
                path="fused" if fused_mask[i] else "global", flops_charged=f_fused if fused_mask[i] else f_global,
                pred=int(preds[i])
            )
            for i in range(n)
        ]
        return preds, records

    def global_only(self, images: np.ndarray) -> np.ndarray:
        return self.global_pass(images).pred.copy()

    def fused_only(self, images: np.ndarray) -> np.ndarray:
        gp = self.global_pass(images)
        return self.fused_predictions(gp, np.arange(len(gp.pred)))


def metrics(preds, labels, records: Optional[Sequence[RouteRecord]] = None,
            n_classes: Optional[int] = None) -> MetricsReport:
    """
    Accuracy plus macro precision/recall/F1 (0/0 -> 0)

    The macro average runs over range(n_classes) together with any class seen in labels or
    predictions; classes without test samples score 0 and are listed in absent_classes.
    """
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(preds) != len(labels) or len(labels) == 0:
        raise ValueError(f"need equal non-empty lengths, got {len(preds)} preds and {len(labels)} labels")
    classes = sorted(set(range(n_classes or 0)) | set(labels.tolist()) | set(preds.tolist()))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, preds, labels=classes, average=None, zero_division=0
    )
    absent = [c for c, s in zip(classes, support) if s == 0]
    if absent:
        logger.debug("classes without test samples: %s", absent)
    report = MetricsReport(
        accuracy=float((preds == labels).mean()),
        precision=float(np.mean(precision)),
        recall=float(np.mean(recall)),
        f1=float(np.mean(f1)),
        classes=[int(c) for c in classes],
        support=[int(s) for s in support],
        per_class_precision=[float(v) for v in precision],
        per_class_recall=[float(v) for v in recall],
        per_class_f1=[float(v) for v in f1],
        absent_classes=[int(c) for c in absent]
    )
    if records is not None:
        usage = classwise_roi_usage(records, labels)
        report.roi_usage = usage.overall
        report.roi_usage_per_class = usage.per_class
    return report


def classwise_roi_usage(records: Sequence[RouteRecord], labels) -> ClasswiseUsage:
    """Fused-path fraction per true class and overall"""
    labels = np.asarray(labels).reshape(-1)
    if len(records) != len(labels):
        raise ValueError(f"{len(records)} records for {len(labels)} labels")
    fused = np.array([r.path == "fused" for r in records], dtype=bool)
    per_class, counts = {}, {}
    for c in sorted(set(labels.tolist())):
        mask = labels == c
        counts[int(c)] = int(mask.sum())
        per_class[int(c)] = float(fused[mask].mean())
    overall = float(fused.mean()) if len(fused) else 0.0
    return ClasswiseUsage(overall=overall, per_class=per_class, counts=counts)


def total_flops(records: Sequence[RouteRecord]) -> int:
    return int(sum(r.flops_charged for r in records))


def tau_sweep(evaluator: RoutingEvaluator, images: np.ndarray, labels, grid: Sequence[float]) -> pd.DataFrame:
    """Macro F1, ROI usage and expected FLOPs per threshold, confidence mode"""
    rows = []
    n = len(labels)
    for tau in grid:
        preds, records = evaluator.route(images, tau, mode="confidence")
        usage = classwise_roi_usage(records, labels).overall
        report = metrics(preds, labels, n_classes=evaluator.model.n_classes)
        rows.append({
            "tau": float(tau),
            "f1": report.f1,
            "usage": usage,
            "expected_flops": total_flops(records) / n,
            "accuracy": report.accuracy,
        })
        logger.info("tau=%.2f usage=%.4f f1=%.4f", tau, usage, report.f1)
    return pd.DataFrame(rows, columns=["tau", "f1", "usage", "expected_flops", "accuracy"])


def robustness_eval(
    evaluator: RoutingEvaluator,
    images: np.ndarray,
    labels,
    kinds: Sequence[str],
    severities: Sequence[int],
    tau: float,
    mode: str = "confidence",
    seed: int = 0
) -> pd.DataFrame:
    """Accuracy and macro F1 of routed inference per (kind, severity)"""
    rows = []
    cells = [(kind, int(severity)) for kind in kinds for severity in severities]
    for kind, severity in tqdm(cells, desc="robustness", disable=not evaluator.progress):
        degraded = degrade_batch(images, DegradeSpec(kind, severity, seed))
        preds, records = evaluator.route(degraded, tau, mode)
        report = metrics(preds, labels, records, n_classes=evaluator.model.n_classes)
        rows.append({
            "kind": kind,
            "severity": severity,
            "accuracy": report.accuracy,
            "f1": report.f1,
            "roi_usage": report.roi_usage,
        })
        logger.info("%s severity %d: accuracy %.4f", kind, severity, report.accuracy)
    return pd.DataFrame(rows, columns=["kind", "severity", "accuracy", "f1", "roi_usage"])


def domain_probe(features: np.ndarray, domains, seed: int = 0) -> float:
    """Held-out accuracy of a linear probe predicting domain from frozen features"""
    features = np.asarray(features, dtype=np.float64)
    domains = np.asarray(domains).reshape(-1)
    if np.unique(domains).size < 2:
        raise ValueError("domain probe needs at least 2 domains")
    x_train, x_test, y_train, y_test = train_test_split(
        features, domains, test_size=0.5, random_state=seed, stratify=domains
    )
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
    probe.fit(x_train, y_train)
    return float(probe.score(x_test, y_test))


def pixel_statistics(images: np.ndarray) -> np.ndarray:
    """Per-channel mean and std of each image (raw-pixel probe features)"""
    images = np.asarray(images, dtype=np.float64)
    return np.concatenate([images.mean(axis=(1, 2)), images.std(axis=(1, 2))], axis=1)


def print_summary(report: MetricsReport, title: str = "EVALUATION"):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    print(f"  Accuracy:  {report.accuracy:.4f}")
    print(f"  Precision: {report.precision:.4f}")
    print(f"  Recall:    {report.recall:.4f}")
    print(f"  F1:        {report.f1:.4f}")
    if report.roi_usage is not None:
        print(f"  ROI usage: {report.roi_usage:.4f}")
    if report.absent_classes:
        print(f"  ⚠ classes absent from labels (scored 0): {report.absent_classes}")

"""
Loss terms for C-DIRA training
Routing pseudo-labels, weighted routing BCE, ROI usage penalty and the weighted total
"""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from src.autodiff import CdiraError, Tensor, add, mean, scale, sigmoid, softmax_xent, weighted_bce_with_logits
from src.config import TrainConfig


class TrainingDivergedError(CdiraError):
    """A loss term became NaN or infinite; carries the last finite state"""

    def __init__(self, message: str, last_good_params=None, history=None):
        super().__init__(message)
        self.last_good_params = last_good_params
        self.history = history or []


@dataclass
class RoutingSupervision:
    r_star: np.ndarray
    n_pos: int
    n_neg: int
    w_pos: float
    tau: float


@dataclass
class LossBundle:
    """The five loss terms with their fixed weights"""
    cls_g: float
    cls_f: float
    route: float
    route_reg: float
    dom: float
    lambda_g: float = 0.5
    lambda_f: float = 1.0
    lambda_route: float = 0.5
    lambda_reg: float = 0.01
    lambda_dom: float = 0.5

    @classmethod
    def weighted(cls, config: TrainConfig, **terms: float) -> "LossBundle":
        return cls(
            lambda_g=config.lambda_g,
            lambda_f=config.lambda_f,
            lambda_route=config.lambda_route,
            lambda_reg=config.lambda_reg,
            lambda_dom=config.lambda_dom,
            **terms
        )

    def terms(self) -> Dict[str, float]:
        return {"cls_g": self.cls_g, "cls_f": self.cls_f, "route": self.route, "route_reg": self.route_reg, "dom": self.dom}

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def routing_labels(preds, labels, confs, tau: float) -> np.ndarray:
    """r* = 1 when the global prediction is wrong or its confidence is below tau"""
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    confs = np.asarray(confs).reshape(-1)
    if not (len(preds) == len(labels) == len(confs)):
        raise ValueError(f"length mismatch: {len(preds)} preds, {len(labels)} labels, {len(confs)} confidences")
    return ((preds != labels) | (confs < tau)).astype(np.int64)


def pos_weight(r_star) -> float:
    """N_neg / N_pos when both are present, else 1"""
    r_star = np.asarray(r_star).reshape(-1)
    if r_star.size == 0:
        raise ValueError("pos_weight of an empty batch")
    n_pos = int(r_star.sum())
    n_neg = int(r_star.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return 1.0
    return n_neg / n_pos


def routing_supervision(preds, labels, confs, tau: float) -> RoutingSupervision:
    r_star = routing_labels(preds, labels, confs, tau)
    n_pos = int(r_star.sum())
    return RoutingSupervision(r_star=r_star, n_pos=n_pos, n_neg=int(r_star.size - n_pos), w_pos=pos_weight(r_star), tau=tau)


def route_loss(a, r_star, w_pos: float) -> Tensor:
    """Weighted BCE over routing logits a, via stable log-sigmoid"""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    r_star = np.asarray(r_star)
    if r_star.size != a.size:
        raise ValueError(f"{a.size} routing logits for {r_star.size} labels")
    return weighted_bce_with_logits(a, r_star.reshape(a.shape), w_pos)


def route_reg(a) -> Tensor:
    """Mean ROI usage probability, penalizing excessive routing"""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    if a.size == 0:
        raise ValueError("route_reg of an empty batch")
    return mean(sigmoid(a))


def class_loss(logits: Tensor, labels) -> Tensor:
    return softmax_xent(logits, labels)[1]


def total_loss(bundle: LossBundle) -> float:
    """lambda_g L_g + lambda_f L_f + lambda_route L_route + lambda_reg L_reg + lambda_dom L_dom"""
    for name, value in bundle.terms().items():
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss term {name} is {value}")
    return (
        bundle.lambda_g * bundle.cls_g
        + bundle.lambda_f * bundle.cls_f
        + bundle.lambda_route * bundle.route
        + bundle.lambda_reg * bundle.route_reg
        + bundle.lambda_dom * bundle.dom
    )


def weighted_sum(terms: Dict[str, Optional[Tensor]], weights: Dict[str, float]) -> Tensor:
    """Differentiable weighted total; terms that are None or weighted 0 are left out of the graph"""
    total = None
    for name, term in terms.items():
        weight = weights[name]
        if term is None or weight == 0:
            continue
        part = scale(term, weight)
        total = part if total is None else add(total, part)
    if total is None:
        raise ValueError("weighted_sum needs at least one active loss term")
    return total


def term_weights(config: TrainConfig) -> Dict[str, float]:
    return {
        "cls_g": config.lambda_g,
        "cls_f": config.lambda_f,
        "route": config.lambda_route,
        "route_reg": config.lambda_reg,
        "dom": config.lambda_dom,
    }

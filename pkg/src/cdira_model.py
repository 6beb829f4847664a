"""
C-DIRA model: backbone plus the five heads
Global classifier, saliency Top-K ROI pooling with refinement, fused classifier,
routing head and the gradient-reversed domain classifier
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from src.autodiff import (
    DTYPE, GrlConfig, ShapeError, Tensor, concat, gap, grl_apply, linear, linear_relu, mean_select,
    no_grad, sigmoid, softmax
)
from src.backbone import extract_features, init_backbone, kaiming_uniform, output_shape
from src.config import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class GlobalPrediction:
    """Global-path outputs for a batch"""
    logits: np.ndarray  # (B, C)
    probs: np.ndarray  # (B, C)
    pred: np.ndarray  # (B,) argmax, lowest index on ties
    confidence: np.ndarray  # (B,) c_g = probs[pred]


@dataclass
class RoiSelection:
    """Top-K cells chosen per sample"""
    k: int
    index: np.ndarray  # (B, k) flat row-major cell indices, ascending
    width: int

    def positions(self, row: int = 0) -> List[Tuple[int, int]]:
        return [(int(i) // self.width, int(i) % self.width) for i in self.index[row]]


@dataclass
class ForwardOutput:
    """Everything one training step needs from a forward pass"""
    features: Tensor
    g: Tensor
    global_logits: Tensor
    fused_logits: Tensor
    route_logit: Tensor
    domain_logits: Optional[Tensor]
    selection: RoiSelection


class ModelParams:
    """Ordered name -> Tensor mapping; buffers are the tensors that do not require grad"""

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None, version: int = 1):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict(tensors or {})
        self.version = version

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, tensor: Tensor):
        self.tensors[name] = tensor

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> List[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def count(self, prefix: str = "") -> int:
        return int(sum(t.size for name, t in self.tensors.items() if t.requires_grad and name.startswith(prefix)))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.tensors.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        if strict and set(state) != set(self.tensors):
            missing = sorted(set(self.tensors) - set(state))
            unexpected = sorted(set(state) - set(self.tensors))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, array in state.items():
            if name not in self.tensors:
                continue
            target = self.tensors[name]
            if tuple(array.shape) != target.shape:
                raise ShapeError(f"{name}: stored shape {tuple(array.shape)} != model shape {target.shape}")
            target.data = np.array(array, dtype=DTYPE, copy=True)
            target.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams(
            OrderedDict(
                (name, Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name))
                for name, t in self.tensors.items()
            ),
            version=self.version
        )


def _dense(rng: np.random.Generator, name: str, n_in: int, n_out: int) -> Dict[str, Tensor]:
    return {
        f"{name}.w": Tensor(kaiming_uniform(rng, (n_out, n_in), n_in), requires_grad=True, name=f"{name}.w"),
        f"{name}.b": Tensor(np.zeros(n_out, dtype=DTYPE), requires_grad=True, name=f"{name}.b"),
    }


class CdiraModel:
    """Dual-path classifier with routing and domain heads"""

    def __init__(self, config: RunConfig, n_classes: int, seed: Optional[int] = None, n_domains: Optional[int] = None):
        """
        Build and initialize all parameters

        Args:
            config: run configuration (backbone and head widths)
            n_classes: number of behavior classes C
            seed: initialization seed (defaults to train.seed)
            n_domains: K*, number of pseudo-domains; the domain head can also be attached later
        """
        if n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {n_classes}")
        self.config = config
        self.n_classes = n_classes
        self.n_domains: Optional[int] = None
        self.seed = config.train.seed if seed is None else seed
        self.k = config.topk()
        c_f, height, width = output_shape(config.backbone)
        if not 1 <= self.k <= height * width:
            raise ValueError(f"topk must lie in [1, {height * width}], got {self.k}")
        self.feature_shape = (c_f, height, width)
        self.roi_evaluations = 0

        m = config.model
        rng = np.random.default_rng([self.seed, 0])
        params: Dict[str, Tensor] = dict(init_backbone(config.backbone, rng))
        params.update(_dense(rng, "global.hidden", c_f, m.global_hidden))
        params.update(_dense(rng, "global.out", m.global_hidden, n_classes))
        params.update(_dense(rng, "route.hidden", c_f, m.route_hidden))
        params.update(_dense(rng, "route.out", m.route_hidden, 1))
        params.update(_dense(rng, "roi.refine", c_f, m.roi_dim))
        params.update(_dense(rng, "fused.hidden", c_f + m.roi_dim, m.fused_hidden))
        params.update(_dense(rng, "fused.out", m.fused_hidden, n_classes))
        self.params = ModelParams(params)

        if n_domains is not None:
            self.attach_domain_head(n_domains)

    def attach_domain_head(self, n_domains: int, seed: Optional[int] = None):
        """(Re)create the domain classifier for K* pseudo-domains"""
        if n_domains < 2:
            raise ValueError(f"domain head needs at least 2 pseudo-domains, got {n_domains}")
        c_f = self.feature_shape[0]
        rng = np.random.default_rng([self.seed if seed is None else seed, 1])
        for name in [n for n in self.params if n.startswith("domain.")]:
            del self.params.tensors[name]
        for name, tensor in {
            **_dense(rng, "domain.hidden", c_f, self.config.model.domain_hidden),
            **_dense(rng, "domain.out", self.config.model.domain_hidden, n_domains),
        }.items():
            self.params[name] = tensor
        self.n_domains = n_domains

    # -- heads ---------------------------------------------------------------

    def features(self, images) -> Tensor:
        return extract_features(images, self.params.tensors, self.config.backbone)

    def pooled(self, f: Tensor) -> Tensor:
        return gap(f)

    def global_logits(self, g: Tensor) -> Tensor:
        p = self.params
        hidden = linear_relu(p["global.hidden.w"], p["global.hidden.b"], g)
        return linear(hidden, p["global.out.w"], p["global.out.b"])

    def global_head(self, g: Tensor) -> GlobalPrediction:
        return predict(self.global_logits(g).data)

    @staticmethod
    def saliency(f) -> np.ndarray:
        """Channel-wise L2 norm per cell; (C,H,W) -> (H,W), (B,C,H,W) -> (B,H,W)"""
        data = f.data if isinstance(f, Tensor) else np.asarray(f)
        if data.ndim not in (3, 4):
            raise ShapeError(f"saliency expects (C,H,W) or (B,C,H,W), got {data.shape}")
        return np.sqrt(np.square(data).sum(axis=-3))

    @staticmethod
    def select_topk(s: np.ndarray, k: int) -> RoiSelection:
        """k most salient cells, ties resolved in row-major order"""
        s = np.asarray(s)
        if s.ndim == 2:
            s = s[None]
        batch, height, width = s.shape
        if not 1 <= k <= height * width:
            raise ValueError(f"k must lie in [1, {height * width}], got {k}")
        flat = s.reshape(batch, height * width)
        order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
        return RoiSelection(k=k, index=np.sort(order, axis=1), width=width)

    def topk_roi_pool(self, f, s: np.ndarray, k: int) -> Tuple[Tensor, RoiSelection]:
        """Mean feature vector over the Top-K cells; gradient reaches only those cells"""
        f = f if isinstance(f, Tensor) else Tensor(f)
        selection = self.select_topk(s, k)
        index = selection.index[0] if f.data.ndim == 3 else selection.index
        return mean_select(f, index), selection

    def roi_refine(self, r: Tensor) -> Tensor:
        p = self.params
        return linear_relu(p["roi.refine.w"], p["roi.refine.b"], r)

    def fused_logits(self, g: Tensor, r_tilde: Tensor) -> Tensor:
        p = self.params
        u = concat(g, r_tilde)
        hidden = linear_relu(p["fused.hidden.w"], p["fused.hidden.b"], u)
        return linear(hidden, p["fused.out.w"], p["fused.out.b"])

    def fused_head(self, g: Tensor, r_tilde: Tensor) -> np.ndarray:
        return softmax(self.fused_logits(g, r_tilde).data)

    def roi_path(self, f: Tensor, g: Tensor) -> Tuple[Tensor, RoiSelection]:
        """Saliency -> Top-K pooling -> refinement -> fused logits"""
        batch = 1 if f.data.ndim == 3 else f.shape[0]
        self.roi_evaluations += batch
        r, selection = self.topk_roi_pool(f, self.saliency(f), self.k)
        return self.fused_logits(g, self.roi_refine(r)), selection

    def routing_logit(self, g: Tensor) -> Tensor:
        p = self.params
        hidden = linear_relu(p["route.hidden.w"], p["route.hidden.b"], g)
        return linear(hidden, p["route.out.w"], p["route.out.b"])

    def routing_head(self, g: Tensor) -> Tuple[Tensor, np.ndarray]:
        """Routing logit a with shape (..., 1) and p_roi = sigmoid(a)"""
        a = self.routing_logit(g)
        return a, sigmoid(a).data

    def domain_logits(self, g: Tensor, grl: GrlConfig) -> Tensor:
        if self.n_domains is None or self.n_domains < 2:
            raise ValueError("domain head needs at least 2 pseudo-domains; attach it after clustering")
        p = self.params
        hidden = linear_relu(p["domain.hidden.w"], p["domain.hidden.b"], grl_apply(g, grl))
        return linear(hidden, p["domain.out.w"], p["domain.out.b"])

    def domain_head(self, g: Tensor, grl: GrlConfig) -> np.ndarray:
        return softmax(self.domain_logits(g, grl).data)

    # -- passes --------------------------------------------------------------

    def forward(self, images, grl: Optional[GrlConfig] = None) -> ForwardOutput:
        """Full training graph: every sample goes through the ROI path"""
        f = self.features(images)
        g = self.pooled(f)
        fused, selection = self.roi_path(f, g)
        domain = self.domain_logits(g, grl) if grl is not None and self.n_domains is not None else None
        return ForwardOutput(
            features=f,
            g=g,
            global_logits=self.global_logits(g),
            fused_logits=fused,
            route_logit=self.routing_logit(g),
            domain_logits=domain,
            selection=selection
        )

    def embed(self, images, batch_size: int = 128) -> np.ndarray:
        """GAP embeddings without building a graph"""
        images = np.asarray(images)
        rows = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                rows.append(self.pooled(self.features(images[start:start + batch_size])).data)
        return np.concatenate(rows, axis=0).astype(DTYPE, copy=False)

    def parameter_count(self) -> int:
        return self.params.count()


def predict(logits: np.ndarray) -> GlobalPrediction:
    logits = np.atleast_2d(np.asarray(logits))
    probs = softmax(logits)
    pred = probs.argmax(axis=1)
    confidence = probs[np.arange(len(pred)), pred]
    return GlobalPrediction(logits=logits, probs=probs, pred=pred, confidence=confidence)

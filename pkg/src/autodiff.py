"""
Reverse-mode differentiation core for the C-DIRA graph
Tensors wrap numpy arrays (float32 during training); each differentiable op is a Function
subclass with an explicit forward and backward
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float32

_grad_enabled = True


class CdiraError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(CdiraError, ValueError):
    """Operand shapes do not fit the operation"""


@dataclass(frozen=True)
class GrlConfig:
    """Gradient reversal scale"""
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"GRL lambda must be non-negative, got {self.lam}")


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense array with an optional gradient buffer and a link to the op that produced it"""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        creator: Optional["Function"] = None,
        name: str = ""
    ):
        array = np.asarray(data)
        if array.dtype.kind != "f":
            array = array.astype(DTYPE)
        self.data = array
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph"""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.data.shape}")

        order = _topological_order(self)
        self.grad = np.ones_like(self.data)

        # Reverse topological order: each node is visited once, after all its consumers
        for node in reversed(order):
            if node.creator is None or node.grad is None:
                continue
            input_grads = node.creator.backward(node.grad)
            for inp, grad in zip(node.creator.inputs, input_grads):
                if grad is not None and inp.requires_grad:
                    inp._accumulate(grad)
            # intermediate buffers are no longer needed once propagated
            if node is not self:
                node.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"


def _topological_order(root: Tensor) -> List[Tensor]:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.inputs:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Function:
    """
    Base class for differentiable operations

    forward receives the input arrays and returns the output array; backward receives
    dL/d(output) and returns one gradient (or None) per input
    """
    kind = "function"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.kind}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.kind}")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _spatial_mean(flat: np.ndarray) -> np.ndarray:
    # shared by gap and Top-K pooling so that k = H*W reproduces gap bit for bit
    flat = np.ascontiguousarray(flat)
    return flat.sum(axis=-1) / flat.shape[-1]


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

class Conv2d(Function):
    kind = "conv2d"

    def forward(self, x, w, b, stride: int = 1, padding: str = "same"):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects (B,C,H,W) input and (O,C,kh,kw) weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d input has {x.shape[1]} channels, weight expects {w.shape[1]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d bias {b.shape} does not match {w.shape[0]} output channels")
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

        batch, channels, height, width = x.shape
        out_channels, _, kh, kw = w.shape
        pad_h, pad_w = (kh // 2, kw // 2) if padding == "same" else (0, 0)
        out_h = (height + 2 * pad_h - kh) // stride + 1
        out_w = (width + 2 * pad_w - kw) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {w.shape}")

        x_pad = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w))) if pad_h or pad_w else x
        windows = np.lib.stride_tricks.sliding_window_view(x_pad, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kh * kw)
        w_mat = w.reshape(out_channels, -1)

        out = cols @ w_mat.T + b
        self.cols = cols
        self.meta = (x.shape, x_pad.shape, stride, pad_h, pad_w, out_h, out_w)
        return np.ascontiguousarray(out.reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2))

    def backward(self, grad):
        x, w, _ = (t.data for t in self.inputs)
        x_shape, pad_shape, stride, pad_h, pad_w, out_h, out_w = self.meta
        batch, channels = x_shape[0], x_shape[1]
        out_channels, _, kh, kw = w.shape

        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g2.T @ self.cols).reshape(w.shape)
        grad_b = g2.sum(axis=0)

        dcols = (g2 @ w.reshape(out_channels, -1)).reshape(batch, out_h, out_w, channels, kh, kw)
        dx_pad = np.zeros(pad_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dx_pad[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = dx_pad[:, :, pad_h:pad_shape[2] - pad_h, pad_w:pad_shape[3] - pad_w]
        return np.ascontiguousarray(grad_x), grad_w, grad_b


class Linear(Function):
    kind = "linear"

    def forward(self, x, w, b):
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear weight {w.shape} does not accept input with {x.shape[-1]} features")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear bias {b.shape} does not match {w.shape[0]} outputs")
        return x @ w.T + b

    def backward(self, grad):
        x, w, _ = (t.data for t in self.inputs)
        x2 = x.reshape(-1, w.shape[1])
        g2 = grad.reshape(-1, w.shape[0])
        return (g2 @ w).reshape(x.shape), g2.T @ x2, g2.sum(axis=0)


class ReLU(Function):
    kind = "relu"

    def forward(self, x):
        self.mask = x > 0
        # np.maximum keeps NaN so a diverged input still surfaces in the loss
        return np.maximum(x, np.zeros_like(x))

    def backward(self, grad):
        # subgradient at exactly 0 is 0
        return (grad * self.mask,)


class GlobalAvgPool(Function):
    kind = "gap"

    def forward(self, f):
        if f.ndim < 3 or f.shape[-1] < 1 or f.shape[-2] < 1:
            raise ShapeError(f"gap needs a non-empty spatial extent, got shape {f.shape}")
        self.spatial = f.shape[-2:]
        return _spatial_mean(f.reshape(*f.shape[:-2], -1))

    def backward(self, grad):
        height, width = self.spatial
        share = grad / (height * width)
        return (np.broadcast_to(share[..., None, None], grad.shape + (height, width)).copy(),)


class MeanSelect(Function):
    """Mean over a chosen set of spatial cells; gradient reaches only those cells"""
    kind = "mean-select"

    def forward(self, f, index: np.ndarray = None):
        self.f_shape = f.shape
        self.single = f.ndim == 3
        index = np.asarray(index, dtype=np.int64)
        if self.single:
            f, index = f[None], index[None]
        if f.ndim != 4:
            raise ShapeError(f"mean-select expects (C,H,W) or (B,C,H,W), got {self.f_shape}")
        batch, channels, height, width = f.shape
        if index.ndim != 2 or index.shape[0] != batch:
            raise ShapeError(f"selection index must be (B,k) with B={batch}, got {index.shape}")
        self.index = index
        flat = f.reshape(batch, channels, height * width)
        picked = np.take_along_axis(flat, np.broadcast_to(index[:, None, :], (batch, channels, index.shape[1])), axis=2)
        out = _spatial_mean(picked)
        return out[0] if self.single else out

    def backward(self, grad):
        if self.single:
            grad = grad[None]
        batch, k = self.index.shape
        channels = grad.shape[1]
        height, width = self.f_shape[-2:]
        dflat = np.zeros((batch, channels, height * width), dtype=grad.dtype)
        values = np.broadcast_to((grad / k)[:, :, None], (batch, channels, k))
        np.put_along_axis(dflat, np.broadcast_to(self.index[:, None, :], (batch, channels, k)), values, axis=2)
        return (dflat.reshape(self.f_shape),)


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy over the batch, fused with log-softmax"""
    kind = "softmax"

    def forward(self, logits, labels: np.ndarray = None):
        if logits.shape[-1] == 0:
            raise ShapeError("softmax over zero classes")
        logits2 = logits.reshape(-1, logits.shape[-1])
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != logits2.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {logits2.shape[0]} rows of logits")
        n_classes = logits2.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")

        shifted = logits2 - logits2.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        self.probs = np.exp(log_probs)
        self.labels = labels
        self.logits_shape = logits.shape
        picked = log_probs[np.arange(labels.shape[0]), labels]
        return np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward(self, grad):
        rows = self.labels.shape[0]
        dlogits = self.probs.copy()
        dlogits[np.arange(rows), self.labels] -= 1
        dlogits *= grad / rows
        return (dlogits.reshape(self.logits_shape),)


class Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, x):
        self.out = _stable_sigmoid(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Concat(Function):
    kind = "concat"

    def forward(self, a, b):
        if a.shape[:-1] != b.shape[:-1]:
            raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along the last axis")
        self.split = a.shape[-1]
        return np.concatenate([a, b], axis=-1)

    def backward(self, grad):
        return grad[..., :self.split], grad[..., self.split:]


class GradReverse(Function):
    """Identity forward, -lambda scaled gradient backward"""
    kind = "grl"

    def forward(self, x, lam: float = 1.0):
        self.lam = float(lam)
        return x.copy()

    def backward(self, grad):
        return (grad * -self.lam,)


class Scale(Function):
    kind = "scale"

    def forward(self, x, factor: float = 1.0):
        self.factor = float(factor)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Mean(Function):
    kind = "mean"

    def forward(self, x):
        self.x_shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.x_shape, grad / np.prod(self.x_shape), dtype=grad.dtype),)


class WeightedBCEWithLogits(Function):
    """-(1/B) sum[w_pos r log sig(a) + (1-r) log(1-sig(a))] using stable log-sigmoid"""
    kind = "bce"

    def forward(self, a, targets: np.ndarray = None, pos_weight: float = 1.0):
        targets = np.asarray(targets, dtype=a.dtype).reshape(a.shape)
        self.targets = targets
        self.pos_weight = float(pos_weight)
        # log sig(a) = -softplus(-a); log(1 - sig(a)) = -softplus(a)
        per_sample = self.pos_weight * targets * np.logaddexp(0, -a) + (1 - targets) * np.logaddexp(0, a)
        self.sig = _stable_sigmoid(a)
        return np.asarray(per_sample.mean(), dtype=a.dtype)

    def backward(self, grad):
        r, w, s = self.targets, self.pos_weight, self.sig
        da = (-w * r * (1 - s) + (1 - r) * s) / r.size
        return (grad * da,)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    positive = x >= 0
    z = np.exp(np.where(positive, -x, x))
    return np.where(positive, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def conv2d(x, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    return Conv2d.apply(_as_tensor(x), w, b, stride=stride, padding=padding)


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(_as_tensor(x), w, b)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def linear_relu(w: Tensor, b: Tensor, x) -> Tensor:
    """max(0, Wx + b)"""
    return relu(linear(x, w, b))


def gap(f) -> Tensor:
    return GlobalAvgPool.apply(_as_tensor(f))


def mean_select(f, index: np.ndarray) -> Tensor:
    return MeanSelect.apply(_as_tensor(f), index=index)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction"""
    logits = np.asarray(logits)
    if logits.shape[-1] == 0:
        raise ShapeError("softmax over zero classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, label) -> Tuple[np.ndarray, Tensor]:
    """Returns (probs, mean cross-entropy loss)"""
    logits = _as_tensor(logits)
    loss = SoftmaxCrossEntropy.apply(logits, labels=np.atleast_1d(label))
    probs = loss.creator.probs if loss.creator is not None else softmax(logits.data.reshape(-1, logits.shape[-1]))
    return probs.reshape(logits.shape), loss


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(_as_tensor(x))


def concat(a: Tensor, b: Tensor) -> Tensor:
    return Concat.apply(a, b)


def grl_apply(x: Tensor, cfg: GrlConfig) -> Tensor:
    return GradReverse.apply(_as_tensor(x), lam=cfg.lam)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


def weighted_bce_with_logits(a: Tensor, targets, pos_weight: float = 1.0) -> Tensor:
    return WeightedBCEWithLogits.apply(a, targets=targets, pos_weight=pos_weight)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar graph w.r.t. one parameter"""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = float(np.asarray(fn().data).reshape(-1)[0])
        flat[i] = original - eps
        minus = float(np.asarray(fn().data).reshape(-1)[0])
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2 * eps)
    return grad


def grad_check(
    fn: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Dict[str, Tensor]],
    eps: float = 1e-3,
    dtype=np.float64,
    floor: float = 1e-6
) -> float:
    """
    Compare analytic gradients against central finite differences

    Args:
        fn: builds the graph from the given parameters and returns its output
        params: parameters to check (their data is cast to dtype for the check and restored after)
        eps: finite-difference step
        dtype: precision used for the check
        floor: denominator floor for gradients that are exactly zero

    Returns:
        Worst relative error |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    originals = [(t.data, t.requires_grad) for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(dtype, copy=True)
            t.requires_grad = True
            t.grad = None

        out = fn()
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar output, got shape {out.data.shape}")
        if out.creator is not None:
            out.backward()

        worst = 0.0
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = numerical_gradient(fn, t, eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            err = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
            worst = max(worst, err)
        logger.debug("grad_check worst relative error %.3e over %d tensors", worst, len(tensors))
        return worst
    finally:
        for t, (data, requires_grad) in zip(tensors, originals):
            t.data = data
            t.requires_grad = requires_grad
            t.grad = None


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None

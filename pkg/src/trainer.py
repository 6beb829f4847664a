"""
Training loop for C-DIRA
Global-only warm-up, then joint optimization of all five loss terms with early stopping
on validation total loss
"""

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from tqdm import tqdm

from src.autodiff import GrlConfig, Tensor, no_grad, zero_grads
from src.cdira_model import CdiraModel, ModelParams, predict
from src.config import TrainConfig
from src.losses import (
    LossBundle, TrainingDivergedError, class_loss, route_loss, route_reg, routing_supervision, term_weights,
    total_loss, weighted_sum
)
from src.reporting import append_jsonl

logger = logging.getLogger(__name__)

BRIGHTNESS_DELTA = 0.1


@dataclass
class Split:
    """Arrays for one dataset split"""
    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray  # (N,)
    domains: Optional[np.ndarray] = None  # (N,) pseudo-domain labels
    ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray) -> "Split":
        return Split(
            images=self.images[index],
            labels=self.labels[index],
            domains=None if self.domains is None else self.domains[index],
            ids=None if self.ids is None else self.ids[index]
        )


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_total: float
    terms: Dict[str, float]
    val_total: Optional[float]
    val_accuracy_fused: Optional[float]
    val_accuracy_global: Optional[float]
    routing_pos_rate: Optional[float]
    domain_accuracy: Optional[float]


@dataclass
class TrainResult:
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    stopped_early: bool
    snapshot_id: str = ""
    history: List[EpochRecord] = field(default_factory=list)


class AdamW:
    """Adam with decoupled weight decay"""

    def __init__(self, params: List[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        zero_grads(self.params)


class EarlyStopping:
    """Stops after `patience` epochs without a strict improvement"""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch; returns True when training should stop"""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def augmentation_rng(seed: int, epoch: int) -> np.random.Generator:
    """Generator behind the flip/brightness augmentation of one joint-training epoch"""
    return np.random.default_rng([seed, 20_000 + epoch])


def snapshot_id(params: ModelParams) -> str:
    crc = 0
    for name, tensor in params.items():
        crc = zlib.crc32(name.encode("utf-8"), crc)
        crc = zlib.crc32(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes(), crc)
    return f"{crc:08x}"


class Trainer:
    """Runs warm-up and joint training of a CdiraModel"""

    def __init__(
        self,
        model: CdiraModel,
        config: TrainConfig,
        tau: float = 0.9,
        history_path: Optional[Union[str, Path]] = None,
        progress: bool = True
    ):
        """
        Args:
            model: model to train in place
            config: optimizer, loss weights, schedule and augmentation settings
            tau: confidence threshold used for routing pseudo-labels
            history_path: JSON-lines file receiving one record per epoch
            progress: show tqdm progress bars
        """
        self.model = model
        self.config = config
        self.tau = tau
        self.history_path = Path(history_path) if history_path else None
        self.progress = progress
        self.grl = GrlConfig(config.grl_lambda)
        self.weights = term_weights(config)
        self.history: List[EpochRecord] = []
        self.optimizer: Optional[AdamW] = None
        if config.hflip:
            logger.warning("horizontal flip is enabled; it mirrors position-coded class cues")
        if self.history_path is not None:
            self.history_path.parent.mkdir(parents=True, exist_ok=True)
            self.history_path.write_text("", encoding="utf-8")

    def _make_optimizer(self) -> AdamW:
        c = self.config
        return AdamW(self.model.params.trainable(), c.lr, (c.beta1, c.beta2), c.adam_eps, c.weight_decay)

    def _augment(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not (self.config.hflip or self.config.augment_brightness):
            return images
        images = images.copy()
        if self.config.hflip:
            flip = rng.random(len(images)) < 0.5
            images[flip] = images[flip][:, :, ::-1]
        if self.config.augment_brightness:
            shift = rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA, size=(len(images), 1, 1, 1))
            images = np.clip(images + shift, 0.0, 1.0).astype(images.dtype)
        return images

    def _batches(self, n: int, epoch: int):
        order = np.random.default_rng([self.config.seed, epoch]).permutation(n)
        size = self.config.batch_size
        for start in range(0, n, size):
            yield order[start:start + size]

    def _record(self, record: EpochRecord):
        self.history.append(record)
        if self.history_path is not None:
            append_jsonl(record, self.history_path)

    # -- warm-up ---------------------------------------------------------------

    def warmup(self, train: Split, epochs: Optional[int] = None) -> ModelParams:
        """Global-head-only epochs; returns the frozen snapshot used for clustering"""
        epochs = self.config.warmup_epochs if epochs is None else epochs
        self.optimizer = self.optimizer or self._make_optimizer()
        for epoch in tqdm(range(epochs), desc="warm-up", disable=not self.progress, leave=False):
            rng = np.random.default_rng([self.config.seed, 10_000 + epoch])
            losses = []
            for index in self._batches(len(train), 10_000 + epoch):
                self.optimizer.zero_grad()
                images = self._augment(train.images[index], rng)
                g = self.model.pooled(self.model.features(images))
                loss = class_loss(self.model.global_logits(g), train.labels[index])
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(f"warm-up loss is {loss.item()}", history=self.history)
                loss.backward()
                self.optimizer.step()
                losses.append(loss.item())
            mean = float(np.mean(losses))
            self._record(EpochRecord(
                epoch=epoch, phase="warmup", train_total=mean, terms={"cls_g": mean}, val_total=None,
                val_accuracy_fused=None, val_accuracy_global=None, routing_pos_rate=None,
                domain_accuracy=None
            ))
            logger.info("warm-up epoch %d: L_cls_g %.4f", epoch, mean)
        self.optimizer.zero_grad()
        return self.model.params.clone()

    # -- joint training ----------------------------------------------------------

    def compute_losses(self, images: np.ndarray, labels: np.ndarray, domains: Optional[np.ndarray]):
        """Forward pass and the five loss terms for one batch"""
        use_domain = domains is not None and self.model.n_domains is not None
        out = self.model.forward(images, self.grl if use_domain else None)
        glob = predict(out.global_logits.data)
        supervision = routing_supervision(glob.pred, labels, glob.confidence, self.tau)
        terms: Dict[str, Optional[Tensor]] = {
            "cls_g": class_loss(out.global_logits, labels),
            "cls_f": class_loss(out.fused_logits, labels),
            "route": route_loss(out.route_logit, supervision.r_star, supervision.w_pos),
            "route_reg": route_reg(out.route_logit),
            "dom": class_loss(out.domain_logits, domains) if use_domain else None,
        }
        values = {name: (term.item() if term is not None else 0.0) for name, term in terms.items()}
        bundle = LossBundle.weighted(self.config, **values)
        stats = {
            "total": total_loss(bundle),
            "pos_rate": supervision.n_pos / len(labels),
            "fused_correct": int((out.fused_logits.data.argmax(axis=1) == labels).sum()),
            "global_correct": int((glob.pred == labels).sum()),
            "domain_correct": int((out.domain_logits.data.argmax(axis=1) == domains).sum()) if use_domain else 0,
        }
        return terms, bundle, stats

    def train_step(self, images: np.ndarray, labels: np.ndarray, domains: Optional[np.ndarray] = None):
        self.optimizer = self.optimizer or self._make_optimizer()
        self.optimizer.zero_grad()
        terms, bundle, stats = self.compute_losses(images, labels, domains)
        weighted_sum(terms, self.weights).backward()
        self.optimizer.step()
        return bundle, stats

    def evaluate_loss(self, split: Split) -> Dict[str, float]:
        totals, fused, glob, n = 0.0, 0, 0, len(split)
        with no_grad():
            for start in range(0, n, self.config.batch_size):
                index = np.arange(start, min(n, start + self.config.batch_size))
                domains = None if split.domains is None else split.domains[index]
                _, _, stats = self.compute_losses(split.images[index], split.labels[index], domains)
                totals += stats["total"] * len(index)
                fused += stats["fused_correct"]
                glob += stats["global_correct"]
        return {"total": totals / n, "fused_accuracy": fused / n, "global_accuracy": glob / n}

    def train(self, train: Split, val: Split, start_epoch: int = 0) -> TrainResult:
        """
        Joint training until `max_epochs` or early stopping

        Returns the result for the best-validation epoch; the model is left holding
        the best parameters.
        """
        if len(train) == 0 or len(val) == 0:
            raise ValueError("train and validation splits must be non-empty")
        cfg = self.config
        # fresh optimizer: the domain head is attached after warm-up
        self.optimizer = self._make_optimizer()
        stopper = EarlyStopping(cfg.patience)
        best_params = self.model.params.clone()
        last_good = self.model.params.clone()
        epochs_run = 0
        stopped = False

        bar = tqdm(range(start_epoch, start_epoch + cfg.max_epochs), desc="training", disable=not self.progress)
        for epoch in bar:
            rng = augmentation_rng(cfg.seed, epoch)
            sums: Dict[str, float] = {}
            n_seen, pos, dom_correct = 0, 0.0, 0
            try:
                for index in self._batches(len(train), epoch):
                    domains = None if train.domains is None else train.domains[index]
                    bundle, stats = self.train_step(self._augment(train.images[index], rng), train.labels[index], domains)
                    for name, value in {**bundle.terms(), "total": stats["total"]}.items():
                        sums[name] = sums.get(name, 0.0) + value * len(index)
                    pos += stats["pos_rate"] * len(index)
                    dom_correct += stats["domain_correct"]
                    n_seen += len(index)
                val_stats = self.evaluate_loss(val)
                if not np.isfinite(val_stats["total"]):
                    raise TrainingDivergedError(f"validation loss is {val_stats['total']}")
            except TrainingDivergedError as e:
                self.model.params.load_state_dict(last_good.state_dict())
                raise TrainingDivergedError(f"epoch {epoch}: {e}", last_good_params=last_good, history=self.history) from e

            epochs_run += 1
            means = {name: value / n_seen for name, value in sums.items()}
            self._record(EpochRecord(
                epoch=epoch,
                phase="train",
                train_total=means.pop("total"),
                terms=means,
                val_total=val_stats["total"],
                val_accuracy_fused=val_stats["fused_accuracy"],
                val_accuracy_global=val_stats["global_accuracy"],
                routing_pos_rate=pos / n_seen,
                domain_accuracy=dom_correct / n_seen if train.domains is not None and self.model.n_domains else None
            ))
            bar.set_postfix(val=f"{val_stats['total']:.4f}", acc=f"{val_stats['fused_accuracy']:.3f}")
            last_good = self.model.params.clone()

            should_stop = stopper.update(val_stats["total"], epoch)
            if stopper.best_epoch == epoch:
                best_params = last_good
            if should_stop:
                stopped = True
                logger.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
                break

        self.model.params.load_state_dict(best_params.state_dict())
        result = TrainResult(
            best_epoch=stopper.best_epoch,
            best_val_loss=float(stopper.best),
            epochs_run=epochs_run,
            stopped_early=stopped,
            history=list(self.history)
        )
        self._print_summary(result)
        return result

    def _print_summary(self, result: TrainResult):
        print("\n" + "=" * 60)
        print("TRAINING SUMMARY")
        print("=" * 60)
        print(f"  Epochs run:      {result.epochs_run}")
        print(f"  Best epoch:      {result.best_epoch}")
        print(f"  Best val loss:   {result.best_val_loss:.4f}")
        train_records = [r for r in result.history if r.phase == "train"]
        if train_records:
            best = next((r for r in train_records if r.epoch == result.best_epoch), train_records[-1])
            print(f"  Val acc (fused): {best.val_accuracy_fused:.4f}")
            print(f"  Val acc (global):{best.val_accuracy_global:.4f}")
            first, last = train_records[0].routing_pos_rate, train_records[-1].routing_pos_rate
            status = "✓" if last <= first else "⚠"
            print(f"  {status} Routing positive rate {first:.3f} -> {last:.3f}")
        if result.stopped_early:
            print("  ✓ Stopped early on validation loss")

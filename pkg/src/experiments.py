"""
Experiment pipelines built from the engines
Dataset assembly, warm-up + pseudo-domain clustering + joint training, LOCO evaluation
and the component ablation
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from configs.configurations import MANIFEST_NAME
from src.backbone import fit_normalization
from src.cdira_model import CdiraModel
from src.config import RunConfig
from src.data_synth import (
    DatasetError, Sample, generate_dataset, load_image_folder, load_manifest, stack_images, stack_labels,
    stratified_split
)
from src.evaluation import RoutingEvaluator, metrics
from src.pseudo_domain import GROUPS, ClusterModel, PseudoDomainLabeler, assign_domains, tercile_groups
from src.trainer import Split, Trainer, TrainResult, snapshot_id

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
VARIANTS = ("full", "no_roi", "no_adversarial", "no_routing")
# variants that only differ at inference share one trained model
TRAINED_AS = {"full": "full", "no_roi": "no_roi", "no_adversarial": "no_adversarial", "no_routing": "full"}


@dataclass
class Dataset:
    """Samples of all three splits plus their stacked arrays"""
    samples: Dict[str, List[Sample]]
    splits: Dict[str, Split]
    n_classes: int

    def boxes(self, split: str) -> list:
        return [s.box for s in self.samples[split]]


@dataclass
class PipelineResult:
    model: CdiraModel
    cluster: Optional[ClusterModel]
    domains: Dict[str, np.ndarray]
    train_result: Optional[TrainResult]
    snapshot_id: str = ""


@dataclass
class ClusterStage:
    model: CdiraModel
    cluster: ClusterModel
    domains: Dict[str, np.ndarray] = field(default_factory=dict)
    snapshot_id: str = ""


def to_split(samples: Sequence[Sample], domains: Optional[np.ndarray] = None) -> Split:
    return Split(
        images=stack_images(samples),
        labels=stack_labels(samples),
        domains=domains,
        ids=np.array([s.sample_id for s in samples], dtype=np.int64)
    )


def with_domains(split: Split, domains: Optional[np.ndarray]) -> Split:
    return Split(split.images, split.labels, domains, split.ids)


def build_dataset(parts: Tuple[List[Sample], List[Sample], List[Sample]], n_classes: Optional[int] = None) -> Dataset:
    samples = dict(zip(SPLITS, parts))
    for name in ("train", "val"):
        if not samples[name]:
            raise DatasetError(f"{name} split is empty")
    labels = [s.label for part in parts for s in part]
    n = n_classes or int(max(labels)) + 1
    splits = {name: to_split(part) for name, part in samples.items() if part}
    return Dataset(samples=samples, splits=splits, n_classes=n)


def load_dataset(config: RunConfig, data_dir: Optional[Union[str, Path]] = None, threads: int = 1) -> Dataset:
    """
    Assemble train/val/test

    Without `data_dir` the synthetic task is generated from `config.synth`; a directory with
    a manifest is read back as exported; any other directory is treated as an image folder.
    Samples without split tags are split 80/10/10 per class.
    """
    seed = config.synth.seed
    if data_dir is None:
        samples = generate_dataset(config.synth, threads=threads)
        return build_dataset(stratified_split(samples, seed=seed), config.synth.n_classes)

    root = Path(data_dir)
    if (root / MANIFEST_NAME).is_file():
        samples = load_manifest(root, image_size=config.backbone.input_size)
    else:
        samples = load_image_folder(root, image_size=config.backbone.input_size)
    if samples and all(s.split in SPLITS for s in samples):
        return build_dataset(tuple([s for s in samples if s.split == name] for name in SPLITS))
    return build_dataset(stratified_split(samples, seed=seed))


def variant_config(config: RunConfig, variant: str) -> RunConfig:
    """Training configuration of an ablation variant"""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    trained = TRAINED_AS[variant]
    if trained == "no_adversarial":
        train = config.train.model_copy(update={"lambda_dom": 0.0, "grl_lambda": 0.0})
    elif trained == "no_roi":
        train = config.train.model_copy(update={"lambda_f": 0.0, "lambda_route": 0.0, "lambda_reg": 0.0})
    else:
        return config
    return config.model_copy(update={"train": train})


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return config.model_copy(update={"train": config.train.model_copy(update={"seed": seed})})


def new_model(config: RunConfig, n_classes: int, train: Split) -> CdiraModel:
    """Freshly initialized model with input normalization fitted on the training images"""
    model = CdiraModel(config, n_classes)
    fit_normalization(model.params.tensors, train.images)
    return model


def warmup_and_cluster(
    config: RunConfig,
    data: Dataset,
    trainer: Optional[Trainer] = None,
    progress: bool = True
) -> ClusterStage:
    """Global-only warm-up, then K* selection and pseudo-domain labels for every split from that snapshot"""
    model = trainer.model if trainer is not None else new_model(config, data.n_classes, data.splits["train"])
    trainer = trainer or Trainer(model, config.train, tau=config.model.tau, progress=progress)
    train = data.splits["train"]
    snapshot = trainer.warmup(train)
    sid = snapshot_id(snapshot)

    z_train = model.embed(train.images, config.eval.batch_size)
    cluster = PseudoDomainLabeler(config.cluster).fit(z_train, ids=train.ids)
    domains = {"train": assign_domains(z_train, cluster)}
    for name, split in data.splits.items():
        if name != "train":
            domains[name] = assign_domains(model.embed(split.images, config.eval.batch_size), cluster)
    logger.info("pseudo-domains from snapshot %s: K*=%d", sid, cluster.k_star)
    return ClusterStage(model=model, cluster=cluster, domains=domains, snapshot_id=sid)


def train_with_domains(
    model: CdiraModel,
    config: RunConfig,
    train: Split,
    val: Split,
    n_domains: int,
    trainer: Optional[Trainer] = None,
    history_path: Optional[Union[str, Path]] = None,
    progress: bool = True
) -> TrainResult:
    """Attach the domain head for the pseudo-domain labels and run joint training"""
    if n_domains >= 2:
        model.attach_domain_head(n_domains)
    else:
        logger.warning("only %d pseudo-domain; training without the domain head", n_domains)
        train, val = with_domains(train, None), with_domains(val, None)
    trainer = trainer or Trainer(model, config.train, tau=config.model.tau, history_path=history_path, progress=progress)
    return trainer.train(train, val)


def run_pipeline(
    config: RunConfig,
    data: Dataset,
    history_path: Optional[Union[str, Path]] = None,
    progress: bool = True
) -> PipelineResult:
    """Warm-up, pseudo-domain clustering, then joint training on the labeled splits"""
    model = new_model(config, data.n_classes, data.splits["train"])
    trainer = Trainer(model, config.train, tau=config.model.tau, history_path=history_path, progress=progress)
    stage = warmup_and_cluster(config, data, trainer=trainer)
    train = with_domains(data.splits["train"], stage.domains["train"])
    val = with_domains(data.splits["val"], stage.domains["val"])
    result = train_with_domains(model, config, train, val, stage.cluster.k_star, trainer=trainer)
    result.snapshot_id = stage.snapshot_id
    return PipelineResult(
        model=model, cluster=stage.cluster, domains=stage.domains, train_result=result, snapshot_id=stage.snapshot_id
    )


def predict_variant(model: CdiraModel, variant: str, images: np.ndarray, config: RunConfig,
                    threads: int = 1) -> Tuple[np.ndarray, Optional[list], float]:
    """(predictions, route records, ROI usage) for one variant at inference"""
    evaluator = RoutingEvaluator(model, batch_size=config.eval.batch_size, threads=threads)
    if variant == "no_roi":
        return evaluator.global_only(images), None, 0.0
    if variant == "no_routing":
        return evaluator.fused_only(images), None, 1.0
    preds, records = evaluator.route(images, config.model.tau, config.eval.routing_mode)
    usage = float(np.mean([r.path == "fused" for r in records]))
    return preds, records, usage


def select_clusters(cluster: ClusterModel, group: str) -> List[int]:
    if group == "all":
        return list(range(cluster.k_star))
    if group not in GROUPS:
        raise ValueError(f"unknown LOCO group {group!r}")
    return tercile_groups(cluster.sizes)[group]


def loco_eval(
    config: RunConfig,
    data: Dataset,
    domains: Dict[str, np.ndarray],
    cluster: ClusterModel,
    group: str = "small",
    variants: Sequence[str] = ("full", "no_adversarial"),
    seeds: Sequence[int] = (0,),
    threads: int = 1,
    progress: bool = False
) -> pd.DataFrame:
    """
    Leave-one-cluster-out accuracy

    For every selected pseudo-domain the variants are trained from scratch on the remaining
    clusters' train/val samples and scored on every sample of the held-out cluster.

    Args:
        config: run configuration
        data: dataset splits
        domains: pseudo-domain label per split
        cluster: fitted cluster model (K* and training sizes for the tercile groups)
        group: large | middle | small | all
        variants: subset of full, no_roi, no_adversarial, no_routing
        seeds: training seeds; each (cluster, variant, seed) trains one model
    """
    if cluster.k_star < 2:
        raise ValueError(f"LOCO needs at least 2 clusters, got {cluster.k_star}")
    held = {name: np.asarray(domains[name]) for name in data.splits}
    totals = np.bincount(np.concatenate(list(held.values())), minlength=cluster.k_star)
    group_of = {c: name for name, members in tercile_groups(cluster.sizes).items() for c in members}

    rows = []
    for c in select_clusters(cluster, group):
        if totals[c] < data.n_classes:
            logger.warning("skipping cluster %d: %d samples, fewer than %d classes", c, totals[c], data.n_classes)
            continue
        train = with_domains(data.splits["train"], held["train"]).subset(np.flatnonzero(held["train"] != c))
        val = with_domains(data.splits["val"], held["val"]).subset(np.flatnonzero(held["val"] != c))
        if len(train) == 0 or len(val) == 0:
            logger.warning("skipping cluster %d: no training or validation samples remain", c)
            continue
        test_images = np.concatenate([data.splits[n].images[held[n] == c] for n in data.splits])
        test_labels = np.concatenate([data.splits[n].labels[held[n] == c] for n in data.splits])

        for variant in variants:
            for seed in seeds:
                cfg = variant_config(with_seed(config, seed), variant)
                model = new_model(cfg, data.n_classes, train)
                trainer = Trainer(model, cfg.train, tau=cfg.model.tau, progress=progress)
                trainer.warmup(train)
                train_with_domains(model, cfg, train, val, cluster.k_star, trainer=trainer)
                preds, _, _ = predict_variant(model, variant, test_images, cfg, threads)
                accuracy = float((preds == test_labels).mean())
                rows.append({
                    "cluster_id": int(c), "group": group_of.get(c, ""), "variant": variant,
                    "seed": int(seed), "accuracy": accuracy
                })
                logger.info("LOCO cluster %d %s seed %d: accuracy %.4f", c, variant, seed, accuracy)
    frame = pd.DataFrame(rows, columns=["cluster_id", "group", "variant", "seed", "accuracy"])
    _print_loco_summary(frame)
    return frame


def _print_loco_summary(frame: pd.DataFrame):
    print("\n" + "=" * 60)
    print("LEAVE-ONE-CLUSTER-OUT")
    print("=" * 60)
    if frame.empty:
        print("  ⚠ no cluster evaluated")
        return
    means = frame.groupby("variant", sort=True)["accuracy"].mean()
    for variant, value in means.items():
        print(f"  {variant:>16}: mean held-out accuracy {value:.4f}")
    if {"full", "no_adversarial"} <= set(means.index):
        status = "✓" if means["full"] >= means["no_adversarial"] else "⚠"
        print(f"  {status} adversarial vs. ablated: {means['full'] - means['no_adversarial']:+.4f}")


def run_ablation(
    config: RunConfig,
    data: Dataset,
    variants: Sequence[str] = VARIANTS,
    threads: int = 1,
    progress: bool = False
) -> pd.DataFrame:
    """Train each component ablation and score it on the test split"""
    test = data.splits.get("test")
    if test is None or len(test) == 0:
        raise DatasetError("ablation needs a non-empty test split")
    trained: Dict[str, CdiraModel] = {}
    rows = []
    for variant in variants:
        key = TRAINED_AS.get(variant)
        if key is None:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        cfg = variant_config(config, variant)
        if key not in trained:
            logger.info("training ablation variant %s", key)
            trained[key] = run_pipeline(cfg, data, progress=progress).model
        preds, records, usage = predict_variant(trained[key], variant, test.images, cfg, threads)
        report = metrics(preds, test.labels, records, n_classes=data.n_classes)
        rows.append({
            "variant": variant, "accuracy": report.accuracy, "precision": report.precision,
            "recall": report.recall, "f1": report.f1, "roi_usage": usage
        })
    frame = pd.DataFrame(rows, columns=["variant", "accuracy", "precision", "recall", "f1", "roi_usage"])
    print("\n" + "=" * 60)
    print("ABLATION")
    print("=" * 60)
    for row in frame.to_dict("records"):
        print(f"  {row['variant']:>16}: accuracy {row['accuracy']:.4f}  F1 {row['f1']:.4f}  usage {row['roi_usage']:.3f}")
    return frame

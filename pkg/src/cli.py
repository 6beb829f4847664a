"""
Command-line entry point

    python -m src.cli <command> [--config default|fullscale|file.cfg] [--set key=value ...]

Commands: gen-data, cluster, train, eval, tau-sweep, robustness, loco, ablation, visualize, flops.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from threadpoolctl import threadpool_limits

from configs.configurations import (
    ABLATION_NAME, CHECKPOINT_NAME, CLASSWISE_NAME, CLASSWISE_PLOT_NAME, CLUSTER_RESULTS_NAME, DATASET_DIR_NAME,
    DOMAIN_LABELS_NAME, EVAL_RESULTS_NAME, FLOPS_RESULTS_NAME, HISTORY_NAME, LOCO_NAME, OUTPUT_DIR,
    OVERLAY_DIR_NAME, ROBUSTNESS_NAME, ROBUSTNESS_PLOT_NAME, RUN_CONFIG_NAME, TAU_SWEEP_NAME, TAU_SWEEP_PLOT_NAME,
    TRAIN_RESULTS_NAME, WARMUP_CHECKPOINT_NAME
)
from src.autodiff import CdiraError
from src.cdira_model import CdiraModel
from src.checkpoint import Checkpoint, from_model, load_checkpoint, restore_model, save_checkpoint
from src.config import ConfigError, RunConfig, describe_keys, load_config, save_config
from src.data_synth import export_dataset, generate_dataset, stratified_split
from src.degradations import describe_severities
from src.evaluation import (
    RoutingEvaluator, classwise_roi_usage, domain_probe, metrics, parse_grid, pixel_statistics,
    print_summary, robustness_eval, tau_sweep
)
from src.experiments import (
    Dataset, load_dataset, loco_eval, run_ablation, run_pipeline, train_with_domains, warmup_and_cluster,
    with_domains
)
from src.flops import flops_estimate, measure_latency, print_report
from src.pseudo_domain import PseudoDomainLabeler, assign_domains
from src.reporting import save_results, write_csv
from src.trainer import augmentation_rng
from src.visualization import (
    localization_rate, plot_classwise, plot_robustness, plot_tau_sweep, saliency_overlay
)

logger = logging.getLogger("cdira")

COMMANDS = (
    "gen-data", "cluster", "train", "eval", "tau-sweep", "robustness", "loco", "ablation", "visualize", "flops"
)


class CdiraArgumentParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with status 1"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default="default", help="preset (default, fullscale) or key=value file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, default=None, help="seed for data, clustering and training")
    parser.add_argument("--out", default=None, help="output directory (CDIRA_OUT overrides)")
    parser.add_argument("--threads", type=int, default=1, help="worker and BLAS thread cap")
    parser.add_argument("--data", default=None, help="exported dataset or image folder (default: synthetic)")
    parser.add_argument("--ckpt", default=None, help="checkpoint path")
    parser.add_argument("--force", action="store_true", help="load a checkpoint despite a config hash mismatch")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def build_parser() -> CdiraArgumentParser:
    parser = CdiraArgumentParser(
        prog="cdira",
        description="Dual-path classifier with confidence-gated ROI routing and adversarial domain suppression",
        epilog="configuration keys (default [full-scale value]):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    commands = parser.add_subparsers(dest="command", metavar="command", parser_class=CdiraArgumentParser)
    commands.required = True
    helps = {
        "gen-data": "generate and export the synthetic dataset",
        "cluster": "warm-up the backbone and fit pseudo-domains",
        "train": "warm-up, cluster and train (or continue from a warm-up checkpoint)",
        "eval": "routed test-set evaluation with class-wise ROI usage",
        "tau-sweep": "macro F1, ROI usage and expected FLOPs over a threshold grid",
        "robustness": "accuracy under blur, JPEG, low-light and occlusion",
        "loco": "leave-one-cluster-out evaluation",
        "ablation": "train and score the component ablations",
        "visualize": "write saliency overlays for test images",
        "flops": "parameter count, FLOPs and latency",
    }
    subparsers = {}
    for name in COMMANDS:
        sub = commands.add_parser(name, help=helps[name], formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(sub)
        subparsers[name] = sub
    subparsers["tau-sweep"].add_argument("--grid", default=None, help="start:stop:step or comma list")
    subparsers["robustness"].add_argument(
        "--kinds", default=None, help="comma list of degradations; severity s means " + describe_severities()
    )
    subparsers["visualize"].add_argument("--count", type=int, default=10, help="number of overlays")
    subparsers["flops"].add_argument("--usage", type=float, default=None, help="ROI usage ratio for expected FLOPs")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        for key in ("synth.seed", "cluster.seed", "train.seed"):
            overrides[key] = str(args.seed)
    return overrides


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(os.environ.get("CDIRA_OUT") or args.out or OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args, config: RunConfig, out: Path, default: str = CHECKPOINT_NAME) -> Checkpoint:
    path = Path(args.ckpt) if args.ckpt else out / default
    return load_checkpoint(path, expected_model_hash=config.model_hash(), force=args.force)


def _test_split(data: Dataset):
    split = data.splits.get("test")
    if split is None or len(split) == 0:
        raise CdiraError("the dataset has no test samples")
    return split


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args, config: RunConfig, out: Path) -> int:
    samples = generate_dataset(config.synth, threads=args.threads)
    train, val, test = stratified_split(samples, seed=config.synth.seed)
    manifest = export_dataset(train + val + test, out / DATASET_DIR_NAME)
    images = np.stack([s.image for s in samples])
    probe = domain_probe(pixel_statistics(images), [s.domain for s in samples], seed=config.synth.seed)
    print(f"✓ {len(samples)} samples ({len(train)}/{len(val)}/{len(test)}) written to {manifest.parent}")
    print(f"  pixel-statistics domain probe accuracy: {probe:.3f} (chance {1 / config.synth.n_domains:.3f})")
    return 0


def _save_domain_labels(data: Dataset, domains: Dict[str, np.ndarray], path: Path, config_hash: str):
    ids, splits, labels = [], [], []
    for name, split in data.splits.items():
        ids.extend(split.ids.tolist())
        splits.extend([name] * len(split))
        labels.extend(domains[name].tolist())
    write_csv(PseudoDomainLabeler.label_frame(ids, splits, labels), path, config_hash)


def cmd_cluster(args, config: RunConfig, out: Path) -> int:
    data = load_dataset(config, args.data, threads=args.threads)
    stage = warmup_and_cluster(config, data)
    ckpt = from_model(
        stage.model, stage.cluster, epoch=0, rng_state={"seed": config.train.seed, "next_epoch": 0},
        rng=augmentation_rng(config.train.seed, 0), meta={"phase": "warmup", "snapshot_id": stage.snapshot_id}
    )
    save_checkpoint(ckpt, out / WARMUP_CHECKPOINT_NAME)
    _save_domain_labels(data, stage.domains, out / DOMAIN_LABELS_NAME, config.config_hash())
    save_results({**stage.cluster.to_dict(), "snapshot_id": stage.snapshot_id}, out / CLUSTER_RESULTS_NAME)
    return 0


def cmd_train(args, config: RunConfig, out: Path) -> int:
    data = load_dataset(config, args.data, threads=args.threads)
    history = out / HISTORY_NAME
    if args.ckpt:
        warm = load_checkpoint(args.ckpt, expected_model_hash=config.model_hash(), force=args.force)
        if warm.cluster is None:
            raise CdiraError(f"{args.ckpt} holds no pseudo-domain model; run `cluster` first")
        model = restore_model(warm, config)
        domains = {name: assign_domains(model.embed(split.images, config.eval.batch_size), warm.cluster)
                   for name, split in data.splits.items()}
        cluster, sid = warm.cluster, warm.meta.get("snapshot_id", "")
        result = train_with_domains(
            model, config, with_domains(data.splits["train"], domains["train"]),
            with_domains(data.splits["val"], domains["val"]), cluster.k_star, history_path=history
        )
        result.snapshot_id = sid
    else:
        pipeline = run_pipeline(config, data, history_path=history)
        model, cluster, domains, result = pipeline.model, pipeline.cluster, pipeline.domains, pipeline.train_result

    next_epoch = result.best_epoch + 1
    ckpt = from_model(
        model, cluster, epoch=result.best_epoch, rng_state={"seed": config.train.seed, "next_epoch": next_epoch},
        rng=augmentation_rng(config.train.seed, next_epoch),
        meta={"phase": "trained", "snapshot_id": result.snapshot_id}
    )
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    _save_domain_labels(data, domains, out / DOMAIN_LABELS_NAME, config.config_hash())
    save_results({k: v for k, v in vars(result).items() if k != "history"}, out / TRAIN_RESULTS_NAME)
    return 0


def cmd_eval(args, config: RunConfig, out: Path) -> int:
    ckpt = _checkpoint(args, config, out)
    model = restore_model(ckpt, config)
    data = load_dataset(config, args.data, threads=args.threads)
    test = _test_split(data)
    evaluator = RoutingEvaluator(model, batch_size=config.eval.batch_size, threads=args.threads, progress=True)
    preds, records = evaluator.route(test.images, config.model.tau, config.eval.routing_mode, test.ids)
    report = metrics(preds, test.labels, records, n_classes=model.n_classes)
    usage = classwise_roi_usage(records, test.labels)
    write_csv(usage.to_frame(), out / CLASSWISE_NAME, config.config_hash())
    plot_classwise(usage.per_class, out / CLASSWISE_PLOT_NAME)

    result = {
        "tau": config.model.tau,
        "mode": config.eval.routing_mode,
        "metrics": report,
        "global_only_accuracy": float((evaluator.global_only(test.images) == test.labels).mean()),
        "fused_only_accuracy": float((evaluator.fused_only(test.images) == test.labels).mean()),
        "expected_flops": evaluator.flops.expected(usage.overall),
    }
    g = evaluator.global_pass(test.images).g
    true_domains = np.array([s.domain for s in data.samples["test"]])
    if (true_domains >= 0).all() and np.unique(true_domains).size >= 2:
        result["domain_probe_accuracy"] = domain_probe(g, true_domains, seed=config.train.seed)
    boxes = data.boxes("test")
    if any(b is not None for b in boxes):
        result["localization"] = localization_rate(model, test.images, test.labels, boxes)
    print_summary(report, "ROUTED EVALUATION")
    save_results(result, out / EVAL_RESULTS_NAME)
    return 0


def cmd_tau_sweep(args, config: RunConfig, out: Path) -> int:
    grid = parse_grid(args.grid or config.eval.tau_grid)
    model = restore_model(_checkpoint(args, config, out), config)
    test = _test_split(load_dataset(config, args.data, threads=args.threads))
    evaluator = RoutingEvaluator(model, batch_size=config.eval.batch_size, threads=args.threads, progress=True)
    frame = tau_sweep(evaluator, test.images, test.labels, grid)
    write_csv(frame[["tau", "f1", "usage", "expected_flops"]], out / TAU_SWEEP_NAME, config.config_hash())
    plot_tau_sweep(frame, out / TAU_SWEEP_PLOT_NAME)
    print(f"✓ {len(frame)} thresholds written to {out / TAU_SWEEP_NAME}")
    return 0


def cmd_robustness(args, config: RunConfig, out: Path) -> int:
    kinds = [k.strip() for k in args.kinds.split(",")] if args.kinds else list(config.eval.kinds)
    model = restore_model(_checkpoint(args, config, out), config)
    test = _test_split(load_dataset(config, args.data, threads=args.threads))
    evaluator = RoutingEvaluator(model, batch_size=config.eval.batch_size, threads=args.threads, progress=True)
    frame = robustness_eval(
        evaluator, test.images, test.labels, kinds, config.eval.severities, config.model.tau,
        config.eval.routing_mode, seed=config.train.seed
    )
    write_csv(frame[["kind", "severity", "accuracy", "f1"]], out / ROBUSTNESS_NAME, config.config_hash())
    plot_robustness(frame, out / ROBUSTNESS_PLOT_NAME)
    print(f"✓ {len(frame)} (kind, severity) rows written to {out / ROBUSTNESS_NAME}")
    return 0


def cmd_loco(args, config: RunConfig, out: Path) -> int:
    data = load_dataset(config, args.data, threads=args.threads)
    stage = warmup_and_cluster(config, data, progress=False)
    frame = loco_eval(
        config, data, stage.domains, stage.cluster, group=config.eval.loco_group,
        variants=config.eval.loco_variants, seeds=config.eval.loco_seeds, threads=args.threads
    )
    write_csv(frame, out / LOCO_NAME, config.config_hash())
    return 0


def cmd_ablation(args, config: RunConfig, out: Path) -> int:
    data = load_dataset(config, args.data, threads=args.threads)
    frame = run_ablation(config, data, config.eval.ablation_variants, threads=args.threads)
    write_csv(frame, out / ABLATION_NAME, config.config_hash())
    return 0


def cmd_visualize(args, config: RunConfig, out: Path) -> int:
    model = restore_model(_checkpoint(args, config, out), config)
    data = load_dataset(config, args.data, threads=args.threads)
    test = _test_split(data)
    # one image per class first, then in sample order
    order: List[int] = []
    seen = set()
    for i, label in enumerate(test.labels):
        if int(label) not in seen:
            seen.add(int(label))
            order.append(i)
    order += [i for i in range(len(test)) if i not in order]
    overlay_dir = out / OVERLAY_DIR_NAME
    for i in order[:max(0, args.count)]:
        path = overlay_dir / f"class{int(test.labels[i]):02d}_{int(test.ids[i]):06d}.png"
        saliency_overlay(test.images[i], model, path)
    print(f"✓ {min(args.count, len(order))} overlays written to {overlay_dir}")
    boxes = data.boxes("test")
    if any(b is not None for b in boxes):
        rate = localization_rate(model, test.images, test.labels, boxes)
        print(f"  saliency center of mass inside the glyph box: {rate['rate']:.3f} ({rate['hits']}/{rate['correct']})")
    return 0


def cmd_flops(args, config: RunConfig, out: Path) -> int:
    if args.ckpt:
        model = restore_model(_checkpoint(args, config, out), config)
    else:
        model = CdiraModel(config, config.synth.n_classes)
    report = flops_estimate(config, model.n_classes, model.n_domains)
    image = np.zeros((config.backbone.input_size, config.backbone.input_size, config.backbone.input_channels),
                     dtype=np.float32)
    latency = measure_latency(model, image, runs=config.eval.latency_runs, warmup=config.eval.latency_warmup)
    print_report(report, latency, args.usage)
    result = {"flops": report.to_dict(), "latency": latency}
    if args.usage is not None:
        result["expected_flops"] = report.expected(args.usage)
    save_results(result, out / FLOPS_RESULTS_NAME)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "eval": cmd_eval,
    "tau-sweep": cmd_tau_sweep,
    "robustness": cmd_robustness,
    "loco": cmd_loco,
    "ablation": cmd_ablation,
    "visualize": cmd_visualize,
    "flops": cmd_flops,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        config = load_config(args.config, _overrides(args))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        out = _out_dir(args)
        save_config(config, out / RUN_CONFIG_NAME)
        logger.info("%s with config %s -> %s", args.command, config.config_hash(), out)
        with threadpool_limits(limits=max(1, args.threads)):
            return HANDLERS[args.command](args, config, out)
    except (CdiraError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""
Complete Routing Analysis Pipeline
Trains on the synthetic task, then writes the evaluation, threshold sweep,
robustness and ablation results the dashboard reads

    python -m test.run_full_analysis            # small default run
    CDIRA_CONFIG=fullscale python -m test.run_full_analysis
"""

import os
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from configs.configurations import (
    ABLATION_NAME, CHECKPOINT_NAME, CLASSWISE_NAME, EVAL_RESULTS_NAME, HISTORY_NAME, LOCO_NAME, OUTPUT_DIR,
    ROBUSTNESS_NAME, TAU_SWEEP_NAME
)
from src.autodiff import CdiraError
from src.checkpoint import from_model, save_checkpoint
from src.config import load_config
from src.evaluation import (
    RoutingEvaluator, classwise_roi_usage, domain_probe, metrics, parse_grid, print_summary, robustness_eval,
    tau_sweep
)
from src.experiments import load_dataset, loco_eval, run_ablation, run_pipeline, variant_config
from src.reporting import save_results, write_csv
from src.trainer import augmentation_rng
from src.visualization import localization_rate


LOCALIZATION_TARGET = 0.7
SWEEP_TAU = 0.9
SWEEP_MAX_USAGE = 0.3
SWEEP_F1_GAP = 0.01


def verdict(ok: bool, message: str) -> bool:
    print(f"  {'✓' if ok else '⚠'} {message}")
    return ok


def check_loco(loco: pd.DataFrame) -> bool:
    means = loco.groupby("variant")["accuracy"].mean()
    if not {"full", "no_adversarial"} <= set(means.index):
        return verdict(False, "LOCO: no held-out cluster was evaluated")
    return verdict(
        means["full"] >= means["no_adversarial"],
        f"LOCO held-out accuracy full {means['full']:.4f} vs no_adversarial {means['no_adversarial']:.4f}"
    )


def check_domain_probe(config, data, model) -> bool:
    """Linear domain probe on the global features of the adversarial model vs. one trained with lambda_dom = 0"""
    test = data.splits["test"]
    domains = np.array([s.domain for s in data.samples["test"]])
    if (domains < 0).any() or np.unique(domains).size < 2:
        return verdict(False, "domain probe: the test split carries fewer than 2 known domains")
    ablated = run_pipeline(variant_config(config, "no_adversarial"), data, progress=False).model
    seed = config.train.seed
    with_grl = domain_probe(RoutingEvaluator(model).global_pass(test.images).g, domains, seed=seed)
    without = domain_probe(RoutingEvaluator(ablated).global_pass(test.images).g, domains, seed=seed)
    return verdict(with_grl <= without, f"domain probe accuracy lambda=1 {with_grl:.4f} vs lambda=0 {without:.4f}")


def check_localization(model, data) -> bool:
    test = data.splits["test"]
    boxes = data.boxes("test")
    if not any(b is not None for b in boxes):
        return verdict(False, "saliency localization: no glyph boxes in the test split")
    rate = localization_rate(model, test.images, test.labels, boxes)
    return verdict(
        rate["rate"] >= LOCALIZATION_TARGET,
        f"saliency localization {rate['hits']}/{rate['correct']} = {rate['rate']:.3f} (target {LOCALIZATION_TARGET})"
    )


def check_robustness(robustness: pd.DataFrame) -> bool:
    broken = [
        kind for kind, rows in robustness.groupby("kind")
        if (np.diff(rows.sort_values("severity")["accuracy"].to_numpy()) > 1e-12).any()
    ]
    return verdict(not broken, "accuracy non-increasing in severity" + (f" except {', '.join(broken)}" if broken else ""))


def check_sweep(sweep: pd.DataFrame, evaluator: RoutingEvaluator, test) -> bool:
    row = sweep[np.isclose(sweep["tau"], SWEEP_TAU)]
    if row.empty:
        return verdict(False, f"tau sweep has no tau = {SWEEP_TAU} row")
    row = row.iloc[0]
    fused = metrics(evaluator.fused_only(test.images), test.labels, n_classes=evaluator.model.n_classes)
    gap = abs(row["f1"] - fused.f1)
    return verdict(
        row["usage"] <= SWEEP_MAX_USAGE and gap <= SWEEP_F1_GAP,
        f"tau = {SWEEP_TAU}: ROI usage {row['usage']:.3f} (max {SWEEP_MAX_USAGE}), "
        f"F1 gap to all-fused {gap:.4f} (max {SWEEP_F1_GAP})"
    )


def check_determinism(config, data, pipeline) -> bool:
    again = run_pipeline(config, data, progress=False)
    first, second = pipeline.model.params.state_dict(), again.model.params.state_dict()
    same = (
        again.snapshot_id == pipeline.snapshot_id
        and first.keys() == second.keys()
        and all(np.array_equal(first[name], second[name]) for name in first)
    )
    return verdict(same, f"re-run with seed {config.train.seed} reproduces config {config.config_hash()} "
                        f"snapshot {pipeline.snapshot_id}")


def main():
    print("=" * 70)
    print("COMPLETE ROUTING ANALYSIS")
    print("=" * 70)

    load_dotenv()
    config = load_config(os.getenv("CDIRA_CONFIG", "default"))
    out = Path(os.getenv("CDIRA_OUT") or OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    print(f"  config {config.config_hash()} -> {out}")

    # Step 1: Data
    print("\n[Step 1] Generating the synthetic task...")
    data = load_dataset(config)
    print(f"  ✓ {', '.join(f'{name} {len(split)}' for name, split in data.splits.items())}")

    # Step 2: Warm-up, clustering and joint training
    print("\n[Step 2] Training (warm-up, pseudo-domains, joint objective)...")
    try:
        pipeline = run_pipeline(config, data, history_path=out / HISTORY_NAME)
    except CdiraError as e:
        print(f"  ❌ Training failed: {e}")
        return
    result = pipeline.train_result
    print(f"  ✓ K* = {pipeline.cluster.k_star}, best epoch {result.best_epoch}")
    save_checkpoint(
        from_model(
            pipeline.model, pipeline.cluster, epoch=result.best_epoch, meta={"snapshot_id": result.snapshot_id},
            rng_state={"seed": config.train.seed, "next_epoch": result.best_epoch + 1},
            rng=augmentation_rng(config.train.seed, result.best_epoch + 1)
        ),
        out / CHECKPOINT_NAME
    )

    # Step 3: Routed evaluation
    print("\n[Step 3] Routed evaluation...")
    test = data.splits["test"]
    evaluator = RoutingEvaluator(pipeline.model, batch_size=config.eval.batch_size, progress=True)
    preds, records = evaluator.route(test.images, config.model.tau, config.eval.routing_mode, test.ids)
    report = metrics(preds, test.labels, records, n_classes=pipeline.model.n_classes)
    usage = classwise_roi_usage(records, test.labels)
    print_summary(report, "ROUTED EVALUATION")
    save_results({"tau": config.model.tau, "metrics": report,
                  "expected_flops": evaluator.flops.expected(usage.overall)}, out / EVAL_RESULTS_NAME)
    write_csv(usage.to_frame(), out / CLASSWISE_NAME, config.config_hash())

    # Step 4: Threshold sweep
    print("\n[Step 4] Sweeping the routing threshold...")
    sweep = tau_sweep(evaluator, test.images, test.labels, parse_grid(config.eval.tau_grid))
    write_csv(sweep[["tau", "f1", "usage", "expected_flops"]], out / TAU_SWEEP_NAME, config.config_hash())
    print(f"  ✓ {len(sweep)} thresholds")

    # Step 5: Robustness
    print("\n[Step 5] Robustness under degradations...")
    robustness = robustness_eval(
        evaluator, test.images, test.labels, config.eval.kinds, config.eval.severities, config.model.tau,
        config.eval.routing_mode, seed=config.train.seed
    )
    write_csv(robustness[["kind", "severity", "accuracy", "f1"]], out / ROBUSTNESS_NAME, config.config_hash())
    print(f"  ✓ {len(robustness)} (kind, severity) rows")

    # Step 6: Ablation
    print("\n[Step 6] Component ablation...")
    ablation = run_ablation(config, data, config.eval.ablation_variants)
    write_csv(ablation, out / ABLATION_NAME, config.config_hash())

    # Step 7: Acceptance checks
    print("\n[Step 7] Acceptance checks...")
    loco = loco_eval(
        config, data, pipeline.domains, pipeline.cluster, config.eval.loco_group, ["full", "no_adversarial"],
        config.eval.loco_seeds
    )
    write_csv(loco, out / LOCO_NAME, config.config_hash())
    checks = [
        check_loco(loco),
        check_domain_probe(config, data, pipeline.model),
        check_localization(pipeline.model, data),
        check_robustness(robustness),
        check_sweep(sweep, evaluator, test),
        check_determinism(config, data, pipeline),
    ]
    print(f"\n  {sum(checks)}/{len(checks)} acceptance checks passed")

    print("\n" + "=" * 70)
    print("✓ ANALYSIS COMPLETE")
    print("=" * 70)
    print("\nNext: streamlit run dashboards/dashboard.py")


if __name__ == "__main__":
    main()

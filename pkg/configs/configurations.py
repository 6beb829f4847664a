from pathlib import Path

# Project root 
BASE_DIR = Path(__file__).resolve().parent.parent

# Default run output directory (overridden by --out or CDIRA_OUT)
OUTPUT_DIR = BASE_DIR / "outputs"

# Dataset export
DATASET_DIR_NAME = "dataset"
MANIFEST_NAME = "manifest.csv"

# Pseudo-domain results
CLUSTER_RESULTS_NAME = "cluster_results.json"
DOMAIN_LABELS_NAME = "domain_labels.csv"
WARMUP_CHECKPOINT_NAME = "warmup.ck"

# Training results
CHECKPOINT_NAME = "model.ck"
HISTORY_NAME = "history.jsonl"
TRAIN_RESULTS_NAME = "train_results.json"

# Evaluation results
EVAL_RESULTS_NAME = "eval_results.json"
TAU_SWEEP_NAME = "tau_sweep.csv"
TAU_SWEEP_PLOT_NAME = "tau_sweep.png"
CLASSWISE_NAME = "classwise_roi_usage.csv"
CLASSWISE_PLOT_NAME = "classwise_roi_usage.png"
ROBUSTNESS_NAME = "robustness.csv"
ROBUSTNESS_PLOT_NAME = "robustness.png"
LOCO_NAME = "loco.csv"
ABLATION_NAME = "ablation.csv"
FLOPS_RESULTS_NAME = "flops.json"
OVERLAY_DIR_NAME = "overlays"

# Resolved run configuration written next to every output set
RUN_CONFIG_NAME = "run_config.cfg"

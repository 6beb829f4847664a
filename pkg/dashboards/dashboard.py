"""
Interactive Dashboard for Confidence-Gated Routing Results
Reads the CSV/JSON outputs written by the CLI or test/run_full_analysis.py

    streamlit run dashboards/dashboard.py
"""

import os
from pathlib import Path

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st

from configs.configurations import (
    ABLATION_NAME, CLASSWISE_NAME, EVAL_RESULTS_NAME, FLOPS_RESULTS_NAME, HISTORY_NAME, LOCO_NAME, OUTPUT_DIR,
    OVERLAY_DIR_NAME, ROBUSTNESS_NAME, TAU_SWEEP_NAME
)
from src.reporting import csv_config_hash, load_results, read_csv, read_jsonl

# Page configuration
st.set_page_config(
    page_title="Routing Dashboard",
    page_icon="🎯",
    layout="wide",
    initial_sidebar_state="expanded"
)


@st.cache_data
def load_table(path: str):
    """CSV result table and its config hash, or (None, None) when it has not been written yet"""
    if not Path(path).exists():
        return None, None
    return read_csv(path), csv_config_hash(path)


@st.cache_data
def load_json(path: str):
    try:
        return load_results(path)
    except FileNotFoundError:
        return None


def missing(name: str, command: str):
    st.info(f"`{name}` not found. Run `python -m src.cli {command}` first.")


def render_overview(out: Path):
    st.header("📊 Routed Evaluation")
    result = load_json(str(out / EVAL_RESULTS_NAME))
    if result is None:
        missing(EVAL_RESULTS_NAME, "eval")
        return
    m = result["metrics"]
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Accuracy", f"{m['accuracy']:.3f}")
    col2.metric("Macro F1", f"{m['f1']:.3f}")
    col3.metric("ROI usage", f"{m['roi_usage']:.1%}" if m.get("roi_usage") is not None else "n/a",
                help="Share of test images routed through the fused ROI head")
    col4.metric("Expected FLOPs", f"{result['expected_flops'] / 1e6:.1f} M")

    col1, col2, col3 = st.columns(3)
    if "global_only_accuracy" in result:
        col1.metric("Global head only", f"{result['global_only_accuracy']:.3f}")
        col2.metric("Fused head only", f"{result['fused_only_accuracy']:.3f}")
    if "domain_probe_accuracy" in result:
        col3.metric("Style probe on pooled features", f"{result['domain_probe_accuracy']:.3f}",
                    help="Lower means less style information survives in the global features")
    if m.get("absent_classes"):
        st.warning(f"Classes without test samples: {m['absent_classes']}")

    frame = pd.DataFrame({
        "class": m["classes"], "precision": m["per_class_precision"], "recall": m["per_class_recall"],
        "f1": m["per_class_f1"], "support": m["support"]
    })
    st.subheader("Per-class metrics")
    st.dataframe(frame, use_container_width=True, hide_index=True)

    usage, config_hash = load_table(str(out / CLASSWISE_NAME))
    if usage is not None:
        st.subheader("Class-wise ROI usage")
        fig = px.bar(usage, x="class", y="roi_usage", text="count", range_y=[0, 1])
        st.plotly_chart(fig, use_container_width=True)
        st.caption(f"config {config_hash}")


def render_tau_sweep(out: Path):
    st.header("📈 Threshold Sweep")
    sweep, config_hash = load_table(str(out / TAU_SWEEP_NAME))
    if sweep is None:
        missing(TAU_SWEEP_NAME, "tau-sweep")
        return
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=sweep["tau"], y=sweep["usage"], mode="lines+markers", name="ROI usage"))
    fig.add_trace(go.Scatter(x=sweep["tau"], y=sweep["f1"], mode="lines+markers", name="macro F1"))
    fig.update_layout(xaxis_title="routing threshold tau", yaxis_range=[0, 1.05])
    st.plotly_chart(fig, use_container_width=True)

    fig2 = px.scatter(sweep, x="expected_flops", y="f1", text="tau")
    fig2.update_traces(textposition="top center")
    fig2.update_layout(xaxis_title="expected FLOPs per image", yaxis_title="macro F1")
    st.plotly_chart(fig2, use_container_width=True)
    st.caption(f"config {config_hash}")


def render_robustness(out: Path):
    st.header("🌫️ Robustness")
    frame, config_hash = load_table(str(out / ROBUSTNESS_NAME))
    if frame is None:
        missing(ROBUSTNESS_NAME, "robustness")
        return
    fig = px.line(frame, x="severity", y="accuracy", color="kind", markers=True, range_y=[0, 1.05])
    st.plotly_chart(fig, use_container_width=True)
    st.dataframe(frame.pivot(index="severity", columns="kind", values="accuracy"), use_container_width=True)
    st.caption(f"config {config_hash}")


def render_domain_generalization(out: Path):
    st.header("🧭 Leave-One-Cluster-Out")
    loco, config_hash = load_table(str(out / LOCO_NAME))
    if loco is None:
        missing(LOCO_NAME, "loco")
    else:
        summary = loco.groupby("variant")["accuracy"].agg(["mean", "std", "count"]).reset_index()
        st.dataframe(summary, use_container_width=True, hide_index=True)
        fig = px.box(loco, x="variant", y="accuracy", points="all")
        st.plotly_chart(fig, use_container_width=True)
        st.caption(f"config {config_hash}")

    st.header("🧪 Ablation")
    ablation, config_hash = load_table(str(out / ABLATION_NAME))
    if ablation is None:
        missing(ABLATION_NAME, "ablation")
        return
    fig = px.bar(ablation, x="variant", y=["accuracy", "f1"], barmode="group", range_y=[0, 1])
    st.plotly_chart(fig, use_container_width=True)
    st.dataframe(ablation, use_container_width=True, hide_index=True)


def render_training(out: Path):
    st.header("🏋️ Training History")
    path = out / HISTORY_NAME
    if not path.exists():
        missing(HISTORY_NAME, "train")
        return
    history = pd.DataFrame(read_jsonl(path))
    terms = pd.json_normalize(history["terms"].tolist())
    history = pd.concat([history.drop(columns=["terms"]), terms], axis=1)
    train = history[history["phase"] == "train"]
    if not train.empty:
        st.subheader("Joint objective")
        st.plotly_chart(px.line(train, x="epoch", y=["train_total", "val_total"], markers=True),
                        use_container_width=True)
        accuracy = [c for c in ("val_accuracy_global", "val_accuracy_fused", "domain_accuracy") if c in train]
        st.plotly_chart(px.line(train, x="epoch", y=accuracy, markers=True, range_y=[0, 1.05]),
                        use_container_width=True)
    st.dataframe(history, use_container_width=True, hide_index=True)


def render_cost(out: Path):
    st.header("⚙️ Cost")
    result = load_json(str(out / FLOPS_RESULTS_NAME))
    if result is None:
        missing(FLOPS_RESULTS_NAME, "flops")
        return
    flops, latency = result["flops"], result["latency"]
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Global path", f"{flops['f_global'] / 1e6:.2f} MFLOPs")
    col2.metric("ROI extra", f"{flops['f_roi_extra'] / 1e6:.2f} MFLOPs")
    col3.metric("Parameters (inference)", f"{flops['params_inference']:,}")
    col4.metric("Fused latency", f"{latency['fused_ms']:.2f} ms", f"{latency['fused_ms'] - latency['global_ms']:+.2f} ms")
    breakdown = pd.DataFrame(
        [{"path": "global", "layer": k, "flops": v} for k, v in flops["global_breakdown"].items()]
        + [{"path": "roi", "layer": k, "flops": v} for k, v in flops["roi_breakdown"].items()]
    )
    st.plotly_chart(px.sunburst(breakdown, path=["path", "layer"], values="flops"), use_container_width=True)


def render_overlays(out: Path):
    st.header("🔍 Saliency Overlays")
    overlays = sorted((out / OVERLAY_DIR_NAME).glob("*.png"))
    if not overlays:
        missing(OVERLAY_DIR_NAME, "visualize")
        return
    cols = st.columns(4)
    for i, path in enumerate(overlays):
        cols[i % 4].image(str(path), caption=path.stem, use_column_width=True)


def main():
    st.title("🎯 Confidence-Gated ROI Routing")

    st.sidebar.header("Run")
    out = Path(st.sidebar.text_input("Output directory", os.environ.get("CDIRA_OUT") or str(OUTPUT_DIR)))
    if not out.is_dir():
        st.error(f"{out} does not exist. Run the analysis first.")
        return

    st.sidebar.header("Navigation")
    page = st.sidebar.radio(
        "Select View",
        [
            "📊 Overview",
            "📈 Threshold Sweep",
            "🌫️ Robustness",
            "🧭 Domain Generalization",
            "🏋️ Training",
            "⚙️ Cost",
            "🔍 Overlays"
        ]
    )
    if st.sidebar.button("Reload results"):
        st.cache_data.clear()

    pages = {
        "📊 Overview": render_overview,
        "📈 Threshold Sweep": render_tau_sweep,
        "🌫️ Robustness": render_robustness,
        "🧭 Domain Generalization": render_domain_generalization,
        "🏋️ Training": render_training,
        "⚙️ Cost": render_cost,
        "🔍 Overlays": render_overlays,
    }
    pages[page](out)


if __name__ == "__main__":
    main()

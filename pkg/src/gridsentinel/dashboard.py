"""
Read-only run viewer: loaders for finished run directories and the Streamlit page.
"""

import logging
import os

import pandas as pd
import streamlit as st

from src.gridsentinel.artifacts import read_round_log
from src.gridsentinel.errors import ReportError
from src.gridsentinel.evaluation import MetricsReport, compare_reports, read_sweep_csv

logger = logging.getLogger("gridsentinel.dashboard")

STAGES = ("generate", "train", "evaluate", "sweep", "ablate", "train_centralized", "evaluate_centralized",
          "sweep_centralized")


# ---------- loaders ----------

def list_runs(root):
    """Run directories under root that hold at least one stage, sorted by name."""
    if not os.path.isdir(root):
        return []
    runs = []
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        if os.path.isdir(path) and any(os.path.isdir(os.path.join(path, s)) for s in STAGES):
            runs.append(name)
    return runs


def load_metrics(run_dir, split="test", stage="evaluate"):
    path = os.path.join(run_dir, stage, f"metrics_{split}.txt")
    if not os.path.exists(path):
        return None
    with open(path, "r") as f:
        return MetricsReport.from_text(f.read())


def metrics_frame(report):
    """One row per scope (global first, then clients) with the headline rates."""
    scopes = [("global", report.overall)] + [(str(c), s) for c, s in sorted(report.clients.items())]
    rows = []
    for name, s in scopes:
        rows.append({
            "scope": name,
            "windows": s.windows,
            "ts_accuracy": s.timestep.accuracy,
            "ts_f1": s.timestep.f1,
            "seq_accuracy": s.sequence.accuracy,
            "seq_f1": s.sequence.f1,
            "seq_fpr": s.sequence.fpr,
            "exact_match": s.exact_match_rate,
        })
    return pd.DataFrame(rows)


def load_comparison(run_dir, split="test"):
    federated = load_metrics(run_dir, split)
    centralized = load_metrics(run_dir, split, "evaluate_centralized")
    if federated is None or centralized is None:
        return None
    try:
        return compare_reports(federated, centralized)
    except ReportError as e:
        logger.warning("cannot compare %s: %s", run_dir, e)
        return None


def load_round_log(run_dir):
    path = os.path.join(run_dir, "train", "round_log.jsonl")
    if not os.path.exists(path):
        return None
    records = read_round_log(path)
    return pd.DataFrame([{k: r[k] for k in ("round", "val_seq_accuracy", "best_val_seq_accuracy", "wall_time_s")}
                         for r in records])


def load_sweep(run_dir):
    path = os.path.join(run_dir, "sweep", "sweep.csv")
    return read_sweep_csv(path) if os.path.exists(path) else None


def load_ablation(run_dir):
    path = os.path.join(run_dir, "ablate", "ablation.csv")
    return pd.read_csv(path) if os.path.exists(path) else None


# ---------- page ----------

def show_dashboard_page(root):
    with st.sidebar:
        st.title("GridSentinel")
        runs = list_runs(root)
        if not runs:
            st.warning(f"No runs found under {root}")
            return
        run = st.selectbox("Run", runs, index=runs.index(st.session_state.run) if st.session_state.get("run") in runs else 0)
        st.session_state.run = run
        split = st.radio("Split", ["test", "val"], horizontal=True)
        st.markdown("---")
        st.caption("Read-only view of generate/train/evaluate/sweep/ablate outputs")

    run_dir = os.path.join(root, run)
    st.title(f"Run: {run}")

    report = load_metrics(run_dir, split)
    st.subheader("Detection metrics")
    if report is None:
        st.info(f"No metrics for the {split} split; run `gridsentinel evaluate --split {split}`")
    else:
        st.caption(f"tau={report.rule.tau:g}, m={report.rule.m}, mode={report.rule.mode}")
        st.dataframe(metrics_frame(report), use_container_width=True, hide_index=True)

    comparison = load_comparison(run_dir, split)
    if comparison is not None:
        st.subheader("Federated vs centralized")
        st.dataframe(comparison, use_container_width=True, hide_index=True)
        st.bar_chart(comparison[comparison["scope"] != "global"].set_index("scope")[["delta_ts_f1"]])

    rounds = load_round_log(run_dir)
    st.subheader("Training rounds")
    if rounds is None:
        st.info("No round log")
    else:
        st.line_chart(rounds.set_index("round")[["val_seq_accuracy", "best_val_seq_accuracy"]])

    table = load_sweep(run_dir)
    st.subheader("Operating-point sweep")
    if table is None:
        st.info("No sweep results")
    else:
        col1, col2 = st.columns(2)
        with col1:
            st.caption("Seq-F1 by tau")
            st.line_chart(table.pivot_table(index="tau", columns="m", values="seq_f1"))
        with col2:
            st.caption("Seq-FPR by tau")
            st.line_chart(table.pivot_table(index="tau", columns="m", values="seq_fpr"))

    ablation = load_ablation(run_dir)
    st.subheader("Input ablation")
    if ablation is None:
        st.info("No ablation results")
    else:
        st.dataframe(ablation, use_container_width=True, hide_index=True)

"""Report emission: merged summary tables and static plots from one or more
completed run directories."""

from __future__ import annotations

import json
import os
import warnings

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def load_metrics(run_dir: str) -> pd.DataFrame | None:
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(path):
        return None
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return pd.DataFrame(records)


def load_manifest(run_dir: str) -> dict | None:
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(path):
        return None
    with open(path) as f:
        return json.load(f)


def summarize_runs(run_dirs: list[str]) -> pd.DataFrame:
    """One summary row per run: final-window means of every loss component
    plus key config fields. Runs with a missing metrics file become a warning
    row."""
    rows = []
    for run_dir in run_dirs:
        name = os.path.basename(os.path.normpath(run_dir))
        df = load_metrics(run_dir)
        manifest = load_manifest(run_dir) or {}
        config = manifest.get("config", {})
        if df is None or df.empty:
            warnings.warn(f"missing metrics for {run_dir}, skipping")
            rows.append({"run": name, "status": "missing-metrics"})
            continue
        tail = df.tail(min(50, len(df)))
        rows.append({
            "run": name,
            "status": manifest.get("status", "unknown"),
            "steps": int(df["step"].max()) + 1,
            "final_prediction": float(tail["prediction"].mean()),
            "final_kl": float(tail["kl"].mean()),
            "final_mae": float(tail["mae"].mean()),
            "final_total": float(tail["total"].mean()),
            "kl_scale": config.get("kl_scale"),
            "seed": config.get("seed"),
            "deterministic": config.get("deterministic"),
        })
    return pd.DataFrame(rows)


def plot_loss_components(run_dir: str, out_path: str) -> None:
    df = load_metrics(run_dir)
    if df is None:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("prediction", "kl", "mae", "total"):
        ax.plot(df["step"], df[key], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title(os.path.basename(os.path.normpath(run_dir)))
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_overlay(run_dirs: list[str], column: str, out_path: str,
                 smooth: int = 25) -> None:
    """Overlaid learning curves of one loss column across runs (e.g. the
    KL-scale comparison figure)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for run_dir in run_dirs:
        df = load_metrics(run_dir)
        if df is None:
            warnings.warn(f"missing metrics for {run_dir}, skipping")
            continue
        manifest = load_manifest(run_dir) or {}
        config = manifest.get("config", {})
        label = os.path.basename(os.path.normpath(run_dir))
        if "kl_scale" in config:
            label += f" (kl_scale={config['kl_scale']})"
        y = df[column].rolling(smooth, min_periods=1).mean()
        ax.plot(df["step"], y, label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(column)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_propagation_bars(scores: dict[str, float], out_path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(scores)
    ax.bar(names, [scores[n] for n in names], color="tab:blue")
    ax.set_ylabel("mean region Jaccard")
    ax.set_ylim(0, 1)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_report(run_dirs: list[str], out_dir: str,
                 propagation_scores: dict[str, float] | None = None
                 ) -> pd.DataFrame:
    os.makedirs(out_dir, exist_ok=True)
    summary = summarize_runs(run_dirs)
    summary.to_csv(os.path.join(out_dir, "summary.csv"), index=False)
    for run_dir in run_dirs:
        name = os.path.basename(os.path.normpath(run_dir))
        plot_loss_components(run_dir, os.path.join(out_dir, f"loss_{name}.png"))
    if len(run_dirs) > 1:
        plot_overlay(run_dirs, "prediction",
                     os.path.join(out_dir, "overlay_prediction.png"))
        plot_overlay(run_dirs, "total",
                     os.path.join(out_dir, "overlay_total.png"))
    if propagation_scores:
        plot_propagation_bars(
            propagation_scores, os.path.join(out_dir, "propagation_scores.png")
        )
    return summary

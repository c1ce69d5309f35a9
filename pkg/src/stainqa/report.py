"""Aggregate stage outputs into summary tables and static plots."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .tables import read_csv


def _scores_scatter(score_rows, alpha, out_path):
    neg = [float(r["mean_score"]) for r in score_rows if r["label_true"] == "negative"]
    pos = [float(r["mean_score"]) for r in score_rows if r["label_true"] == "positive"]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.scatter(range(len(neg)), neg, s=6, c="tab:blue", label="negative (good models)")
    ax.scatter(range(len(neg), len(neg) + len(pos)), pos, s=6, c="tab:red",
               label="positive (poor models)")
    ax.axhline(alpha, color="green", linestyle="--", label=f"alpha = {alpha:.4f}")
    ax.set_xlabel("test image")
    ax.set_ylabel("confidence score")
    ax.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _separation_bars(sep_rows, out_path):
    names = [r["metric_name"] for r in sep_rows]
    # saturated separations report an infinite t; cap for plotting only
    abs_t = [min(float(r["abs_t"]), 1e6) for r in sep_rows]
    kl = [float(r["kl_divergence"]) for r in sep_rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, values, title in ((axes[0], abs_t, "|t| statistic"), (axes[1], kl, "KL divergence")):
        ax.bar(names, values, color="tab:purple")
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=20)
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _sbar_histogram(long_rows, beta, out_path):
    biggest = max(int(r["sample_size"]) for r in long_rows)
    good = [float(r["mean_score"]) for r in long_rows
            if int(r["sample_size"]) == biggest and r["quality_label"] == "good"]
    poor = [float(r["mean_score"]) for r in long_rows
            if int(r["sample_size"]) == biggest and r["quality_label"] != "good"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bins = np.linspace(0.0, 1.0, 41)
    ax.hist(good, bins=bins, alpha=0.6, color="tab:blue", label="good models")
    ax.hist(poor, bins=bins, alpha=0.6, color="tab:red", label="poor models")
    ax.axvline(beta, color="green", linestyle="--", label=f"beta = {beta:.4f}")
    ax.set_xlabel(f"average confidence score (N = {biggest})")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _study_convergence(summary_rows, beta, out_path):
    fig, ax = plt.subplots(figsize=(6.5, 4))
    models = sorted({r["model_id"] for r in summary_rows})
    for model in models:
        rows = sorted(
            (r for r in summary_rows if r["model_id"] == model),
            key=lambda r: int(r["sample_size"]),
        )
        ns = [int(r["sample_size"]) for r in rows]
        means = [float(r["mean_sbar"]) for r in rows]
        stds = [float(r["std_sbar"]) if r["std_sbar"] else 0.0 for r in rows]
        color = "tab:blue" if rows[0]["quality_label"] == "good" else "tab:red"
        ax.errorbar(ns, means, yerr=stds, color=color, alpha=0.5, lw=1)
    ax.axhline(beta, color="green", linestyle="--")
    ax.set_xlabel("images per assessment (N)")
    ax.set_ylabel("average confidence score")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _hs_rejection(rows, out_path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        pts = sorted(
            ((float(r["severity"]), float(r["rejection_rate"])) for r in rows if r["mode"] == mode)
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("corruption severity")
    ax.set_ylabel("rejection rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def build_report(paths, cfg) -> dict:
    out = paths.report
    out.mkdir(parents=True, exist_ok=True)

    with open(paths.calibration, "r", encoding="utf-8") as fh:
        calib = json.load(fh)
    score_rows = read_csv(paths.scores / "test_scores.csv")
    sep_rows = read_csv(paths.scores / "separation.csv")
    study_long = read_csv(paths.study / "study_long.csv")
    study_summary = read_csv(paths.study / "study_summary.csv")
    study_by_n = read_csv(paths.study / "study_by_n.csv")
    cycles_rows = read_csv(paths.ablations / "cycles.csv")
    heads_rows = read_csv(paths.ablations / "heads.csv")
    hs_rejection = read_csv(paths.hs / "hs_rejection.csv")
    with open(paths.external / "summary.json", "r", encoding="utf-8") as fh:
        external = json.load(fh)
    with open(paths.hs / "summary.json", "r", encoding="utf-8") as fh:
        hs_summary = json.load(fh)

    _scores_scatter(score_rows, calib["alpha"], out / "scores_scatter.png")
    _separation_bars(sep_rows, out / "separation_bars.png")
    _sbar_histogram(study_long, calib["beta"], out / "model_sbar_hist.png")
    _study_convergence(study_summary, calib["beta"], out / "study_convergence.png")
    _hs_rejection(hs_rejection, out / "hs_rejection.png")

    score_sep = next(r for r in sep_rows if r["metric_name"] == "confidence_score")
    summary = {
        "alpha": calib["alpha"],
        "beta": calib["beta"],
        "image_level": {
            "accuracy": float(score_sep["accuracy"]),
            "sensitivity": float(score_sep["sensitivity"]),
            "specificity": float(score_sep["specificity"]),
            "abs_t": float(score_sep["abs_t"]),
            "kl_divergence": float(score_sep["kl_divergence"]),
        },
        "baseline_separation": {
            r["metric_name"]: {"abs_t": float(r["abs_t"]), "kl_divergence": float(r["kl_divergence"])}
            for r in sep_rows
            if r["metric_name"] != "confidence_score"
        },
        "cycle_ablation": [
            {k: (float(r[k]) if k != "num_cycles" else int(r[k])) for k in
             ("num_cycles", "accuracy", "sensitivity", "kl_divergence")}
            for r in cycles_rows
        ],
        "head_ablation": [
            {"head_seed": int(r["head_seed"]), "num_heads": int(r["num_heads"]),
             "accuracy": float(r["accuracy"]), "sensitivity": float(r["sensitivity"])}
            for r in heads_rows
        ],
        "model_study": [
            {"sample_size": int(r["sample_size"]), "accuracy": float(r["accuracy"]),
             "kl_divergence": float(r["kl_divergence"])}
            for r in study_by_n
        ],
        "external_generalization": external,
        "hs_benchmark": hs_summary,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary

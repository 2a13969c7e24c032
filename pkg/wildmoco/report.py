"""
Protocol report: loss and kNN curves per run, the accuracy/precision/recall
table, per-preset means over seeds, the gap to the random-init baseline and
warnings when a preset fails the expected trend.
"""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from wildmoco.dir_helper import ensure_dir  # noqa: E402
from wildmoco.log_helper import write_log  # noqa: E402

BASELINE = "random_init"
MIN_GAP = 15.0
TIE_TOLERANCE = 2.0
# (preset, reference): preset should not trail the reference by more than TIE_TOLERANCE
EXPECTED_ORDER = (("mixco", "moco_v2"), ("geocld", "moco_v2"))
RUN_ID_PATTERN = r"^(?P<preset>.+)_s(?P<seed>\d+)$"


def load_metrics(run_dirs):
    out = {}
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(path):
            write_log(f"no metrics.csv in {run_dir}, skipped", level="WARNING")
            continue
        out[os.path.basename(os.path.normpath(run_dir))] = pd.read_csv(path)
    return out


def plot_curves(metrics, column, out_path, ylabel=None):
    """One line per run of ``column`` against step; runs without the column are left out."""
    fig, ax = plt.subplots(figsize=(7, 4))
    plotted = 0
    for name, df in sorted(metrics.items()):
        if column not in df.columns:
            continue
        data = df[["step", column]].dropna()
        if data.empty:
            continue
        ax.plot(data["step"], data[column], label=name, marker="o" if len(data) < 20 else None)
        plotted += 1
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel or column)
    if plotted:
        ax.legend(fontsize="small")
    fig.tight_layout()
    ensure_dir(os.path.dirname(out_path))
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return plotted


def results_table(results_csv):
    df = pd.read_csv(results_csv)
    table = df.rename(columns={"top1": "Acc", "prec_fg": "Prec", "rec_fg": "Rec"})
    parsed = table["run_id"].astype(str).str.extract(RUN_ID_PATTERN)
    table["preset"] = parsed["preset"].fillna(table["run_id"].astype(str))
    table["seed"] = pd.to_numeric(parsed["seed"], errors="coerce")
    return table


def summarize(table):
    """Mean Acc/Prec/Rec per (preset, mode, fraction) and each preset's Acc gap to the baseline."""
    means = (table.groupby(["preset", "mode", "fraction"], as_index=False)[["Acc", "Prec", "Rec"]]
             .mean())
    baseline = means[means["preset"] == BASELINE][["mode", "fraction", "Acc"]].rename(
        columns={"Acc": "baseline_acc"})
    means = means.merge(baseline, on=["mode", "fraction"], how="left")
    means["gap_to_baseline"] = means["Acc"] - means["baseline_acc"]
    return means


def trend_warnings(summary, min_gap=MIN_GAP, tie_tolerance=TIE_TOLERANCE):
    """Soft checks over seed-averaged accuracy: the gap to random init, the expected
    preset ordering, and accuracy growing with the label fraction."""
    warnings = []
    for row in summary.itertuples(index=False):
        if row.preset == BASELINE or pd.isna(row.gap_to_baseline):
            continue
        if row.gap_to_baseline <= 0:
            warnings.append(f"{row.preset} ({row.mode}, fraction {row.fraction}) does not beat "
                            f"random init: {row.Acc:.2f} vs {row.baseline_acc:.2f}")
        elif row.gap_to_baseline < min_gap:
            warnings.append(f"{row.preset} ({row.mode}, fraction {row.fraction}) is only "
                            f"{row.gap_to_baseline:.2f} points above random init, expected >= {min_gap:g}")
    acc = summary.set_index(["preset", "mode", "fraction"])["Acc"]
    for preset, reference in EXPECTED_ORDER:
        for (name, mode, fraction), value in acc.items():
            if name != preset or (reference, mode, fraction) not in acc.index:
                continue
            ref_value = acc[(reference, mode, fraction)]
            if value < ref_value - tie_tolerance:
                warnings.append(f"{preset} ({mode}, fraction {fraction}) trails {reference}: "
                                f"{value:.2f} vs {ref_value:.2f}")
    for (preset, mode), group in summary.groupby(["preset", "mode"]):
        ordered = group.sort_values("fraction")
        if len(ordered) > 1 and ordered["Acc"].diff().dropna().lt(-1e-9).any():
            warnings.append(f"{preset} ({mode}) accuracy drops as the label fraction grows")
    return warnings


def build_report(run_dirs, results_csv, out_dir):
    ensure_dir(out_dir)
    metrics = load_metrics(run_dirs)
    plot_curves(metrics, "loss", os.path.join(out_dir, "loss.png"), "pretraining loss")
    plot_curves(metrics, "knn_acc", os.path.join(out_dir, "knn.png"), "kNN top-1 (%)")

    warnings = []
    if results_csv and os.path.exists(results_csv):
        table = results_table(results_csv)
        table[["run_id", "mode", "fraction", "Acc", "Prec", "Rec"]].to_csv(
            os.path.join(out_dir, "results_table.csv"), index=False)
        summary = summarize(table)
        summary.to_csv(os.path.join(out_dir, "summary.csv"), index=False)
        warnings = trend_warnings(summary)
    elif results_csv:
        write_log(f"results file not found: {results_csv}", level="WARNING")

    for warning in warnings:
        write_log(warning, level="WARNING")
    with open(os.path.join(out_dir, "warnings.txt"), "w", encoding="utf-8") as fout:
        fout.write("\n".join(warnings) + ("\n" if warnings else ""))
    return warnings

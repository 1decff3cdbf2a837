"""CSV tables and SVG figures for evaluation and oracle runs."""

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

FIGSIZE = (8, 6)
DPI = 100


def _new_figure():
    return plt.subplots(figsize=FIGSIZE, dpi=DPI)


def write_delay_cdf_csv(path, table):
    """error_ms,cdf rows from a delay_error_table dict."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["error_ms", "cdf"])
        for e, c in zip(table["error_ms"], table["cdf"]):
            w.writerow([f"{e:.6f}", f"{c:.6f}"])


def write_hrv_errors_csv(path, errors_by_window):
    """feature,source,abs_error rows; one block per evaluated window."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "source", "abs_error"])
        for errs in errors_by_window:
            for feature, pair in errs.items():
                for source in ("rec", "ppg"):
                    w.writerow([feature, source, f"{pair[source]:.6f}"])


def write_probe_csv(path, result, metric_name="mae"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", metric_name])
        for i, m in enumerate(result.per_fold_metric):
            w.writerow([i, f"{m:.6f}"])


def write_risk_curve_csv(path, curve, mc=None):
    """assumed_delay,risk rows, with mc_estimate,mc_se columns when a
    Monte-Carlo cross-check accompanies the scan."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["assumed_delay", "risk"]
        if mc is not None:
            header += ["mc_estimate", "mc_se"]
        w.writerow(header)
        for i, (d, r) in enumerate(zip(curve.assumed_delays, curve.risks)):
            row = [d, f"{r:.12f}"]
            if mc is not None:
                row += [f"{mc[i][0]:.8f}", f"{mc[i][1]:.8f}"]
            w.writerow(row)


def plot_delay_cdfs(path, tables_by_label):
    """Empirical CDFs of absolute per-segment delay error, one curve per
    labelled method."""
    fig, ax = _new_figure()
    for label, table in tables_by_label.items():
        ax.step(table["error_ms"], table["cdf"], where="post", label=label)
        ax.axvline(table["median_ms"], linestyle=":", alpha=0.5)
    ax.set_xlabel("absolute delay error (ms)")
    ax.set_ylabel("fraction of segments")
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_hrv_error_cdfs(path, errors_by_window, features=("rmssd", "pnn20")):
    """Error CDFs per feature, reconstructed-ECG vs PPG-derived."""
    fig, axes = plt.subplots(1, len(features), figsize=FIGSIZE, dpi=DPI)
    if len(features) == 1:
        axes = [axes]
    for ax, feature in zip(axes, features):
        for source in ("rec", "ppg"):
            vals = sorted(e[feature][source] for e in errors_by_window)
            cdf = [(i + 1) / len(vals) for i in range(len(vals))]
            ax.step(vals, cdf, where="post", label=source)
        ax.set_title(feature)
        ax.set_xlabel("absolute error")
        ax.set_ylim(0, 1.02)
        ax.legend()
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("fraction of windows")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_training_curves(path, logs_by_label):
    """Train/validation loss per epoch from training log rows."""
    fig, ax = _new_figure()
    for label, rows in logs_by_label.items():
        epochs = [r["epoch"] for r in rows]
        ax.plot(epochs, [r["val_loss"] for r in rows], label=f"{label} val")
        ax.plot(epochs, [r["train_loss"] for r in rows],
                linestyle="--", alpha=0.6, label=f"{label} train")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked reconstruction loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_risk_curve(path, curve, true_delay=None):
    fig, ax = _new_figure()
    ax.plot(curve.assumed_delays, curve.risks, marker="o")
    if true_delay is not None:
        ax.axvline(true_delay, linestyle=":", color="k", alpha=0.6)
    ax.set_xlabel("assumed delay")
    ax.set_ylabel("expected squared reconstruction error")
    ax.grid(alpha=0.3)
    fig.savefig(path, format="svg")
    plt.close(fig)


def read_training_log(path):
    """Rows of a training log CSV with numeric fields parsed."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({"epoch": int(row["epoch"]),
                         "train_loss": float(row["train_loss"]),
                         "val_loss": float(row["val_loss"]),
                         "mask_ratio": float(row["mask_ratio"]),
                         "lr": float(row["lr"]),
                         "seconds": float(row["seconds"])})
    return rows


def ensure_run_dir(out_dir, force=False):
    """Create (or reuse) a run directory; refuse non-empty without force."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if any(out.iterdir()) and not force:
        raise FileExistsError(
            f"{out} is not empty; pass --force to write into it")
    return out

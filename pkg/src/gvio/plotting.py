"""SVG report plots for a finished run directory."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "gvio"

import matplotlib.pyplot as plt
import numpy as np

from .errors import DatasetError


def _load_csv(path, n_cols):
    if not path.exists():
        raise DatasetError(f"missing {path.name}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise DatasetError(f"{path.name}: expected {n_cols} columns")
            rows.append([float(p) for p in parts])
    return np.array(rows)


def plot_run(run_dir, out_file):
    """Trajectory top view plus error/uncertainty curves for one run."""
    run_dir = Path(run_dir)
    est = _load_csv(run_dir / "estimate.csv", 26)
    err_path = run_dir / "errors.csv"
    err = _load_csv(err_path, 7) if err_path.exists() else None

    fig, axes = plt.subplots(1, 3 if err is not None else 2, figsize=(13, 4))
    axes = np.atleast_1d(axes)

    ax = axes[0]
    ax.plot(est[:, 1], est[:, 2], "b-", lw=1.0, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("trajectory (top view)")
    ax.axis("equal")
    ax.legend(loc="best", fontsize=8)

    ax = axes[1]
    t = est[:, 0]
    sig_p = np.sqrt(est[:, 14:17].sum(axis=1))
    sig_yaw = np.sqrt(est[:, 13])
    ax.plot(t, sig_p, "g-", lw=1.0, label="position sigma (3d)")
    ax.plot(t, sig_yaw, "m-", lw=1.0, label="vertical-axis attitude sigma")
    ax.set_xlabel("t [s]")
    ax.set_title("filter uncertainty")
    ax.legend(loc="best", fontsize=8)

    if err is not None:
        ax = axes[2]
        ax.plot(err[:, 0], err[:, 4], "r-", lw=1.0, label="position error")
        ax.plot(err[:, 0], np.abs(err[:, 5]), "c-", lw=0.8,
                label="|yaw error|")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("[m] / [rad]")
        ax.set_title("errors vs ground truth")
        ax.legend(loc="best", fontsize=8)

    fig.tight_layout()
    fig.savefig(out_file, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(out_file)

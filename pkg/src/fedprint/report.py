"""Render run artifacts into figures and delimited summaries.

Reads the JSON-lines round log (and the sweep CSV when present) from a run
directory and writes PNG figures next to matching CSV files, so every plot
has its raw numbers alongside it.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import ROUNDS_FILE, SWEEP_FILE

ROUND_COLUMNS = [
    "round",
    "gmc",
    "update_rate",
    "fingerprint_valid_count",
    "dmc",
    "valid_fraction",
    "interclass_mse",
    "enhanced",
]


def load_round_log(run_dir: str) -> list[dict]:
    path = os.path.join(run_dir, ROUNDS_FILE)
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_rounds_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROUND_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _series(rows: list[dict], key: str) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(r["round"], r[key]) for r in rows if r.get(key) is not None]
    if not pairs:
        return np.array([]), np.array([])
    x, y = zip(*pairs)
    return np.asarray(x), np.asarray(y, dtype=float)


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_accuracy(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    x, gmc = _series(rows, "gmc")
    ax.plot(x, gmc, label="global model accuracy", color="tab:blue")
    xd, dmc = _series(rows, "dmc")
    if len(xd):
        ax.plot(xd, dmc, label="detector accuracy", color="tab:red")
        ax.axvline(xd[0], color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_update_rate(rows: list[dict], path: str, window: int = 5) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    x, rate = _series(rows, "update_rate")
    ax.plot(x, rate, color="tab:blue", alpha=0.5, label="per round")
    if len(rate) >= window:
        kernel = np.ones(window) / window
        smoothed = np.convolve(rate, kernel, mode="valid")
        ax.plot(x[window - 1 :], smoothed, color="tab:blue", label=f"smoothed ({window})")
    ax.set_xlabel("round")
    ax.set_ylabel("parameter update rate")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_validity(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    x, frac = _series(rows, "valid_fraction")
    if len(x):
        ax.plot(x, frac, color="tab:green", marker=".", markersize=3)
    ax.set_xlabel("round")
    ax.set_ylabel("valid fingerprint fraction")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_interclass_mse(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    x, mse = _series(rows, "interclass_mse")
    if len(x):
        ax.plot(x, mse, color="tab:purple")
    ax.set_xlabel("round")
    ax.set_ylabel("inter-class fingerprint MSE")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_sweep(run_dir: str, path: str) -> bool:
    sweep_path = os.path.join(run_dir, SWEEP_FILE)
    if not os.path.exists(sweep_path):
        return False
    with open(sweep_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return False
    fig, ax = plt.subplots(figsize=(8, 4.4))
    labels = [f"{r['attack']} {r['param']}" for r in rows]
    idx = np.arange(len(rows))
    width = 0.38
    ax.bar(idx - width / 2, [float(r["gmc_after"]) for r in rows], width,
           label="accuracy after attack", color="tab:blue")
    ax.bar(idx + width / 2, [float(r["dmc_att"]) for r in rows], width,
           label="detector accuracy after attack", color="tab:red")
    ax.set_xticks(idx)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    _save(fig, path)
    return True


def fingerprints_to_csv(fp, path: str) -> None:
    """Dump fingerprint state: target, validity, and current sample values."""
    dim = fp.current.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "target", "valid", "birth_round"] + [f"x{i}" for i in range(dim)]
        )
        for i in range(len(fp)):
            writer.writerow(
                [i, int(fp.targets[i]), int(fp.valid[i]), int(fp.birth_round[i])]
                + [repr(float(v)) for v in fp.current[i]]
            )


def render_run(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render every available figure and CSV for a persisted run.

    Returns the list of files written (paths relative to out_dir).
    """
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    rows = load_round_log(run_dir)
    written = []

    write_rounds_csv(rows, os.path.join(out_dir, "rounds.csv"))
    written.append("rounds.csv")

    for name, fn in (
        ("accuracy.png", plot_accuracy),
        ("update_rate.png", plot_update_rate),
        ("fingerprint_validity.png", plot_validity),
        ("interclass_mse.png", plot_interclass_mse),
    ):
        fn(rows, os.path.join(out_dir, name))
        written.append(name)

    if plot_sweep(run_dir, os.path.join(out_dir, "attack_sweep.png")):
        written.append("attack_sweep.png")

    fp_path = os.path.join(run_dir, "fingerprints.frf")
    if os.path.exists(fp_path):
        from .serial import load_fingerprints

        fingerprints_to_csv(
            load_fingerprints(fp_path), os.path.join(out_dir, "fingerprints.csv")
        )
        written.append("fingerprints.csv")
    return written

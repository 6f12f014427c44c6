"""Figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import SuiteResult  # noqa: E402
from .federation import ExperimentResult  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def accuracy_curves(curves: Mapping[str, Sequence[ExperimentResult]], path, title: str = "") -> Path:
    """Average test accuracy per round, one line per label (mean over its runs)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for label, runs in curves.items():
            rounds = [m.round for m in runs[0].history]
            acc = [sum(r.history[i].avg_accuracy for r in runs) / len(runs) for i in range(len(rounds))]
            ax.plot(rounds, acc, label=label, lw=1.4)
        ax.set_xlabel("round")
        ax.set_ylabel("avg accuracy")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def per_domain_bars(result: SuiteResult, path) -> Path:
    """Grouped bars from a comparison table (rows strategy, column, value)."""
    strategies = list(dict.fromkeys(r[0] for r in result.rows))
    columns = [c for c in dict.fromkeys(r[1] for r in result.rows) if c != "delta"]
    value = {(r[0], r[1]): r[2] for r in result.rows}
    width = 0.8 / len(strategies)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(columns), 3.2))
        for i, s in enumerate(strategies):
            xs = [j + i * width for j in range(len(columns))]
            ax.bar(xs, [value[(s, c)] for c in columns], width, label=s)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(columns))])
        ax.set_xticklabels([c if c == "avg" else f"domain {c}" for c in columns])
        ax.set_ylabel("final accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def sweep_curve(result: SuiteResult, path) -> Path:
    """Final Avg accuracy against the swept value (mean over seeds, log x when positive)."""
    param = result.rows[0][0]
    by_value: dict[float, list[float]] = {}
    for _, v, _, domain, acc in result.rows:
        if domain == "avg":
            by_value.setdefault(v, []).append(acc)
    xs = sorted(by_value)
    ys = [sum(by_value[x]) / len(by_value[x]) for x in xs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(xs, ys, marker="o", lw=1.4)
        if len(xs) > 1 and xs[0] > 0 and xs[-1] / xs[0] >= 100:
            ax.set_xscale("log")
        ax.set_xlabel(param)
        ax.set_ylabel("final avg accuracy")
        return _save(fig, path)

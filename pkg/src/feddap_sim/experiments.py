"""Multi-run suites: strategy comparison, loss ablation, hyperparameter sweeps, leave-one-domain-out.

Each suite returns long-format rows ready for CSV and keeps the member
:class:`ExperimentResult` objects so callers can write per-run artifacts.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, Strategy
from .federation import ExperimentResult, run_experiment

COMPARE_STRATEGIES = (Strategy.FEDAVG, Strategy.FEDPROTO_SINGLE, Strategy.UNIFORM_DOMAIN_AVG, Strategy.FEDDAP)
ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))
SWEEPABLE = {"tau_agg": float, "tau_cross": float, "lambda1": float, "lambda2": float}


@dataclass
class SuiteResult:
    columns: list[str]
    rows: list[list]
    runs: dict[str, list[ExperimentResult]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def run_many(configs: Sequence[ExperimentConfig], jobs: int = 1) -> list[ExperimentResult]:
    """Run independent experiments, optionally in worker processes; order is preserved."""
    if jobs <= 1 or len(configs) <= 1:
        return [run_experiment(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_experiment, configs))


def _seeded(config: ExperimentConfig, seeds: Sequence[int] | None) -> list[ExperimentConfig]:
    return [config.replace(seed=s) for s in (seeds if seeds else [config.seed])]


def _mean(values) -> float:
    return float(np.mean(values))


def compare(config: ExperimentConfig, seeds: Sequence[int] | None = None,
            strategies: Sequence[Strategy] = COMPARE_STRATEGIES, jobs: int = 1) -> SuiteResult:
    """Per-domain accuracy, Avg, and improvement over FedAvg for each strategy.

    Rows are ``(strategy, column, value)`` with one row per domain plus
    ``avg`` and ``delta``; values are means over seeds.
    """
    plan = [(s, c.replace(strategy=s)) for s in strategies for c in _seeded(config, seeds)]
    results = run_many([c for _, c in plan], jobs)
    runs: dict[str, list[ExperimentResult]] = {}
    for (s, _), r in zip(plan, results):
        runs.setdefault(s.value, []).append(r)
    domains = results[0].eval_domains
    avg = {name: _mean([r.final_accuracy() for r in rs]) for name, rs in runs.items()}
    base = avg.get(Strategy.FEDAVG.value)
    rows = []
    for name, rs in runs.items():
        for d in domains:
            rows.append([name, str(d), _mean([r.final_accuracy(d) for r in rs])])
        rows.append([name, "avg", avg[name]])
        rows.append([name, "delta", avg[name] - base if base is not None else float("nan")])
    return SuiteResult(["strategy", "column", "value"], rows, runs)


def ablate(config: ExperimentConfig, seeds: Sequence[int] | None = None, jobs: int = 1) -> SuiteResult:
    """The 2x2 grid of alignment-loss toggles on the configured strategy."""
    if config.strategy is Strategy.FEDAVG:
        config = config.replace(strategy=Strategy.FEDDAP)
    plan = [((dpa, cp), c.replace(use_dpa=dpa, use_cpcl=cp))
            for dpa, cp in ABLATION_GRID for c in _seeded(config, seeds)]
    results = run_many([c for _, c in plan], jobs)
    runs: dict[str, list[ExperimentResult]] = {}
    for ((dpa, cp), _), r in zip(plan, results):
        runs.setdefault(f"dpa={int(dpa)},cpcl={int(cp)}", []).append(r)
    domains = results[0].eval_domains
    rows = []
    for (dpa, cp) in ABLATION_GRID:
        rs = runs[f"dpa={int(dpa)},cpcl={int(cp)}"]
        rows.append([int(dpa), int(cp)] + [_mean([r.final_accuracy(d) for r in rs]) for d in domains]
                    + [_mean([r.final_accuracy() for r in rs])])
    return SuiteResult(["use_dpa", "use_cpcl"] + [f"domain_{d}" for d in domains] + ["avg"], rows, runs)


def parse_sweep_values(param: str, values: Sequence[str]) -> list:
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; sweepable parameters: {', '.join(sorted(SWEEPABLE))}")
    try:
        return [SWEEPABLE[param](v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value for {param}: {exc}") from None


def sweep(config: ExperimentConfig, param: str, values: Sequence, seeds: Sequence[int] | None = None,
          jobs: int = 1) -> SuiteResult:
    """One run per (value, seed); long rows ``param, value, seed, domain, accuracy``."""
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; sweepable parameters: {', '.join(sorted(SWEEPABLE))}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    plan = [(v, c.replace(**{param: SWEEPABLE[param](v)})) for v in values for c in _seeded(config, seeds)]
    results = run_many([c for _, c in plan], jobs)
    rows = []
    runs: dict[str, list[ExperimentResult]] = {}
    for (v, c), r in zip(plan, results):
        runs.setdefault(repr(SWEEPABLE[param](v)), []).append(r)
        for d in r.eval_domains:
            rows.append([param, SWEEPABLE[param](v), c.seed, str(d), r.final_accuracy(d)])
        rows.append([param, SWEEPABLE[param](v), c.seed, "avg", r.final_accuracy()])
    return SuiteResult(["param", "value", "seed", "domain", "accuracy"], rows, runs)


def lodo(config: ExperimentConfig, seeds: Sequence[int] | None = None, jobs: int = 1) -> SuiteResult:
    """Hold out each domain in turn; report the held-out domain's accuracy and the average."""
    plan = [(h, c.replace(holdout_domain=h)) for h in range(config.num_domains) for c in _seeded(config, seeds)]
    results = run_many([c for _, c in plan], jobs)
    runs: dict[str, list[ExperimentResult]] = {}
    for (h, _), r in zip(plan, results):
        runs.setdefault(f"holdout_{h}", []).append(r)
    rows = []
    targets = []
    for h in range(config.num_domains):
        acc = _mean([r.final_accuracy(h) for r in runs[f"holdout_{h}"]])
        targets.append(acc)
        rows.append([config.strategy.value, str(h), acc])
    rows.append([config.strategy.value, "avg", _mean(targets)])
    return SuiteResult(["strategy", "target", "accuracy"], rows, runs)

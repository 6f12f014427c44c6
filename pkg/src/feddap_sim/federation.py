"""Synchronous round loop: broadcast, local training, upload, aggregation.

A round takes the global model and the current prototype table, trains
every client from that model, collects updated weights and local prototypes,
fuses the prototypes according to the strategy, and averages the weights by
client sample count. The table is empty before the first round finishes, so
the alignment losses only switch on from the second round.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as datamod
from . import rng
from .config import ExperimentConfig, Strategy
from .data import ClientDataset, Samples
from .model import (
    DivergenceError,
    LossOptions,
    ModelParams,
    backward,
    init_params,
    predict,
    sgd_step,
)
from .prototypes import (
    LocalPrototypeSet,
    PrototypeTable,
    aggregate_domain_specific,
    aggregate_single_global,
    aggregate_uniform,
    compute_local_prototypes,
    dp_noise,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["round", "strategy", "domain", "accuracy", "ce", "dpa", "cpcl", "total"]


@dataclass
class LocalResult:
    client_id: int
    domain_id: int
    n: int
    params: ModelParams
    prototypes: LocalPrototypeSet | None
    losses: dict[str, float]  # mean over the client's mini-batches
    batches: int = 0
    dpa_empty_batches: int = 0
    cpcl_flagged_samples: int = 0


@dataclass
class RoundState:
    t: int
    params: ModelParams
    table: PrototypeTable | None
    client_sizes: dict[int, int]

    def weights(self) -> dict[int, float]:
        total = sum(self.client_sizes.values())
        return {cid: n / total for cid, n in self.client_sizes.items()}


@dataclass
class RoundMetrics:
    round: int
    accuracy: dict[int, float]
    losses: dict[int, dict[str, float]]  # per domain
    avg_losses: dict[str, float]
    upload_values: dict[int, int]  # per client
    download_values: int
    seconds: float = 0.0

    @property
    def avg_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


@dataclass
class Federation:
    """Training clients, per-domain test sets, and the domain specs they came from."""

    clients: list[ClientDataset]
    test: Samples
    num_domains: int
    num_classes: int
    specs: list[datamod.DomainSpec] = field(default_factory=list)

    @property
    def train_domains(self) -> list[int]:
        return sorted({c.domain_id for c in self.clients})


def loss_options(config: ExperimentConfig) -> LossOptions:
    return LossOptions(config.dpa_normalize, config.dpa_per_sample, config.negatives_include_own_domain)


def prepare_federation(config: ExperimentConfig) -> Federation:
    """Generate (or load) data, split it, and allocate training clients."""
    seed = config.effective_data_seed
    if config.csv_path:
        samples = datamod.load_csv(config.csv_path)
        if samples.raw_dim != config.raw_dim:
            raise datamod.DataError(f"{config.csv_path} has raw_dim {samples.raw_dim}, config says {config.raw_dim}")
        specs = []
    else:
        specs = datamod.default_domain_specs(
            config.num_domains, config.num_classes, config.raw_dim, seed,
            class_sep=config.class_sep, noise_sigma=config.noise_sigma,
            scale_range=(config.scale_min, config.scale_max), shift=config.domain_shift,
        )
        samples = datamod.generate(specs, config.samples_per_class_per_domain, seed)
    if len(samples) and (samples.y.max() >= config.num_classes or samples.d.max() >= config.num_domains):
        raise datamod.DataError("dataset labels or domains exceed the configured counts")
    train, test = datamod.train_test_split(samples, config.test_fraction, seed)
    allocation = {d: k for d, k in enumerate(config.allocation) if d != config.holdout_domain}
    clients = datamod.partition(train, allocation, seed)
    if config.outlier_clients_per_domain:
        if not specs:
            raise datamod.DataError("outlier clients need generated data, not a CSV dataset")
        for d in sorted(allocation):
            per_class = max(1, round(int(np.sum(train.d == d)) / (config.num_classes * allocation[d])))
            for _ in range(config.outlier_clients_per_domain):
                clients.append(datamod.make_outlier_client(
                    specs[d], per_class, config.outlier_noise_factor, len(clients), seed))
    return Federation(clients, test, config.num_domains, config.num_classes, specs)


def initial_params(config: ExperimentConfig) -> ModelParams:
    sizes = (config.raw_dim, *config.hidden, config.feature_dim)
    return init_params(sizes, config.num_classes, config.seed)


def local_update(client: ClientDataset, params: ModelParams, table: PrototypeTable | None,
                 config: ExperimentConfig, round_idx: int = 0) -> LocalResult:
    """Train a copy of ``params`` on the client's data, then compute its prototypes."""
    lam1, lam2 = config.effective_lambdas
    options = loss_options(config)
    X, y = client.samples.X, client.samples.y
    work = params.copy()
    sums = {"ce": 0.0, "dpa": 0.0, "cpcl": 0.0, "total": 0.0}
    batches = empty = flagged = 0
    for epoch in range(config.local_epochs):
        order = rng.stream(config.seed, "batch", round_idx, client.client_id, epoch).permutation(client.n)
        for start in range(0, client.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                bd, grads = backward(work, X[idx], y[idx], table, client.domain_id,
                                     lam1, lam2, config.tau_cross, options)
            except DivergenceError as exc:
                raise DivergenceError(f"round {round_idx}, client {client.client_id}, epoch {epoch}: {exc}") from None
            if not math.isfinite(bd.total):
                raise DivergenceError(f"round {round_idx}, client {client.client_id}, epoch {epoch}: non-finite loss")
            work = sgd_step(work, grads, config.lr)
            for k in sums:
                sums[k] += getattr(bd, k)
            batches += 1
            if table is not None:
                empty += bd.dpa_empty
                flagged += bd.cpcl_flagged
    losses = {k: (v / batches if batches else float("nan")) for k, v in sums.items()}
    protos = compute_local_prototypes(work, client) if config.uses_prototypes else None
    return LocalResult(client.client_id, client.domain_id, client.n, work, protos, losses,
                       batches, empty, flagged)


def aggregate_models(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Average of client parameters weighted by their sample counts."""
    if not updates:
        raise ValueError("no client updates to aggregate")
    counts = np.array([n for _, n in updates], dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("client sample counts must be positive")
    w = counts / counts.sum()
    blocks = zip(*(p.arrays() for p, _ in updates))
    averaged = [sum(wi * a for wi, a in zip(w, arrs)) for arrs in blocks]
    return updates[0][0].with_arrays(averaged)


def aggregate_prototypes(uploads: Sequence[LocalPrototypeSet], config: ExperimentConfig,
                         train_domains: Sequence[int]) -> PrototypeTable | None:
    if not config.uses_prototypes:
        return None
    D, C, I = config.num_domains, config.num_classes, config.feature_dim
    if config.strategy is Strategy.FEDDAP:
        return aggregate_domain_specific(uploads, D, C, config.tau_agg, feature_dim=I)
    if config.strategy is Strategy.UNIFORM_DOMAIN_AVG:
        return aggregate_uniform(uploads, D, C, feature_dim=I)
    if config.strategy is Strategy.FEDPROTO_SINGLE:
        return aggregate_single_global(uploads, D, C, feature_dim=I, domains=train_domains)
    raise ValueError(f"no prototype aggregation for {config.strategy}")


def evaluate(params: ModelParams, test: Samples, domains: Sequence[int]) -> dict[int, float]:
    """Top-1 accuracy on each domain's test samples."""
    pred = predict(params, test.X) if len(test) else np.zeros(0, np.int64)
    out = {}
    for d in domains:
        rows = test.d == d
        out[d] = float(np.mean(pred[rows] == test.y[rows])) if rows.any() else float("nan")
    return out


def run_round(state: RoundState, fed: Federation, config: ExperimentConfig) -> tuple[RoundState, list[LocalResult], PrototypeTable | None]:
    """One synchronous round over all clients; returns the advanced state."""
    results = [local_update(c, state.params, state.table, config, state.t) for c in fed.clients]
    uploads = [r.prototypes for r in results if r.prototypes is not None]
    if config.dp_enabled:
        uploads = [dp_noise(u, config.dp_q, config.dp_s, config.seed, (state.t, u.client_id)) for u in uploads]
    table = aggregate_prototypes(uploads, config, fed.train_domains)
    params = aggregate_models([(r.params, r.n) for r in results])
    new_state = RoundState(state.t + 1, params, table, {r.client_id: r.n for r in results})
    return new_state, results, table


def _loss_summary(results: Sequence[LocalResult]) -> tuple[dict[int, dict[str, float]], dict[str, float]]:
    per_domain: dict[int, dict[str, float]] = {}
    for d in sorted({r.domain_id for r in results}):
        members = [r for r in results if r.domain_id == d]
        per_domain[d] = {k: float(np.mean([r.losses[k] for r in members])) for k in ("ce", "dpa", "cpcl", "total")}
    n = np.array([r.n for r in results], dtype=np.float64)
    w = n / n.sum()
    overall = {k: float(sum(wi * r.losses[k] for wi, r in zip(w, results))) for k in ("ce", "dpa", "cpcl", "total")}
    return per_domain, overall


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    history: list[RoundMetrics]
    params: ModelParams
    table: PrototypeTable | None
    eval_domains: list[int]
    train_domains: list[int]
    client_log: list[dict] = field(default_factory=list)

    def final_accuracy(self, domain: int | None = None) -> float:
        """Mean accuracy over the last ``final_window`` evaluations (Avg if ``domain`` is None)."""
        window = self.history[-self.config.final_window:]
        if domain is None:
            return float(np.mean([m.avg_accuracy for m in window]))
        return float(np.mean([m.accuracy[domain] for m in window]))

    def final_per_domain(self) -> dict[int, float]:
        return {d: self.final_accuracy(d) for d in self.eval_domains}

    def metrics_rows(self) -> list[list]:
        strat = self.config.strategy.value
        rows = []
        for m in self.history:
            for d in self.eval_domains:
                loss = m.losses.get(d, {})
                rows.append([m.round, strat, d, m.accuracy[d]] + [loss.get(k) for k in ("ce", "dpa", "cpcl", "total")])
            rows.append([m.round, strat, "avg", m.avg_accuracy] + [m.avg_losses.get(k) for k in ("ce", "dpa", "cpcl", "total")])
        return rows

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.metrics_rows():
            w.writerow(["" if v is None or (isinstance(v, float) and math.isnan(v)) else
                        (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def summary(self) -> dict:
        cfg = self.config
        out = {
            "strategy": cfg.strategy.value,
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "rounds": cfg.rounds,
            "train_domains": self.train_domains,
            "eval_domains": self.eval_domains,
            "final_avg_accuracy": self.final_accuracy(),
            "final_accuracy": {str(d): a for d, a in self.final_per_domain().items()},
            "communication": [
                {"round": m.round, "upload_per_client": {str(k): v for k, v in m.upload_values.items()},
                 "download": m.download_values}
                for m in self.history if m.round > 0
            ],
            "clients": self.client_log,
        }
        if cfg.holdout_domain >= 0:
            out["holdout_domain"] = cfg.holdout_domain
            out["target_accuracy"] = self.final_accuracy(cfg.holdout_domain)
        return out

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out_dir / "metrics.csv",
            "summary": out_dir / "summary.json",
            "model": out_dir / "final_model.json",
        }
        paths["metrics"].write_text(self.metrics_csv())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        paths["model"].write_text(json.dumps(checkpoint(self.history[-1].round, self.params, self.table)) + "\n")
        return paths


def checkpoint(round_idx: int, params: ModelParams, table: PrototypeTable | None) -> dict:
    return {"round": round_idx, "model": params.to_dict(),
            "prototypes": table.to_dict() if table is not None else None}


def run_experiment(config: ExperimentConfig, fed: Federation | None = None, out_dir=None) -> ExperimentResult:
    """Run ``config.rounds`` rounds and evaluate at the configured cadence.

    Round 0 in the log is the untrained initial model.
    """
    fed = fed if fed is not None else prepare_federation(config)
    train_domains = fed.train_domains
    eval_domains = sorted(set(train_domains) | ({config.holdout_domain} if config.holdout_domain >= 0 else set()))
    state = RoundState(0, initial_params(config), None, {c.client_id: c.n for c in fed.clients})
    history = [RoundMetrics(0, evaluate(state.params, fed.test, eval_domains), {}, {}, {}, 0)]
    client_log = [{"client_id": c.client_id, "domain": c.domain_id, "n": c.n} for c in fed.clients]
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None and config.checkpoint_every else None

    for t in range(config.rounds):
        tic = time.perf_counter()
        state, results, table = run_round(state, fed, config)
        per_domain, overall = _loss_summary(results)
        uploads = {r.client_id: (r.prototypes.num_values() if r.prototypes is not None else 0) for r in results}
        download = table.num_values() if table is not None else 0
        is_last = t == config.rounds - 1
        if (t + 1) % config.eval_every == 0 or is_last:
            acc = evaluate(state.params, fed.test, eval_domains)
            history.append(RoundMetrics(t + 1, acc, per_domain, overall, uploads, download,
                                        time.perf_counter() - tic))
            log.debug("round %d avg acc %.4f", t + 1, history[-1].avg_accuracy)
        if ckpt_dir is not None and (t + 1) % config.checkpoint_every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            (ckpt_dir / f"round_{t + 1:04d}.json").write_text(json.dumps(checkpoint(t + 1, state.params, state.table)))

    result = ExperimentResult(config, history, state.params, state.table, eval_domains, train_domains, client_log)
    if out_dir is not None:
        result.write(out_dir)
    return result

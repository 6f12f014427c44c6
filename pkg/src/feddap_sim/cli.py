"""Command-line experiment runner.

    feddap-sim run CONFIG [--out DIR] [--KEY VALUE ...]
    feddap-sim compare CONFIG [--seeds 0,1,2]
    feddap-sim ablate CONFIG
    feddap-sim sweep CONFIG PARAM VALUE [VALUE ...]
    feddap-sim lodo CONFIG
    feddap-sim gen-data CONFIG [--out FILE]
    feddap-sim check-grads [--instances N]
    feddap-sim default-config

Any ``--KEY VALUE`` pair naming a config key overrides the file. Outputs go
to ``--out`` or to ``$FEDDAP_OUTPUT_ROOT/<command>-<config hash>``
(default root ``runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, experiments, report
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, default_domain_specs, generate, write_csv
from .federation import run_experiment
from .gradcheck import check_gradients
from .model import DivergenceError

log = logging.getLogger("feddap_sim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

OUTPUT_ROOT_ENV = "FEDDAP_OUTPUT_ROOT"


def _parse_overrides(tokens: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {tok} is missing a value")
            key, val = tok[2:], tokens[i + 1]
            i += 2
        out[key] = val
    return out


def _seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def _out_dir(args, command: str, config: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{command}-{config.config_hash()}"


def _manifest(out: Path, command: str, config: ExperimentConfig, overrides: dict, started: float,
              outputs: dict, seeds=None) -> None:
    doc = {
        "command": command,
        "config_hash": config.config_hash(),
        "seeds": seeds or [config.seed],
        "strategy": config.strategy.value,
        "effective_config": config.to_dict(),
        "overrides": overrides,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_run(args, config, overrides) -> int:
    started = time.time()
    out = _out_dir(args, "run", config)
    result = run_experiment(config, out_dir=out)
    paths = result.write(out)
    if args.figures:
        paths["figure"] = report.accuracy_curves({config.strategy.value: [result]}, out / "accuracy.png")
    _manifest(out, "run", config, overrides, started, paths)
    print(f"{config.strategy.value}: final avg accuracy {result.final_accuracy():.4f} -> {out}")
    return EXIT_OK


def _write_suite(args, command, config, overrides, suite, seeds, started, figure=None) -> Path:
    out = _out_dir(args, command, config)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": suite.write(out / f"{command}.csv")}
    for name, runs in suite.runs.items():
        for r in runs:
            r.write(out / "runs" / name.replace(",", "_").replace("=", "") / f"seed{r.config.seed}")
    if args.figures and figure is not None:
        paths["figure"] = figure(out)
    _manifest(out, command, config, overrides, started, paths, seeds)
    print(suite.to_csv(), end="")
    return out


def cmd_compare(args, config, overrides) -> int:
    started = time.time()
    seeds = _seeds(args.seeds)
    suite = experiments.compare(config, seeds, jobs=args.jobs)

    def figs(out):
        report.per_domain_bars(suite, out / "compare.png")
        return report.accuracy_curves(suite.runs, out / "accuracy.png")

    _write_suite(args, "compare", config, overrides, suite, seeds, started, figs)
    return EXIT_OK


def cmd_ablate(args, config, overrides) -> int:
    started = time.time()
    seeds = _seeds(args.seeds)
    suite = experiments.ablate(config, seeds, jobs=args.jobs)
    _write_suite(args, "ablate", config, overrides, suite, seeds, started,
                 lambda out: report.accuracy_curves(suite.runs, out / "accuracy.png"))
    return EXIT_OK


def cmd_sweep(args, config, overrides) -> int:
    started = time.time()
    seeds = _seeds(args.seeds)
    values = experiments.parse_sweep_values(args.param, args.values)
    suite = experiments.sweep(config, args.param, values, seeds, jobs=args.jobs)
    _write_suite(args, "sweep", config, overrides, suite, seeds, started,
                 lambda out: report.sweep_curve(suite, out / "sweep.png"))
    return EXIT_OK


def cmd_lodo(args, config, overrides) -> int:
    started = time.time()
    seeds = _seeds(args.seeds)
    suite = experiments.lodo(config, seeds, jobs=args.jobs)
    _write_suite(args, "lodo", config, overrides, suite, seeds, started,
                 lambda out: report.accuracy_curves(suite.runs, out / "accuracy.png"))
    return EXIT_OK


def cmd_gen_data(args, config, overrides) -> int:
    specs = default_domain_specs(
        config.num_domains, config.num_classes, config.raw_dim, config.effective_data_seed,
        class_sep=config.class_sep, noise_sigma=config.noise_sigma,
        scale_range=(config.scale_min, config.scale_max), shift=config.domain_shift)
    samples = generate(specs, config.samples_per_class_per_domain, config.effective_data_seed)
    out = Path(args.out) if args.out else _out_dir(args, "gen-data", config) / "data.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_check_grads(args) -> int:
    started = time.time()
    rep = check_gradients(args.instances, args.seed)
    for term, err in rep.max_rel_error.items():
        print(f"{term:>6}: max relative error {err:.3e}")
    print(f"{rep.instances} instances, worst {rep.worst:.3e}, {time.time() - started:.2f}s")
    return EXIT_OK if rep.worst < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddap-sim", description="Federated domain-aware prototype simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="experiment config file (INI)")
        p.add_argument("--out", help="output directory (or file for gen-data)")
        p.add_argument("--seeds", help="comma-separated seeds; results are averaged")
        p.add_argument("--jobs", type=int, default=1, help="parallel member runs")
        p.add_argument("--no-figures", dest="figures", action="store_false", help="skip PNG figures")
        return p

    with_config("run", "single experiment")
    with_config("compare", "FedAvg / FedProto-single / uniform / FedDAP on identical data")
    with_config("ablate", "2x2 grid of alignment-loss toggles")
    p = with_config("sweep", "one run per value of a hyperparameter")
    p.add_argument("param")
    p.add_argument("values", nargs="+")
    with_config("lodo", "leave-one-domain-out")
    with_config("gen-data", "write the synthetic dataset as CSV")
    p = sub.add_parser("check-grads", help="finite-difference gradient check")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    sub.add_parser("default-config", help="print the default config file")
    return parser


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "lodo": cmd_lodo,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "check-grads":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_check_grads(args)
        if args.command == "default-config":
            print(ExperimentConfig().to_ini(), end="")
            return EXIT_OK
        overrides = _parse_overrides(extra)
        config = load_config(args.config, overrides)
        return COMMANDS[args.command](args, config, overrides)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

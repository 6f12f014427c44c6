"""Experiment configuration: a sectioned INI file with typed, validated keys.

Every key belongs to exactly one section and key names are unique across
sections, so command-line overrides may use the bare key (``--rounds 3``) or
the dotted form (``--experiment.rounds 3``). Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    """Invalid configuration file or override."""


class Strategy(str, Enum):
    FEDDAP = "feddap"
    FEDAVG = "fedavg"
    FEDPROTO_SINGLE = "fedproto_single"
    UNIFORM_DOMAIN_AVG = "uniform_domain_avg"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        key = text.strip().lower().replace("-", "_")
        aliases = {"fedprotosingle": "fedproto_single", "uniformdomainavg": "uniform_domain_avg",
                   "uniform": "uniform_domain_avg", "fedproto": "fedproto_single"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown strategy {text!r}; choose from {[s.value for s in cls]}") from None


def _section(name: str):
    return {"section": name}


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    strategy: Strategy = field(default=Strategy.FEDDAP, metadata=_section("experiment"))
    use_dpa: bool = field(default=True, metadata=_section("experiment"))
    use_cpcl: bool = field(default=True, metadata=_section("experiment"))
    rounds: int = field(default=50, metadata=_section("experiment"))
    local_epochs: int = field(default=1, metadata=_section("experiment"))
    batch_size: int = field(default=32, metadata=_section("experiment"))
    lr: float = field(default=0.02, metadata=_section("experiment"))
    lambda1: float = field(default=10.0, metadata=_section("experiment"))
    lambda2: float = field(default=1.0, metadata=_section("experiment"))
    tau_agg: float = field(default=0.001, metadata=_section("experiment"))
    tau_cross: float = field(default=0.07, metadata=_section("experiment"))
    dpa_normalize: bool = field(default=True, metadata=_section("experiment"))
    dpa_per_sample: bool = field(default=False, metadata=_section("experiment"))
    negatives_include_own_domain: bool = field(default=False, metadata=_section("experiment"))
    seed: int = field(default=0, metadata=_section("experiment"))
    eval_every: int = field(default=1, metadata=_section("experiment"))
    final_window: int = field(default=5, metadata=_section("experiment"))
    holdout_domain: int = field(default=-1, metadata=_section("experiment"))
    checkpoint_every: int = field(default=0, metadata=_section("experiment"))
    # [model]
    hidden: tuple[int, ...] = field(default=(32,), metadata=_section("model"))
    feature_dim: int = field(default=16, metadata=_section("model"))
    # [data]
    num_domains: int = field(default=4, metadata=_section("data"))
    num_classes: int = field(default=5, metadata=_section("data"))
    raw_dim: int = field(default=8, metadata=_section("data"))
    samples_per_class_per_domain: int = field(default=200, metadata=_section("data"))
    test_fraction: float = field(default=0.2, metadata=_section("data"))
    allocation: tuple[int, ...] = field(default=(3, 2, 1, 2), metadata=_section("data"))
    noise_sigma: float = field(default=1.0, metadata=_section("data"))
    class_sep: float = field(default=1.0, metadata=_section("data"))
    domain_shift: float = field(default=1.0, metadata=_section("data"))
    scale_min: float = field(default=0.6, metadata=_section("data"))
    scale_max: float = field(default=1.4, metadata=_section("data"))
    outlier_clients_per_domain: int = field(default=0, metadata=_section("data"))
    outlier_noise_factor: float = field(default=5.0, metadata=_section("data"))
    data_seed: int = field(default=-1, metadata=_section("data"))
    csv_path: str = field(default="", metadata=_section("data"))
    # [privacy]
    dp_enabled: bool = field(default=False, metadata=_section("privacy"))
    dp_q: float = field(default=0.1, metadata=_section("privacy"))
    dp_s: float = field(default=0.05, metadata=_section("privacy"))

    def __post_init__(self):
        if not isinstance(self.strategy, Strategy):
            object.__setattr__(self, "strategy", Strategy.parse(str(self.strategy)))
        self.validate()

    def validate(self) -> None:
        positive = ["batch_size", "eval_every", "feature_dim", "num_domains", "num_classes",
                    "raw_dim", "samples_per_class_per_domain", "tau_agg", "tau_cross", "final_window"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = ["rounds", "local_epochs", "lr", "lambda1", "lambda2", "checkpoint_every",
                  "outlier_clients_per_domain", "noise_sigma", "dp_q", "dp_s"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if len(self.allocation) != self.num_domains:
            raise ConfigError(f"allocation lists {len(self.allocation)} domains, num_domains is {self.num_domains}")
        if any(k < 1 for k in self.allocation):
            raise ConfigError("every domain needs at least one client")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")
        if not -1 <= self.holdout_domain < self.num_domains:
            raise ConfigError(f"holdout_domain must be -1 or a domain id, got {self.holdout_domain}")
        if self.holdout_domain >= 0 and self.num_domains < 2:
            raise ConfigError("leave-one-domain-out needs at least two domains")
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise ConfigError("need 0 < scale_min <= scale_max")

    # strategy semantics

    @property
    def dpa_active(self) -> bool:
        return self.strategy is not Strategy.FEDAVG and self.use_dpa

    @property
    def cpcl_active(self) -> bool:
        return self.strategy is not Strategy.FEDAVG and self.use_cpcl

    @property
    def effective_lambdas(self) -> tuple[float, float]:
        return (self.lambda1 if self.dpa_active else 0.0, self.lambda2 if self.cpcl_active else 0.0)

    @property
    def uses_prototypes(self) -> bool:
        return self.strategy is not Strategy.FEDAVG

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed

    @property
    def num_clients(self) -> int:
        return sum(self.allocation)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        current = None
        for f in dataclasses.fields(self):
            sec = f.metadata["section"]
            if sec != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{sec}]")
                current = sec
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                text = v.value
            elif isinstance(v, tuple):
                text = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                text = "true" if v else "false"
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_TYPES = get_type_hints(ExperimentConfig)
SECTIONS = sorted({f.metadata["section"] for f in _FIELDS.values()})


def _coerce(name: str, text: str):
    typ = _TYPES[name]
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is Strategy:
            return Strategy.parse(text)
        if typ == tuple[int, ...]:
            return tuple(int(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())
        return text
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def resolve_key(key: str) -> str:
    """Map ``rounds`` / ``experiment.rounds`` / ``--rounds`` to a field name."""
    key = key.lstrip("-").replace("-", "_")
    if "." in key:
        sec, name = key.split(".", 1)
        if name not in _FIELDS or _FIELDS[name].metadata["section"] != sec:
            raise ConfigError(f"unknown config key {key!r}")
        return name
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_ini(text: str, source: str = "<string>") -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, Any] = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in _FIELDS or _FIELDS[key].metadata["section"] != sec:
                raise ConfigError(f"{source}: unknown key {key!r} in section [{sec}]")
            values[key] = _coerce(key, raw)
    return values


def build_config(values: dict[str, Any] | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    merged = dict(values or {})
    for key, raw in (overrides or {}).items():
        name = resolve_key(key)
        merged[name] = _coerce(name, raw) if isinstance(raw, str) else raw
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return build_config(parse_ini(path.read_text(), source=str(path)), overrides)

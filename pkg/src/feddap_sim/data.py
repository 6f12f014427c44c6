"""Synthetic multi-domain classification data and its split across clients.

Every domain shares the same class means in a latent space; a per-domain
affine map (rotation, scale and shift) moves the whole domain to its own
region of input space. A class therefore looks different in every domain,
which is the situation a single averaged prototype handles badly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import rng


class DataError(ValueError):
    """Raised for malformed or inconsistent datasets."""


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    class_means: np.ndarray  # (C, raw_dim)
    transform: np.ndarray  # (raw_dim, raw_dim)
    offset: np.ndarray  # (raw_dim,)
    noise_sigma: float

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        A = np.asarray(self.transform, dtype=np.float64)
        b = np.asarray(self.offset, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 2:
            raise DataError("a domain needs at least two class means")
        k = means.shape[1]
        if A.shape != (k, k):
            raise DataError(f"transform must be {k}x{k}, got {A.shape}")
        if b.shape != (k,):
            raise DataError(f"offset must have length {k}, got {b.shape}")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be nonnegative")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "transform", A)
        object.__setattr__(self, "offset", b)

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.class_means.shape[1]

    def analytic_mean(self, c: int) -> np.ndarray:
        return self.transform @ self.class_means[c] + self.offset


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    d: int


class Samples:
    """Column-oriented collection of samples: features ``X``, labels ``y``, domains ``d``."""

    def __init__(self, X, y, d):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        d = np.asarray(d, dtype=np.int64)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        if not (X.shape[0] == y.shape[0] == d.shape[0]):
            raise DataError("X, y and d must have the same number of rows")
        self.X, self.y, self.d = X, y, d

    @classmethod
    def empty(cls, raw_dim: int) -> "Samples":
        return cls(np.zeros((0, raw_dim)), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["Samples"]) -> "Samples":
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.d for p in parts]),
        )

    def __len__(self) -> int:
        return self.y.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.X[i], int(self.y[i]), int(self.d[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Samples):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.d, other.d)
        )

    @property
    def raw_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Samples":
        return Samples(self.X[idx], self.y[idx], self.d[idx])

    def where_domain(self, domain: int) -> "Samples":
        return self.subset(self.d == domain)

    def domains(self) -> list[int]:
        return sorted(set(self.d.tolist()))


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    domain_id: int
    samples: Samples

    def __post_init__(self):
        if len(self.samples) == 0:
            raise DataError(f"client {self.client_id} has no samples")
        if np.any(self.samples.d != self.domain_id):
            raise DataError(f"client {self.client_id} holds samples outside domain {self.domain_id}")

    @property
    def n(self) -> int:
        return len(self.samples)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.samples.y, minlength=num_classes)


def random_rotation(k: int, gen: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(gen.standard_normal((k, k)))
    # sign fix makes the draw Haar-distributed
    return q * np.sign(np.diag(r))


def default_domain_specs(
    num_domains: int,
    num_classes: int,
    raw_dim: int,
    seed: int,
    class_sep: float = 1.0,
    noise_sigma: float = 1.0,
    scale_range: tuple[float, float] = (0.6, 1.4),
    shift: float = 1.0,
) -> list[DomainSpec]:
    """Shared class means, one rotation+scale+shift transform per domain."""
    if num_classes < 2:
        raise DataError("need at least two classes")
    gen = rng.stream(seed, "domains")
    means = gen.standard_normal((num_classes, raw_dim)) * class_sep
    specs = []
    for d in range(num_domains):
        scale = gen.uniform(*scale_range)
        A = scale * random_rotation(raw_dim, gen)
        b = gen.standard_normal(raw_dim) * shift
        specs.append(DomainSpec(d, means, A, b, noise_sigma))
    return specs


def _check_specs(specs: Sequence[DomainSpec]) -> tuple[int, int]:
    if not specs:
        raise DataError("no domain specs given")
    C, k = specs[0].num_classes, specs[0].raw_dim
    for s in specs:
        if s.num_classes != C:
            raise DataError(f"domain {s.domain_id} has {s.num_classes} classes, expected {C}")
        if s.raw_dim != k:
            raise DataError(f"domain {s.domain_id} has raw_dim {s.raw_dim}, expected {k}")
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate domain ids")
    return C, k


def _draw(spec: DomainSpec, c: int, n: int, sigma: float, gen: np.random.Generator) -> np.ndarray:
    eps = gen.standard_normal((n, spec.raw_dim)) * sigma
    return (spec.class_means[c] + eps) @ spec.transform.T + spec.offset


def generate(specs: Sequence[DomainSpec], samples_per_class_per_domain: int, seed: int) -> Samples:
    """Draw ``A_d (mean_c + eps) + b_d`` for every (domain, class) pair."""
    C, k = _check_specs(specs)
    n = int(samples_per_class_per_domain)
    parts = []
    for spec in specs:
        for c in range(C):
            gen = rng.stream(seed, "data", spec.domain_id, c)
            X = _draw(spec, c, n, spec.noise_sigma, gen)
            parts.append(Samples(X, np.full(n, c), np.full(n, spec.domain_id)))
    return Samples.concat(parts)


def make_outlier_client(
    spec: DomainSpec,
    samples_per_class: int,
    noise_factor: float,
    client_id: int,
    seed: int,
) -> ClientDataset:
    """A client of ``spec``'s domain whose data noise is multiplied by ``noise_factor``."""
    parts = []
    for c in range(spec.num_classes):
        gen = rng.stream(seed, "outlier", spec.domain_id, c, client_id)
        X = _draw(spec, c, samples_per_class, spec.noise_sigma * noise_factor, gen)
        parts.append(Samples(X, np.full(samples_per_class, c), np.full(samples_per_class, spec.domain_id)))
    return ClientDataset(client_id, spec.domain_id, Samples.concat(parts))


def _rebalance(groups: list[np.ndarray], y: np.ndarray, classes: list[int]) -> None:
    """Swap samples between clients (in place) until each holds every class."""
    for _ in range(len(groups) * len(classes) + 1):
        fixed = True
        for gi, g in enumerate(groups):
            labels = y[g]
            for c in classes:
                if np.any(labels == c):
                    continue
                fixed = False
                # donor: the client holding the most samples of c
                counts = [int(np.sum(y[h] == c)) for h in groups]
                donor = int(np.argmax(counts))
                if counts[donor] < 2:
                    raise DataError(f"class {c} has too few samples to give every client one")
                # give away a sample of a class this client has in surplus
                vals, cnt = np.unique(labels, return_counts=True)
                if cnt.max() < 2:
                    raise DataError("client too small to hold every class")
                surplus = vals[np.argmax(cnt)]
                i = int(np.flatnonzero(labels == surplus)[-1])
                j = int(np.flatnonzero(y[groups[donor]] == c)[-1])
                groups[gi][i], groups[donor][j] = groups[donor][j], groups[gi][i]
                labels = y[g]
        if fixed:
            return
    raise DataError("could not rebalance classes across clients")


def partition(samples: Samples, allocation: dict[int, int], seed: int) -> list[ClientDataset]:
    """Split each domain's samples uniformly at random over that domain's clients.

    Client ids are assigned consecutively in ascending domain order.
    """
    present = set(samples.domains())
    clients: list[ClientDataset] = []
    for d in sorted(allocation):
        k = int(allocation[d])
        if d not in present:
            raise DataError(f"allocation references domain {d} which has no samples")
        if k < 1:
            raise DataError(f"domain {d} needs at least one client, got {k}")
        idx = np.flatnonzero(samples.d == d)
        idx = idx[rng.stream(seed, "partition", d).permutation(idx.size)]
        groups = [g.copy() for g in np.array_split(idx, k)]
        classes = sorted(set(samples.y[idx].tolist()))
        if k > 1:
            _rebalance(groups, samples.y, classes)
        for g in groups:
            clients.append(ClientDataset(len(clients), d, samples.subset(np.sort(g))))
    return clients


def train_test_split(samples: Samples, test_fraction: float, seed: int) -> tuple[Samples, Samples]:
    """Stratified split: each (class, domain) stratum sends round(f * n) samples to test."""
    if not 0.0 <= test_fraction <= 1.0:
        raise DataError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    test_mask = np.zeros(len(samples), dtype=bool)
    strata = sorted(set(zip(samples.y.tolist(), samples.d.tolist())))
    for c, d in strata:
        idx = np.flatnonzero((samples.y == c) & (samples.d == d))
        n_test = int(round(test_fraction * idx.size))
        if n_test:
            pick = rng.stream(seed, "split", c, d).permutation(idx.size)[:n_test]
            test_mask[idx[pick]] = True
    return samples.subset(~test_mask), samples.subset(test_mask)


def write_csv(samples: Samples, path) -> None:
    k = samples.raw_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(k)] + ["y", "d"])
        for x, y, d in samples:
            w.writerow([repr(float(v)) for v in x] + [y, d])


def load_csv(path) -> Samples:
    """Read samples from a CSV whose header is ``x0..x{k-1},y,d``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header") from None
        k = len(header) - 2
        expected = [f"x{i}" for i in range(k)] + ["y", "d"]
        if k < 1 or [h.strip() for h in header] != expected:
            raise DataError(f"{path}: header must be x0..x{{k-1}},y,d, got {header}")
        X, Y, D = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != k + 2:
                raise DataError(f"{path}: row {rowno} has {len(row)} fields, expected {k + 2}")
            try:
                x = [float(v) for v in row[:k]]
                y, d = int(row[k]), int(row[k + 1])
            except ValueError as exc:
                raise DataError(f"{path}: row {rowno}: {exc}") from None
            if not np.all(np.isfinite(x)) or y < 0 or d < 0:
                raise DataError(f"{path}: row {rowno} has non-finite features or negative ids")
            X.append(x)
            Y.append(y)
            D.append(d)
    if not Y:
        return Samples.empty(k)
    return Samples(np.array(X), np.array(Y), np.array(D))

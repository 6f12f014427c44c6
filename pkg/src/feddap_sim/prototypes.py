"""Class prototypes: client-side means and server-side aggregation into a table.

The server keeps a ``(domains, classes, feature_dim)`` table with a presence
mask. Cells nobody reported stay absent; they are never imputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .data import ClientDataset
from .model import ModelParams, forward_features
from .numerics import cosine_matrix, softmax_temp


@dataclass
class LocalPrototypeSet:
    client_id: int
    domain_id: int
    entries: dict[int, tuple[np.ndarray, int]] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        for vec, _ in self.entries.values():
            return vec.shape[0]
        return 0

    def num_values(self) -> int:
        """Reals sent when this set is uploaded."""
        return sum(vec.size for vec, _ in self.entries.values())


class PrototypeTable:
    """Dense table of per-(domain, class) prototypes with a presence mask."""

    def __init__(self, values: np.ndarray, mask: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if values.ndim != 3 or mask.shape != values.shape[:2]:
            raise ValueError(f"values {values.shape} and mask {mask.shape} disagree")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("present prototype cells must be finite")
        self.values = values
        self.mask = mask

    @classmethod
    def empty(cls, num_domains: int, num_classes: int, feature_dim: int) -> "PrototypeTable":
        return cls(np.zeros((num_domains, num_classes, feature_dim)),
                   np.zeros((num_domains, num_classes), dtype=bool))

    @property
    def num_domains(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]

    def get(self, d: int, c: int) -> np.ndarray | None:
        return self.values[d, c].copy() if self.mask[d, c] else None

    def is_empty(self) -> bool:
        return not self.mask.any()

    def num_values(self) -> int:
        """Reals sent when the table is broadcast (present cells only)."""
        return int(self.mask.sum()) * self.feature_dim

    def scaled(self, k: float) -> "PrototypeTable":
        return PrototypeTable(self.values * k, self.mask.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeTable):
            return NotImplemented
        return np.array_equal(self.mask, other.mask) and np.array_equal(self.values, other.values)

    def to_dict(self) -> dict:
        return {
            "num_domains": self.num_domains,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "mask": self.mask.astype(int).tolist(),
            "values": self.values.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PrototypeTable":
        shape = (doc["num_domains"], doc["num_classes"], doc["feature_dim"])
        values = np.asarray(doc["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"expected {int(np.prod(shape))} values, got {values.size}")
        return cls(values.reshape(shape), np.asarray(doc["mask"], dtype=bool))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PrototypeTable":
        return cls.from_dict(json.loads(text))


def compute_local_prototypes(params: ModelParams, dataset: ClientDataset) -> LocalPrototypeSet:
    """Per-class mean of the extracted features over the client's samples."""
    samples = dataset.samples
    if len(samples) == 0:
        raise ValueError(f"client {dataset.client_id} has no samples")
    Z = forward_features(params, samples.X)
    entries = {}
    for c in np.unique(samples.y):
        rows = samples.y == c
        entries[int(c)] = (Z[rows].mean(axis=0), int(rows.sum()))
    return LocalPrototypeSet(dataset.client_id, dataset.domain_id, entries)


def attention_weights(protos: Sequence[np.ndarray], tau_agg: float) -> np.ndarray:
    """Softmax (temperature ``tau_agg``) of each prototype's summed cosine to its peers."""
    if len(protos) == 0:
        raise ValueError("attention_weights needs at least one prototype")
    if not tau_agg > 0:
        raise ValueError(f"tau_agg must be positive, got {tau_agg}")
    P = np.stack([np.asarray(p, dtype=np.float64) for p in protos])
    cos = cosine_matrix(P, P)
    np.fill_diagonal(cos, 0.0)
    return softmax_temp(cos.sum(axis=1), tau_agg)


def _collect(sets: Iterable[LocalPrototypeSet], num_domains: int, num_classes: int):
    cells: dict[tuple[int, int], list[tuple[np.ndarray, int]]] = {}
    dim = None
    for s in sets:
        if not 0 <= s.domain_id < num_domains:
            raise ValueError(f"client {s.client_id} reports unknown domain {s.domain_id}")
        for c, (vec, n) in sorted(s.entries.items()):
            if not 0 <= c < num_classes:
                raise ValueError(f"client {s.client_id} reports unknown class {c}")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"client {s.client_id} prototypes have dim {vec.shape[0]}, expected {dim}")
            cells.setdefault((s.domain_id, c), []).append((vec, n))
    return cells, dim


def _build(cells, dim, num_domains, num_classes, combine, feature_dim) -> PrototypeTable:
    dim = dim if dim is not None else feature_dim
    if dim is None:
        raise ValueError("no prototypes to aggregate and no feature_dim given")
    table = PrototypeTable.empty(num_domains, num_classes, dim)
    for (d, c), members in cells.items():
        table.values[d, c] = combine(members)
        table.mask[d, c] = True
    return table


def aggregate_domain_specific(sets: Sequence[LocalPrototypeSet], num_domains: int, num_classes: int,
                              tau_agg: float, feature_dim: int | None = None) -> PrototypeTable:
    """Similarity-weighted fusion within each (domain, class) cell."""
    if not tau_agg > 0:
        raise ValueError(f"tau_agg must be positive, got {tau_agg}")

    def fuse(members):
        vecs = [v for v, _ in members]
        alpha = attention_weights(vecs, tau_agg)
        return alpha @ np.stack(vecs)

    cells, dim = _collect(sets, num_domains, num_classes)
    return _build(cells, dim, num_domains, num_classes, fuse, feature_dim)


def aggregate_uniform(sets: Sequence[LocalPrototypeSet], num_domains: int, num_classes: int,
                      feature_dim: int | None = None) -> PrototypeTable:
    """Unweighted mean within each (domain, class) cell."""
    cells, dim = _collect(sets, num_domains, num_classes)
    return _build(cells, dim, num_domains, num_classes,
                  lambda members: np.mean([v for v, _ in members], axis=0), feature_dim)


def aggregate_single_global(sets: Sequence[LocalPrototypeSet], num_domains: int, num_classes: int,
                            feature_dim: int | None = None,
                            domains: Iterable[int] | None = None) -> PrototypeTable:
    """One sample-count-weighted prototype per class, copied into every domain row.

    ``domains`` restricts which rows receive the copy (default: all).
    """
    cells, dim = _collect(sets, num_domains, num_classes)
    by_class: dict[int, list[tuple[np.ndarray, int]]] = {}
    for (_, c), members in sorted(cells.items()):
        by_class.setdefault(c, []).extend(members)
    dim = dim if dim is not None else feature_dim
    if dim is None:
        raise ValueError("no prototypes to aggregate and no feature_dim given")
    rows = sorted(set(range(num_domains) if domains is None else domains))
    table = PrototypeTable.empty(num_domains, num_classes, dim)
    for c, members in by_class.items():
        counts = np.array([n for _, n in members], dtype=np.float64)
        vec = (counts / counts.sum()) @ np.stack([v for v, _ in members])
        for d in rows:
            table.values[d, c] = vec
            table.mask[d, c] = True
    return table


def dp_noise(pset: LocalPrototypeSet, q: float = 0.1, s: float = 0.05, seed: int = 0,
             stream_key: Sequence[int] = ()) -> LocalPrototypeSet:
    """Add ``q * N(0, s^2)`` elementwise noise to every prototype.

    The noise std is therefore ``q * s``. ``stream_key`` selects an
    independent random stream (e.g. round and client id).
    """
    if q < 0 or s < 0:
        raise ValueError("q and s must be nonnegative")
    gen = rng.stream(seed, "dp", *stream_key)
    entries = {}
    for c, (vec, n) in sorted(pset.entries.items()):
        noise = gen.standard_normal(vec.shape[0]) * s
        entries[c] = (vec + q * noise, n)
    return LocalPrototypeSet(pset.client_id, pset.domain_id, entries)

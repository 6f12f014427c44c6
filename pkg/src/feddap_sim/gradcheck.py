"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LossOptions, ModelParams, backward, init_params, loss_total
from .prototypes import PrototypeTable

TERMS = ("ce", "dpa", "cpcl", "total")


@dataclass
class GradCheckReport:
    instances: int
    max_rel_error: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def random_instance(seed: int, feature_dim=4, num_classes=3, num_domains=2, batch=5, raw_dim=6, hidden=(5,)):
    gen = np.random.default_rng(seed)
    params = init_params((raw_dim, *hidden, feature_dim), num_classes, seed)
    params = params.map(lambda a: a + 0.3 * gen.standard_normal(a.shape))
    X = gen.standard_normal((batch, raw_dim))
    y = gen.integers(0, num_classes, batch)
    mask = gen.random((num_domains, num_classes)) < 0.85
    table = PrototypeTable(gen.standard_normal((num_domains, num_classes, feature_dim)), mask)
    d_m = int(gen.integers(0, num_domains))
    return params, X, y, table, d_m


def _term_setup(term: str, lambda1: float, lambda2: float):
    """Lambdas whose backward() isolates ``term`` after subtracting the CE-only gradient."""
    return {"ce": (0.0, 0.0), "dpa": (1.0, 0.0), "cpcl": (0.0, 1.0), "total": (lambda1, lambda2)}[term]


def numeric_gradient(params: ModelParams, value, h: float = 1e-5) -> list[np.ndarray]:
    out = []
    for a in params.arrays():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = value()
            a[idx] = old - h
            fm = value()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Max over parameter blocks of ``max|a - n| / max(max|a|, max|n|)``."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n))) / scale)
    return worst


def check_instance(params, X, y, table, d_m, lambda1=10.0, lambda2=1.0, tau_cross=0.07,
                   options: LossOptions = LossOptions(), h: float = 1e-5) -> dict[str, float]:
    _, g_ce = backward(params, X, y, table, d_m, 0.0, 0.0, tau_cross, options)
    errors = {}
    for term in TERMS:
        l1, l2 = _term_setup(term, lambda1, lambda2)
        _, g = backward(params, X, y, table, d_m, l1, l2, tau_cross, options)
        analytic = g.arrays()
        if term in ("dpa", "cpcl"):
            analytic = [a - b for a, b in zip(analytic, g_ce.arrays())]
        numeric = numeric_gradient(
            params, lambda: getattr(loss_total(params, X, y, table, d_m, l1, l2, tau_cross, options), term), h)
        errors[term] = relative_error(analytic, numeric)
    return errors


def check_gradients(instances: int = 20, seed: int = 0, **kwargs) -> GradCheckReport:
    worst = dict.fromkeys(TERMS, 0.0)
    for i in range(instances):
        errs = check_instance(*random_instance(seed + i), **kwargs)
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
    return GradCheckReport(instances, worst)

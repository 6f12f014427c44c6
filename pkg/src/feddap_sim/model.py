"""Client model: tanh MLP feature extractor, linear classifier, losses and gradients.

The extractor maps a raw input to a feature vector ``z``. tanh is applied
after every extractor layer except the last, so ``z`` is an unconstrained
affine output. The classifier maps ``z`` to logits.

Three losses act on a mini-batch from one client of domain ``d_m``:

* cross-entropy on the logits,
* intra-domain alignment: ``1 - cos(zbar_c, P[d_m, c])`` where ``zbar_c`` is
  the batch mean feature of class ``c``,
* cross-domain contrastive: InfoNCE over the prototypes of the *other*
  domains, same class as positives and other classes as negatives.

Prototypes are constants during local training, so the alignment terms only
send gradient into the extractor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from . import rng
from .numerics import ZERO_NORM, cosine_matrix

if TYPE_CHECKING:
    from .prototypes import PrototypeTable


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class ModelParams:
    layers: list[tuple[np.ndarray, np.ndarray]]  # extractor (W: out x in, b: out)
    cls_w: np.ndarray  # (C, I)
    cls_b: np.ndarray  # (C,)

    def __post_init__(self):
        prev = None
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"extractor layer {i} has inconsistent shapes {W.shape}, {b.shape}")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"extractor layer {i} expects {W.shape[1]} inputs, previous layer gives {prev}")
            prev = W.shape[0]
        if not self.layers:
            raise ValueError("extractor needs at least one layer")
        if self.cls_w.shape != (self.cls_b.shape[0], prev):
            raise ValueError(f"classifier weight {self.cls_w.shape} does not match feature dim {prev}")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.cls_b.shape[0]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (W, b) in enumerate(self.layers):
            out.append((f"extractor.{i}.weight", W))
            out.append((f"extractor.{i}.bias", b))
        out.append(("classifier.weight", self.cls_w))
        out.append(("classifier.bias", self.cls_b))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        """New params of the same layout built from ``arrays`` (order of :meth:`arrays`)."""
        arrays = list(arrays)
        n = len(self.layers)
        if len(arrays) != 2 * n + 2:
            raise ValueError(f"expected {2 * n + 2} arrays, got {len(arrays)}")
        layers = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(n)]
        return ModelParams(layers, arrays[-2], arrays[-1])

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return self.with_arrays([fn(a) for a in self.arrays()])

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def num_values(self) -> int:
        return sum(a.size for a in self.arrays())

    def to_dict(self) -> dict:
        return {name: a.tolist() for name, a in self.named_arrays()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        layers = []
        i = 0
        while f"extractor.{i}.weight" in doc:
            layers.append((np.array(doc[f"extractor.{i}.weight"], dtype=np.float64),
                           np.array(doc[f"extractor.{i}.bias"], dtype=np.float64)))
            i += 1
        return cls(layers, np.array(doc["classifier.weight"], dtype=np.float64),
                   np.array(doc["classifier.bias"], dtype=np.float64))


# gradients share the parameter layout
Gradients = ModelParams


def init_params(layer_sizes: Sequence[int], num_classes: int, seed: int) -> ModelParams:
    """LeCun-uniform weights (variance 1/fan_in), zero biases.

    ``layer_sizes`` runs from the input dimension to the feature dimension,
    e.g. ``(raw_dim, 32, 16)``.
    """
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs an input and an output size")
    gen = rng.stream(seed, "init")
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(3.0 / fan_in)
        layers.append((gen.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    feat = layer_sizes[-1]
    bound = np.sqrt(3.0 / feat)
    return ModelParams(layers, gen.uniform(-bound, bound, (num_classes, feat)), np.zeros(num_classes))


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    return params.with_arrays([p - lr * g for p, g in zip(params.arrays(), grads.arrays())])


def _forward_cache(params: ModelParams, X: np.ndarray) -> list[np.ndarray]:
    """Activations at every extractor boundary: [input, a1, ..., z]."""
    acts = [X]
    h = X
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        h = h @ W.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward_features(params: ModelParams, x) -> np.ndarray:
    """Features for one input vector or a (B, raw_dim) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != params.input_dim:
        raise ValueError(f"input has {X.shape[1]} features, model expects {params.input_dim}")
    z = _forward_cache(params, X)[-1]
    return z[0] if single else z


def forward_logits(params: ModelParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z @ params.cls_w.T + params.cls_b


def predict(params: ModelParams, X) -> np.ndarray:
    return np.argmax(forward_logits(params, forward_features(params, X)), axis=-1)


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossOptions:
    dpa_normalize: bool = True
    dpa_per_sample: bool = False
    negatives_include_own_domain: bool = False


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    dpa: float
    cpcl: float
    total: float
    lambda1: float
    lambda2: float
    dpa_empty: bool = False  # no class contributed to the alignment term
    cpcl_flagged: int = 0  # samples with no cross-domain positive

    @classmethod
    def combine(cls, ce, dpa, cpcl, lambda1, lambda2, **flags) -> "LossBreakdown":
        return cls(ce, dpa, cpcl, ce + lambda1 * dpa + lambda2 * cpcl, lambda1, lambda2, **flags)


def loss_ce(s, y: int) -> float:
    """Softmax cross-entropy of logits ``s`` against class ``y``."""
    s = np.asarray(s, dtype=np.float64)
    rest = np.delete(s - s[y], y)
    m = max(rest.max(), 0.0)
    # log1p keeps tiny losses representable when y wins by a wide margin
    if m == 0.0:
        return float(np.log1p(np.exp(rest).sum()))
    return float(m + np.log(np.exp(-m) + np.exp(rest - m).sum()))


def ce_batch(S: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    B = S.shape[0]
    shifted = S - S.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    norm = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(norm)
    loss = -logp[np.arange(B), y].mean()
    dS = e / norm
    dS[np.arange(B), y] -= 1.0
    return float(loss), dS / B


def _one_minus_cos_grad(a: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``1 - cos(a_k, p_k)`` and its gradient w.r.t. ``a_k``; zero rows give 0 gradient."""
    na = np.linalg.norm(a, axis=1)
    np_ = np.linalg.norm(p, axis=1)
    ok = (na >= ZERO_NORM) & (np_ >= ZERO_NORM)
    cos = np.zeros(a.shape[0])
    grad = np.zeros_like(a)
    if np.any(ok):
        a_ok, p_ok, na_ok, np_ok = a[ok], p[ok], na[ok], np_[ok]
        raw = np.einsum("ij,ij->i", a_ok, p_ok) / (na_ok * np_ok)
        cos[ok] = np.clip(raw, -1.0, 1.0)
        grad[ok] = -(p_ok / (na_ok * np_ok)[:, None] - raw[:, None] * a_ok / (na_ok ** 2)[:, None])
    return 1.0 - cos, grad


def dpa_batch(
    Z: np.ndarray,
    y: np.ndarray,
    table: "PrototypeTable | None",
    d_m: int,
    options: LossOptions = LossOptions(),
) -> tuple[float, np.ndarray, bool]:
    """Intra-domain alignment loss, its gradient w.r.t. ``Z``, and an empty flag."""
    dZ = np.zeros_like(Z)
    if table is None:
        return 0.0, dZ, True
    mask = table.mask[d_m]
    protos = table.values[d_m]
    if options.dpa_per_sample:
        rows = np.flatnonzero(mask[y])
        if rows.size == 0:
            return 0.0, dZ, True
        terms, grad = _one_minus_cos_grad(Z[rows], protos[y[rows]])
        denom = rows.size if options.dpa_normalize else 1.0
        dZ[rows] = grad / denom
        return float(terms.sum() / denom), dZ, False

    counts = np.bincount(y, minlength=protos.shape[0])
    classes = np.flatnonzero((counts > 0) & mask)
    if classes.size == 0:
        return 0.0, dZ, True
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)  # (B, K)
    n_c = counts[classes].astype(np.float64)
    means = (onehot.T @ Z) / n_c[:, None]
    terms, grad = _one_minus_cos_grad(means, protos[classes])
    denom = classes.size if options.dpa_normalize else 1.0
    dZ = onehot @ (grad / (n_c[:, None] * denom))
    return float(terms.sum() / denom), dZ, False


def _contrastive_sets(table: "PrototypeTable", d_m: int, y: np.ndarray, options: LossOptions):
    """Candidate prototypes (K, I) plus (B, K) positive and negative membership masks."""
    cells = [(d, c) for d in range(table.num_domains) for c in range(table.num_classes)
             if table.mask[d, c] and (d != d_m or options.negatives_include_own_domain)]
    if not cells:
        B = y.shape[0]
        return np.zeros((0, table.feature_dim)), np.zeros((B, 0), bool), np.zeros((B, 0), bool)
    cd = np.array([d for d, _ in cells])
    cc = np.array([c for _, c in cells])
    P = table.values[cd, cc]
    same_class = cc[None, :] == y[:, None]
    other_domain = (cd != d_m)[None, :]
    pos = same_class & other_domain
    neg = ~same_class
    return P, pos, neg


def cpcl_batch(
    Z: np.ndarray,
    y: np.ndarray,
    table: "PrototypeTable | None",
    d_m: int,
    tau: float,
    options: LossOptions = LossOptions(),
) -> tuple[float, np.ndarray, int]:
    """Cross-domain contrastive loss averaged over the batch size.

    Returns the loss, its gradient w.r.t. ``Z``, and the number of samples
    that had no positive prototype (they contribute zero).
    """
    if not tau > 0:
        raise ValueError(f"tau_cross must be positive, got {tau}")
    B = Z.shape[0]
    dZ = np.zeros_like(Z)
    if table is None:
        return 0.0, dZ, B
    P, pos, neg = _contrastive_sets(table, d_m, y, options)
    has_pos = pos.any(axis=1)
    flagged = int(B - has_pos.sum())
    if not has_pos.any():
        return 0.0, dZ, flagged
    cos = cosine_matrix(Z, P)
    logits = cos / tau
    valid = pos | neg

    def masked_softmax(mask):
        L = np.where(mask, logits, -np.inf)
        m = L.max(axis=1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(L - m), 0.0)
        s = e.sum(axis=1, keepdims=True)
        lse = (m + np.log(np.where(s > 0, s, 1.0)))[:, 0]
        w = e / np.where(s > 0, s, 1.0)
        return lse, w

    lse_pos, w_pos = masked_softmax(pos)
    lse_all, w_all = masked_softmax(valid)
    per_sample = np.where(has_pos, lse_all - lse_pos, 0.0)
    loss = float(per_sample.sum() / B)

    # d loss_i / d cos_ik = (w_all - w_pos) / tau, zero for samples without positives
    G = np.where(has_pos[:, None], (w_all - w_pos) / tau, 0.0) / B
    nz = np.linalg.norm(Z, axis=1)
    npr = np.linalg.norm(P, axis=1)
    P_hat = np.where((npr >= ZERO_NORM)[:, None], P / np.where(npr >= ZERO_NORM, npr, 1.0)[:, None], 0.0)
    live = nz >= ZERO_NORM
    raw_cos = np.zeros_like(cos)
    raw_cos[live] = (Z[live] @ P_hat.T) / nz[live, None]
    dZ[live] = (G[live] @ P_hat) / nz[live, None] - ((G[live] * raw_cos[live]).sum(axis=1) / nz[live] ** 2)[:, None] * Z[live]
    return loss, dZ, flagged


def loss_cpcl(z, y: int, d_m: int, table: "PrototypeTable", tau_cross: float,
              options: LossOptions = LossOptions()) -> float:
    """Contrastive loss of a single feature vector."""
    z = np.asarray(z, dtype=np.float64)[None, :]
    loss, _, _ = cpcl_batch(z, np.array([y]), table, d_m, tau_cross, options)
    return loss


def loss_dpa(batch_features, table: "PrototypeTable", d_m: int,
             options: LossOptions = LossOptions()) -> float:
    """Alignment loss for a list of ``(z, y)`` pairs."""
    Z = np.stack([np.asarray(z, dtype=np.float64) for z, _ in batch_features])
    y = np.array([int(c) for _, c in batch_features])
    loss, _, _ = dpa_batch(Z, y, table, d_m, options)
    return loss


@dataclass
class _Pass:
    acts: list[np.ndarray]
    breakdown: LossBreakdown
    dZ: np.ndarray
    dS: np.ndarray


def _objective(params, X, y, table, d_m, lambda1, lambda2, tau_cross, options) -> _Pass:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    acts = _forward_cache(params, X)
    Z = acts[-1]
    S = forward_logits(params, Z)
    ce, dS = ce_batch(S, y)
    dpa, dZ_dpa, dpa_empty = dpa_batch(Z, y, table, d_m, options)
    cpcl, dZ_cpcl, flagged = cpcl_batch(Z, y, table, d_m, tau_cross, options)
    dZ = dS @ params.cls_w
    # skipped, not multiplied by zero, so disabled terms cannot leak NaN
    if lambda1 != 0.0:
        dZ = dZ + lambda1 * dZ_dpa
    if lambda2 != 0.0:
        dZ = dZ + lambda2 * dZ_cpcl
    bd = LossBreakdown.combine(ce, dpa, cpcl, lambda1, lambda2, dpa_empty=dpa_empty, cpcl_flagged=flagged)
    return _Pass(acts, bd, dZ, dS)


def loss_total(params: ModelParams, X, y, table, d_m: int, lambda1: float, lambda2: float,
               tau_cross: float, options: LossOptions = LossOptions()) -> LossBreakdown:
    return _objective(params, X, y, table, d_m, lambda1, lambda2, tau_cross, options).breakdown


def backward(params: ModelParams, X, y, table, d_m: int, lambda1: float, lambda2: float,
             tau_cross: float, options: LossOptions = LossOptions()) -> tuple[LossBreakdown, Gradients]:
    """Loss breakdown and exact gradient of the composite objective."""
    run = _objective(params, X, y, table, d_m, lambda1, lambda2, tau_cross, options)
    acts = run.acts
    Z = acts[-1]
    g_cls_w = run.dS.T @ Z
    g_cls_b = run.dS.sum(axis=0)

    grads_layers = []
    dH = run.dZ
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        inp = acts[i]
        grads_layers.append((dH.T @ inp, dH.sum(axis=0)))
        if i > 0:
            # acts[i] is tanh output of layer i-1
            dH = (dH @ W) * (1.0 - inp ** 2)
    grads_layers.reverse()
    grads = ModelParams(grads_layers, g_cls_w, g_cls_b)
    for name, g in grads.named_arrays():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
    return run.breakdown, grads

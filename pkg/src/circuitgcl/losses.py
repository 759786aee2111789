"""Label-rebalancing losses for long-tailed regression and classification.

Regression side: plain MSE, a GMM-analytic balanced MSE (the prior integral
collapses to a Gaussian mixture evaluated at the prediction), and a batch
Monte-Carlo balanced MSE that treats the batch labels as the prior sample.
Classification side: balanced softmax cross-entropy (logit adjustment by the
log class prior) and a focal-loss comparator.  All losses accept either
plain arrays or autodiff tensors and return a scalar tensor, so they can sit
at the top of a training tape.

Every log-domain reduction routes through logsumexp; nothing exponentiates
a squared distance directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._errors import ContractError, NumericError

VARIANCE_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


def _as_column_tensor(v):
    if isinstance(v, ad.Tensor):
        if v.cols != 1:
            raise ContractError(f"expected a column of predictions, got {v.shape}")
        return v
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim == 2 and arr.shape[1] == 1:
        pass
    else:
        raise ContractError(f"expected a column of predictions, got shape {arr.shape}")
    return ad.Tensor(arr)


def _as_logits_tensor(v):
    if isinstance(v, ad.Tensor):
        return v
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ContractError(f"expected a logits matrix, got shape {arr.shape}")
    return ad.Tensor(arr)


def _flat_targets(y, n, what="targets"):
    arr = np.asarray(y, dtype=np.float64).ravel()
    if len(arr) != n:
        raise ContractError(f"{what}: expected {n} entries, got {len(arr)}")
    return arr


def _label_ids(label, n):
    arr = np.asarray(label).ravel()
    if arr.size == 1 and n > 1:
        arr = np.repeat(arr, n)
    if len(arr) != n:
        raise ContractError(f"labels: expected {n} entries, got {len(arr)}")
    if not np.issubdtype(arr.dtype, np.integer):
        cast = arr.astype(np.int64)
        if not np.array_equal(cast, arr):
            raise ContractError("labels must be integers")
        arr = cast
    return arr.astype(np.int64)


@dataclass(frozen=True)
class GmmPrior:
    """One-dimensional Gaussian mixture: weights, means, variances."""

    weights: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        m = tuple(float(v) for v in self.means)
        s = tuple(float(v) for v in self.variances)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", s)
        k = len(w)
        if k == 0 or len(m) != k or len(s) != k:
            raise ContractError("weights, means, variances must share a nonzero length")
        if not all(np.isfinite(w)) or not all(np.isfinite(m)) or not all(np.isfinite(s)):
            raise ContractError("mixture parameters must be finite")
        if any(v <= 0 for v in w):
            raise ContractError("mixture weights must be positive")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ContractError("mixture weights must sum to 1")
        if any(v < VARIANCE_FLOOR for v in s):
            raise ContractError(f"variances must be at least the floor {VARIANCE_FLOOR}")

    @property
    def K(self):
        return len(self.weights)

    def log_density(self, y):
        """Log mixture density at the points of `y` (plain numpy)."""
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        w = np.asarray(self.weights)
        mu = np.asarray(self.means)
        var = np.asarray(self.variances)
        ll = (np.log(w) - 0.5 * (_LOG_2PI + np.log(var))
              - (y - mu) ** 2 / (2.0 * var))
        m = ll.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(ll - m).sum(axis=1, keepdims=True))).ravel()

    def density(self, y):
        return np.exp(self.log_density(y))

    def to_json_dict(self):
        return {
            "K": self.K,
            "weights": list(self.weights),
            "means": list(self.means),
            "variances": list(self.variances),
        }

    def to_json(self, indent=None):
        separators = (",", ":") if indent is None else None
        return json.dumps(self.to_json_dict(), indent=indent, separators=separators)

    @staticmethod
    def from_json_dict(doc):
        try:
            prior = GmmPrior(tuple(doc["weights"]), tuple(doc["means"]),
                             tuple(doc["variances"]))
            if doc["K"] != prior.K:
                raise ContractError(f"K={doc['K']} disagrees with {prior.K} components")
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed mixture document: {exc}") from None
        return prior

    @staticmethod
    def from_json(text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContractError(f"invalid json: {exc}") from None
        return GmmPrior.from_json_dict(doc)


def fit_gmm(labels, K, seed=0):
    """Fit a 1-D GMM by EM with quantile initialization.

    Stops when the mean per-sample log-likelihood improves by less than
    1e-7, or after 500 iterations.  `seed` is accepted for interface
    stability; the quantile initialization makes the fit deterministic.
    """
    x = np.asarray(labels, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ContractError("cannot fit a mixture to zero labels")
    if not np.isfinite(x).all():
        raise ContractError("labels must be finite")
    K = int(K)
    if K < 1:
        raise ContractError("K must be at least 1")
    distinct = np.unique(x)
    if K > len(distinct):
        raise ContractError(f"K={K} exceeds the {len(distinct)} distinct labels")

    means = np.quantile(x, [(i + 0.5) / K for i in range(K)])
    if len(np.unique(means)) < K:
        idx = np.round(np.linspace(0, len(distinct) - 1, K)).astype(int)
        means = distinct[idx].astype(np.float64)
    variances = np.full(K, max(float(np.var(x)), VARIANCE_FLOOR))
    weights = np.full(K, 1.0 / K)

    prev_ll = -np.inf
    col = x.reshape(-1, 1)
    for _ in range(500):
        log_resp = (np.log(weights) - 0.5 * (_LOG_2PI + np.log(variances))
                    - (col - means) ** 2 / (2.0 * variances))
        m = log_resp.max(axis=1, keepdims=True)
        norm = m + np.log(np.exp(log_resp - m).sum(axis=1, keepdims=True))
        ll = float(norm.mean())
        resp = np.exp(log_resp - norm)
        nk = np.maximum(resp.sum(axis=0), 1e-12)
        weights = nk / len(x)
        means = (resp * col).sum(axis=0) / nk
        variances = np.maximum((resp * (col - means) ** 2).sum(axis=0) / nk,
                               VARIANCE_FLOOR)
        if ll - prev_ll < 1e-7:
            break
        prev_ll = ll

    weights = weights / weights.sum()
    order = np.argsort(means)
    return GmmPrior(tuple(weights[order]), tuple(means[order]),
                    tuple(variances[order]))


@dataclass(frozen=True)
class LossConfig:
    """Noise scale and class prior shared by the rebalanced losses."""

    sigma_noise: float = 0.001
    label_dim: int = 1
    class_prior: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "sigma_noise", float(self.sigma_noise))
        if not np.isfinite(self.sigma_noise) or self.sigma_noise <= 0:
            raise ContractError("sigma_noise must be positive")
        if self.label_dim != 1:
            raise ContractError("only univariate labels are supported")
        if self.class_prior is not None:
            p = tuple(float(v) for v in self.class_prior)
            object.__setattr__(self, "class_prior", p)
            if len(p) == 0:
                raise ContractError("class_prior must be non-empty")
            if any(v <= 0 or not np.isfinite(v) for v in p):
                raise ContractError("class_prior entries must be positive")
            if abs(sum(p) - 1.0) > 1e-9:
                raise ContractError("class_prior must sum to 1")

    @property
    def temperature(self):
        return 2.0 * self.sigma_noise ** 2


def mse_loss(y_pred, y):
    pred = _as_column_tensor(y_pred)
    target = _flat_targets(y, pred.rows).reshape(-1, 1)
    diff = ad.sub(pred, ad.Tensor(target))
    return ad.mean(ad.pow_const(diff, 2))


def gai_loss(y_pred, y, prior, cfg):
    """Balanced MSE with an analytic GMM prior integral.

    Per sample: -log N(y; y_pred, sigma^2)
                + logsumexp_i [log w_i + log N(y_pred; mu_i, var_i + sigma^2)].
    """
    pred = _as_column_tensor(y_pred)
    target = _flat_targets(y, pred.rows)
    if not np.isfinite(pred.data).all() or not np.isfinite(target).all():
        raise NumericError("gai_loss requires finite predictions and targets")
    sigma2 = cfg.sigma_noise ** 2

    diff = ad.sub(pred, ad.Tensor(target.reshape(-1, 1)))
    nll = ad.add_scalar(ad.scale(ad.pow_const(diff, 2), 1.0 / (2.0 * sigma2)),
                        0.5 * math.log(2.0 * math.pi * sigma2))

    mu = np.asarray(prior.means).reshape(1, -1)
    var = np.asarray(prior.variances).reshape(1, -1) + sigma2
    logw = (np.log(np.asarray(prior.weights)).reshape(1, -1)
            - 0.5 * (_LOG_2PI + np.log(var)))
    dev = ad.sub(pred, ad.Tensor(mu))
    comp = ad.add(ad.mul(ad.pow_const(dev, 2), ad.Tensor(-1.0 / (2.0 * var))),
                  ad.Tensor(logw))
    second = ad.logsumexp(comp, axis=1)
    return ad.mean(ad.add(nll, second))


def gai_second_term(y_pred, prior, cfg):
    """The prior integral term alone, for oracle comparisons (plain numpy)."""
    pred = np.asarray(y_pred, dtype=np.float64).reshape(-1, 1)
    sigma2 = cfg.sigma_noise ** 2
    mu = np.asarray(prior.means).reshape(1, -1)
    var = np.asarray(prior.variances).reshape(1, -1) + sigma2
    ll = (np.log(np.asarray(prior.weights)).reshape(1, -1)
          - 0.5 * (_LOG_2PI + np.log(var)) - (pred - mu) ** 2 / (2.0 * var))
    m = ll.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(ll - m).sum(axis=1, keepdims=True))).ravel()


def bmc_loss(y_pred, y, batch_labels, cfg):
    """Batch Monte-Carlo balanced MSE.

    Softmax cross-entropy over the batch labels, where the logit for
    candidate label y' is -(y_pred - y')^2 / tau and the true class is the
    sample's own label.
    """
    pred = _as_column_tensor(y_pred)
    target = _flat_targets(y, pred.rows)
    batch = np.asarray(batch_labels, dtype=np.float64).ravel()
    if len(batch) == 0:
        raise ContractError("batch_labels must be non-empty")
    tau = cfg.temperature
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if not np.isin(target, batch).all():
        raise ContractError("every target must appear in batch_labels")

    own = ad.scale(ad.pow_const(ad.sub(pred, ad.Tensor(target.reshape(-1, 1))), 2),
                   -1.0 / tau)
    dev = ad.sub(pred, ad.Tensor(batch.reshape(1, -1)))
    logits = ad.scale(ad.pow_const(dev, 2), -1.0 / tau)
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), own))


def ce_loss(logits, label):
    """Plain softmax cross-entropy, the unbalanced comparator."""
    z = _as_logits_tensor(logits)
    ids = _label_ids(label, z.rows)
    lse = ad.logsumexp(z, axis=1)
    own = ad.gather_cols(z, ids)
    return ad.mean(ad.sub(lse, own))


def balanced_softmax_ce(logits, label, cfg):
    """Cross-entropy on prior-adjusted logits (logits + log class prior)."""
    if cfg.class_prior is None:
        raise ContractError("balanced_softmax_ce requires class_prior")
    prior = np.asarray(cfg.class_prior, dtype=np.float64)
    if np.any(prior <= 0):
        raise ContractError("class_prior entries must be positive")
    z = _as_logits_tensor(logits)
    if z.cols != len(prior):
        raise ContractError(f"class_prior has {len(prior)} entries for {z.cols} classes")
    ids = _label_ids(label, z.rows)
    adjusted = ad.add(z, ad.Tensor(np.log(prior).reshape(1, -1)))
    lse = ad.logsumexp(adjusted, axis=1)
    own = ad.gather_cols(adjusted, ids)
    return ad.mean(ad.sub(lse, own))


def focal_loss(logits, label, gamma=2.0):
    """Focal comparator: -(1 - p_t)^gamma * log p_t, mean over samples."""
    gamma = float(gamma)
    if gamma < 0:
        raise ContractError("gamma must be nonnegative")
    z = _as_logits_tensor(logits)
    ids = _label_ids(label, z.rows)
    logp = ad.sub(ad.gather_cols(z, ids), ad.logsumexp(z, axis=1))
    p = ad.exp(logp)
    weight = ad.pow_const(ad.sub(ad.Tensor(np.ones((z.rows, 1))), p), gamma)
    return ad.mean(ad.neg(ad.mul(weight, logp)))

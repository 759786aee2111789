"""Self-verification oracles: finite-difference gradient checks for every
differentiable primitive and loss, plus trapezoid quadrature against the
closed-form prior integral.  The gradcheck subcommand and the acceptance
suite both run through here.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .losses import (
    GmmPrior,
    LossConfig,
    balanced_softmax_ce,
    bmc_loss,
    ce_loss,
    focal_loss,
    gai_loss,
    gai_second_term,
    mse_loss,
)

QUADRATURE_TOLERANCE = 1e-6


def _mean_operator_3x3():
    # path graph 0-1-2; rows average the neighbors
    indptr = np.array([0, 1, 3, 4])
    indices = np.array([1, 0, 2, 1])
    data = np.array([1.0, 0.5, 0.5, 1.0])
    return sp.csr_matrix((data, indices, indptr), shape=(3, 3))


def _mix(rng, rows, cols):
    return ad.Tensor(rng.normal(size=(rows, cols)))


def gradient_cases(rng):
    """(name, scalar function, probe array) triplets covering every
    differentiable primitive and all swappable losses."""
    operator = _mean_operator_3x3()
    c43 = _mix(rng, 4, 3)
    c13 = _mix(rng, 1, 3)
    w33 = _mix(rng, 3, 3)
    soft_mix = _mix(rng, 4, 3)
    norm_mix = _mix(rng, 4, 3)

    y6 = rng.uniform(0.1, 0.9, size=6)
    labels5 = np.array([0, 2, 1, 4])
    prior = GmmPrior((0.6, 0.4), (0.2, 0.8), (0.05, 0.1))
    gai_cfg = LossConfig(sigma_noise=0.3)
    bmc_cfg = LossConfig(sigma_noise=0.4)
    class_prior = tuple(rng.dirichlet(np.ones(5) * 3.0))
    bsm_cfg = LossConfig(class_prior=class_prior)

    # keep probe magnitudes >= 0.2 so jittered points never cross the
    # absolute/prelu kinks, where finite differences are meaningless
    raw = rng.normal(size=(4, 3))
    point = np.sign(raw) * (0.2 + np.abs(raw))
    preds = rng.uniform(-0.2, 1.2, size=(6, 1))
    logits = rng.normal(size=(4, 5))

    cases = [
        ("add", lambda t: ad.mean(ad.add(t, c43)), point),
        ("add_broadcast", lambda t: ad.mean(ad.add(t, c13)), point),
        ("sub", lambda t: ad.mean(ad.sub(t, c43)), point),
        ("multiply", lambda t: ad.mean(ad.mul(t, c43)), point),
        ("neg", lambda t: ad.mean(ad.neg(t)), point),
        ("scale", lambda t: ad.mean(ad.scale(t, 1.7)), point),
        ("add_scalar", lambda t: ad.mean(ad.add_scalar(t, 0.3)), point),
        ("matmul", lambda t: ad.mean(ad.matmul(t, w33)), point),
        ("spmm", lambda t: ad.mean(ad.spmm(operator, t)), rng.normal(size=(3, 3))),
        ("tanh", lambda t: ad.mean(ad.tanh(t)), point),
        ("prelu", lambda t: ad.mean(ad.prelu(t, ad.Tensor([[0.25]]))), point),
        ("prelu_slope",
         lambda s: ad.mean(ad.prelu(ad.Tensor(point.copy()), s)),
         np.array([[0.25]])),
        ("absolute", lambda t: ad.mean(ad.absolute(t)), point),
        ("exp", lambda t: ad.mean(ad.exp(t)), point),
        ("log", lambda t: ad.mean(ad.log(ad.add_scalar(ad.mul(t, t), 1.0))),
         point),
        ("pow_const",
         lambda t: ad.mean(ad.pow_const(ad.add_scalar(ad.mul(t, t), 1.0), 1.5)),
         point),
        ("sum", lambda t: ad.total_sum(t), point),
        ("mean", lambda t: ad.mean(t), point),
        ("sum_rows", lambda t: ad.mean(ad.sum_rows(t)), point),
        ("take_rows", lambda t: ad.mean(ad.take_rows(t, [0, 2, 2])), point),
        ("gather_cols", lambda t: ad.mean(ad.gather_cols(t, [0, 2, 1, 0])),
         point),
        ("concat_cols", lambda t: ad.mean(ad.concat_cols(t, ad.mul(t, t))),
         point),
        ("logsumexp", lambda t: ad.logsumexp(t), point),
        ("logsumexp_rows", lambda t: ad.mean(ad.logsumexp(t, axis=1)), point),
        ("softmax", lambda t: ad.mean(ad.mul(ad.softmax(t), soft_mix)), point),
        ("rowwise_l2_normalize",
         lambda t: ad.mean(ad.mul(ad.rowwise_l2_normalize(t), norm_mix)),
         point),
        # recreating the rng inside the closure pins the mask, so the
        # function stays deterministic under finite differences
        ("dropout",
         lambda t: ad.mean(ad.dropout(t, 0.4, np.random.default_rng(123))),
         point),
        ("mse_loss", lambda t: mse_loss(t, y6), preds),
        ("gai_loss", lambda t: gai_loss(t, y6, prior, gai_cfg), preds),
        ("bmc_loss", lambda t: bmc_loss(t, y6, y6, bmc_cfg), preds),
        ("ce_loss", lambda t: ce_loss(t, labels5), logits),
        ("balanced_softmax_ce",
         lambda t: balanced_softmax_ce(t, labels5, bsm_cfg), logits),
        ("focal_loss", lambda t: focal_loss(t, labels5, 2.0), logits),
    ]
    return cases


@contextlib.contextmanager
def flipped_tanh_gradient():
    """Deliberately wrong tanh backward rule, for negative-control runs."""
    original = ad.tanh

    def bugged(a):
        t = np.tanh(a.data)
        out = ad.Tensor(t)
        return ad._maybe_record(out, (a,), lambda g: (-g * (1.0 - t * t),))

    ad.tanh = bugged
    try:
        yield
    finally:
        ad.tanh = original


def run_gradient_checks(tolerance=1e-4, points=10, seed=0, inject_bug=False):
    """Finite-difference every case at `points` random probes.

    Returns (rows, passed) where rows are (name, worst relative error).
    """
    rows = []
    context = flipped_tanh_gradient() if inject_bug else contextlib.nullcontext()
    with context:
        case_rng = np.random.default_rng(np.random.PCG64(seed))
        cases = gradient_cases(case_rng)
        for name, f, x in cases:
            probe_rng = np.random.default_rng(np.random.PCG64(seed + 1))
            worst = 0.0
            for _ in range(points):
                jitter = np.clip(0.02 * probe_rng.normal(size=np.shape(x)),
                                 -0.06, 0.06)
                worst = max(worst,
                            ad.finite_diff_check(f, ad.Tensor(x + jitter)))
            rows.append((name, worst))
    passed = all(err < tolerance for _, err in rows)
    return rows, passed


def quadrature_second_term(y_pred, prior, cfg, points=200001):
    """Trapezoid integration of the noise-smoothed prior density."""
    sigma = cfg.sigma_noise
    spread = math.sqrt(max(prior.variances) + sigma * sigma)
    lo = min(min(prior.means), y_pred) - 14.0 * spread
    hi = max(max(prior.means), y_pred) + 14.0 * spread
    grid = np.linspace(lo, hi, points)
    noise = np.exp(-((y_pred - grid) ** 2) / (2 * sigma * sigma))
    noise /= math.sqrt(2 * math.pi) * sigma
    return math.log(np.trapezoid(noise * prior.density(grid), grid))


def run_quadrature_checks(n_priors=100, seed=0):
    """Closed-form prior integral vs trapezoid quadrature over random
    mixtures with 1 to 3 components.  Returns (worst abs error, passed)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    worst = 0.0
    for i in range(n_priors):
        k = 1 + i % 3
        weights = tuple(rng.dirichlet(np.ones(k) * 2.0))
        means = tuple(rng.uniform(-2.0, 2.0, size=k))
        variances = tuple(rng.uniform(0.01, 1.0, size=k))
        prior = GmmPrior(weights, means, variances)
        cfg = LossConfig(sigma_noise=float(rng.uniform(0.05, 1.0)))
        pred = float(rng.uniform(-1.5, 1.5))
        closed = gai_second_term(np.array([pred]), prior, cfg)[0]
        quad = quadrature_second_term(pred, prior, cfg)
        worst = max(worst, abs(closed - quad))
    return worst, worst < QUADRATURE_TOLERANCE

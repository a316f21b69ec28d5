"""Classification loss, kernel discrepancy estimators, and the weight schedule.

The discrepancy between source and target batches is squared maximum mean
discrepancy under a mixture of RBF kernels. Bandwidths come from the
median heuristic over the pooled batch unless given explicitly. The
regularizer weight follows the usual warm-up curve
``lambda_max * (2 / (1 + exp(-gamma * p)) - 1)`` over training progress p.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, as_tensor, astype, make_op

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)

ADAPT_MODES = ("features", "predictions", "off")


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel mixture: explicit sigmas, or median heuristic x multipliers."""

    bandwidths: tuple[float, ...] | None = None
    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    family: str = "rbf"

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if self.bandwidths is not None:
            bw = tuple(float(b) for b in self.bandwidths)
            if not bw or any(b <= 0 for b in bw):
                raise ValueError("bandwidths must be a non-empty list of positive sigmas")
            object.__setattr__(self, "bandwidths", bw)
        mult = tuple(float(m) for m in self.multipliers)
        if not mult or any(m <= 0 for m in mult):
            raise ValueError("multipliers must be a non-empty list of positive reals")
        object.__setattr__(self, "multipliers", mult)

    def num_components(self):
        return len(self.bandwidths if self.bandwidths is not None else self.multipliers)


def resolve_bandwidths(spec, X, Y):
    """Sigma list for one batch pair; the heuristic base is sqrt(median
    pairwise squared distance) over the pooled rows, detached from gradients."""
    if spec.bandwidths is not None:
        return spec.bandwidths
    pooled = np.concatenate([_rows(X), _rows(Y)], axis=0).astype(np.float64)
    sq = pdist(pooled, "sqeuclidean")
    med = float(np.median(sq)) if sq.size else 0.0
    if med <= 0.0:
        med = 1.0  # degenerate pooled sample: fall back to unit base
    base = math.sqrt(med)
    return tuple(m * base for m in spec.multipliers)


def _rows(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 2:
        raise ShapeError(f"expected a [rows, dims] matrix, got shape {arr.shape}")
    return arr


def _rbf_mixture(X, Y, sigmas):
    """Differentiable kernel matrix for fixed sigmas (inputs cast to float64)."""
    X64, Y64 = astype(X, np.float64), astype(Y, np.float64)
    xd, yd = X64.data, Y64.data
    # cdist evaluates each pair directly, so K[i,j] is bitwise symmetric in X/Y
    d2 = cdist(xd, yd, "sqeuclidean")
    parts = [np.exp(-d2 / (2.0 * s * s)) for s in sigmas]
    K = parts[0].copy()
    for p in parts[1:]:
        K += p

    def vjp_x(g):
        dx = np.zeros_like(xd)
        for s, part in zip(sigmas, parts):
            w = g * part / (s * s)
            dx += w @ yd - w.sum(axis=1, keepdims=True) * xd
        return dx

    def vjp_y(g):
        dy = np.zeros_like(yd)
        for s, part in zip(sigmas, parts):
            w = (g * part).T / (s * s)
            dy += w @ xd - w.sum(axis=1, keepdims=True) * yd
        return dy

    return make_op("rbf_kernel", K, (X64, Y64), (vjp_x, vjp_y))


def rbf_kernel_matrix(X, Y, spec):
    """K[i,j] = sum over sigmas of exp(-|x_i - y_j|^2 / (2 sigma^2))."""
    X, Y = as_tensor(X), as_tensor(Y)
    xd, yd = _rows(X), _rows(Y)
    if xd.shape[0] == 0 or yd.shape[0] == 0:
        raise ValueError("kernel matrix needs at least one row on each side")
    if xd.shape[1] != yd.shape[1]:
        raise ShapeError(f"dimension mismatch: {xd.shape} vs {yd.shape}")
    return _rbf_mixture(X, Y, resolve_bandwidths(spec, X, Y))


def _matrix_mean(K, off_diagonal=False):
    """Mean of kernel entries as a scalar node.

    Uses math.fsum so the forward value is independent of summation order;
    that makes mmd2 exactly symmetric and permutation invariant.
    """
    m, n = K.shape
    if off_diagonal:
        denom = m * (m - 1)
        total = math.fsum(K.data.ravel()) - math.fsum(np.diagonal(K.data))
        mask = (1.0 - np.eye(m)) / denom
    else:
        denom = m * n
        total = math.fsum(K.data.ravel())
        mask = np.full((m, n), 1.0 / denom)
    out = np.asarray(total / denom)
    return make_op("matrix_mean", out, (K,), (lambda g: g[()] * mask,))


def mmd2(X, Y, spec, estimator="biased"):
    """Squared maximum mean discrepancy between two row-sample sets.

    biased:   mean(K_XX) + mean(K_YY) - 2 mean(K_XY)
    unbiased: off-diagonal means for the within-domain terms (needs >= 2
    rows per side).
    """
    if estimator not in ("biased", "unbiased"):
        raise ValueError(f"estimator must be 'biased' or 'unbiased', got {estimator!r}")
    X, Y = as_tensor(X), as_tensor(Y)
    m, n = _rows(X).shape[0], _rows(Y).shape[0]
    minimum = 1 if estimator == "biased" else 2
    if m < minimum or n < minimum:
        raise ValueError(
            f"{estimator} mmd2 needs at least {minimum} sample(s) per side, got {m} and {n}")
    sigmas = resolve_bandwidths(spec, X, Y)
    k_xx = _rbf_mixture(X, X, sigmas)
    k_yy = _rbf_mixture(Y, Y, sigmas)
    k_xy = _rbf_mixture(X, Y, sigmas)
    off = estimator == "unbiased"
    within = ad.add(_matrix_mean(k_xx, off_diagonal=off), _matrix_mean(k_yy, off_diagonal=off))
    return ad.add(within, ad.scale(_matrix_mean(k_xy), -2.0))


def categorical_cross_entropy(probs, one_hot):
    """-(1/N) sum of log probability assigned to the true class.

    Probabilities are clamped at 1e-12 inside the log, so a confidently
    wrong prediction yields a large but finite loss.
    """
    probs, one_hot = as_tensor(probs), as_tensor(one_hot)
    p, y = _rows(probs), _rows(one_hot)
    if p.shape[0] == 0:
        raise ValueError("cross-entropy needs a non-empty batch")
    if p.shape != y.shape:
        raise ShapeError(f"probs {p.shape} and one_hot {y.shape} differ")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1.0).all()):
        raise ValueError("labels must be one-hot rows")
    picked = ad.tsum(ad.mul(ad.log(probs), one_hot))
    return ad.scale(picked, -1.0 / p.shape[0])


@dataclass
class LambdaSchedule:
    """Warm-up state for the regularizer weight; progress p lives in [0, 1]."""

    lambda_max: float = 1.0
    gamma: float = 10.0
    progress: float = 0.0

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")

    def value(self, p):
        return self.lambda_max * (2.0 / (1.0 + math.exp(-self.gamma * p)) - 1.0)


def update_lambda(schedule, epoch, total_epochs):
    """Advance the schedule to ``epoch`` and return the weight for it."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    p = epoch / max(total_epochs - 1, 1)
    schedule.progress = p
    return schedule.value(p)


@dataclass(frozen=True)
class LossReport:
    """One training step's loss decomposition: total = ce + lambda * mmd."""

    ce_loss: float
    mmd_value: float
    lambda_: float
    total: float


def combined_loss(probs_s, labels_s, rep_s, rep_t, adapt_on, spec, lam,
                  estimator="biased"):
    """Source cross-entropy plus the weighted domain discrepancy.

    ``rep_s``/``rep_t`` are whatever representation the discrepancy runs
    on: encoder features for adapt_on='features', softmax outputs for
    adapt_on='predictions'; ignored (may be None) when adapt_on='off'.
    Returns (total loss node, LossReport). When ``lam`` is zero the
    discrepancy is still measured but stays out of the loss graph, so the
    backward pass is identical to an adaptation-off step.
    """
    if adapt_on not in ADAPT_MODES:
        raise ValueError(f"adapt_on must be one of {ADAPT_MODES}, got {adapt_on!r}")
    ce = categorical_cross_entropy(probs_s, labels_s)
    lam = float(lam)
    if adapt_on == "off":
        return ce, LossReport(float(ce.data), 0.0, lam, float(ce.data))

    if rep_s is None or rep_t is None or _rows(rep_t).shape[0] == 0:
        raise ValueError(f"adapt_on={adapt_on!r} needs non-empty source and target batches")
    mmd = mmd2(rep_s, rep_t, spec, estimator=estimator)
    if lam == 0.0:
        total = ce
    else:
        total = ad.add(ce, ad.scale(mmd, lam))
    return total, LossReport(float(ce.data), float(mmd.data), lam, float(total.data))

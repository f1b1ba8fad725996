"""Pure numerical routines for generative-quality and audit statistics.

Everything in here is a stateless function of its array arguments: distribution
distances between embedding sets (FID / KID / IS), ranking and regression
statistics (AUC-ROC, Pearson + least squares), and the subgroup-parity
machinery (statistical parity differences with Wilson-score intervals).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EmbeddingSet:
    """An n x d matrix of features plus a record of where they came from."""

    features: np.ndarray
    provenance: str = "unspecified"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _mean_and_cov(x: np.ndarray):
    mu = x.mean(axis=0)
    # unbiased (n-1) normalization
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return mu, cov


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(real: EmbeddingSet, synth: EmbeddingSet) -> float:
    """Squared 2-Wasserstein distance between Gaussian fits of two embedding sets.

    ||mu_r - mu_s||^2 + Tr(C_r + C_s - 2 (C_r C_s)^{1/2}), with the matrix square
    root evaluated on the symmetrized product sqrt(C_r) C_s sqrt(C_r).
    """
    if real.dim != synth.dim:
        raise ValueError(f"dimension mismatch: {real.dim} vs {synth.dim}")
    if real.n < 2 or synth.n < 2:
        raise ValueError("need at least 2 samples per set for covariance")
    mu_r, c_r = _mean_and_cov(real.features)
    mu_s, c_s = _mean_and_cov(synth.features)
    sqrt_cr = _psd_sqrt(c_r)
    inner = sqrt_cr @ c_s @ sqrt_cr
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_r - mu_s
    return float(diff @ diff + np.trace(c_r) + np.trace(c_s) - 2.0 * tr_sqrt)


def _poly_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(real: EmbeddingSet, synth: EmbeddingSet) -> float:
    """Unbiased polynomial-kernel MMD^2 between two embedding sets.

    Kernel: (x.y / d + 1)^3.  Within-set sums exclude the diagonal, so the
    estimate may be slightly negative for identical distributions.
    """
    if real.dim != synth.dim:
        raise ValueError(f"dimension mismatch: {real.dim} vs {synth.dim}")
    x, y = real.features, synth.features
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 samples per set")
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    sum_xy = kxy.mean()
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def inception_score(posteriors: np.ndarray, eps: float = 1e-12) -> float:
    """exp of the mean KL divergence between per-sample and marginal class posteriors."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("posteriors must be 2-D (n_samples x n_classes)")
    if (p < -eps).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("each row must be a valid probability vector")
    marginal = p.mean(axis=0)
    kl = np.sum(p * (np.log(p + eps) - np.log(marginal + eps)), axis=1)
    return float(np.exp(kl.mean()))


def auc_roc(scores, truth) -> float:
    """Rank-based (tie-aware) AUC, i.e. the normalized Mann-Whitney U statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(int)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have the same shape")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    # midranks for ties
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum_pos = ranks[truth == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, truth) -> np.ndarray:
    """ROC curve as (fpr, tpr) staircase points, one per distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(int)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    sorted_truth = truth[order]
    sorted_scores = scores[order]
    tps = np.cumsum(sorted_truth)
    fps = np.cumsum(1 - sorted_truth)
    # keep the last index of each tied-score block
    distinct = np.r_[np.diff(sorted_scores) != 0, True]
    tpr = tps[distinct] / n_pos
    fpr = fps[distinct] / n_neg
    return np.column_stack([np.r_[0.0, fpr], np.r_[0.0, tpr]])


def pearson_and_fit(x, y):
    """Pearson r plus slope/intercept of the least-squares line y ~ a*x + b."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and the same length")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    xm, ym = x - x.mean(), y - y.mean()
    sxx = float(xm @ xm)
    syy = float(ym @ ym)
    sxy = float(xm @ ym)
    if sxx == 0.0:
        raise ValueError("x is constant; fit undefined")
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    r = sxy / np.sqrt(sxx * syy) if syy > 0 else 0.0
    return float(r), float(slope), float(intercept)


def wilson_interval(k: int, n: int, z: float = 1.96):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= k <= n:
        raise ValueError("k must be in [0, n]")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = (z / denom) * np.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return float(lo), float(hi)


@dataclass
class SpdMatrix:
    """Pairwise statistical parity differences with per-cell 95% intervals.

    spd[i, j] = rate_i - rate_j; ci_lo/ci_hi bracket each cell by combining the
    two groups' independent Wilson half-widths in quadrature.
    """

    groups: list
    rates: np.ndarray
    counts: np.ndarray
    spd: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    flagged_groups: list = field(default_factory=list)


def spd_matrix(predictions, groups, min_count: int = 1, z: float = 1.96) -> SpdMatrix:
    """Statistical parity difference matrix for a binary outcome across groups.

    Groups with fewer than min_count examples are flagged (not dropped here;
    callers decide whether to exclude them).
    """
    predictions = np.asarray(predictions).astype(int)
    groups = np.asarray(groups)
    if predictions.shape != groups.shape:
        raise ValueError("predictions and groups must align")
    labels = sorted(set(groups.tolist()))
    if not labels:
        raise ValueError("no groups present")
    g = len(labels)
    rates = np.zeros(g)
    counts = np.zeros(g, dtype=int)
    halves = np.zeros(g)
    flagged = []
    for gi, lab in enumerate(labels):
        sel = groups == lab
        n = int(sel.sum())
        k = int(predictions[sel].sum())
        counts[gi] = n
        rates[gi] = k / n
        lo, hi = wilson_interval(k, n, z)
        halves[gi] = (hi - lo) / 2.0
        if n < min_count:
            flagged.append(lab)
    spd = rates[:, None] - rates[None, :]
    half = np.sqrt(halves[:, None] ** 2 + halves[None, :] ** 2)
    np.fill_diagonal(half, 0.0)
    return SpdMatrix(
        groups=labels,
        rates=rates,
        counts=counts,
        spd=spd,
        ci_lo=spd - half,
        ci_hi=spd + half,
        flagged_groups=flagged,
    )

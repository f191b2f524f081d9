"""Nystrom Gaussian-kernel classifiers and regularized least squares.

The classifier is kernel ridge regression on +1/-1 labels restricted to a
random subset of training points (the centers).  With ``num_centers`` equal
to the training-set size it coincides with exact kernel ridge regression;
with fewer centers it is the usual Nystrom approximation, solved directly
by Cholesky factorization of the ``m x m`` system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .seeding import rng_for


class SolverError(RuntimeError):
    """Linear system could not be factorized even after regularization."""


def gaussian_kernel(x, centers, sigma: float) -> np.ndarray:
    """Gaussian kernel matrix ``exp(-|x - c|^2 / (2 sigma^2))``, shape (n, m)."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    d2 = cdist(x, centers, "sqeuclidean")
    return np.exp(-d2 / (2.0 * sigma * sigma))


@dataclass
class KernelClassifier:
    """Trained kernel machine: score is a weighted sum of center kernels."""

    centers: np.ndarray
    weights: np.ndarray
    sigma: float
    lam: float

    def decision_values(self, x) -> np.ndarray:
        """Raw margin scores for a batch of feature vectors, shape (n,)."""
        return gaussian_kernel(x, self.centers, self.sigma) @ self.weights

    def score(self, x) -> float:
        """Raw margin score of a single feature vector."""
        return float(self.decision_values(np.asarray(x, dtype=np.float64)[None, :])[0])


def train_kernel_classifier(
    positives,
    negatives,
    num_centers: int,
    sigma: float,
    lam: float,
    seed,
) -> KernelClassifier:
    """Fit a kernel ridge classifier with uniformly sampled Nystrom centers.

    Args:
        positives: (n_pos, f) features labeled +1.
        negatives: (n_neg, f) features labeled -1.
        num_centers: how many training points to keep as centers; must not
            exceed the total training-set size.
        sigma: Gaussian kernel width.
        lam: ridge regularization weight, >= 0 (the stability jitter keeps
            the unregularized system factorizable in the common case).
        seed: anything accepted by :func:`oseg.seeding.rng_for`; controls
            only the center subsample.

    Raises:
        SolverError: if the regularized system cannot be factorized.
    """
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.shape[0] and neg.shape[0] and pos.shape[1] != neg.shape[1]:
        raise ValueError("positive and negative feature widths differ")
    x = np.vstack([p for p in (pos, neg) if p.shape[0]])
    n = x.shape[0]
    if n == 0:
        raise ValueError("no training samples")
    if not np.isfinite(x).all():
        raise ValueError("training features must be finite")
    if not 1 <= num_centers <= n:
        raise ValueError(f"num_centers must be in [1, {n}], got {num_centers}")
    if lam < 0.0:
        raise ValueError("lam must be non-negative")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    y = np.concatenate(
        [np.ones(pos.shape[0]), -np.ones(neg.shape[0])]
    )
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    idx = rng.choice(n, size=num_centers, replace=False)
    centers = x[idx].copy()
    knm = gaussian_kernel(x, centers, sigma)
    kmm = gaussian_kernel(centers, centers, sigma)
    h = knm.T @ knm / n + lam * kmm
    # trace-scaled jitter keeps the Cholesky stable when centers nearly repeat
    h[np.diag_indices_from(h)] += 1e-10 * np.trace(h) / num_centers
    rhs = knm.T @ y / n
    try:
        w = cho_solve(cho_factor(h, lower=True), rhs)
    except LinAlgError as exc:
        raise SolverError(
            f"kernel system factorization failed: n={n} m={num_centers} "
            f"sigma={sigma} lam={lam} trace={np.trace(h):.3e}"
        ) from exc
    return KernelClassifier(centers=centers, weights=w, sigma=sigma, lam=lam)


@dataclass
class RlsRegressor:
    """Linear ridge regressor with an unregularized bias."""

    weights: np.ndarray
    bias: np.ndarray
    lam: float

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = np.atleast_2d(x) @ self.weights + self.bias
        return out[0] if single else out


def train_rls(features, targets, lam: float) -> RlsRegressor:
    """Fit ridge regression ``min |XW + b - T|^2 + lam |W|^2``.

    The bias is left out of the penalty, which is what makes a single
    sample reproduce its own target exactly.  ``lam`` may be zero, in
    which case a least-squares solve is used.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if x.shape[0] != t.shape[0]:
        raise ValueError("features and targets disagree on sample count")
    if x.shape[0] == 0:
        raise ValueError("no training samples")
    if lam < 0.0:
        raise ValueError("lam must be non-negative")
    x_mean = x.mean(axis=0)
    t_mean = t.mean(axis=0)
    xc = x - x_mean
    tc = t - t_mean
    if lam > 0.0:
        gram = xc.T @ xc
        gram[np.diag_indices_from(gram)] += lam
        w = np.linalg.solve(gram, xc.T @ tc)
    else:
        w = np.linalg.lstsq(xc, tc, rcond=None)[0]
    b = t_mean - x_mean @ w
    return RlsRegressor(weights=w, bias=b, lam=lam)

"""Sample-quality metric: Frechet distance between Gaussian fits of two
point clouds (the FID formula on raw coordinates)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidRangeError

CLAMP_TOL = 1e-10


@dataclass(frozen=True)
class SampleSet:
    points: np.ndarray
    source: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise DimensionError(f"points must be 2-D, got shape {pts.shape}")
        if pts.shape[0] < pts.shape[1] + 1:
            raise InvalidRangeError("need at least d + 1 points to estimate a covariance")
        if not np.all(np.isfinite(pts)):
            raise InvalidRangeError("sample set contains non-finite points")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.mean(axis=0), np.atleast_2d(np.cov(self.points, rowvar=False))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(self.dim)])
        for row in self.points:
            writer.writerow([format(float(v), ".17g") for v in row])
        return buf.getvalue()


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() < -CLAMP_TOL:
        raise InvalidRangeError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken from the symmetric
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise DimensionError("moment shapes differ")
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    if w.min() < -CLAMP_TOL:
        raise InvalidRangeError("covariance product is not positive semidefinite")
    tr_root = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root)
    return max(value, 0.0)


def frechet_distance(a: SampleSet, b: SampleSet) -> float:
    if a.dim != b.dim:
        raise DimensionError(f"sample sets differ in dimension ({a.dim} vs {b.dim})")
    return frechet_distance_from_moments(*a.moments(), *b.moments())


def reference_samples(weights, means, covariances, n: int, seed: int,
                      source: str = "reference") -> SampleSet:
    """Exact draws from the mixture data distribution."""
    if n < 1:
        raise InvalidRangeError("n must be >= 1")
    rng = np.random.default_rng([int(seed), 2])
    weights = np.asarray(weights, dtype=np.float64)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covariances = np.asarray(covariances, dtype=np.float64).reshape(
        (means.shape[0],) + (means.shape[1],) * 2)
    labels = rng.choice(len(weights), size=n, p=weights / weights.sum())
    z = rng.standard_normal((n, means.shape[1]))
    chols = np.linalg.cholesky(covariances)
    points = means[labels] + np.einsum("nij,nj->ni", chols[labels], z)
    return SampleSet(points, source=source)


def model_reference(model, n: int, seed: int) -> SampleSet:
    """Reference population for a :class:`GaussianMixtureModel` or linear model."""
    if hasattr(model, "weights"):
        return reference_samples(model.weights, model.means, model.covariances, n, seed)
    return reference_samples([1.0], [model.mu], [model.sigma], n, seed)

"""Closed-form noise predictors standing in for trained denoisers.

Both models return the exact optimal noise prediction for their data
distribution under the forward marginal ``x_t ~ N(sqrt(ab) x_0, (1 - ab) I)``:

    eps(x, t) = -sqrt(1 - ab_t) * grad log p_t(x)

All inputs may carry leading batch dimensions; the last axis is the state.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, InvalidRangeError
from .schedule import NoiseSchedule

_LOG_2PI = math.log(2.0 * math.pi)


def matvec(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``M @ x`` applied row-wise over any leading batch axes of ``x``."""
    return np.einsum("ij,...j->...i", M, x)


def fd_jacobian(f, x: np.ndarray, h: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at a single point ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if h is None:
        h = 1e-5 * (1.0 + np.linalg.norm(x))
    cols = []
    for i in range(x.shape[-1]):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


class EpsModel:
    """Interface for noise predictors ``eps(x, t_index)``.

    Subclasses implement :meth:`eps`; :meth:`jacobian` falls back to central
    finite differences unless overridden with an exact form.
    """

    dim: int
    schedule: NoiseSchedule
    name = "eps-model"

    def eps(self, x: np.ndarray, t_index: int) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, t_index: int) -> np.ndarray:
        x = self._check(x)
        if x.ndim == 1:
            return fd_jacobian(lambda y: self.eps(y, t_index), x)
        return np.stack([self.jacobian(row, t_index) for row in x])

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise DimensionError(f"expected last axis of size {self.dim}, got shape {x.shape}")
        return x

    def _noise_level(self, t_index: int) -> tuple[float, float]:
        ab = self.schedule.alpha_bar_at(t_index)
        return ab, math.sqrt(1.0 - ab)


def _spd(matrix, name: str) -> np.ndarray:
    m = np.array(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise InvalidRangeError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() <= 0:
        raise InvalidRangeError(f"{name} must be positive definite")
    return m


def _marginal_precision(cov: np.ndarray, ab: float) -> tuple[np.ndarray, float]:
    d = cov.shape[0]
    C = ab * cov + (1.0 - ab) * np.eye(d)
    sign, logdet = np.linalg.slogdet(C)
    if sign <= 0 or np.linalg.cond(C) > 1e14:
        raise InvalidRangeError("marginal covariance is singular")
    Cinv = np.linalg.inv(C)
    Cinv = 0.5 * (Cinv + Cinv.T)
    return Cinv, logdet


class LinearGaussianModel(EpsModel):
    """Optimal predictor for Gaussian data ``N(mu, sigma)``; affine in ``x``."""

    name = "linear-gaussian"

    def __init__(self, mu, sigma, schedule: NoiseSchedule):
        self.mu = np.array(mu, dtype=np.float64).reshape(-1)
        self.dim = self.mu.shape[0]
        self.sigma = _spd(sigma, "sigma")
        if self.sigma.shape[0] != self.dim:
            raise DimensionError("sigma does not match the dimension of mu")
        self.schedule = schedule
        self._cache: dict[int, tuple] = {}

    def _terms(self, t_index: int):
        if t_index not in self._cache:
            ab, s = self._noise_level(t_index)
            Cinv, _ = _marginal_precision(self.sigma, ab)
            self._cache[t_index] = (ab, s, Cinv, math.sqrt(ab) * self.mu)
        return self._cache[t_index]

    def linear_coeffs(self, t_index: int) -> tuple[np.ndarray, np.ndarray]:
        """``(M, b)`` such that ``eps(x, t) = M x + b`` exactly."""
        ab, s, Cinv, m = self._terms(t_index)
        return s * Cinv, -s * matvec(Cinv, m)

    def eps(self, x, t_index):
        x = self._check(x)
        _, s, Cinv, m = self._terms(t_index)
        return s * matvec(Cinv, x - m)

    def jacobian(self, x, t_index):
        x = self._check(x)
        _, s, Cinv, _ = self._terms(t_index)
        J = s * Cinv
        return np.broadcast_to(J, x.shape[:-1] + J.shape).copy()

    def to_dict(self):
        return {"kind": "linear", "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


class GaussianMixtureModel(EpsModel):
    """Optimal predictor for a Gaussian-mixture data distribution.

    The Jacobian is exact: responsibility-weighted component precisions
    minus the responsibility covariance of the component scores.
    """

    name = "gaussian-mixture"

    def __init__(self, weights, means, covariances, schedule: NoiseSchedule):
        w = np.array(weights, dtype=np.float64).reshape(-1)
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise InvalidRangeError("mixture weights must be nonnegative and sum to 1")
        self.weights = w
        self.means = np.array(means, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape[0] != w.shape[0]:
            raise DimensionError("means must have shape (n_components, dim)")
        self.dim = self.means.shape[1]
        self.covariances = np.stack([_spd(c, "covariance") for c in covariances])
        if self.covariances.shape != (w.shape[0], self.dim, self.dim):
            raise DimensionError("covariances must have shape (n_components, dim, dim)")
        self.schedule = schedule
        with np.errstate(divide="ignore"):
            self._log_w = np.log(w)
        self._cache: dict[int, tuple] = {}

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def _terms(self, t_index: int):
        if t_index not in self._cache:
            ab, s = self._noise_level(t_index)
            precs, logdets = zip(*(_marginal_precision(c, ab) for c in self.covariances))
            self._cache[t_index] = (s, np.sqrt(ab) * self.means, precs, np.array(logdets))
        return self._cache[t_index]

    def _components(self, x, t_index):
        s, centers, precs, logdets = self._terms(t_index)
        r = np.stack([matvec(P, x - c) for P, c in zip(precs, centers)], axis=-2)
        diffs = x[..., None, :] - centers
        log_p = self._log_w - 0.5 * (np.sum(diffs * r, axis=-1) + logdets + self.dim * _LOG_2PI)
        log_p = log_p - log_p.max(axis=-1, keepdims=True)
        resp = np.exp(log_p)
        resp = resp / resp.sum(axis=-1, keepdims=True)
        return s, r, resp, precs

    def responsibilities(self, x, t_index) -> np.ndarray:
        return self._components(self._check(x), t_index)[2]

    def eps(self, x, t_index):
        x = self._check(x)
        s, r, resp, _ = self._components(x, t_index)
        return s * np.sum(resp[..., None] * r, axis=-2)

    def jacobian(self, x, t_index):
        x = self._check(x)
        s, r, resp, precs = self._components(x, t_index)
        mean_prec = np.einsum("...k,kij->...ij", resp, np.stack(precs))
        r_bar = np.sum(resp[..., None] * r, axis=-2)
        second = np.einsum("...k,...ki,...kj->...ij", resp, r, r)
        score_cov = second - r_bar[..., :, None] * r_bar[..., None, :]
        return s * (mean_prec - score_cov)

    def to_dict(self):
        return {
            "kind": "mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }


DEFAULT_MIXTURE = {
    "weights": [1 / 3, 1 / 3, 1 / 3],
    "means": [[-2.0, 0.0], [2.0, 0.0], [0.0, 2.0]],
    "covariances": [np.eye(2).tolist()] * 3,
}


def default_mixture(schedule: NoiseSchedule) -> GaussianMixtureModel:
    return GaussianMixtureModel(schedule=schedule, **DEFAULT_MIXTURE)


def model_from_dict(params: dict, schedule: NoiseSchedule) -> EpsModel:
    params = dict(params)
    kind = params.pop("kind", "mixture")
    if kind == "linear":
        return LinearGaussianModel(params["mu"], params["sigma"], schedule)
    if kind == "mixture":
        merged = {**DEFAULT_MIXTURE, **params}
        return GaussianMixtureModel(merged["weights"], merged["means"],
                                    merged["covariances"], schedule)
    raise InvalidRangeError(f"unknown model kind {kind!r}")

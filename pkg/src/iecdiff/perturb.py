"""Simulated efficiency-technique errors injected into model evaluations.

An :class:`Injector` sits between the sampler and the model.  It is the
deployed, perturbed predictor: every evaluation the sampler makes (fresh or
inside error correction) goes through it and is counted.  One injector
serves a batch of independent trajectories; each row owns its own noise
stream so results do not depend on how trajectories are batched.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, InvalidRangeError

PERTURBATION_KINDS = ("none", "additive", "quantize", "cache")
FRESH_STEP = "fresh_step"
IEC_INNER = "iec_inner"


@dataclass(frozen=True)
class PerturbationConfig:
    kind: str = "none"
    sigma: float = 0.0
    bits: int = 8
    interval_N: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise InvalidRangeError(f"unknown perturbation kind {self.kind!r}")
        if not self.sigma >= 0:
            raise InvalidRangeError(f"sigma must be nonnegative, got {self.sigma}")
        if int(self.bits) != self.bits or self.bits < 2:
            raise InvalidRangeError(f"bits must be an integer >= 2, got {self.bits}")
        if int(self.interval_N) != self.interval_N or self.interval_N < 1:
            raise InvalidRangeError(f"interval_N must be an integer >= 1, got {self.interval_N}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidRangeError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


def quantize_vector(v, bits: int) -> np.ndarray:
    """Symmetric uniform fake-quantization with per-vector max-abs scale.

    ``s = max|v| / (2**(bits-1) - 1)`` and the output is ``round(v / s) * s``
    (round half to even).  Leading axes are treated as a batch.
    """
    if bits < 2:
        raise InvalidRangeError(f"bits must be >= 2, got {bits}")
    v = np.asarray(v, dtype=np.float64)
    levels = 2 ** (int(bits) - 1) - 1
    peak = np.max(np.abs(v), axis=-1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    # q * peak / levels keeps the grid endpoints exact
    return np.where(peak > 0, np.round(v * levels / safe) * safe / levels, v)


def quantization_scale(v, bits: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.max(np.abs(v), axis=-1) / (2 ** (int(bits) - 1) - 1)


class Injector:
    """Mutable per-run perturbation state for a batch of trajectories.

    Attributes mirror the run state the sampler needs: ``cached_eps`` (set
    once a cache recompute has happened), ``calls_since_recompute``,
    ``rngs`` (one generator per trajectory) and ``full_eval_count`` (model
    evaluations per trajectory).  ``last_delta`` holds the realized
    prediction error of the latest call when ``record`` is on.
    """

    def __init__(self, config: PerturbationConfig, seeds, record: bool = True):
        self.config = config
        self.seeds = [int(s) for s in np.atleast_1d(seeds)]
        self.rngs = [np.random.default_rng([s, int(config.seed), 1]) for s in self.seeds]
        self.cached_eps: np.ndarray | None = None
        self.calls_since_recompute = 0
        self.full_eval_count = np.zeros(len(self.seeds), dtype=np.int64)
        self.record = record
        self.last_delta: np.ndarray | None = None

    def is_recompute_step(self, step: int) -> bool:
        if self.config.kind != "cache":
            return True
        return step % self.config.interval_N == 0

    def _evaluate(self, model, x, t_index, rows):
        self.full_eval_count[rows] += 1
        return model.eps(x, t_index)

    def perturbed_eps(self, model, x, t_index, step_role=FRESH_STEP, step=0, rows=None):
        """Evaluate the deployed model at ``x`` (shape ``(n_rows, d)``).

        ``rows`` selects which trajectories of the batch ``x`` belongs to;
        ``None`` means all of them.  ``step`` is the sampling position and
        only matters for caching.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != model.dim:
            raise DimensionError(f"expected shape (rows, {model.dim}), got {x.shape}")
        if rows is None:
            rows = np.arange(len(self.seeds))
        rows = np.asarray(rows)
        if x.shape[0] != rows.shape[0]:
            raise DimensionError("row selector does not match the batch")
        kind = self.config.kind

        if kind == "cache":
            return self._cached(model, x, t_index, step_role, step, rows)

        out = self._evaluate(model, x, t_index, rows)
        if kind == "none":
            delta = np.zeros_like(out) if self.record else None
        elif kind == "additive":
            z = np.stack([self.rngs[r].standard_normal(model.dim) for r in rows])
            delta = self.config.sigma * z
            if self.config.sigma > 0:
                out = out + delta
        else:
            quantized = quantize_vector(out, self.config.bits)
            delta = quantized - out
            out = quantized
        self.last_delta = delta
        return out

    def _cached(self, model, x, t_index, step_role, step, rows):
        full_batch = rows.shape[0] == len(self.seeds)
        if self.is_recompute_step(step):
            out = self._evaluate(model, x, t_index, rows)
            if step_role == FRESH_STEP:
                if not full_batch:
                    raise DimensionError("cache recompute must cover the whole batch")
                self.cached_eps = out.copy()
                self.calls_since_recompute = 0
            self.last_delta = np.zeros_like(out) if self.record else None
            return out
        if self.cached_eps is None:
            raise RuntimeError("cache miss: no recompute has happened yet")
        if step_role == FRESH_STEP:
            self.calls_since_recompute += 1
        out = self.cached_eps[rows].copy()
        # realized staleness error, measured against an uncounted clean evaluation
        self.last_delta = out - model.eps(x, t_index) if self.record else None
        return out

"""Deterministic DDIM sampling with optional iterative error correction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, DivergenceError, InvalidRangeError
from .perturb import FRESH_STEP, IEC_INNER, Injector, PerturbationConfig
from .schedule import NoiseSchedule, StepCoefficients, all_step_coeffs

POLICIES = ("all", "none", "first_last", "explicit")
INNER_TIMESTEPS = ("source", "target")
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class IecConfig:
    """Correction settings.

    ``lam`` is the relaxation weight, ``K`` the iteration cap and ``tau``
    the stopping threshold on the iterate change.  ``inner_timestep``
    chooses the timestep fed to inner evaluations: ``"source"`` uses the
    timestep of the state being stepped from, ``"target"`` the one being
    stepped to.
    """

    lam: float = 0.5
    K: int = 1
    tau: float = 1e-5
    policy: str = "all"
    fraction: float | None = None
    steps: tuple[int, ...] = ()
    inner_timestep: str = "source"

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise InvalidRangeError(f"lambda must lie in (0, 1], got {self.lam}")
        if int(self.K) != self.K or self.K < 0:
            raise InvalidRangeError(f"K must be a nonnegative integer, got {self.K}")
        if not self.tau > 0:
            raise InvalidRangeError(f"tau must be positive, got {self.tau}")
        if self.policy not in POLICIES:
            raise InvalidRangeError(f"unknown policy {self.policy!r}")
        if self.policy == "first_last" and not (
            self.fraction is not None and 0.0 < self.fraction <= 0.5
        ):
            raise InvalidRangeError("first_last policy needs a fraction in (0, 0.5]")
        if self.inner_timestep not in INNER_TIMESTEPS:
            raise InvalidRangeError(f"inner_timestep must be one of {INNER_TIMESTEPS}")
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))

    @property
    def label(self) -> str:
        if self.policy == "first_last":
            return f"first_last({self.fraction:g})"
        return self.policy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["steps"] = list(self.steps)
        return d


NO_IEC = IecConfig(policy="none", K=0)


def select_iec_steps(cfg: IecConfig, T_sample: int) -> frozenset[int]:
    """Sampling positions that receive correction.

    ``first_last(f)`` corrects ``ceil(2 f T)`` positions split between the
    two ends, the head taking the extra one when the count is odd.
    """
    if T_sample < 1:
        raise InvalidRangeError("T_sample must be >= 1")
    if cfg.policy == "none" or cfg.K == 0:
        return frozenset()
    if cfg.policy == "all":
        return frozenset(range(T_sample))
    if cfg.policy == "explicit":
        return frozenset(s for s in cfg.steps if 0 <= s < T_sample)
    total = min(T_sample, math.ceil(2.0 * cfg.fraction * T_sample - 1e-9))
    head = math.ceil(total / 2)
    tail = total - head
    return frozenset(range(head)) | frozenset(range(T_sample - tail, T_sample))


def ddim_step(x_t, eps_value, coeffs: StepCoefficients) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_value = np.asarray(eps_value, dtype=np.float64)
    if x_t.shape != eps_value.shape:
        raise DimensionError(f"state {x_t.shape} and prediction {eps_value.shape} differ")
    return coeffs.A * x_t + coeffs.B * eps_value


def iec_refine(x_t, x_init, coeffs: StepCoefficients, eval_fn, cfg: IecConfig):
    """Relaxed fixed-point refinement of one DDIM transition.

    Iterates ``x <- x + lam * (A x_t + B eval_fn(x, t) - x)`` starting from
    ``x_init`` until the iterate moves less than ``tau`` or ``K`` iterations
    have run.  Works on a single state or on a batch of shape ``(n, d)``; in
    the batch case rows stop independently and ``eval_fn`` is then called as
    ``eval_fn(x_rows, t, rows=idx)`` for the rows still running.

    Returns ``(x_star, iters_used, residuals)``.  For a batch, ``iters_used``
    is an integer array and ``residuals`` a ``(n, K)`` array padded with NaN.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    xt = np.atleast_2d(x_t)
    x = np.atleast_2d(np.array(x_init, dtype=np.float64))
    if x.shape != xt.shape:
        raise DimensionError("x_t and x_init differ in shape")
    n = x.shape[0]
    t_index = coeffs.t_index if cfg.inner_timestep == "source" else coeffs.prev_index
    anchor = coeffs.A * xt

    iters = np.zeros(n, dtype=np.int64)
    residuals = np.full((n, cfg.K), np.nan)
    active = np.ones(n, dtype=bool)
    best = x.copy()
    best_res = np.full(n, np.inf)
    first_res = np.full(n, np.nan)

    for k in range(cfg.K):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cur = x[idx]
        if idx.size == n:
            e = eval_fn(cur if not single else cur[0], t_index)
        else:
            e = eval_fn(cur, t_index, rows=idx)
        e = np.atleast_2d(e)
        with np.errstate(invalid="ignore", over="ignore"):
            new = cur + cfg.lam * (anchor[idx] + coeffs.B * e - cur)
        if not np.all(np.isfinite(new)):
            raise DivergenceError("non-finite iterate during error correction")
        res = np.linalg.norm(new - cur, axis=-1)
        residuals[idx, k] = res
        iters[idx] += 1
        if k == 0:
            first_res[idx] = res
        x[idx] = new

        improved = res < best_res[idx]
        best[idx[improved]] = new[improved]
        best_res[idx[improved]] = res[improved]

        blown = res > DIVERGENCE_FACTOR * first_res[idx]
        if np.any(blown):
            x[idx[blown]] = best[idx[blown]]
        active[idx[(res < cfg.tau) | blown]] = False

    if single:
        return x[0], int(iters[0]), [float(r) for r in residuals[0, : iters[0]]]
    return x, iters, residuals


@dataclass
class Trajectory:
    """One sampled chain ``x_T ... x_0`` with its accounting.

    ``eps_deltas[p]`` is the realized prediction error of the fresh
    evaluation at sampling position ``p``; ``iec_deltas[p, k]`` the one of
    inner iteration ``k`` (NaN where no iteration ran).
    """

    states: np.ndarray
    initial_seed: int
    full_eval_count: int
    per_step_iec_iters: np.ndarray
    eps_deltas: np.ndarray | None = None
    iec_deltas: np.ndarray | None = None
    iec_residuals: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def T_sample(self) -> int:
        return self.states.shape[0] - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class TrajectoryBatch:
    """Trajectories sharing model, schedule and configs; leading axis is the seed."""

    states: np.ndarray
    seeds: np.ndarray
    full_eval_count: np.ndarray
    per_step_iec_iters: np.ndarray
    eps_deltas: np.ndarray | None
    iec_deltas: np.ndarray | None
    iec_residuals: np.ndarray | None
    config: dict

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, i) -> Trajectory:
        pick = (lambda a: None if a is None else a[i])
        return Trajectory(
            states=self.states[i],
            initial_seed=int(self.seeds[i]),
            full_eval_count=int(self.full_eval_count[i]),
            per_step_iec_iters=self.per_step_iec_iters[i],
            eps_deltas=pick(self.eps_deltas),
            iec_deltas=pick(self.iec_deltas),
            iec_residuals=pick(self.iec_residuals),
            config=self.config,
        )

    @property
    def finals(self) -> np.ndarray:
        return self.states[:, -1]

    @classmethod
    def concat(cls, parts: list["TrajectoryBatch"]) -> "TrajectoryBatch":
        def cat(name):
            arrays = [getattr(p, name) for p in parts]
            return None if arrays[0] is None else np.concatenate(arrays)

        return cls(
            states=cat("states"), seeds=cat("seeds"), full_eval_count=cat("full_eval_count"),
            per_step_iec_iters=cat("per_step_iec_iters"), eps_deltas=cat("eps_deltas"),
            iec_deltas=cat("iec_deltas"), iec_residuals=cat("iec_residuals"),
            config=parts[0].config,
        )


def prior_sample(seed: int, dim: int) -> np.ndarray:
    """Draw x_T from its own stream so paired runs share the start."""
    return np.random.default_rng([int(seed), 0]).standard_normal(dim)


def sample_batch(model, schedule: NoiseSchedule, pert: PerturbationConfig,
                 iec: IecConfig, seeds, record: bool = True) -> TrajectoryBatch:
    """Run one trajectory per seed; every row is computed independently."""
    seeds = np.asarray(np.atleast_1d(seeds), dtype=np.uint64)
    n, d, T = seeds.shape[0], model.dim, schedule.T_sample
    injector = Injector(pert, seeds, record=record)
    iec_steps = select_iec_steps(iec, T)
    K = iec.K

    x = np.stack([prior_sample(s, d) for s in seeds])
    states = np.empty((n, T + 1, d))
    states[:, 0] = x
    iec_iters = np.zeros((n, T), dtype=np.int64)
    eps_deltas = np.zeros((n, T, d)) if record else None
    iec_deltas = np.full((n, T, K, d), np.nan) if record and iec_steps else None
    iec_res = np.full((n, T, K), np.nan) if iec_steps else None

    for p, coeffs in enumerate(all_step_coeffs(schedule)):
        eps_value = injector.perturbed_eps(model, x, coeffs.t_index, FRESH_STEP, step=p)
        if record:
            eps_deltas[:, p] = injector.last_delta
        x_next = ddim_step(x, eps_value, coeffs)

        if p in iec_steps and injector.is_recompute_step(p):
            inner_count = np.zeros(n, dtype=np.int64)

            def inner(xs, t_index, rows=None, _p=p):
                rows = np.arange(n) if rows is None else rows
                out = injector.perturbed_eps(model, xs, t_index, IEC_INNER, step=_p, rows=rows)
                if record:
                    iec_deltas[rows, _p, inner_count[rows]] = injector.last_delta
                inner_count[rows] += 1
                return out

            try:
                x_next, used, res = iec_refine(x, x_next, coeffs, inner, iec)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), step=p,
                                      lipschitz=_lipschitz_at(model, x_next, coeffs, iec)) from exc
            iec_iters[:, p] = used
            iec_res[:, p] = res

        if not np.all(np.isfinite(x_next)):
            raise DivergenceError(f"non-finite state at sampling position {p}", step=p)
        x = x_next
        states[:, p + 1] = x

    return TrajectoryBatch(
        states=states,
        seeds=seeds,
        full_eval_count=injector.full_eval_count.copy(),
        per_step_iec_iters=iec_iters,
        eps_deltas=eps_deltas,
        iec_deltas=iec_deltas,
        iec_residuals=iec_res,
        config={
            "schedule": schedule.to_dict(),
            "model": model.to_dict(),
            "perturbation": pert.to_dict(),
            "iec": iec.to_dict(),
        },
    )


def sample_trajectory(model, schedule: NoiseSchedule, pert: PerturbationConfig,
                      iec: IecConfig, seed: int, record: bool = True) -> Trajectory:
    return sample_batch(model, schedule, pert, iec, [seed], record=record)[0]


def _lipschitz_at(model, x, coeffs, iec):
    from .analysis import contraction_constant

    rows = np.atleast_2d(x)
    finite = rows[np.all(np.isfinite(rows), axis=-1)]
    if finite.size == 0:
        return None
    return contraction_constant(model, finite[0], coeffs, iec.lam)

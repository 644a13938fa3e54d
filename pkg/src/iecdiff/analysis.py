"""Error-propagation diagnostics: amplification norms, contraction
constants, first-order error predictions and the correction error bound."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidRangeError
from .schedule import NoiseSchedule, StepCoefficients, all_step_coeffs

POWER_ITERS = 100
POWER_TOL = 1e-8


BLOCK = 2


def _start_block(dim: int) -> np.ndarray:
    b = min(BLOCK, dim)
    if b == dim:
        return np.eye(dim)
    V = np.random.default_rng(12345).standard_normal((dim, b))
    return np.linalg.qr(V)[0]


def spectral_norm(matvec_fn, dim: int, iters: int = POWER_ITERS, tol: float = POWER_TOL,
                  rmatvec_fn=None, full_output: bool = False):
    """Largest singular value of a linear map from matrix-vector products.

    Power iteration on ``M^T M`` carried on a two-vector block with a
    Rayleigh-Ritz step, so nearly equal leading singular values do not stall
    it.  ``rmatvec_fn`` applies the adjoint; when omitted the map is taken
    as symmetric.  Stops once successive estimates agree to ``tol``
    relatively.  With ``full_output`` returns ``(estimate, converged, iters)``.
    """
    if iters < 1:
        raise InvalidRangeError("iters must be >= 1")
    rmatvec_fn = rmatvec_fn or matvec_fn
    V = _start_block(dim)
    estimate, converged = 0.0, False
    for it in range(1, iters + 1):
        W = np.column_stack([rmatvec_fn(matvec_fn(V[:, j])) for j in range(V.shape[1])])
        H = V.T @ W
        new = float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (H + H.T))[-1], 0.0)))
        if abs(new - estimate) <= tol * new or not np.any(W):
            estimate, converged = new, True
            break
        estimate = new
        V = np.linalg.qr(W)[0]
    if full_output:
        return estimate, converged, it
    return estimate


def spectral_norms(mats: np.ndarray, iters: int = POWER_ITERS, tol: float = POWER_TOL) -> np.ndarray:
    """Batched :func:`spectral_norm` for a stack of explicit ``(..., d, d)`` matrices."""
    mats = np.asarray(mats, dtype=np.float64)
    lead = mats.shape[:-2]
    m = mats.reshape((-1,) + mats.shape[-2:])
    gram = np.einsum("nki,nkj->nij", m, m)
    V = np.broadcast_to(_start_block(m.shape[-1]), (m.shape[0],) + _start_block(m.shape[-1]).shape)
    est = np.zeros(m.shape[0])
    done = np.zeros(m.shape[0], dtype=bool)
    for _ in range(iters):
        W = gram @ V
        H = np.swapaxes(V, -1, -2) @ W
        new = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (H + np.swapaxes(H, -1, -2)))[:, -1], 0, None))
        finished = np.abs(new - est) <= tol * new
        est = np.where(done, est, new)
        done |= finished
        if done.all():
            break
        V = np.linalg.qr(W)[0]
    return est.reshape(lead)


def amplification_matrix(model, x, coeffs: StepCoefficients) -> np.ndarray:
    J = model.jacobian(x, coeffs.t_index)
    return coeffs.A * np.eye(model.dim) + coeffs.B * J


def correction_jacobian(model, x, coeffs: StepCoefficients, lam: float) -> np.ndarray:
    J = model.jacobian(x, coeffs.t_index)
    return (1.0 - lam) * np.eye(model.dim) + lam * coeffs.B * J


def _operator_norm(M: np.ndarray) -> float:
    return spectral_norm(lambda v: M @ v, M.shape[0], rmatvec_fn=lambda v: M.T @ v)


def step_amplification(model, x, coeffs: StepCoefficients) -> float:
    """Operator norm of ``A I + B J(x)``: how much an input error grows in one step."""
    return _operator_norm(amplification_matrix(model, np.asarray(x, dtype=np.float64), coeffs))


def contraction_constant(model, x, coeffs: StepCoefficients, lam: float) -> float:
    """Lipschitz constant ``||(1 - lam) I + lam B J(x)||`` of the correction map."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidRangeError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return 1.0
    return _operator_norm(correction_jacobian(model, np.asarray(x, dtype=np.float64), coeffs, lam))


def predicted_error_step(delta_t, eps_delta, model, x_t, coeffs: StepCoefficients) -> np.ndarray:
    """First-order propagation of an input error through one perturbed step."""
    delta_t = np.asarray(delta_t, dtype=np.float64)
    M = amplification_matrix(model, np.asarray(x_t, dtype=np.float64), coeffs)
    return M @ delta_t + coeffs.B * np.asarray(eps_delta, dtype=np.float64)


def cumulative_error_prediction(model, clean_states, eps_deltas, coeffs_list) -> np.ndarray:
    """Final-state error as a weighted sum of per-step injected errors.

    Each injection ``B_i e_i`` is carried to the end by the product of the
    amplification matrices of all later steps.  The sum is accumulated from
    the last step backwards so the running product grows by one factor per
    step.  Jacobians are taken at the clean states.
    """
    clean_states = np.asarray(clean_states, dtype=np.float64)
    eps_deltas = np.asarray(eps_deltas, dtype=np.float64)
    d = clean_states.shape[-1]
    carry = np.eye(d)
    total = np.zeros(d)
    for p in range(len(coeffs_list) - 1, -1, -1):
        c = coeffs_list[p]
        total += carry @ (c.B * eps_deltas[p])
        carry = carry @ amplification_matrix(model, clean_states[p], c)
    return total


def iec_bound_constant(model, lam, coeffs: StepCoefficients, x_t, x_prev,
                       delta_t, eps_delta) -> float:
    """The per-step constant ``C`` of the correction error recursion.

    ``x_t``/``x_prev`` are clean states, ``delta_t`` the measured error
    entering the step and ``eps_delta`` the realized prediction error.
    """
    drift = coeffs.B * (model.eps(x_prev, coeffs.t_index) - model.eps(x_t, coeffs.t_index))
    injected = coeffs.A * np.asarray(delta_t) + coeffs.B * np.asarray(eps_delta)
    return lam * (float(np.linalg.norm(drift)) + float(np.linalg.norm(injected)))


def iec_error_bound(C_terms, L_terms, k=None, delta0=None) -> np.ndarray:
    """``C / (1 - L)`` per step, or the ``k``-iteration bound
    ``L^k |delta0| + C (1 - L^k) / (1 - L)`` when ``k`` is given.

    Steps with ``L >= 1`` have no bound and come back as ``inf``.
    """
    C = np.asarray(C_terms, dtype=np.float64)
    L = np.asarray(L_terms, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        if k is None:
            bound = C / (1.0 - L)
        else:
            d0 = np.zeros_like(C) if delta0 is None else np.asarray(delta0, dtype=np.float64)
            bound = L**k * d0 + C * (1.0 - L**k) / (1.0 - L)
    return np.where(L < 1.0, bound, np.inf)


@dataclass
class ErrorReport:
    """Per-step error columns comparing a run against its clean twin.

    Row ``p`` describes sampling position ``p``: the error after the step,
    the amplification at the clean input state, the correction contraction
    at the clean output state, the first-order predicted error and the
    correction error bound.
    """

    t_index: np.ndarray
    per_step_delta_norm: np.ndarray
    per_step_amplification: np.ndarray
    per_step_L: np.ndarray
    predicted_delta_norm: np.ndarray
    iec_bound: np.ndarray
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("step", "t_index", "delta_norm", "amplification", "L",
               "predicted_delta_norm", "iec_bound")

    def __len__(self):
        return len(self.per_step_delta_norm)

    def rows(self):
        for p in range(len(self)):
            yield (p, int(self.t_index[p]), self.per_step_delta_norm[p],
                   self.per_step_amplification[p], self.per_step_L[p],
                   self.predicted_delta_norm[p], self.iec_bound[p])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in self.rows():
            writer.writerow([row[0], row[1]] + [format_float(v) for v in row[2:]])
        return buf.getvalue()


def format_float(v: float) -> str:
    return format(float(v), ".17g")


def _check_pair(clean, other):
    for key in ("schedule", "model"):
        if clean.config.get(key) != other.config.get(key):
            raise ConfigError(f"trajectories differ in {key}")
    if int(clean.initial_seed) != int(other.initial_seed):
        raise ConfigError("trajectories were launched from different seeds")


def error_curve(clean, other, model, schedule: NoiseSchedule, lam: float | None = None) -> ErrorReport:
    _check_pair(clean, other)
    if lam is None:
        lam = other.config.get("iec", {}).get("lambda", 0.5)
    coeffs = all_step_coeffs(schedule)
    T = len(coeffs)
    xs = clean.states
    deltas = other.states - clean.states
    delta_norm = np.linalg.norm(deltas[1:], axis=-1)

    t_idx = np.array([c.t_index for c in coeffs])
    amp_mats = np.stack([amplification_matrix(model, xs[p], c) for p, c in enumerate(coeffs)])
    # contraction of the correction map is evaluated around the clean output state
    g_mats = np.stack([
        (1.0 - lam) * np.eye(model.dim) + lam * c.B * model.jacobian(xs[p + 1], c.t_index)
        for p, c in enumerate(coeffs)
    ])
    amp = spectral_norms(amp_mats)
    L = spectral_norms(g_mats)

    e = other.eps_deltas if other.eps_deltas is not None else np.zeros((T, model.dim))
    predicted = np.empty(T)
    run = np.zeros(model.dim)
    C = np.empty(T)
    for p, c in enumerate(coeffs):
        injected = e[p]
        if other.iec_deltas is not None and other.per_step_iec_iters[p] > 0:
            inner = other.iec_deltas[p, : other.per_step_iec_iters[p]]
            injected = inner[np.argmax(np.linalg.norm(c.A * deltas[p] + c.B * inner, axis=-1))]
        C[p] = iec_bound_constant(model, lam, c, xs[p], xs[p + 1], deltas[p], injected)
        run = amp_mats[p] @ run + c.B * e[p]
        predicted[p] = np.linalg.norm(run)

    return ErrorReport(
        t_index=t_idx,
        per_step_delta_norm=delta_norm,
        per_step_amplification=amp,
        per_step_L=L,
        predicted_delta_norm=predicted,
        iec_bound=iec_error_bound(C, L),
        metadata={"seed": int(other.initial_seed), "lambda": lam,
                  "perturbation": other.config.get("perturbation"),
                  "iec": other.config.get("iec")},
    )


def mean_error_report(reports: list[ErrorReport]) -> ErrorReport:
    """Average the columns of several reports step by step."""
    if not reports:
        raise InvalidRangeError("no reports to average")

    def avg(name):
        return np.mean([getattr(r, name) for r in reports], axis=0)

    return ErrorReport(
        t_index=reports[0].t_index,
        per_step_delta_norm=avg("per_step_delta_norm"),
        per_step_amplification=avg("per_step_amplification"),
        per_step_L=avg("per_step_L"),
        predicted_delta_norm=avg("predicted_delta_norm"),
        iec_bound=avg("iec_bound"),
        metadata={**reports[0].metadata, "n_trajectories": len(reports)},
    )


def trajectory_norms(model, states: np.ndarray, schedule: NoiseSchedule, lambdas) -> dict:
    """Amplification and contraction norms along a batch of clean chains.

    ``states`` has shape ``(n, T + 1, d)``.  Returns arrays of shape
    ``(n, T)`` keyed by ``"amplification"`` and by each lambda.
    """
    coeffs = all_step_coeffs(schedule)
    eye = np.eye(model.dim)
    amp, J_out = [], []
    for p, c in enumerate(coeffs):
        amp.append(c.A * eye + c.B * model.jacobian(states[:, p], c.t_index))
        J_out.append(c.B * model.jacobian(states[:, p + 1], c.t_index))
    amp = np.stack(amp, axis=1)
    BJ = np.stack(J_out, axis=1)
    out = {"amplification": spectral_norms(amp)}
    for lam in lambdas:
        if lam == 0.0:
            # the correction map is the identity
            out[0.0] = np.ones(BJ.shape[:2])
        else:
            out[float(lam)] = spectral_norms((1.0 - lam) * eye + lam * BJ)
    return out


def linear_fixed_point(model, x_t, coeffs: StepCoefficients) -> np.ndarray:
    """Closed-form solution of ``x = A x_t + B (M x + b)`` for an affine model."""
    M, b = model.linear_coeffs(coeffs.t_index)
    lhs = np.eye(model.dim) - coeffs.B * M
    return np.linalg.solve(lhs, coeffs.A * np.asarray(x_t) + coeffs.B * b)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])

"""Kalman filtering and Rauch-Tung-Striebel smoothing of a gridded CGM channel.

The filter treats a missing slot as a pure time update, so the smoother
returns an interpolated estimate (with its variance) at every grid slot.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .ingest import GriddedSeries

DEFAULT_Q_SCALE = 0.01
DEFAULT_R = 25.0
FALLBACK_GLUCOSE = 120.0
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class LinearGaussianModel:
    phi: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    P0: np.ndarray
    B: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.phi.shape[0]
        if self.phi.shape != (n, n) or self.Q.shape != (n, n) or self.P0.shape != (n, n):
            raise ValueError("phi, Q and P0 must be n x n")
        if self.H.shape != (1, n) or self.x0.shape != (n,):
            raise ValueError("H must be 1 x n and x0 length n")
        if self.R.shape != (1, 1) or not self.R[0, 0] > 0:
            raise ValueError("R must be a positive 1 x 1 matrix")
        if self.B is not None and self.B.shape[0] != n:
            raise ValueError("B must have n rows")

    @property
    def dim(self) -> int:
        return self.phi.shape[0]


@dataclass
class FilterResult:
    x_prior: np.ndarray  # (T, n)
    P_prior: np.ndarray  # (T, n, n)
    x_post: np.ndarray
    P_post: np.ndarray
    measured: np.ndarray  # (T,) bool

    def __len__(self) -> int:
        return len(self.measured)


@dataclass
class SmoothedSeries:
    start: int
    mean: np.ndarray
    variance: np.ndarray
    # Full smoothed state, kept for diagnostics and oracle checks.
    state_mean: np.ndarray | None = None
    state_cov: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.mean)

    def as_gridded(self) -> GriddedSeries:
        return GriddedSeries(self.start, self.mean.copy())


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def time_update(
    model: LinearGaussianModel,
    x_post: np.ndarray,
    P_post: np.ndarray,
    u: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(over="ignore", invalid="ignore"):
        x = model.phi @ x_post
        if model.B is not None and u is not None:
            x = x + model.B @ u
        P = _sym(model.phi @ P_post @ model.phi.T + model.Q)
    if not (np.isfinite(x).all() and np.isfinite(P).all()):
        raise NumericalError("non-finite prior estimate")
    return x, P


def measure_update(
    model: LinearGaussianModel, x_prior: np.ndarray, P_prior: np.ndarray, y: float
) -> tuple[np.ndarray, np.ndarray]:
    """Standard correction ``x = x_prior + K (y - H x_prior)``."""
    if not math.isfinite(y):
        raise NumericalError(f"measurement {y!r} is not finite")
    H = model.H
    S = float((H @ P_prior @ H.T)[0, 0] + model.R[0, 0])
    if not S > 0:
        raise NumericalError(f"innovation variance {S!r} is not positive")
    K = (P_prior @ H.T) / S  # (n, 1)
    innovation = y - float((H @ x_prior)[0])
    x = x_prior + K[:, 0] * innovation
    P = _sym((np.eye(model.dim) - K @ H) @ P_prior)
    return x, P


def run_filter(
    model: LinearGaussianModel,
    g: GriddedSeries | np.ndarray,
    inputs: np.ndarray | None = None,
) -> FilterResult:
    """Forward pass over every slot.

    The prior at slot 0 is ``(x0, P0)``; ``inputs[k]`` drives the transition
    from slot ``k`` to ``k + 1``.  Missing slots get no measurement update.
    """
    ys = g.values if isinstance(g, GriddedSeries) else np.asarray(g, dtype=np.float64)
    T, n = len(ys), model.dim
    if T < 1:
        raise ValueError("series must contain at least one slot")
    x_prior = np.empty((T, n))
    P_prior = np.empty((T, n, n))
    x_post = np.empty((T, n))
    P_post = np.empty((T, n, n))
    measured = ~np.isnan(ys)

    x, P = model.x0.astype(np.float64), model.P0.astype(np.float64)
    for k in range(T):
        try:
            if k > 0:
                u = None if inputs is None else inputs[k - 1]
                x, P = time_update(model, x_post[k - 1], P_post[k - 1], u)
            x_prior[k], P_prior[k] = x, P
            if measured[k]:
                x, P = measure_update(model, x, P, float(ys[k]))
        except NumericalError as exc:
            raise NumericalError(str(exc), step=k) from None
        x_post[k], P_post[k] = x, P
    return FilterResult(x_prior, P_prior, x_post, P_post, measured)


def rts_smooth(model: LinearGaussianModel, fr: FilterResult, start: int = 0) -> SmoothedSeries:
    """Backward RTS pass; the last slot keeps its filtered posterior.

    Gain is ``C_k = P_post[k] phi^T pinv(P_prior[k+1])``.  Output mean and
    variance are the ``H`` projection of the smoothed state.
    """
    T = len(fr)
    if T < 1:
        raise ValueError("filter result is empty")
    xs = fr.x_post.copy()
    Ps = fr.P_post.copy()
    for k in range(T - 2, -1, -1):
        try:
            P_next_inv = np.linalg.pinv(fr.P_prior[k + 1], rcond=PINV_RCOND, hermitian=True)
        except np.linalg.LinAlgError:
            raise NumericalError("pseudo-inverse of prior covariance failed", step=k) from None
        C = fr.P_post[k] @ model.phi.T @ P_next_inv
        xs[k] = fr.x_post[k] + C @ (xs[k + 1] - fr.x_prior[k + 1])
        Ps[k] = _sym(fr.P_post[k] + C @ (Ps[k + 1] - fr.P_prior[k + 1]) @ C.T)
        if not (np.isfinite(xs[k]).all() and np.isfinite(Ps[k]).all()):
            raise NumericalError("non-finite smoothed estimate", step=k)
    H = model.H[0]
    mean = xs @ H
    var = np.einsum("i,kij,j->k", H, Ps, H)
    var = np.maximum(var, 0.0)
    return SmoothedSeries(start, mean, var, xs, Ps)


def default_glucose_model(
    q_scale: float = DEFAULT_Q_SCALE, r: float = DEFAULT_R, first_value: float | None = None
) -> LinearGaussianModel:
    """Constant-velocity model over (glucose, trend per slot).

    ``Q`` is the discrete white-noise-acceleration form for a 1-slot step.
    Without a first measurement the level is initialised at 120 mg/dl.
    """
    if not (q_scale > 0 and r > 0):
        raise ValueError("q_scale and r must be positive")
    dt = 1.0
    level = FALLBACK_GLUCOSE if first_value is None else float(first_value)
    return LinearGaussianModel(
        phi=np.array([[1.0, dt], [0.0, 1.0]]),
        H=np.array([[1.0, 0.0]]),
        Q=q_scale * np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt**2]]),
        R=np.array([[float(r)]]),
        x0=np.array([level, 0.0]),
        P0=np.diag([float(r), 1.0]),
    )


def smooth_cgm(g: GriddedSeries, q_scale: float = DEFAULT_Q_SCALE, r: float = DEFAULT_R) -> SmoothedSeries:
    present = g.values[~np.isnan(g.values)]
    first = float(present[0]) if len(present) else None
    model = default_glucose_model(q_scale, r, first)
    fr = run_filter(model, g)
    return rts_smooth(model, fr, start=g.start)


def innovation_loglik(model: LinearGaussianModel, fr: FilterResult, g: GriddedSeries | np.ndarray) -> float:
    """Gaussian log-likelihood of the measured slots under the filter's one-step predictions."""
    ys = g.values if isinstance(g, GriddedSeries) else np.asarray(g, dtype=np.float64)
    m = fr.measured
    H = model.H[0]
    v = ys[m] - fr.x_prior[m] @ H
    S = np.einsum("i,kij,j->k", H, fr.P_prior[m], H) + model.R[0, 0]
    return float(-0.5 * np.sum(np.log(2 * np.pi * S) + v * v / S))


def fit_q_scale(
    g: GriddedSeries, r: float = DEFAULT_R, grid: np.ndarray | None = None
) -> float:
    """Grid maximum-likelihood estimate of ``q_scale`` for the default model.

    ``grid`` defaults to 17 log-spaced values from 1e-3 to 10.  Ties keep the
    smallest value.
    """
    grid = np.logspace(-3, 1, 17) if grid is None else np.asarray(grid, dtype=np.float64)
    present = g.values[~np.isnan(g.values)]
    if len(present) < 2:
        raise ValueError("need at least two measurements to fit q_scale")
    best_q, best_ll = None, -np.inf
    for q in grid:
        model = default_glucose_model(float(q), r, float(present[0]))
        ll = innovation_loglik(model, run_filter(model, g), g)
        if ll > best_ll:
            best_q, best_ll = float(q), ll
    return best_q


def smoothed_to_csv(s: SmoothedSeries, raw: GriddedSeries) -> str:
    out = io.StringIO()
    out.write("slot_ts,mean,variance,raw_value,measured\n")
    for ts, m, v, y in zip(raw.timestamps.tolist(), s.mean.tolist(), s.variance.tolist(), raw.values.tolist()):
        missing = math.isnan(y)
        out.write(f"{ts},{m!r},{v!r},{'' if missing else repr(y)},{0 if missing else 1}\n")
    return out.getvalue()

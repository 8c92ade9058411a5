"""Continuity-constrained double logistic NDVI model and its least-squares fit.

The curve is piecewise: a rising logistic up to the transition date ``p`` and a
falling logistic after it::

    f(x) = c / (1 + exp(b1 (x - a1))) + d            x <= p
    f(x) = -c / (1 + exp(b2 (x - a2))) + d + c       x >  p

with ``b1, b2 < 0``. Both branches agree at ``p`` exactly when
``b1 (p - a1) = -b2 (p - a2)``, so ``a2`` is never a free parameter: it is
solved from ``(a1, b1, b2, p)``. The six free parameters, in solver order, are
``FREE_NAMES``.

The first derivatives of the two branches at ``p`` have opposite signs for any
admissible parameters, so smoothness at ``p`` is encouraged by a penalty
``lam * gap**2`` on the derivative jump rather than imposed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import MalformedRow, NoConvergence, TooFewPoints
from .trust_region import least_squares_trr

FREE_NAMES = ("a1", "b1", "b2", "c", "d", "p")
FITS_HEADER = ["plot_id", "year", "a1", "a2", "b1", "b2", "c", "d", "p", "r2", "mse", "n_points", "converged", "deriv_gap"]
N_FREE = len(FREE_NAMES)


@dataclass(frozen=True)
class DoubleLogisticParams:
    a1: float
    a2: float
    b1: float
    b2: float
    c: float
    d: float
    p: float

    @classmethod
    def from_free(cls, a1, b1, b2, c, d, p) -> "DoubleLogisticParams":
        """Build parameters from the six free values, solving ``a2`` from continuity."""
        a1, b1, b2, c, d, p = (float(v) for v in (a1, b1, b2, c, d, p))
        a2 = p + b1 * (p - a1) / b2
        return cls(a1=a1, a2=a2, b1=b1, b2=b2, c=c, d=d, p=p)

    @classmethod
    def from_vector(cls, theta: Sequence[float]) -> "DoubleLogisticParams":
        return cls.from_free(*theta)

    def free_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FREE_NAMES], dtype=float)

    @property
    def continuity_residual(self) -> float:
        return self.b1 * (self.p - self.a1) + self.b2 * (self.p - self.a2)

    def shifted(self, delta: float) -> "DoubleLogisticParams":
        """Translate the curve in time by ``delta`` weeks."""
        return replace(self, a1=self.a1 + delta, a2=self.a2 + delta, p=self.p + delta)

    def check(self, eps: float = 1e-9) -> list[str]:
        """Return the list of violated invariants (empty when valid)."""
        problems = []
        if not (self.b1 < 0 and self.b2 < 0):
            problems.append("b1 and b2 must be negative")
        if not self.c > 0:
            problems.append("c must be positive")
        if self.d + self.c > 1 + eps or self.d < -1:
            problems.append("baseline/amplitude outside NDVI range")
        if not (self.a1 < self.p < self.a2):
            problems.append("need a1 < p < a2")
        if abs(self.continuity_residual) > 1e-9 * max(1.0, abs(self.b1 * (self.p - self.a1))):
            problems.append("continuity constraint violated")
        return problems


def _branches(params: DoubleLogisticParams, x: np.ndarray):
    # left: c*sigmoid(u) + d, u = -b1 (x - a1)
    # right: c*sigmoid(v) + d, v = b2 (x - p) - b1 (p - a1)  (a2 eliminated)
    u = -params.b1 * (x - params.a1)
    v = params.b2 * (x - params.p) - params.b1 * (params.p - params.a1)
    return u, v


def eval_double_logistic(params: DoubleLogisticParams, x):
    """Evaluate the curve at week(s) ``x``. Saturates instead of overflowing."""
    x_arr = np.asarray(x, dtype=float)
    u, v = _branches(params, x_arr)
    left = params.c * expit(u) + params.d
    right = params.c * expit(v) + params.d
    out = np.where(x_arr <= params.p, left, right)
    return float(out) if out.ndim == 0 else out


def eval_jacobian(params: DoubleLogisticParams, x) -> np.ndarray:
    """Partial derivatives of the curve w.r.t. the free parameters.

    Returns an array of shape ``(len(x), 6)`` ordered as ``FREE_NAMES``; a
    scalar ``x`` gives a length-6 vector.
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    a1, b1, b2, c, p = params.a1, params.b1, params.b2, params.c, params.p
    u, v = _branches(params, x_arr)
    left = x_arr <= p
    z = np.where(left, u, v)
    s = expit(z)
    ds = s * (1.0 - s)

    J = np.empty((x_arr.size, N_FREE))
    # dz/d(free) for each branch
    dz_a1 = np.full_like(x_arr, b1)
    dz_b1 = np.where(left, -(x_arr - a1), -(p - a1))
    dz_b2 = np.where(left, 0.0, x_arr - p)
    dz_p = np.where(left, 0.0, -b2 - b1)
    J[:, 0] = c * ds * dz_a1
    J[:, 1] = c * ds * dz_b1
    J[:, 2] = c * ds * dz_b2
    J[:, 3] = s
    J[:, 4] = 1.0
    J[:, 5] = c * ds * dz_p
    return J[0] if np.ndim(x) == 0 else J


def derivative_gap(params: DoubleLogisticParams) -> float:
    """Right-branch minus left-branch slope at ``p`` (NDVI/week)."""
    w = -params.b1 * (params.p - params.a1)
    s = expit(w)
    return float(params.c * s * (1.0 - s) * (params.b1 + params.b2))


def derivative_gap_gradient(params: DoubleLogisticParams) -> np.ndarray:
    a1, b1, b2, c, p = params.a1, params.b1, params.b2, params.c, params.p
    w = -b1 * (p - a1)
    s = expit(w)
    ds = s * (1.0 - s)
    d2s = ds * (1.0 - 2.0 * s)
    bsum = b1 + b2
    return np.array(
        [
            c * d2s * b1 * bsum,
            c * (d2s * -(p - a1) * bsum + ds),
            c * ds,
            ds * bsum,
            0.0,
            c * d2s * -b1 * bsum,
        ]
    )


@dataclass(frozen=True)
class FitOptions:
    lam: float = 10.0
    lower: tuple = (0.0, -10.0, -10.0, 0.01, -1.0, 0.0)
    upper: tuple = (52.0, -0.01, -0.01, 2.0, 1.0, 52.0)
    restarts: int = 4
    gtol: float = 1e-8
    xtol: float = 1e-10
    max_iter: int = 500
    c_min: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class SeasonFit:
    plot_id: str
    year: int
    params: DoubleLogisticParams
    r2: float
    mse: float
    n_points: int
    converged: bool
    derivative_gap_at_p: float
    objective: float = float("nan")  # penalized MSE
    degenerate: bool = False
    history: tuple = field(default=(), repr=False, compare=False)


def _initial_guess(x: np.ndarray, y: np.ndarray, opts: FitOptions) -> np.ndarray:
    d0 = float(np.min(y))
    c0 = float(np.max(y) - d0)
    p0 = float(x[int(np.argmax(y))])
    half = d0 + c0 / 2.0
    above = np.nonzero(y >= half)[0]
    first = int(above[0]) if above.size else 0
    a1_0 = 0.5 * (x[first - 1] + x[first]) if first > 0 else float(x[0])
    if not a1_0 < p0:
        a1_0 = p0 - 2.0
    theta = np.array([a1_0, -0.5, -0.5, c0, d0, p0])
    lb, ub = np.array(opts.lower), np.array(opts.upper)
    return np.clip(theta, lb, ub)


def _jitter(theta0: np.ndarray, rng: np.random.Generator, opts: FitOptions) -> np.ndarray:
    t = theta0.copy()
    t[0] += rng.uniform(-2.0, 2.0)
    t[1] = rng.uniform(-2.0, -0.2)
    t[2] = rng.uniform(-2.0, -0.2)
    t[3] *= rng.uniform(0.9, 1.1)
    t[4] += rng.uniform(-0.05, 0.05)
    t[5] += rng.uniform(-2.0, 2.0)
    if t[0] >= t[5]:
        t[0] = t[5] - 1.0
    return np.clip(t, np.array(opts.lower), np.array(opts.upper))


class _Objective:
    """Residuals ``[(f(x_i) - y_i)/sqrt(n), sqrt(lam) * gap]`` and their Jacobian."""

    def __init__(self, x, y, lam):
        self.x = x
        self.y = y
        self.n = x.size
        self.w = 1.0 / math.sqrt(self.n)
        self.sl = math.sqrt(lam)

    def residuals(self, theta):
        if not theta[0] < theta[5]:
            return np.full(self.n + 1, np.inf)
        params = DoubleLogisticParams.from_vector(theta)
        r = np.empty(self.n + 1)
        r[:-1] = (eval_double_logistic(params, self.x) - self.y) * self.w
        r[-1] = self.sl * derivative_gap(params)
        return r

    def jacobian(self, theta):
        params = DoubleLogisticParams.from_vector(theta)
        J = np.empty((self.n + 1, N_FREE))
        J[:-1] = eval_jacobian(params, self.x) * self.w
        J[-1] = self.sl * derivative_gap_gradient(params)
        return J


def r_squared(y: np.ndarray, yhat: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


def fit_season(samples, options: FitOptions | None = None, plot_id=None, year=None) -> SeasonFit:
    """Fit the double logistic to one plot-year of NDVI samples.

    ``samples`` is either a sequence of ``NdviSample`` or an ``(n, 2)`` array
    of ``(week, ndvi)`` pairs. The best of the deterministic initial guess and
    ``options.restarts`` jittered restarts (lowest penalized MSE among
    converged runs) is returned.

    Raises:
        TooFewPoints: fewer than 7 samples or a span under 10 weeks.
        NoConvergence: no restart converged; the best attempt is attached as
            ``err.fit``.
    """
    opts = options or FitOptions()
    if len(samples) and hasattr(samples[0], "ndvi"):
        plot_id = samples[0].plot_id if plot_id is None else plot_id
        year = samples[0].year if year is None else year
        xy = np.array([(s.week, s.ndvi) for s in samples], dtype=float)
    else:
        xy = np.asarray(samples, dtype=float).reshape(-1, 2)
    if xy.shape[0] < N_FREE + 1:
        raise TooFewPoints(f"need at least {N_FREE + 1} samples, got {xy.shape[0]}")
    # sorting makes the result independent of the input order
    xy = xy[np.lexsort((xy[:, 1], xy[:, 0]))]
    x, y = xy[:, 0], xy[:, 1]
    if x[-1] - x[0] < 10.0:
        raise TooFewPoints(f"samples span {x[-1] - x[0]:.2f} weeks, need at least 10")

    obj = _Objective(x, y, opts.lam)
    rng = np.random.default_rng(opts.seed)
    theta0 = _initial_guess(x, y, opts)
    starts = [theta0] + [_jitter(theta0, rng, opts) for _ in range(opts.restarts)]

    best = None
    best_any = None
    for start in starts:
        res = least_squares_trr(
            obj.residuals,
            obj.jacobian,
            start,
            opts.lower,
            opts.upper,
            gtol=opts.gtol,
            xtol=opts.xtol,
            max_iter=opts.max_iter,
        )
        if not np.isfinite(res.cost):
            continue
        if best_any is None or res.cost < best_any.cost:
            best_any = res
        if res.converged and (best is None or res.cost < best.cost):
            best = res

    chosen = best if best is not None else best_any
    if chosen is None:
        raise NoConvergence("no restart produced a finite objective")
    fit = _make_fit(chosen, x, y, opts, plot_id, year)
    if best is None:
        err = NoConvergence(f"no restart converged within {opts.max_iter} iterations")
        err.fit = fit
        raise err
    return fit


def _make_fit(res, x, y, opts, plot_id, year) -> SeasonFit:
    params = DoubleLogisticParams.from_vector(res.x)
    yhat = eval_double_logistic(params, x)
    mse = float(np.mean((y - yhat) ** 2))
    r2 = r_squared(y, yhat)
    degenerate = params.c < opts.c_min or float(np.ptp(y)) == 0.0
    return SeasonFit(
        plot_id=plot_id,
        year=year,
        params=params,
        r2=r2,
        mse=mse,
        n_points=int(x.size),
        converged=bool(res.converged),
        derivative_gap_at_p=derivative_gap(params),
        objective=float(res.cost),
        degenerate=bool(degenerate),
        history=tuple(res.history),
    )


def write_fits(path, fits) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FITS_HEADER)
        for f in fits:
            p = f.params
            w.writerow(
                [f.plot_id, f.year]
                + [repr(float(v)) for v in (p.a1, p.a2, p.b1, p.b2, p.c, p.d, p.p, f.r2, f.mse)]
                + [f.n_points, int(f.converged), repr(float(f.derivative_gap_at_p))]
            )


def read_fits(path, c_min: float = 0.05) -> list[SeasonFit]:
    """Parse ``fits.csv`` back into ``SeasonFit`` records."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != FITS_HEADER:
            raise MalformedRow(1, f"expected header {','.join(FITS_HEADER)} in {path}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                a1, a2, b1, b2, c, d, p, r2, mse = (float(v) for v in row[2:11])
                params = DoubleLogisticParams(a1=a1, a2=a2, b1=b1, b2=b2, c=c, d=d, p=p)
                out.append(
                    SeasonFit(
                        plot_id=row[0],
                        year=int(row[1]),
                        params=params,
                        r2=r2,
                        mse=mse,
                        n_points=int(row[11]),
                        converged=row[12] == "1",
                        derivative_gap_at_p=float(row[13]),
                        degenerate=c < c_min,
                    )
                )
            except (ValueError, IndexError) as exc:
                raise MalformedRow(line, str(exc)) from None
    return out

"""Bound-constrained nonlinear least squares by a trust-region reflective method.

Minimizes ``F(x) = ||r(x)||^2`` subject to ``lb <= x <= ub``. Every step is
computed in the Coleman-Li scaled space (distance-to-bound scaling), solved
with a dogleg inside the trust region, and mapped back into the strict
interior of the box either by reflection off the first bound hit or by
truncation, whichever the local quadratic model prefers.

The residual function may return a vector containing non-finite values to
signal an infeasible point (used for constraints that are not simple boxes);
such trial points are rejected and the radius shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ResidualFn = Callable[[np.ndarray], np.ndarray]
JacobianFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class TRResult:
    x: np.ndarray
    cost: float  # ||r||^2
    residual: np.ndarray
    converged: bool
    status: str  # "gtol", "xtol", "maxiter", "breakdown", "infeasible-start"
    n_iter: int
    history: list[float] = field(default_factory=list)  # cost of x0 and every accepted iterate
    iterates: list[np.ndarray] = field(default_factory=list)


def _cl_scaling(x, g, lb, ub):
    """Coleman-Li scaling vector: distance to the bound the negative gradient points to."""
    v = np.ones_like(x)
    dv = np.zeros_like(x)
    mask = (g < 0) & np.isfinite(ub)
    v[mask] = ub[mask] - x[mask]
    dv[mask] = -1.0
    mask = (g > 0) & np.isfinite(lb)
    v[mask] = x[mask] - lb[mask]
    dv[mask] = 1.0
    return v, dv


def _dogleg(J, r, g, radius):
    """Dogleg step for min ||r + J s|| with ||s|| <= radius. Returns (step, hits_boundary)."""
    s_gn = np.linalg.lstsq(J, -r, rcond=None)[0]
    n_gn = np.linalg.norm(s_gn)
    if n_gn <= radius:
        return s_gn, False
    Jg = J @ g
    gg = g @ g
    jgjg = Jg @ Jg
    if gg == 0.0:
        return s_gn * (radius / n_gn), True
    s_c = -(gg / jgjg) * g if jgjg > 0 else -g * (radius / np.sqrt(gg))
    n_c = np.linalg.norm(s_c)
    if n_c >= radius:
        return -g * (radius / np.sqrt(gg)), True
    # ||s_c + t (s_gn - s_c)|| = radius, t in [0, 1]
    d = s_gn - s_c
    a = d @ d
    b = 2.0 * (s_c @ d)
    c = s_c @ s_c - radius**2
    t = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    return s_c + t * d, True


def _step_to_bound(x, s, lb, ub):
    """Largest t with lb <= x + t s <= ub, and a mask of the components that hit first."""
    with np.errstate(divide="ignore", invalid="ignore"):
        steps = np.where(s > 0, (ub - x) / s, np.where(s < 0, (lb - x) / s, np.inf))
    t = np.min(steps)
    return t, steps == t


def _model(J, r, s, d=None, diag_h=None):
    """Quadratic model ``||r + J s||^2`` plus the Coleman-Li term ``s_h' diag_h s_h``."""
    m = r + J @ s
    out = m @ m
    if diag_h is not None:
        s_h = np.divide(s, d, out=np.zeros_like(s), where=d > 0)
        out += s_h @ (diag_h * s_h)
    return out


def _line_min(J, r, s0, direction, t_max, d, diag_h):
    """Minimize the quadratic model along ``s0 + t * direction`` for t in [0, t_max]."""
    if t_max <= 0:
        return s0
    Jd = J @ direction
    dh = np.divide(direction, d, out=np.zeros_like(direction), where=d > 0)
    s0h = np.divide(s0, d, out=np.zeros_like(s0), where=d > 0)
    a = Jd @ Jd + dh @ (diag_h * dh)
    b = 2.0 * ((r + J @ s0) @ Jd + s0h @ (diag_h * dh))
    t = t_max if a <= 0 else min(t_max, max(0.0, -b / (2.0 * a)))
    return s0 + t * direction


def _select_step(x, J, r, g, s, lb, ub, theta, d, diag_h, radius):
    """Map a trial step into the strict interior of the box.

    Candidates are the truncated step, the best point along the step
    reflected off the first bound it hits, and the best point along the
    scaled anti-gradient; the one with the lowest model value wins.
    """
    if np.all(x + s < ub) and np.all(x + s > lb):
        return s
    t_hit, hits = _step_to_bound(x, s, lb, ub)
    if t_hit >= 1.0:
        # only components already pinned to a bound with a zero step fail the test
        return s
    to_bound = t_hit * s
    candidates = [theta * to_bound]

    # reflected: from the boundary point, flip the components that hit
    r_dir = s.copy()
    r_dir[hits] *= -1.0
    x_b = x + to_bound
    t_r, _ = _step_to_bound(x_b, r_dir, lb, ub)
    # stay inside the trust region in scaled space
    s_h_b = np.divide(to_bound, d, out=np.zeros_like(s), where=d > 0)
    r_h = np.divide(r_dir, d, out=np.zeros_like(s), where=d > 0)
    a, b, c = r_h @ r_h, 2.0 * (s_h_b @ r_h), s_h_b @ s_h_b - radius**2
    if a > 0 and b * b - 4 * a * c >= 0:
        t_tr = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
        refl = _line_min(J, r, to_bound, r_dir, theta * min(t_r, t_tr), d, diag_h)
        if np.all(x + refl > lb) and np.all(x + refl < ub):
            candidates.append(refl)

    # scaled anti-gradient (Cauchy) step
    ag = -(d * d) * g
    ag_h_norm = np.linalg.norm(d * g)
    if ag_h_norm > 0:
        t_b, _ = _step_to_bound(x, ag, lb, ub)
        cauchy = _line_min(J, r, np.zeros_like(s), ag, min(theta * t_b, radius / ag_h_norm), d, diag_h)
        candidates.append(cauchy)
    return min(candidates, key=lambda c: _model(J, r, c, d, diag_h))


def least_squares_trr(
    fun: ResidualFn,
    jac: JacobianFn,
    x0,
    lb,
    ub,
    gtol: float = 1e-8,
    xtol: float = 1e-10,
    max_iter: int = 500,
    record_iterates: bool = False,
) -> TRResult:
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lb, ub)
    # strictly interior start
    span = np.where(np.isfinite(lb) & np.isfinite(ub), ub - lb, 1.0)
    x = np.where(np.isfinite(lb) & (x <= lb), lb + 1e-10 * np.maximum(span, 1.0), x)
    x = np.where(np.isfinite(ub) & (x >= ub), ub - 1e-10 * np.maximum(span, 1.0), x)

    r = fun(x)
    if not np.all(np.isfinite(r)):
        return TRResult(x, np.inf, r, False, "infeasible-start", 0)
    cost = float(r @ r)
    history = [cost]
    iterates = [x.copy()] if record_iterates else []

    J = jac(x)
    g = J.T @ r
    v, _ = _cl_scaling(x, g, lb, ub)
    radius = float(np.linalg.norm(x / np.sqrt(v)))
    if radius == 0.0:
        radius = 1.0

    status = "maxiter"
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        v, dv = _cl_scaling(x, g, lb, ub)
        if np.max(np.abs(v * g)) < gtol:
            status = "gtol"
            break
        d = np.sqrt(v)
        # g * dv >= 0; it damps motion towards a nearby bound
        diag_h = g * dv
        J_h = np.vstack([J * d, np.diag(np.sqrt(diag_h))])
        r_h = np.concatenate([r, np.zeros_like(x)])
        g_h = d * g
        theta = max(0.995, 1.0 - np.max(np.abs(v * g)))

        accepted = False
        while not accepted:
            s_h, _ = _dogleg(J_h, r_h, g_h, radius)
            if not np.all(np.isfinite(s_h)):
                status = "breakdown"
                break
            s = _select_step(x, J, r, g, d * s_h, lb, ub, theta, d, diag_h, radius)
            # a component sitting exactly on its bound has d = 0 and no scaled extent
            s_h_eff = np.divide(s, d, out=np.zeros_like(s), where=d > 0)
            step_norm = np.linalg.norm(s)
            if step_norm < xtol * (xtol + np.linalg.norm(x)):
                status = "xtol"
                break
            predicted = cost - _model(J, r, s, d, diag_h)
            x_new = x + s
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            actual = cost - cost_new
            ratio = actual / predicted if predicted > 0 else -1.0
            eff_norm = np.linalg.norm(s_h_eff)
            if ratio < 0.25:
                radius = 0.25 * min(eff_norm, radius)
            elif ratio > 0.75 and eff_norm >= 0.95 * radius:
                radius = 2.0 * radius
            if actual > 0 and np.isfinite(cost_new):
                accepted = True
                x, r, cost = x_new, r_new, cost_new
                history.append(cost)
                if record_iterates:
                    iterates.append(x.copy())
                J = jac(x)
                g = J.T @ r
                if step_norm < xtol * (xtol + np.linalg.norm(x)):
                    status = "xtol"
        if status in ("xtol", "breakdown"):
            break

    return TRResult(
        x=x,
        cost=cost,
        residual=r,
        converged=status in ("gtol", "xtol"),
        status=status,
        n_iter=n_iter,
        history=history,
        iterates=iterates,
    )

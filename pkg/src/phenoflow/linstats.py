"""Simple linear regression with t-test inference, Pearson correlation, unit conversions."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .errors import ConstantPredictor, ConstantSeries, LengthMismatch, MalformedRow, ZeroSlope

LINREG_HEADER = ["target", "slope", "slope_se", "intercept", "intercept_se", "r2", "p_slope", "p_intercept", "n"]


@dataclass(frozen=True)
class LinRegResult:
    slope: float
    slope_se: float
    intercept: float
    intercept_se: float
    r2: float
    p_slope: float
    p_intercept: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom.

    Uses ``P = I_{df/(df+t^2)}(df/2, 1/2)`` with the regularized incomplete beta.
    """
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    return float(betainc(0.5 * df, 0.5, df / (df + t * t)))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - half if t >= 0 else half


def _p_value(coef: float, se: float, df: int) -> float:
    if se == 0.0:
        return 0.0 if coef != 0.0 else 1.0
    return t_sf_two_sided(coef / se, df)


def ols_fit(x: Sequence[float], y: Sequence[float]) -> LinRegResult:
    """Least-squares line ``y = intercept + slope * x`` with two-sided t-tests.

    Standard errors use the residual variance with ``n - 2`` degrees of
    freedom. A constant response yields ``r2 = 0``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"x has {x.size} values, y has {y.size}")
    n = x.size
    if n < 3:
        raise LengthMismatch(f"need at least 3 points, got {n}")
    xm, ym = x.mean(), y.mean()
    dx, dy = x - xm, y - ym
    sxx = float(dx @ dx)
    if sxx == 0.0 or np.all(x == x[0]):
        raise ConstantPredictor("predictor is constant")
    slope = float(dx @ dy) / sxx
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    sse = float(resid @ resid)
    sst = float(dy @ dy)
    df = n - 2
    s2 = sse / df
    slope_se = math.sqrt(s2 / sxx)
    intercept_se = math.sqrt(s2 * (1.0 / n + xm * xm / sxx))
    r2 = 0.0 if sst == 0.0 else min(1.0, max(0.0, 1.0 - sse / sst))
    return LinRegResult(
        slope=slope,
        slope_se=slope_se,
        intercept=intercept,
        intercept_se=intercept_se,
        r2=r2,
        p_slope=_p_value(slope, slope_se, df),
        p_intercept=_p_value(intercept, intercept_se, df),
        n=n,
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise LengthMismatch(f"x has {x.size} values, y has {y.size}")
    if x.size < 2:
        raise LengthMismatch("need at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantSeries("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def weeks_per_degC_to_days(slope: float) -> tuple[float, float]:
    """Convert a slope in weeks/degC to ``(days per degC, degC per week shift)``."""
    if slope == 0.0:
        raise ZeroSlope("a zero slope has no degrees-per-week equivalent")
    return 7.0 * slope, 1.0 / abs(slope)


def write_linreg(path, results: dict[str, LinRegResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LINREG_HEADER)
        for target, r in results.items():
            w.writerow(
                [target]
                + [repr(float(v)) for v in (r.slope, r.slope_se, r.intercept, r.intercept_se, r.r2, r.p_slope, r.p_intercept)]
                + [r.n]
            )


def read_linreg(path) -> dict[str, LinRegResult]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != LINREG_HEADER:
            raise MalformedRow(1, f"expected header {','.join(LINREG_HEADER)} in {path}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row[1:8]]
                out[row[0]] = LinRegResult(*vals, n=int(row[8]))
            except (ValueError, IndexError) as exc:
                raise MalformedRow(line, str(exc)) from None
    return out

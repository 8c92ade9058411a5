"""Season landmarks from fitted curves: start (SOS), peak date (POS), peak value."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateFit, MalformedRow
from .seasonfit import DoubleLogisticParams, SeasonFit, eval_double_logistic

QC_R2_THRESHOLD = 0.80
SOS_GRID_STEP = 0.01
SOS_TOL = 1e-4
C_MIN = 0.05

PHENOLOGY_HEADER = ["plot_id", "year", "sos", "pos", "peak", "qc_pass"]
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PhenologyMetrics:
    plot_id: str
    year: int
    sos: float
    pos: float
    peak: float
    qc_pass: bool


def spring_curvature(params: DoubleLogisticParams, x):
    """Second derivative of the rising branch ``c / (1 + exp(b1 (x - a1))) + d``."""
    # with s = 1 / (1 + e), e = exp(b1 (x - a1)):  c b1^2 s (1 - s) (1 - 2 s)
    s = expit(-params.b1 * (np.asarray(x, dtype=float) - params.a1))
    return params.c * params.b1**2 * s * (1.0 - s) * (1.0 - 2.0 * s)


def _golden_max(f, lo, hi, tol):
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
    return 0.5 * (a + b)


def _params(fit) -> DoubleLogisticParams:
    return fit.params if isinstance(fit, SeasonFit) else fit


def estimate_sos(fit, c_min: float = C_MIN) -> float:
    """Week of maximal curvature of the spring branch, searched on ``[0, p]``.

    A 0.01-week grid locates the maximum, golden-section search refines it to
    1e-4 week. Accepts a ``SeasonFit`` or bare ``DoubleLogisticParams``.
    """
    params = _params(fit)
    if params.c < c_min:
        raise DegenerateFit(f"spring amplitude {params.c:.4g} below {c_min}")
    hi = params.p
    grid = np.arange(0.0, hi + SOS_GRID_STEP / 2, SOS_GRID_STEP)
    if grid.size < 2:
        return float(hi)
    k = int(np.argmax(spring_curvature(params, grid)))
    lo_b = grid[max(k - 1, 0)]
    hi_b = min(grid[min(k + 1, grid.size - 1)], hi)
    return float(_golden_max(lambda t: float(spring_curvature(params, t)), lo_b, hi_b, SOS_TOL))


def estimate_pos(fit) -> float:
    return float(_params(fit).p)


def estimate_peak(fit) -> float:
    params = _params(fit)
    return float(eval_double_logistic(params, params.p))


def passes_qc(fit: SeasonFit, threshold: float = QC_R2_THRESHOLD) -> bool:
    return bool(fit.converged and fit.r2 >= threshold)


def apply_qc(fits: Sequence[SeasonFit], threshold: float = QC_R2_THRESHOLD):
    """Split fits into (kept, excluded, exclusion_rate); r2 strictly below threshold is excluded."""
    kept = [f for f in fits if passes_qc(f, threshold)]
    excluded = [f for f in fits if not passes_qc(f, threshold)]
    rate = len(excluded) / len(fits) if fits else 0.0
    return kept, excluded, rate


def extract_metrics(fit: SeasonFit, threshold: float = QC_R2_THRESHOLD) -> PhenologyMetrics:
    """Landmarks for one fit. Failing or degenerate fits get NaN landmarks and qc_pass False."""
    ok = passes_qc(fit, threshold) and not fit.degenerate and fit.params.c >= C_MIN
    if not ok:
        return PhenologyMetrics(fit.plot_id, fit.year, math.nan, math.nan, math.nan, False)
    return PhenologyMetrics(
        fit.plot_id,
        fit.year,
        estimate_sos(fit),
        estimate_pos(fit),
        estimate_peak(fit),
        True,
    )


def write_phenology(path, rows: Iterable[PhenologyMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PHENOLOGY_HEADER)
        for m in rows:
            w.writerow([m.plot_id, m.year, repr(m.sos), repr(m.pos), repr(m.peak), int(m.qc_pass)])


def read_phenology(path) -> list[PhenologyMetrics]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PHENOLOGY_HEADER:
            raise MalformedRow(1, f"expected header {','.join(PHENOLOGY_HEADER)} in {path}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(
                    PhenologyMetrics(row[0], int(row[1]), float(row[2]), float(row[3]), float(row[4]), row[5] == "1")
                )
            except (ValueError, IndexError) as exc:
                raise MalformedRow(line, str(exc)) from None
    return out

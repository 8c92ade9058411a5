"""Kernel SHAP attributions and their per-variable aggregation.

Masked features are imputed marginally: the value of a coalition is the mean
model output over background rows with the coalition's features replaced by
the explained instance. Attributions solve the Shapley-kernel weighted least
squares problem with the efficiency constraint ``sum(phi) = f(x) - base``
substituted in, so additivity holds to rounding error.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateSystem, InvalidCoalitionSize, LengthMismatch
from .linstats import pearson
from .neural import FEATURE_GROUPS, N_FEATURES

DEFAULT_BUDGET = 2048
DEFAULT_BACKGROUND_CAP = 100
VARIABLES = ("air_temp", "precipitation", "irradiance", "soil")


@dataclass(frozen=True)
class ShapExplanation:
    plot_id: str | None
    year: int | None
    base_value: float
    phi: np.ndarray = field(repr=False)
    prediction: float
    exact: bool = True
    n_coalitions: int = 0

    @property
    def reconstructed(self) -> float:
        return float(self.base_value + math.fsum(self.phi))


def shapley_kernel_weight(M: int, s: int) -> float:
    """Kernel weight ``(M-1) / (C(M, s) s (M-s))`` of a coalition of size ``s``."""
    if M < 2:
        raise InvalidCoalitionSize(f"need at least 2 features, got M={M}")
    if not 1 <= s <= M - 1:
        raise InvalidCoalitionSize(f"size {s} is an exact constraint, not a weighted coalition (M={M})")
    return (M - 1) / (math.comb(M, s) * s * (M - s))


def _all_coalitions(M: int) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    weights = []
    for s in range(1, M):
        w = shapley_kernel_weight(M, s)
        for combo in itertools.combinations(range(M), s):
            z = np.zeros(M, dtype=bool)
            z[list(combo)] = True
            rows.append(z)
            weights.append(w)
    return np.array(rows), np.array(weights)


def _sampled_coalitions(M: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Paired samples: each drawn coalition is followed by its complement.

    Sizes are drawn proportionally to the total kernel weight of each size and
    members uniformly within a size, so the regression weights are uniform.
    """
    sizes = np.arange(1, M)
    p = (M - 1) / (sizes * (M - sizes))
    p = p / p.sum()
    n_pairs = max(1, n // 2)
    drawn = rng.choice(sizes, size=n_pairs, p=p)
    Z = np.zeros((2 * n_pairs, M), dtype=bool)
    for i, s in enumerate(drawn):
        members = rng.choice(M, size=s, replace=False)
        Z[2 * i, members] = True
        Z[2 * i + 1] = ~Z[2 * i]
    return Z, np.ones(2 * n_pairs)


def coalition_values(model: Callable, x: np.ndarray, background: np.ndarray, Z: np.ndarray, chunk_rows: int = 200_000):
    """Mean model output over background rows for each coalition mask in ``Z``."""
    B, M = background.shape
    per_chunk = max(1, chunk_rows // B)
    out = np.empty(Z.shape[0])
    for start in range(0, Z.shape[0], per_chunk):
        z = Z[start : start + per_chunk]
        masked = np.where(z[:, None, :], x[None, None, :], background[None, :, :])
        preds = np.asarray(model(masked.reshape(-1, M)), dtype=float).reshape(z.shape[0], B)
        out[start : start + z.shape[0]] = preds.mean(axis=1)
    return out


def _solve_constrained(Z: np.ndarray, w: np.ndarray, v: np.ndarray, base: float, delta: float) -> np.ndarray:
    M = Z.shape[1]
    Zf = Z.astype(float)
    # phi_M = delta - sum_{j<M} phi_j
    A = Zf[:, :-1] - Zf[:, -1:]
    b = (v - base) - Zf[:, -1] * delta
    sw = np.sqrt(w)
    A_w = A * sw[:, None]
    b_w = b * sw
    if np.linalg.matrix_rank(A_w) < M - 1:
        raise DegenerateSystem("coalition design matrix is rank deficient")
    head = np.linalg.lstsq(A_w, b_w, rcond=None)[0]
    return np.append(head, delta - head.sum())


def kernel_shap(
    model: Callable,
    x,
    background,
    n_coalitions: int = DEFAULT_BUDGET,
    seed: int = 0,
    mode: str = "auto",
    plot_id: str | None = None,
    year: int | None = None,
) -> ShapExplanation:
    """Explain ``model(x)`` relative to the mean output over ``background``.

    ``mode`` is ``"auto"`` (enumerate all ``2^M - 2`` coalitions when that fits
    the budget, otherwise sample), ``"exact"`` or ``"sampling"``. A
    rank-deficient sampled design is retried once with double the budget.
    """
    if hasattr(x, "values") and hasattr(x, "plot_id"):
        plot_id = x.plot_id if plot_id is None else plot_id
        year = x.year if year is None else year
        x = x.values
    x = np.asarray(x, dtype=float)
    bg = _as_matrix(background)
    if bg.shape[0] == 0:
        raise ValueError("background set is empty")
    M = x.size
    if bg.shape[1] != M:
        raise LengthMismatch(f"background has {bg.shape[1]} features, instance has {M}")

    fx = float(np.asarray(model(x[None, :]), dtype=float)[0])
    base = float(np.mean(model(bg)))
    delta = fx - base

    exact = mode == "exact" or (mode == "auto" and 2**M - 2 <= n_coalitions)
    if exact:
        Z, w = _all_coalitions(M)
        v = coalition_values(model, x, bg, Z)
        phi = _solve_constrained(Z, w, v, base, delta)
        return ShapExplanation(plot_id, year, base, phi, fx, True, Z.shape[0])

    if n_coalitions < 2 * M:
        raise ValueError(f"sampling needs at least 2*M = {2 * M} coalitions, got {n_coalitions}")
    rng = np.random.default_rng(seed)
    budget = n_coalitions
    for attempt in range(2):
        Z, w = _sampled_coalitions(M, budget, rng)
        v = coalition_values(model, x, bg, Z)
        try:
            phi = _solve_constrained(Z, w, v, base, delta)
            return ShapExplanation(plot_id, year, base, phi, fx, False, Z.shape[0])
        except DegenerateSystem:
            if attempt == 1:
                raise
            budget *= 2
    raise AssertionError("unreachable")


def _as_matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        return np.atleast_2d(rows.astype(float))
    rows = list(rows)
    if rows and hasattr(rows[0], "values") and hasattr(rows[0], "plot_id"):
        return np.vstack([r.values for r in rows])
    return np.atleast_2d(np.asarray(rows, dtype=float))


def select_background(train, cap: int = DEFAULT_BACKGROUND_CAP, seed: int = 0) -> np.ndarray:
    """The training matrix, subsampled uniformly without replacement to ``cap`` rows."""
    X = _as_matrix(train)
    if X.shape[0] <= cap:
        return X
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=cap, replace=False))
    return X[idx]


def exact_shapley_permutations(model: Callable, x, background) -> np.ndarray:
    """Shapley values from the factorial definition, enumerating every subset.

    ``phi_i = sum_S |S|! (M-|S|-1)! / M! * (v(S + i) - v(S))`` with the same
    marginal value function as ``kernel_shap``. Exponential in M; for tests.
    """
    x = np.asarray(x, dtype=float)
    bg = _as_matrix(background)
    M = x.size
    Z = np.array(list(itertools.product([False, True], repeat=M)), dtype=bool)
    v = coalition_values(model, x, bg, Z)
    index = {tuple(z): k for k, z in enumerate(Z)}
    phi = np.zeros(M)
    fact = [math.factorial(k) for k in range(M + 1)]
    for k, z in enumerate(Z):
        s = int(z.sum())
        for i in range(M):
            if z[i]:
                continue
            zi = z.copy()
            zi[i] = True
            phi[i] += fact[s] * fact[M - s - 1] / fact[M] * (v[index[tuple(zi)]] - v[k])
    return phi


# ------------------------------------------------------------------ aggregation


@dataclass(frozen=True)
class AggregatedShap:
    """Per-sample sums of the weekly attributions of each variable."""

    plot_id: str | None
    year: int | None
    air_temp: float
    precipitation: float
    irradiance: float
    soil: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.air_temp, self.precipitation, self.irradiance, self.soil)


def aggregate_weekly(expl) -> AggregatedShap:
    phi = np.asarray(expl.phi if hasattr(expl, "phi") else expl, dtype=float)
    if phi.size != N_FEATURES:
        raise LengthMismatch(f"expected {N_FEATURES} attributions, got {phi.size}")
    sums = {name: math.fsum(phi[sl]) for name, sl in FEATURE_GROUPS.items()}
    return AggregatedShap(
        getattr(expl, "plot_id", None),
        getattr(expl, "year", None),
        sums["air_temp"],
        sums["precipitation"],
        sums["irradiance"],
        sums["soil"],
    )


def a_shap(rows: Sequence[AggregatedShap]) -> dict[str, float]:
    """Sum over samples of the absolute per-sample variable attribution."""
    if not rows:
        raise ValueError("need at least one sample")
    return {name: math.fsum(abs(getattr(r, name)) for r in rows) for name in VARIABLES}


def shap_soil_correlation(soil_means: Sequence[float], shap_soil: Sequence[float]) -> float:
    return pearson(soil_means, shap_soil)


# ------------------------------------------------------------------------ files

SHAP_HEADER = ["plot_id", "year", "target", "base"] + [f"phi_{i}" for i in range(1, N_FEATURES + 1)] + [
    "reconstructed",
    "prediction",
]
AGGREGATES_HEADER = ["target", "year", "category", "variable", "n", "shap_sum", "a_shap"]


def write_shap(path, target: str, explanations: Sequence[ShapExplanation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SHAP_HEADER)
        for e in explanations:
            w.writerow(
                [e.plot_id, e.year, target, repr(float(e.base_value))]
                + [repr(float(v)) for v in e.phi]
                + [repr(e.reconstructed), repr(float(e.prediction))]
            )


def read_shap(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SHAP_HEADER:
            raise ValueError(f"unexpected shap.csv header in {path}")
        for row in reader:
            out.append(
                {
                    "plot_id": row[0],
                    "year": int(row[1]),
                    "target": row[2],
                    "base": float(row[3]),
                    "phi": np.array([float(v) for v in row[4 : 4 + N_FEATURES]]),
                    "reconstructed": float(row[4 + N_FEATURES]),
                    "prediction": float(row[5 + N_FEATURES]),
                }
            )
    return out


def grouped_aggregates(target: str, rows: Sequence[AggregatedShap], category_of: dict[str, str]) -> list[list]:
    """Aggregate rows by year x category, per year, per category and overall.

    Each output row is ``[target, year, category, variable, n, shap_sum, a_shap]``
    where ``year``/``category`` is ``"all"`` when not grouped on.
    """
    groups: dict[tuple, list] = {}
    for r in rows:
        cat = category_of.get(r.plot_id, "?")
        for key in ((r.year, cat), (r.year, "all"), ("all", cat), ("all", "all")):
            groups.setdefault(key, []).append(r)

    def order(k):
        return (k[0] == "all", str(k[0]), k[1] == "all", str(k[1]))

    out = []
    for key in sorted(groups, key=order):
        members = groups[key]
        totals = a_shap(members)
        for name in VARIABLES:
            out.append(
                [target, key[0], key[1], name, len(members),
                 math.fsum(getattr(m, name) for m in members), totals[name]]
            )
    return out


def write_aggregates(path, rows: Sequence[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATES_HEADER)
        for r in rows:
            w.writerow(r[:5] + [repr(float(r[5])), repr(float(r[6]))])


def read_aggregates(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            {**row, "n": int(row["n"]), "shap_sum": float(row["shap_sum"]), "a_shap": float(row["a_shap"])}
            for row in reader
        ]

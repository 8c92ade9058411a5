"""Multilayer-perceptron regression on weekly weather and soil temperature.

Feature ordering (79 values per plot-year)::

    [air_temp week 1..26, precipitation week 1..26, irradiance week 1..26, soil annual mean]

The network is trained full-batch on z-scored features; hidden layers use
ReLU and the output is linear. The loss matches scikit-learn's
``MLPRegressor``: ``0.5 * mean((yhat - y)^2) + 0.5 * l2 * sum(W^2) / n``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .data import N_WEEKS, SoilTempSeries, WeatherWeekly
from .errors import ConfigError, MissingSoil, MissingWeek, NonFiniteLoss, TooFewSamplesInYear

N_FEATURES = 3 * N_WEEKS + 1
FEATURE_NAMES = (
    [f"air_temp_w{w:02d}" for w in range(1, N_WEEKS + 1)]
    + [f"precip_w{w:02d}" for w in range(1, N_WEEKS + 1)]
    + [f"irradiance_w{w:02d}" for w in range(1, N_WEEKS + 1)]
    + ["soil_mean"]
)
FEATURE_GROUPS = {
    "air_temp": slice(0, N_WEEKS),
    "precipitation": slice(N_WEEKS, 2 * N_WEEKS),
    "irradiance": slice(2 * N_WEEKS, 3 * N_WEEKS),
    "soil": slice(3 * N_WEEKS, 3 * N_WEEKS + 1),
}
IMPROVEMENT_TOL = 1e-6
TUNING_HEADER = ["trial", "layer1", "layer2", "l2", "solver", "lr0", "schedule", "max_iter", "patience", "cv_mse"]


@dataclass(frozen=True)
class FeatureVector:
    plot_id: str
    year: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.values) != N_FEATURES:
            raise ValueError(f"feature vector must have {N_FEATURES} entries, got {len(self.values)}")


def build_features(
    weather: Sequence[WeatherWeekly],
    soil,
    keys: Sequence[tuple] | None = None,
) -> list[FeatureVector]:
    """Assemble one 79-entry vector per plot-year.

    ``soil`` is a list of ``SoilTempSeries`` or a ``{(plot_id, year): mean}``
    mapping. ``keys`` restricts (and orders) the plot-years; by default every
    plot-year with soil data is used.
    """
    if isinstance(soil, dict):
        soil_mean = dict(soil)
    else:
        soil_mean = {(s.plot_id, s.year): s.annual_mean for s in soil}
    by_year: dict[int, dict[int, WeatherWeekly]] = {}
    for w in weather:
        by_year.setdefault(w.year, {})[w.week] = w
    if keys is None:
        keys = sorted(soil_mean)

    cache: dict[int, np.ndarray] = {}
    out = []
    for plot_id, year in keys:
        if year not in cache:
            weeks = by_year.get(year, {})
            for wk in range(1, N_WEEKS + 1):
                if wk not in weeks:
                    raise MissingWeek(year, wk)
            rows = [weeks[wk] for wk in range(1, N_WEEKS + 1)]
            cache[year] = np.array(
                [r.air_temp for r in rows] + [r.precipitation for r in rows] + [r.irradiance for r in rows]
            )
        if (plot_id, year) not in soil_mean:
            raise MissingSoil(plot_id, year)
        out.append(FeatureVector(plot_id, year, np.append(cache[year], soil_mean[(plot_id, year)])))
    return out


def stack(features: Sequence[FeatureVector]) -> np.ndarray:
    return np.vstack([f.values for f in features]) if features else np.empty((0, N_FEATURES))


# ---------------------------------------------------------------- hyperparams

SOLVERS = ("adam", "lbfgs")
SCHEDULES = ("constant", "adaptive")


@dataclass(frozen=True)
class Hyperparams:
    layer1: int = 100
    layer2: int = 0
    l2: float = 0.029
    solver: str = "adam"
    lr0: float = 0.0031
    lr_schedule: str = "constant"
    max_iter: int = 8000
    patience: int = 20

    def validate(self) -> None:
        if self.layer1 not in range(10, 101, 10):
            raise ConfigError(f"layer1={self.layer1} not in 10..100 step 10")
        if self.layer2 not in range(0, 101, 10):
            raise ConfigError(f"layer2={self.layer2} not in 0..100 step 10")
        if not 1e-4 <= self.l2 <= 1e-1:
            raise ConfigError(f"l2={self.l2} outside [1e-4, 1e-1]")
        if not 1e-4 <= self.lr0 <= 1e-1:
            raise ConfigError(f"lr0={self.lr0} outside [1e-4, 1e-1]")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.max_iter not in range(1000, 10001, 1000):
            raise ConfigError(f"max_iter={self.max_iter} not in 1000..10000 step 1000")
        if self.patience not in range(10, 101, 10):
            raise ConfigError(f"patience={self.patience} not in 10..100 step 10")

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.layer1,) if self.layer2 == 0 else (self.layer1, self.layer2)


def sample_hyperparams(rng: np.random.Generator) -> Hyperparams:
    """Draw one configuration: uniform over discrete sets, log-uniform over l2 and lr0."""
    return Hyperparams(
        layer1=int(rng.choice(np.arange(10, 101, 10))),
        layer2=int(rng.choice(np.arange(0, 101, 10))),
        l2=float(10 ** rng.uniform(-4, -1)),
        solver=str(rng.choice(SOLVERS)),
        lr0=float(10 ** rng.uniform(-4, -1)),
        lr_schedule=str(rng.choice(SCHEDULES)),
        max_iter=int(rng.choice(np.arange(1000, 10001, 1000))),
        patience=int(rng.choice(np.arange(10, 101, 10))),
    )


# ---------------------------------------------------------------------- network


def _forward(Xs, weights, biases):
    acts = [Xs]
    h = Xs
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W + b
        h = z if i == len(weights) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def loss_and_grad(Xs, y, weights, biases, l2):
    """Loss and gradients (same structure as weights/biases) for one full batch."""
    n = Xs.shape[0]
    acts = _forward(Xs, weights, biases)
    out = acts[-1][:, 0]
    err = out - y
    loss = 0.5 * float(err @ err) / n + 0.5 * l2 * sum(float(np.sum(W * W)) for W in weights) / n
    delta = (err / n)[:, None]
    gW = [None] * len(weights)
    gb = [None] * len(biases)
    for i in range(len(weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta + (l2 / n) * weights[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (acts[i] > 0)
    return loss, gW, gb


def _init_params(sizes, rng):
    """He-uniform hidden layers; the output layer starts at zero so the
    untrained network predicts its output bias exactly."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    return weights, biases


def _flatten(weights, biases):
    return np.concatenate([a.ravel() for pair in zip(weights, biases) for a in pair])


def _unflatten(theta, sizes):
    weights, biases = [], []
    k = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(theta[k : k + fan_in * fan_out].reshape(fan_in, fan_out))
        k += fan_in * fan_out
        biases.append(theta[k : k + fan_out])
        k += fan_out
    return weights, biases


@dataclass
class MlpModel:
    layer_sizes: list
    weights: list
    biases: list
    scaler_mean: np.ndarray
    scaler_sd: np.ndarray
    constant_features: list
    hp: Hyperparams
    seed: int
    final_loss: float
    n_iter: int

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xs = (X - self.scaler_mean) / self.scaler_sd
        return _forward(Xs, self.weights, self.biases)[-1][:, 0]

    __call__ = predict

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "scaler_mean": self.scaler_mean.tolist(),
            "scaler_sd": self.scaler_sd.tolist(),
            "constant_features": list(self.constant_features),
            "hp": asdict(self.hp),
            "seed": self.seed,
            "final_loss": self.final_loss,
            "n_iter": self.n_iter,
            "feature_names": FEATURE_NAMES,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MlpModel":
        return cls(
            layer_sizes=list(d["layer_sizes"]),
            weights=[np.array(W, dtype=float) for W in d["weights"]],
            biases=[np.array(b, dtype=float) for b in d["biases"]],
            scaler_mean=np.array(d["scaler_mean"], dtype=float),
            scaler_sd=np.array(d["scaler_sd"], dtype=float),
            constant_features=list(d["constant_features"]),
            hp=Hyperparams(**d["hp"]),
            seed=int(d["seed"]),
            final_loss=float(d["final_loss"]),
            n_iter=int(d["n_iter"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit_scaler(X: np.ndarray):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    constant = np.nonzero(sd == 0)[0]
    sd = np.where(sd == 0, 1.0, sd)
    return mean, sd, [int(i) for i in constant]


def _train_adam(Xs, y, weights, biases, hp, fold=None):
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    params = weights + biases
    m = [np.zeros_like(a) for a in params]
    v = [np.zeros_like(a) for a in params]
    lr = hp.lr0
    best = math.inf
    stall = 0
    loss = math.inf
    it = 0
    for it in range(1, hp.max_iter + 1):
        loss, gW, gb = loss_and_grad(Xs, y, weights, biases, hp.l2)
        if not math.isfinite(loss):
            raise NonFiniteLoss(it, fold)
        grads = gW + gb
        lr_t = lr * math.sqrt(1 - beta2**it) / (1 - beta1**it)
        for a, g, mi, vi in zip(params, grads, m, v):
            mi *= beta1
            mi += (1 - beta1) * g
            vi *= beta2
            vi += (1 - beta2) * g * g
            a -= lr_t * mi / (np.sqrt(vi) + eps)
        if loss > best - IMPROVEMENT_TOL:
            stall += 1
        else:
            stall = 0
        best = min(best, loss)
        if stall >= hp.patience:
            if hp.lr_schedule == "adaptive" and lr > 1e-6:
                lr /= 5.0
                stall = 0
            else:
                break
    final, _, _ = loss_and_grad(Xs, y, weights, biases, hp.l2)
    if not math.isfinite(final):
        raise NonFiniteLoss(it, fold)
    return final, it


def _train_lbfgs(Xs, y, weights, biases, hp, fold=None):
    sizes = [weights[0].shape[0]] + [W.shape[1] for W in weights]

    def fun(theta):
        W, b = _unflatten(theta, sizes)
        loss, gW, gb = loss_and_grad(Xs, y, W, b, hp.l2)
        if not math.isfinite(loss):
            raise NonFiniteLoss(-1, fold)
        return loss, _flatten(gW, gb)

    res = minimize(
        fun,
        _flatten(weights, biases),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": hp.max_iter, "maxfun": 15000, "gtol": 1e-8},
    )
    W, b = _unflatten(res.x, sizes)
    for dst, src in zip(weights + biases, W + b):
        dst[...] = src
    return float(res.fun), int(res.nit)


def train_mlp(X, y, hp: Hyperparams, seed: int, fold: int | None = None) -> MlpModel:
    """Train a network on raw features ``X`` (n, 79) and targets ``y``."""
    hp.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    mean, sd, constant = fit_scaler(X)
    Xs = (X - mean) / sd
    sizes = [X.shape[1], *hp.hidden, 1]
    rng = np.random.default_rng(seed)
    weights, biases = _init_params(sizes, rng)
    # start the output at the target mean so training fits the variation
    biases[-1][:] = y.mean()
    if hp.solver == "adam":
        final, n_iter = _train_adam(Xs, y, weights, biases, hp, fold)
    else:
        final, n_iter = _train_lbfgs(Xs, y, weights, biases, hp, fold)
    return MlpModel(sizes, weights, biases, mean, sd, constant, hp, seed, final, n_iter)


# ---------------------------------------------------------- splitting, CV, search


def split_train_test(samples: Sequence, ratio: float = 0.8, seed: int = 0):
    """Per-year stratified split; ``round(n_year * (1 - ratio))`` (at least 1) goes to test.

    ``samples`` only need a ``year`` attribute. Returns index-preserving
    ``(train, test)`` lists, each in input order.
    """
    rng = np.random.default_rng(seed)
    by_year: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_year.setdefault(s.year, []).append(i)
    test_idx = set()
    for year in sorted(by_year):
        idx = by_year[year]
        if len(idx) < 5:
            raise TooFewSamplesInYear(f"year {year} has {len(idx)} samples, need at least 5")
        n_test = max(1, int(math.floor(len(idx) * (1.0 - ratio) + 0.5)))
        chosen = rng.permutation(len(idx))[:n_test]
        test_idx.update(idx[j] for j in chosen)
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` once and cut it into ``k`` contiguous folds."""
    if k < 2 or n < k:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def cross_validate(X, y, hp: Hyperparams, k: int = 5, seed: int = 0) -> float:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = kfold_indices(X.shape[0], k, seed)
    scores = []
    for i, val in enumerate(folds):
        mask = np.ones(X.shape[0], dtype=bool)
        mask[val] = False
        model = train_mlp(X[mask], y[mask], hp, seed=seed + i, fold=i)
        err = model.predict(X[val]) - y[val]
        scores.append(float(np.mean(err * err)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class Trial:
    index: int
    hp: Hyperparams
    cv_mse: float


def hyperparam_search(
    X,
    y,
    budget: int,
    seed: int = 0,
    k: int = 5,
    cv_fn: Callable | None = None,
):
    """Random search over the hyperparameter space, scored by k-fold CV MSE.

    Returns ``(best_hp, best_cv_mse, trials)``. Ties keep the earliest trial.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cv_fn = cv_fn or cross_validate
    rng = np.random.default_rng(seed)
    trials = []
    best = None
    for t in range(budget):
        hp = sample_hyperparams(rng)
        score = cv_fn(X, y, hp, k=k, seed=seed)
        trials.append(Trial(t, hp, score))
        if best is None or score < best.cv_mse:
            best = trials[-1]
    return best.hp, best.cv_mse, trials


def write_tuning(path, trials: Sequence[Trial]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TUNING_HEADER)
        for t in trials:
            hp = t.hp
            w.writerow(
                [t.index, hp.layer1, hp.layer2, repr(hp.l2), hp.solver, repr(hp.lr0), hp.lr_schedule,
                 hp.max_iter, hp.patience, repr(t.cv_mse)]
            )


def read_tuning(path) -> list[Trial]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            hp = Hyperparams(int(row[1]), int(row[2]), float(row[3]), row[4], float(row[5]), row[6], int(row[7]), int(row[8]))
            out.append(Trial(int(row[0]), hp, float(row[9])))
    return out


# ------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalReport:
    cv_mse: float
    test_mse: float
    test_mae: float
    test_r2: float
    naive_mse: float
    naive_mae: float

    def as_dict(self) -> dict:
        return asdict(self)


def regression_metrics(y_true, y_pred, naive_value: float, cv_mse: float = math.nan) -> EvalReport:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    err = y_pred - y_true
    mse = float(np.mean(err * err))
    var = float(np.mean((y_true - y_true.mean()) ** 2))
    if var > 0:
        r2 = 1.0 - mse / var
    else:
        r2 = 1.0 if mse == 0.0 else 0.0
    naive_err = naive_value - y_true
    return EvalReport(
        cv_mse=cv_mse,
        test_mse=mse,
        test_mae=float(np.mean(np.abs(err))),
        test_r2=r2,
        naive_mse=float(np.mean(naive_err * naive_err)),
        naive_mae=float(np.mean(np.abs(naive_err))),
    )


def evaluate(model, X_test, y_test, train_mean: float, cv_mse: float = math.nan) -> EvalReport:
    """Test-set MSE/MAE/r2 of ``model`` next to the training-mean predictor."""
    if len(y_test) == 0:
        raise ValueError("test set is empty")
    return regression_metrics(y_test, model.predict(X_test), train_mean, cv_mse)

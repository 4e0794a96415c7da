"""Linear probes on frozen representations.

Classification pools over time and fits an L2-penalized multinomial logistic
regression; forecasting takes the last-timestep vector and fits closed-form
ridge regression.  Both pick their penalty by k-fold cross-validation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize

from .ndgrad import ContractError, Tensor

logger = logging.getLogger(__name__)

LOGISTIC_GRID = tuple(10.0 ** e for e in range(-3, 4))
RIDGE_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0)


class NumericError(ArithmeticError):
    """A closed-form solve failed."""


@dataclass
class ProbeFeatures:
    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContractError(f"features must be [N >= 1, W], got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class CVGrid:
    values: Sequence[float]
    folds: int = 5
    scoring: str = "accuracy"

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("grid must not be empty")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.scoring not in ("accuracy", "mse"):
            raise ValueError(f"unknown scoring {self.scoring!r}")


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _features(x) -> np.ndarray:
    return x.features if isinstance(x, ProbeFeatures) else np.asarray(x, dtype=np.float64)


# --- pooling ----------------------------------------------------------------

def max_pool_time(hidden, valid: Optional[np.ndarray] = None) -> ProbeFeatures:
    """Elementwise max over the valid timesteps of ``hidden`` ``[B, T, W]``."""
    h = _array(hidden)
    if valid is None:
        return ProbeFeatures(h.max(axis=1), "max_pool_time")
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=1).all():
        raise ContractError("every series needs at least one valid timestep")
    masked = np.where(valid[:, :, None], h, -np.inf)
    return ProbeFeatures(masked.max(axis=1), "max_pool_time")


def last_step_feature(hidden, lengths: Optional[Sequence[int]] = None) -> ProbeFeatures:
    """Row ``length - 1`` of each series in ``hidden`` ``[B, T, W]``."""
    h = _array(hidden)
    B, T, _ = h.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > T):
        raise ContractError("lengths must lie in [1, T]")
    return ProbeFeatures(h[np.arange(B), lengths - 1], "last_step_feature")


# --- folds -------------------------------------------------------------------

def stratified_folds(labels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample; each class is spread round-robin over shuffled folds."""
    folds = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def contiguous_folds(n: int, k: int) -> np.ndarray:
    return np.minimum(np.arange(n) * k // n, k - 1)


# --- logistic regression ---------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit_softmax(X: np.ndarray, y: np.ndarray, num_classes: int, C: float, tol: float) -> Tuple[np.ndarray, np.ndarray]:
    """Minimize mean cross-entropy + ||W||^2 / (2 C N); the intercept is unpenalized."""
    N, D = X.shape
    Y = np.eye(num_classes)[y]
    lam = 1.0 / (C * N)

    def fg(theta):
        Wm = theta[: D * num_classes].reshape(D, num_classes)
        b = theta[D * num_classes:]
        Z = X @ Wm + b
        Z = Z - Z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(Z).sum(axis=1))
        loss = (logsum - (Z * Y).sum(axis=1)).mean() + 0.5 * lam * (Wm * Wm).sum()
        P = np.exp(Z - logsum[:, None])
        G = (P - Y) / N
        gW = X.T @ G + lam * Wm
        gb = G.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    theta0 = np.zeros(D * num_classes + num_classes)
    res = optimize.minimize(fg, theta0, jac=True, method="L-BFGS-B",
                            options={"gtol": tol, "ftol": 0.0, "maxiter": 20000, "maxcor": 20})
    if not res.success and np.abs(res.jac).max() > 10 * tol:
        logger.warning("logistic fit stopped early (C=%g): %s", C, res.message)
    theta = res.x
    return theta[: D * num_classes].reshape(D, num_classes), theta[D * num_classes:]


@dataclass
class LogisticProbe:
    """Standardize-then-softmax classifier produced by :func:`fit_logistic`."""

    weights: np.ndarray
    intercept: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    C: float
    cv_scores: Dict[float, float] = field(default_factory=dict)
    degenerate: bool = False
    constant_class: int = 0

    def decision_function(self, features) -> np.ndarray:
        X = (_features(features) - self.mean) / self.scale
        return X @ self.weights + self.intercept

    def predict_proba(self, features) -> np.ndarray:
        if self.degenerate:
            n = _features(features).shape[0]
            out = np.zeros((n, self.weights.shape[1]))
            out[:, self.constant_class] = 1.0
            return out
        return _softmax(self.decision_function(features))

    def predict(self, features) -> np.ndarray:
        if self.degenerate:
            return np.full(_features(features).shape[0], self.constant_class)
        return self.decision_function(features).argmax(axis=1)


def _fit_logistic_fixed(X, y, num_classes, C, tol) -> LogisticProbe:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
    Wm, b = _fit_softmax((X - mean) / scale, y, num_classes, C, tol)
    return LogisticProbe(Wm, b, mean, scale, C)


def fit_logistic(
    features,
    labels,
    grid: Optional[CVGrid] = None,
    rng: Optional[np.random.Generator] = None,
    tol: float = 1e-6,
) -> LogisticProbe:
    """Multinomial logistic regression with the L2 strength chosen by CV accuracy.

    ``grid.values`` are inverse penalty strengths ``C``; ties go to the
    smaller ``C`` (stronger regularization).  A single-class training set
    yields a flagged classifier that always predicts that class.
    """
    grid = grid or CVGrid(LOGISTIC_GRID)
    rng = rng if rng is not None else np.random.default_rng(0)
    X = _features(features)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ContractError("features and labels differ in length")
    num_classes = int(y.max()) + 1
    present = np.unique(y)
    if len(present) < 2:
        logger.warning("single class in training labels; probe is degenerate")
        return LogisticProbe(np.zeros((X.shape[1], num_classes)), np.zeros(num_classes),
                             np.zeros(X.shape[1]), np.ones(X.shape[1]), C=float("nan"),
                             degenerate=True, constant_class=int(present[0]))
    folds = stratified_folds(y, grid.folds, rng)
    scores: Dict[float, float] = {}
    best_c, best = None, -np.inf
    for C in sorted(grid.values):
        accs = []
        for f in range(grid.folds):
            test = folds == f
            if not test.any() or test.all():
                continue
            model = _fit_logistic_fixed(X[~test], y[~test], num_classes, C, tol)
            accs.append(float((model.predict(X[test]) == y[test]).mean()))
        scores[C] = float(np.mean(accs))
        if scores[C] > best:
            best_c, best = C, scores[C]
    model = _fit_logistic_fixed(X, y, num_classes, best_c, tol)
    model.cv_scores = scores
    return model


# --- ridge regression ---------------------------------------------------------------

@dataclass
class RidgeSolution:
    weights: np.ndarray
    intercept: np.ndarray
    alpha: float
    cv_scores: Dict[float, float] = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return _features(X) @ self.weights + self.intercept


def ridge_solve(X, Y, alpha: float) -> RidgeSolution:
    """Closed-form ridge on centered data via a Cholesky factorization."""
    X = _features(X)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 1
    Y2 = Y[:, None] if squeeze else Y
    xm = X.mean(axis=0)
    ym = Y2.mean(axis=0)
    Xc = X - xm
    A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"ridge factorization failed for alpha={alpha}: {exc}") from exc
    w = linalg.cho_solve(factor, Xc.T @ (Y2 - ym))
    b = ym - xm @ w
    if squeeze:
        w, b = w[:, 0], b[0]
    return RidgeSolution(w, np.asarray(b), float(alpha))


def fit_ridge(X, Y, grid: Optional[CVGrid] = None, rng: Optional[np.random.Generator] = None) -> RidgeSolution:
    """Pick alpha by mean k-fold CV MSE, then refit on all rows.

    Folds are contiguous blocks unless ``rng`` is given, in which case rows
    are shuffled first.  Ties go to the larger alpha.
    """
    grid = grid or CVGrid(RIDGE_GRID, scoring="mse")
    Xf = _features(X)
    Y = np.asarray(Y, dtype=np.float64)
    n = Xf.shape[0]
    if n < grid.folds:
        raise ContractError(f"need at least {grid.folds} rows for {grid.folds}-fold CV, got {n}")
    folds = contiguous_folds(n, grid.folds)
    if rng is not None:
        folds = folds[rng.permutation(n)]
    scores: Dict[float, float] = {}
    best_a, best = None, np.inf
    for a in sorted(grid.values, reverse=True):
        errs = []
        for f in range(grid.folds):
            test = folds == f
            sol = ridge_solve(Xf[~test], Y[~test], a)
            errs.append(float(np.mean((sol.predict(Xf[test]) - Y[test]) ** 2)))
        scores[a] = float(np.mean(errs))
        if scores[a] < best:
            best_a, best = a, scores[a]
    sol = ridge_solve(Xf, Y, best_a)
    sol.cv_scores = scores
    return sol


# --- metrics -----------------------------------------------------------------------

def eval_classification(classifier: LogisticProbe, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("empty evaluation set")
    return float((classifier.predict(features) == labels).mean())


def forecast_errors(pred: np.ndarray, Y: np.ndarray) -> Tuple[float, float]:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.size == 0:
        raise ContractError("empty evaluation set")
    d = np.asarray(pred, dtype=np.float64).reshape(Y.shape) - Y
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def eval_forecast(solution: RidgeSolution, X, Y) -> Tuple[float, float]:
    """(MSE, MAE) averaged over every window, horizon step and channel."""
    return forecast_errors(solution.predict(X), Y)


# --- periodic evaluation --------------------------------------------------------------

def probe_due(step: int, total_steps: int, every_n_steps: int) -> bool:
    """Whether a probe runs after ``step`` (1-based count of finished steps).

    Probes run every ``every_n_steps`` and always after the final step, so a
    cadence longer than the run yields exactly one probe at the end.
    """
    return step == total_steps or (every_n_steps > 0 and step % every_n_steps == 0)


@dataclass
class ProbeRecord:
    """Best-so-far tracker over periodic probe scores."""

    higher_is_better: bool = True
    history: List[Tuple[int, float]] = field(default_factory=list)
    best_step: Optional[int] = None
    best_score: Optional[float] = None

    def update(self, step: int, score: float) -> bool:
        self.history.append((step, score))
        better = (
            self.best_score is None
            or (score > self.best_score if self.higher_is_better else score < self.best_score)
        )
        if better:
            self.best_step, self.best_score = step, score
        return better

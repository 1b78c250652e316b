"""Meta-learning over the pairwise grid: does adding this auxiliary task help?

The meta-dataset holds one row per directed pair (42 raw features, the
relative gain, and a binary label: gain strictly positive). Logistic
regression is trained by full-batch gradient descent with Nesterov momentum;
min-max normalization is always fitted on training rows only.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError
from .features import (DATA_FEATURE_NAMES, CURVE_FEATURE_NAMES, FEATURE_NAMES,
                       PAIR_FEATURE_NAMES, PairFeatureVector, read_pair_csv,
                       write_pair_csv)
from .trainer import GainMatrix

logger = logging.getLogger(__name__)


@dataclass
class PairRecord:
    main_id: str
    aux_id: str
    values: np.ndarray
    gain_pct: float
    label: int


@dataclass
class MetaDataset:
    feature_names: list[str]
    records: list[PairRecord]
    normalization: tuple[np.ndarray, np.ndarray]  # per-column (min, max) over all records

    def feature_matrix(self, mask: Sequence[int] | None = None) -> np.ndarray:
        x = np.stack([r.values for r in self.records])
        return x if mask is None else x[:, list(mask)]

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.float64)

    def gains(self) -> np.ndarray:
        return np.array([r.gain_pct for r in self.records])

    def normalized_matrix(self, mask: Sequence[int] | None = None) -> np.ndarray:
        mins, maxs = self.normalization
        x = apply_minmax(np.stack([r.values for r in self.records]), mins, maxs)
        return x if mask is None else x[:, list(mask)]

    def to_csv(self, path) -> None:
        rows = [(PairFeatureVector(r.main_id, r.aux_id, r.values), r.gain_pct, r.label)
                for r in self.records]
        write_pair_csv(path, rows)

    @staticmethod
    def from_csv(path) -> "MetaDataset":
        rows = read_pair_csv(path)
        records = [PairRecord(vec.main_id, vec.aux_id, vec.values, gain, label)
                   for vec, gain, label in rows]
        x = np.stack([r.values for r in records])
        return MetaDataset(list(PAIR_FEATURE_NAMES), records, fit_minmax(x))


def fit_minmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.min(axis=0), x.max(axis=0)


def apply_minmax(x: np.ndarray, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    """Scale columns to [0,1] of the fitted range; constant columns map to 0."""
    span = maxs - mins
    safe = np.where(span > 0, span, 1.0)
    out = (x - mins) / safe
    return np.where(span > 0, out, 0.0)


def build_meta(gains: GainMatrix, pair_features: Sequence[PairFeatureVector]) -> MetaDataset:
    """Join directed gains with pair features; label 1 iff gain > 0."""
    by_pair = {(v.main_id, v.aux_id): v for v in pair_features}
    records = []
    for main, aux, gain in gains.directed_pairs():
        vec = by_pair.get((main, aux))
        if vec is None:
            raise InputError(f"no feature vector for directed pair ({main}, {aux})")
        if not np.isfinite(gain):
            raise InputError(f"no gain recorded for directed pair ({main}, {aux})")
        records.append(PairRecord(main, aux, vec.values, gain, int(gain > 0)))
    x = np.stack([r.values for r in records])
    return MetaDataset(list(PAIR_FEATURE_NAMES), records, fit_minmax(x))


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------

@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    l2_strength: float

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weights + self.bias
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.predict_proba(x) >= 0.5).astype(np.int64)


def logreg_objective(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray,
                     l2_strength: float):
    """Mean NLL plus l2/(2n)*||w||^2 (bias unregularized), with its gradient."""
    n = x.shape[0]
    z = x @ weights + bias
    # log(1 + e^z) - y*z, computed stably
    nll = np.logaddexp(0.0, z) - y * z
    obj = float(nll.mean() + 0.5 * l2_strength * (weights @ weights) / n)
    p = np.empty_like(z)
    pos = z >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    p[~pos] = ez / (1.0 + ez)
    err = p - y
    grad_w = x.T @ err / n + l2_strength * weights / n
    grad_b = float(err.mean())
    return obj, grad_w, grad_b


def train_logreg(x: np.ndarray, y: np.ndarray, l2_strength: float = 1.0,
                 tol: float = 1e-6, max_iter: int = 2_000,
                 init: np.ndarray | None = None) -> LogRegModel:
    """Minimize the regularized NLL by Nesterov-accelerated full-batch
    gradient descent, stopping at gradient norm `tol` or the iteration cap."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise InputError("X row count must match y length")
    n, d = x.shape
    design = np.column_stack([x, np.ones(n)])
    # Lipschitz bound of the gradient: sigma_max^2/4n from the data term
    sigma = np.linalg.norm(design, 2)
    lip = 0.25 * sigma * sigma / n + l2_strength / n
    theta = np.zeros(d + 1) if init is None else np.asarray(init, dtype=np.float64).copy()
    look = theta.copy()
    momentum = 1.0
    for _ in range(max_iter):
        obj, gw, gb = logreg_objective(look[:d], float(look[d]), x, y, l2_strength)
        if not np.isfinite(obj):
            raise NumericError("logistic objective became non-finite")
        grad = np.append(gw, gb)
        if np.linalg.norm(grad) <= tol:
            theta = look
            break
        theta_new = look - grad / lip
        momentum_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum * momentum))
        look = theta_new + ((momentum - 1.0) / momentum_new) * (theta_new - theta)
        # restart momentum when it points against the descent direction
        if grad @ (theta_new - theta) > 0:
            look = theta_new.copy()
            momentum_new = 1.0
        theta = theta_new
        momentum = momentum_new
    return LogRegModel(weights=theta[:d].copy(), bias=float(theta[d]), l2_strength=l2_strength)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float((pred == y).mean())


def _f1_positive(pred: np.ndarray, y: np.ndarray) -> float:
    tp = float(np.sum((pred == 1) & (y == 1)))
    fp = float(np.sum((pred == 1) & (y == 0)))
    fn = float(np.sum((pred == 0) & (y == 1)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


@dataclass
class CVReport:
    runs: int
    folds: int
    per_run_accuracy: list[float]
    per_run_f1: list[float]
    mean_accuracy: float
    mean_f1_positive: float
    degenerate_folds: int = 0
    n_features: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "accuracy", "f1_positive"])
            for r, (acc, f1) in enumerate(zip(self.per_run_accuracy, self.per_run_f1)):
                writer.writerow([r, repr(acc), repr(f1)])
            writer.writerow(["mean", repr(self.mean_accuracy), repr(self.mean_f1_positive)])

    def to_text(self) -> str:
        lines = [
            f"{'runs':<22}{self.runs}",
            f"{'folds':<22}{self.folds}",
            f"{'features used':<22}{self.n_features}",
            f"{'mean accuracy':<22}{self.mean_accuracy:.4f}",
            f"{'mean positive F1':<22}{self.mean_f1_positive:.4f}",
        ]
        if self.degenerate_folds:
            lines.append(f"{'single-class folds':<22}{self.degenerate_folds}")
        return "\n".join(lines)


def cross_validate(meta: MetaDataset, folds: int = 5, runs: int = 100,
                   feature_mask: Sequence[int] | None = None, l2_strength: float = 1.0,
                   seed: int = 0, max_iter: int = 2_000) -> CVReport:
    """Randomized k-fold CV; normalization and the model see training rows only."""
    x_raw = meta.feature_matrix(feature_mask)
    y = meta.labels()
    n = x_raw.shape[0]
    if n < folds:
        raise InputError(f"{n} records cannot fill {folds} folds")
    per_run_acc: list[float] = []
    per_run_f1: list[float] = []
    degenerate = 0
    for run in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, run]))
        perm = rng.permutation(n)
        fold_slices = np.array_split(perm, folds)
        accs = np.empty(folds)
        f1s = np.empty(folds)
        for k, test_idx in enumerate(fold_slices):
            train_idx = np.concatenate([fold_slices[j] for j in range(folds) if j != k])
            mins, maxs = fit_minmax(x_raw[train_idx])
            x_train = apply_minmax(x_raw[train_idx], mins, maxs)
            x_test = apply_minmax(x_raw[test_idx], mins, maxs)
            y_train = y[train_idx]
            if y_train.min() == y_train.max():
                degenerate += 1
            model = train_logreg(x_train, y_train, l2_strength, max_iter=max_iter)
            pred = model.predict(x_test)
            accs[k] = _accuracy(pred, y[test_idx])
            f1s[k] = _f1_positive(pred, y[test_idx])
        per_run_acc.append(float(accs.mean()))
        per_run_f1.append(float(f1s.mean()))
    return CVReport(runs=runs, folds=folds,
                    per_run_accuracy=per_run_acc, per_run_f1=per_run_f1,
                    mean_accuracy=float(np.mean(per_run_acc)),
                    mean_f1_positive=float(np.mean(per_run_f1)),
                    degenerate_folds=degenerate,
                    n_features=x_raw.shape[1])


def majority_baseline(y: Sequence[float]) -> tuple[float, float]:
    """(majority-class accuracy, all-positive predictor's positive-class F1)."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise InputError("majority baseline needs a non-empty label vector")
    p = float(y.mean())
    accuracy = max(p, 1.0 - p)
    f1_positive = 0.0 if p == 0 else 2.0 * p / (p + 1.0)
    return accuracy, f1_positive


# ---------------------------------------------------------------------------
# reports and feature masks
# ---------------------------------------------------------------------------

_BLOCK_LABELS = {"main": "Main", "aux": "Aux", "ratio": "Main/Aux"}


def _split_feature_name(name: str) -> tuple[str, str]:
    for suffix, label in _BLOCK_LABELS.items():
        tail = f"__{suffix}"
        if name.endswith(tail):
            return name[: -len(tail)], label
    return name, ""


def coefficient_report(model: LogRegModel, feature_names: Sequence[str]) -> list[tuple[str, str, float]]:
    """All coefficients sorted by descending absolute value."""
    if len(feature_names) != model.weights.size:
        raise InputError("feature_names length must match the weight vector")
    rows = []
    for name, w in zip(feature_names, model.weights):
        base, block = _split_feature_name(name)
        rows.append((base, block, float(w)))
    order = sorted(range(len(rows)), key=lambda k: (-abs(rows[k][2]), k))
    return [rows[k] for k in order]


def format_coefficient_table(rows: Sequence[tuple[str, str, float]]) -> str:
    width = max((len(r[0]) for r in rows), default=7) + 2
    lines = [f"{'feature':<{width}}{'task':<10}{'coefficient':>12}"]
    for base, block, coef in rows:
        lines.append(f"{base:<{width}}{block:<10}{coef:>12.4f}")
    return "\n".join(lines)


def write_coefficient_csv(path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "task", "coefficient"])
        for base, block, coef in rows:
            writer.writerow([base, block, repr(coef)])


def mask_from_spec(spec: str, feature_names: Sequence[str]) -> list[int]:
    """Column indices for a mask spec: 'all', 'data', 'curves', or a
    comma-separated list of base feature or full column names."""
    spec = spec.strip()
    if spec == "all":
        return list(range(len(feature_names)))
    if spec == "data":
        wanted = set(DATA_FEATURE_NAMES)
    elif spec == "curves":
        wanted = set(CURVE_FEATURE_NAMES)
    else:
        wanted = {part.strip() for part in spec.split(",") if part.strip()}
        unknown = wanted - set(FEATURE_NAMES) - set(feature_names)
        if unknown:
            raise InputError(f"unknown features in mask: {sorted(unknown)}")
    out = [k for k, name in enumerate(feature_names)
           if name in wanted or _split_feature_name(name)[0] in wanted]
    if not out:
        raise InputError(f"mask '{spec}' selects no columns")
    return out


def feature_subset_search(meta: MetaDataset, folds: int = 5, search_runs: int = 10,
                          final_runs: int = 100, l2_strength: float = 1.0,
                          seed: int = 0) -> tuple[list[int], CVReport]:
    """Greedy forward selection on mean CV accuracy with a fixed seed schedule.

    Stops as soon as no remaining feature strictly improves the score;
    the returned report re-scores the chosen subset at `final_runs`.
    """
    n_features = len(meta.feature_names)
    selected: list[int] = []
    best_score = -np.inf
    remaining = list(range(n_features))
    while remaining:
        scores = np.full(n_features, -np.inf)
        for f in remaining:
            report = cross_validate(meta, folds=folds, runs=search_runs,
                                    feature_mask=selected + [f],
                                    l2_strength=l2_strength, seed=seed)
            scores[f] = report.mean_accuracy
        pick = int(np.argmax(scores))
        if scores[pick] <= best_score:
            break
        best_score = scores[pick]
        selected.append(pick)
        remaining.remove(pick)
        logger.info("forward selection: added %s (accuracy %.4f)",
                    meta.feature_names[pick], best_score)
    final = cross_validate(meta, folds=folds, runs=final_runs,
                           feature_mask=selected, l2_strength=l2_strength, seed=seed)
    return selected, final

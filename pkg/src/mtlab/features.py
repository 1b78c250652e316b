"""Per-task descriptors and pair feature assembly.

Each task gets 14 scalars: 7 dataset statistics, 5 loss-curve gradients
(slopes at 10/20/30/50/70% of the batch budget) and the (a, c) parameters of
a log curve a*ln(c*i + d) + b fitted to the loss samples. A directed pair is
the 42-vector [main 14 | aux 14 | element-wise main/aux ratios].

Entropy and divergence use natural logarithms.
"""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, EmbeddingTable
from .errors import InputError
from .trainer import LossCurve

logger = logging.getLogger(__name__)

DATA_FEATURE_NAMES = ("size", "num_labels", "tokens_per_type", "oov_rate",
                      "label_entropy", "frobenius_norm", "jsd")
CURVE_FEATURE_NAMES = ("curve_grad_10", "curve_grad_20", "curve_grad_30",
                       "curve_grad_50", "curve_grad_70", "curve_a", "curve_c")
FEATURE_NAMES = DATA_FEATURE_NAMES + CURVE_FEATURE_NAMES
GRADIENT_FRACTIONS = (0.1, 0.2, 0.3, 0.5, 0.7)

PAIR_FEATURE_NAMES = tuple([f"{n}__main" for n in FEATURE_NAMES]
                           + [f"{n}__aux" for n in FEATURE_NAMES]
                           + [f"{n}__ratio" for n in FEATURE_NAMES])


# ---------------------------------------------------------------------------
# dataset statistics
# ---------------------------------------------------------------------------

def label_entropy(dataset: Dataset) -> float:
    """Shannon entropy (nats) of the token-level label distribution in train."""
    counts = Counter(lab for sent in dataset.train for _, lab in sent)
    total = sum(counts.values())
    if total == 0:
        raise InputError("label_entropy needs a non-empty train split")
    p = np.array(list(counts.values()), dtype=np.float64) / total
    return float(-(p * np.log(p)).sum())


def frobenius(dataset: Dataset) -> float:
    """Frobenius norm of the sentence-by-term raw count matrix of train."""
    total = 0.0
    for sent in dataset.train:
        counts = Counter(tok for tok, _ in sent)
        total += sum(c * c for c in counts.values())
    return float(np.sqrt(total))


def _as_distribution(bag) -> np.ndarray:
    arr = np.asarray(bag, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("bag must be a non-empty 1-D array of counts or probabilities")
    if np.any(arr < 0):
        raise InputError("bag entries must be non-negative")
    total = arr.sum()
    if total <= 0:
        raise InputError("empty bag: all entries are zero")
    return arr / total


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / m[nz])).sum())


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; symmetric, bounded by ln 2.

    Accepts two aligned count/probability vectors, or two word->count
    mappings which are aligned over their key union.
    """
    if isinstance(p, Mapping) and isinstance(q, Mapping):
        keys = sorted(set(p) | set(q))
        p = np.array([p.get(k, 0.0) for k in keys], dtype=np.float64)
        q = np.array([q.get(k, 0.0) for k in keys], dtype=np.float64)
    p = _as_distribution(p)
    q = _as_distribution(q)
    if p.shape != q.shape:
        raise InputError("distributions must have equal length")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def dataset_jsd(dataset: Dataset) -> float:
    """JSD between the train and test bags-of-words (token frequencies)."""
    if not dataset.train or not dataset.test:
        raise InputError(f"dataset '{dataset.name}': JSD needs non-empty train and test splits")
    train_bag = Counter(tok for sent in dataset.train for tok, _ in sent)
    test_bag = Counter(tok for sent in dataset.test for tok, _ in sent)
    return jsd(train_bag, test_bag)


def oov_rate(dataset: Dataset, embeddings: EmbeddingTable | None) -> float:
    """Percent of training word types absent from the embedding table."""
    types = dataset.train_token_types()
    if not types:
        raise InputError("oov_rate needs a non-empty train split")
    if embeddings is None or not embeddings.vectors:
        return 100.0
    missing = sum(1 for t in types if t not in embeddings.vectors)
    return 100.0 * missing / len(types)


def tokens_per_type(dataset: Dataset) -> float:
    types = dataset.train_token_types()
    if not types:
        raise InputError("tokens_per_type needs a non-empty train split")
    return dataset.train_token_count() / len(types)


# ---------------------------------------------------------------------------
# loss-curve features
# ---------------------------------------------------------------------------

@dataclass
class LogCurveFit:
    a: float
    b: float
    c: float
    d: float
    rmse: float
    converged: bool

    def predict(self, i) -> np.ndarray:
        i = np.asarray(i, dtype=np.float64)
        return self.a * np.log(self.c * i + self.d) + self.b


def _solve_linear(idx: np.ndarray, y: np.ndarray, c: float, d: float):
    """Closed-form (a, b) minimizing ||a*ln(c*i+d) + b - y||; None if invalid."""
    arg = c * idx + d
    if np.any(arg <= 0):
        return None
    basis = np.log(arg)
    design = np.column_stack([basis, np.ones_like(basis)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(coef[0]), float(coef[1])


def _sse(idx, y, params) -> float:
    a, b, c, d = params
    arg = c * idx + d
    if np.any(arg <= 0):
        return np.inf
    r = a * np.log(arg) + b - y
    return float(r @ r)


def _lm_refine(idx: np.ndarray, y: np.ndarray, params: np.ndarray,
               max_iter: int = 200) -> tuple[np.ndarray, float]:
    """Levenberg-Marquardt on residuals a*ln(c*i+d)+b - y, all four params free.

    Steps that would make c*i+d non-positive anywhere are rejected by
    raising the damping factor.
    """
    params = params.copy()
    cost = _sse(idx, y, params)
    lam = 1e-3
    for _ in range(max_iter):
        a, b, c, d = params
        arg = c * idx + d
        log_arg = np.log(arg)
        r = a * log_arg + b - y
        jac = np.column_stack([log_arg, np.ones_like(idx), a * idx / arg, a / arg])
        g = jac.T @ r
        if np.linalg.norm(g) < 1e-14:
            break
        h = jac.T @ jac
        stepped = False
        for _ in range(40):
            damped = h + lam * np.diag(np.maximum(np.diag(h), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            candidate = params + delta
            new_cost = _sse(idx, y, candidate)
            if new_cost < cost:
                params = candidate
                improvement = cost - new_cost
                cost = new_cost
                lam = max(lam * 0.3, 1e-14)
                stepped = True
                if improvement < 1e-16 * (1.0 + cost):
                    return params, cost
                break
            lam *= 10.0
            if lam > 1e14:
                return params, cost
        if not stepped:
            break
    return params, cost


# Multi-start grid: c scaled to the curve's index range, d spanning the
# plausible offsets; (a, b) come from the closed-form solve at each start.
C_START_FACTORS = (0.1, 1.0, 10.0, 100.0)
D_STARTS = (0.5, 1.0, 10.0, 100.0)


def fit_log_curve(curve: LossCurve | Sequence[tuple[int, float]]) -> LogCurveFit:
    """Least-squares fit of a*ln(c*i+d)+b to the loss samples.

    Tries a fixed grid of (c, d) initializations, solves (a, b) linearly at
    each, refines everything with Levenberg-Marquardt, and keeps the lowest
    RMSE. A fit is flagged non-converged only when no start is feasible.
    """
    samples = curve.samples if isinstance(curve, LossCurve) else list(curve)
    if len(samples) < 8:
        raise InputError(f"log-curve fit needs at least 8 samples, got {len(samples)}")
    idx = np.array([i for i, _ in samples], dtype=np.float64)
    y = np.array([l for _, l in samples], dtype=np.float64)
    i_max = idx.max()

    best: tuple[float, np.ndarray] | None = None
    for factor in C_START_FACTORS:
        c0 = factor / i_max
        for d0 in D_STARTS:
            linear = _solve_linear(idx, y, c0, d0)
            if linear is None:
                continue
            a0, b0 = linear
            params, cost = _lm_refine(idx, y, np.array([a0, b0, c0, d0]))
            if np.all(np.isfinite(params)) and np.isfinite(cost):
                if best is None or cost < best[0]:
                    best = (cost, params)
    if best is None:
        return LogCurveFit(0.0, 0.0, 0.0, 0.0, rmse=np.inf, converged=False)
    cost, params = best
    rmse = float(np.sqrt(cost / len(idx)))
    a, b, c, d = (float(v) for v in params)
    return LogCurveFit(a, b, c, d, rmse=rmse, converged=True)


def curve_gradients(curve: LossCurve,
                    fractions: Sequence[float] = GRADIENT_FRACTIONS) -> np.ndarray:
    """Loss slope (per batch) at the given fractions of the batch budget.

    Differences the samples bracketing each target; when a target lands
    exactly on an interior sample, the two neighbours give a central
    difference around it.
    """
    idx = curve.indices()
    losses = curve.losses()
    if idx.size < 2:
        raise InputError("curve gradients need at least two samples")
    out = np.empty(len(fractions))
    for k, frac in enumerate(fractions):
        target = frac * curve.total_batches
        if target > idx[-1] or target < idx[0]:
            raise InputError(
                f"curve does not span the {frac:.0%} checkpoint (target batch {target:g})")
        j = int(np.searchsorted(idx, target))
        if idx[j] == target and 0 < j < idx.size - 1:
            lo, hi = j - 1, j + 1
        elif idx[j] == target and j == 0:
            lo, hi = 0, 1
        else:
            lo, hi = j - 1, j
        out[k] = (losses[hi] - losses[lo]) / (idx[hi] - idx[lo])
    return out


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class TaskFeatures:
    task: str
    size: float
    num_labels: float
    tokens_per_type: float
    oov_rate: float
    label_entropy: float
    frobenius_norm: float
    jsd: float
    curve_grads: tuple[float, float, float, float, float]
    curve_a: float
    curve_c: float

    def to_vector(self) -> np.ndarray:
        return np.array([self.size, self.num_labels, self.tokens_per_type, self.oov_rate,
                         self.label_entropy, self.frobenius_norm, self.jsd,
                         *self.curve_grads, self.curve_a, self.curve_c])


def compute_task_features(dataset: Dataset, embeddings: EmbeddingTable | None,
                          curve: LossCurve) -> TaskFeatures:
    fit = fit_log_curve(curve)
    if fit.converged:
        curve_a, curve_c = fit.a, fit.c
    else:
        logger.warning("log-curve fit for task '%s' did not converge; using (0, 0)", dataset.name)
        curve_a, curve_c = 0.0, 0.0
    grads = curve_gradients(curve)
    return TaskFeatures(
        task=dataset.name,
        size=float(len(dataset.train)),
        num_labels=float(len(dataset.label_vocab)),
        tokens_per_type=tokens_per_type(dataset),
        oov_rate=oov_rate(dataset, embeddings),
        label_entropy=label_entropy(dataset),
        frobenius_norm=frobenius(dataset),
        jsd=dataset_jsd(dataset),
        curve_grads=tuple(float(g) for g in grads),
        curve_a=curve_a,
        curve_c=curve_c,
    )


@dataclass
class PairFeatureVector:
    main_id: str
    aux_id: str
    values: np.ndarray  # length 42


def assemble_pair(main: TaskFeatures, aux: TaskFeatures) -> PairFeatureVector:
    """[main | aux | main/aux], with ratios zeroed where aux is ~0."""
    mv = main.to_vector()
    av = aux.to_vector()
    ratio = np.zeros_like(mv)
    for k in range(mv.size):
        if abs(av[k]) > 1e-12:
            ratio[k] = mv[k] / av[k]
        else:
            logger.warning("pair (%s, %s): feature '%s' is 0 for the aux task; ratio set to 0",
                           main.task, aux.task, FEATURE_NAMES[k])
    return PairFeatureVector(main.task, aux.task, np.concatenate([mv, av, ratio]))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_task_csv(path, features: Sequence[TaskFeatures]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task"] + list(FEATURE_NAMES))
        for tf in features:
            writer.writerow([tf.task] + [repr(float(v)) for v in tf.to_vector()])


def write_pair_csv(path, rows: Sequence[tuple[PairFeatureVector, float, int]]) -> None:
    """One row per directed pair: ids, the 42 features, gain percent, label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["main_task", "aux_task"] + list(PAIR_FEATURE_NAMES) + ["gain_pct", "label"])
        for vec, gain, label in rows:
            writer.writerow([vec.main_id, vec.aux_id]
                            + [repr(float(v)) for v in vec.values]
                            + [repr(float(gain)), int(label)])


def read_pair_csv(path) -> list[tuple[PairFeatureVector, float, int]]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["main_task", "aux_task"] + list(PAIR_FEATURE_NAMES) + ["gain_pct", "label"]
        if header != expected:
            raise InputError(f"{path}: unexpected pair-feature CSV header")
        for row in reader:
            values = np.array([float(v) for v in row[2:2 + len(PAIR_FEATURE_NAMES)]])
            rows.append((PairFeatureVector(row[0], row[1], values),
                         float(row[-2]), int(row[-1])))
    return rows

"""Training loops, loss curves, micro-F1 scoring and the pairwise grid.

Single-task runs take `single_task_batches` Adadelta steps; joint runs take
`multi_task_batches` (twice as many by default), drawing the task to update
uniformly at every step. The joint architecture is symmetric, so each
unordered pair is trained once and read out for both directed gains.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn_core
from .data import Dataset, EmbeddingTable, encode_tokens, union_token_vocab
from .errors import InputError, NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    single_task_batches: int = 2_000
    multi_task_batches: int | None = None  # defaults to 2x single
    curve_sample_every: int = 50
    seed: int = 0
    embedding_dim: int = 16
    hidden_dim: int = 32

    def __post_init__(self):
        if self.multi_task_batches is None:
            object.__setattr__(self, "multi_task_batches", 2 * self.single_task_batches)
        if self.batch_size < 1 or self.curve_sample_every < 1:
            raise InputError("batch_size and curve_sample_every must be positive")
        if self.single_task_batches < 0 or self.multi_task_batches < 0:
            raise InputError("batch budgets must be non-negative")
        if self.embedding_dim < 1 or self.hidden_dim < 2:
            raise InputError("embedding_dim and hidden_dim must be positive")

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        return TrainConfig(**overrides)

    @staticmethod
    def paper(**overrides) -> "TrainConfig":
        base = dict(batch_size=32, single_task_batches=25_000, multi_task_batches=50_000,
                    curve_sample_every=250, embedding_dim=100, hidden_dim=100)
        base.update(overrides)
        return TrainConfig(**base)

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


PROFILES = {"desk": TrainConfig.desk, "paper": TrainConfig.paper}


@dataclass
class LossCurve:
    samples: list[tuple[int, float]]
    total_batches: int

    def __post_init__(self):
        last = 0
        for idx, loss in self.samples:
            if idx <= last:
                raise InputError("loss-curve batch indices must be strictly increasing")
            last = idx
        if self.samples and last > self.total_batches:
            raise InputError("loss-curve index exceeds total_batches")

    def indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.samples], dtype=np.float64)

    def losses(self) -> np.ndarray:
        return np.array([l for _, l in self.samples], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["batch_index", "loss"])
            for idx, loss in self.samples:
                writer.writerow([idx, repr(loss)])

    @staticmethod
    def from_csv(path) -> "LossCurve":
        samples = []
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                samples.append((int(row[0]), float(row[1])))
        total = samples[-1][0] if samples else 0
        return LossCurve(samples, total_batches=total)


@dataclass
class RunResult:
    tasks: list[str]
    f1s: list[float]
    curves: list[LossCurve]
    model: tuple | None = None  # (SharedBody, list[TaskHead])

    def f1_of(self, task: str) -> float:
        return self.f1s[self.tasks.index(task)]

    def curve_of(self, task: str) -> LossCurve:
        return self.curves[self.tasks.index(task)]


def micro_f1(predictions: Sequence, golds: Sequence, default_label=None) -> float:
    """Micro-averaged F1 over aligned token labels, ignoring the default label.

    tp: pred == gold != default; fp: pred != default and wrong;
    fn: gold != default and missed. Returns 0 when 2tp+fp+fn is 0.
    """
    if len(predictions) != len(golds):
        raise InputError(f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds")
    tp = fp = fn = 0
    for p, g in zip(predictions, golds):
        if p == g:
            if p != default_label:
                tp += 1
        else:
            if p != default_label:
                fp += 1
            if g != default_label:
                fn += 1
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def relative_gain(f1_multi: float, f1_single: float) -> float:
    """Percent change of the joint model's F1 over the single-task F1."""
    if f1_single <= 0.0:
        raise InputError("relative gain undefined: single-task F1 is 0")
    return 100.0 * (f1_multi - f1_single) / f1_single


def draw_tasks(rng: np.random.Generator, n_batches: int, n_tasks: int) -> np.ndarray:
    """Uniform task draw for every training step."""
    return rng.integers(0, n_tasks, size=n_batches)


# ---------------------------------------------------------------------------
# training internals
# ---------------------------------------------------------------------------

@dataclass
class _EncodedTask:
    name: str
    train_ids: list[np.ndarray]
    train_labels: list[np.ndarray]
    test_ids: list[np.ndarray]
    test_gold: list[str]
    id_to_label: list[str]
    default_label: str | None


def _encode_task(dataset: Dataset, token_vocab) -> _EncodedTask:
    label_vocab = dataset.label_vocab
    train_ids, train_labels = [], []
    for sent in dataset.train:
        train_ids.append(encode_tokens((t for t, _ in sent), token_vocab))
        train_labels.append(np.array([label_vocab[l] for _, l in sent], dtype=np.int64))
    test_ids = [encode_tokens((t for t, _ in sent), token_vocab) for sent in dataset.test]
    test_gold = [lab for sent in dataset.test for _, lab in sent]
    return _EncodedTask(dataset.name, train_ids, train_labels, test_ids, test_gold,
                        dataset.id_to_label, dataset.default_label)


def _evaluate(body, head, task: _EncodedTask, batch_size: int) -> float:
    if not task.test_ids:
        return 0.0
    preds: list[str] = []
    for start in range(0, len(task.test_ids), batch_size):
        chunk = task.test_ids[start:start + batch_size]
        for probs in nn_core.forward_batch(body, head, chunk):
            for label_id in probs.argmax(axis=1):
                preds.append(task.id_to_label[label_id])
    return micro_f1(preds, task.test_gold, task.default_label)


def _train_loop(body, heads, tasks: list[_EncodedTask], n_batches: int,
                config: TrainConfig, rng: np.random.Generator) -> list[LossCurve]:
    n_tasks = len(tasks)
    draws = draw_tasks(rng, n_batches, n_tasks) if n_tasks > 1 else np.zeros(n_batches, dtype=np.int64)
    counts = [0] * n_tasks
    window_sum = [0.0] * n_tasks
    window_n = [0] * n_tasks
    samples: list[list[tuple[int, float]]] = [[] for _ in tasks]
    shared = body.params()
    for step in range(n_batches):
        k = int(draws[step])
        task = tasks[k]
        idx = rng.integers(0, len(task.train_ids), size=config.batch_size)
        batch_sents = [task.train_ids[i] for i in idx]
        batch_golds = [task.train_labels[i] for i in idx]
        loss = nn_core.backward_batch(body, heads[k], batch_sents, batch_golds)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at batch {step}")
        for p in shared:
            nn_core.adadelta_step(p)
        for p in heads[k].params():
            nn_core.adadelta_step(p)
        counts[k] += 1
        window_sum[k] += loss
        window_n[k] += 1
        if counts[k] % config.curve_sample_every == 0:
            samples[k].append((counts[k], window_sum[k] / window_n[k]))
            window_sum[k] = 0.0
            window_n[k] = 0
    return [LossCurve(samples[k], total_batches=counts[k]) for k in range(n_tasks)]


def train_single(dataset: Dataset, config: TrainConfig,
                 embeddings: EmbeddingTable | None = None) -> RunResult:
    """Train one task on its own vocabulary; returns F1, curve and model."""
    rng = np.random.default_rng(config.seed)
    body = nn_core.SharedBody(len(dataset.token_vocab), config.embedding_dim, config.hidden_dim,
                              rng, pretrained=embeddings, vocab=dataset.token_vocab)
    head = nn_core.TaskHead(dataset.name, config.hidden_dim, len(dataset.label_vocab), rng)
    task = _encode_task(dataset, dataset.token_vocab)
    curves = _train_loop(body, [head], [task], config.single_task_batches, config, rng)
    f1 = _evaluate(body, head, task, config.batch_size)
    return RunResult([dataset.name], [f1], curves, model=(body, [head]))


def train_multi(main: Dataset, aux: Dataset, config: TrainConfig,
                embeddings: EmbeddingTable | None = None) -> RunResult:
    """Jointly train two tasks over a shared body and per-task heads.

    The model does not distinguish main from auxiliary; both test F1s are
    reported and either can be read as the main task.
    """
    vocab = union_token_vocab([main, aux])
    rng = np.random.default_rng(config.seed)
    body = nn_core.SharedBody(len(vocab), config.embedding_dim, config.hidden_dim,
                              rng, pretrained=embeddings, vocab=vocab)
    heads = [nn_core.TaskHead(main.name, config.hidden_dim, len(main.label_vocab), rng),
             nn_core.TaskHead(aux.name, config.hidden_dim, len(aux.label_vocab), rng)]
    tasks = [_encode_task(main, vocab), _encode_task(aux, vocab)]
    curves = _train_loop(body, heads, tasks, config.multi_task_batches, config, rng)
    f1s = [_evaluate(body, heads[k], tasks[k], config.batch_size) for k in range(2)]
    return RunResult([main.name, aux.name], f1s, curves, model=(body, heads))


# ---------------------------------------------------------------------------
# the pairwise grid
# ---------------------------------------------------------------------------

@dataclass
class GainMatrix:
    tasks: list[str]
    gains: np.ndarray  # (T, T), percent; diagonal (and excluded pairs) NaN

    def gain(self, main: str, aux: str) -> float:
        return float(self.gains[self.tasks.index(main), self.tasks.index(aux)])

    def directed_pairs(self):
        for m, main in enumerate(self.tasks):
            for a, aux in enumerate(self.tasks):
                if m != a:
                    yield main, aux, float(self.gains[m, a])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["main_task"] + self.tasks)
            for m, main in enumerate(self.tasks):
                row = [main]
                for a in range(len(self.tasks)):
                    if m == a or not np.isfinite(self.gains[m, a]):
                        row.append("")
                    else:
                        row.append(repr(float(self.gains[m, a])))
                writer.writerow(row)

    @staticmethod
    def from_csv(path) -> "GainMatrix":
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            tasks = header[1:]
            gains = np.full((len(tasks), len(tasks)), np.nan)
            for m, row in enumerate(reader):
                for a, cell in enumerate(row[1:]):
                    if cell:
                        gains[m, a] = float(cell)
        return GainMatrix(tasks, gains)


@dataclass
class GridResult:
    gain_matrix: GainMatrix
    singles: dict[str, RunResult]
    pairs: dict[tuple[str, str], RunResult]


def _derive_seed(base: int, kind: int, i: int, j: int = 0) -> int:
    seq = np.random.SeedSequence([base, kind, i, j])
    return int(seq.generate_state(1, np.uint64)[0])


def _single_job(args):
    dataset, config, embeddings = args
    try:
        result = train_single(dataset, config, embeddings)
    except Exception as exc:
        raise RuntimeError(f"single-task training failed for '{dataset.name}': {exc}") from exc
    return dataset.name, result


def _pair_job(args):
    main, aux, config, embeddings = args
    try:
        result = train_multi(main, aux, config, embeddings)
    except Exception as exc:
        raise RuntimeError(f"pair training failed for ({main.name}, {aux.name}): {exc}") from exc
    return (main.name, aux.name), result


def run_grid(datasets: Sequence[Dataset], config: TrainConfig,
             embeddings: EmbeddingTable | None = None, jobs: int = 1) -> GridResult:
    """Train every single task and every unordered pair; assemble directed gains."""
    if len(datasets) < 2:
        raise InputError("the grid needs at least two tasks")
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise InputError("task names must be unique")

    single_args = [(ds, config.with_seed(_derive_seed(config.seed, 0, i)), embeddings)
                   for i, ds in enumerate(datasets)]
    pair_args = [(datasets[i], datasets[j],
                  config.with_seed(_derive_seed(config.seed, 1, i, j)), embeddings)
                 for i in range(len(datasets)) for j in range(i + 1, len(datasets))]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            singles = dict(pool.map(_single_job, single_args))
            pairs = dict(pool.map(_pair_job, pair_args))
    else:
        singles = dict(map(_single_job, single_args))
        pairs = dict(map(_pair_job, pair_args))

    t = len(datasets)
    gains = np.full((t, t), np.nan)
    for (a_name, b_name), result in pairs.items():
        a, b = names.index(a_name), names.index(b_name)
        for m, x in ((a, b), (b, a)):
            f1_single = singles[names[m]].f1s[0]
            f1_joint = result.f1_of(names[m])
            if f1_single <= 0.0:
                logger.warning("excluding pair (%s, %s): single-task F1 is 0", names[m], names[x])
                continue
            gains[m, x] = relative_gain(f1_joint, f1_single)
    return GridResult(GainMatrix(names, gains), singles, pairs)

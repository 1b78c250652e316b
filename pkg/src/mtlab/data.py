"""Datasets: CoNLL-style ingestion, vocabularies, embeddings, synthetic tasks.

Tokens are lowercased at ingestion; labels are kept verbatim. Token ids 0 and
1 are reserved for padding and unknown words, and the token vocabulary is
built from the training split only (dev/test words missing from it encode to
the unknown id). Label ids cover every split so gold labels always encode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, ParseError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

Sentence = list[tuple[str, str]]


def encode_tokens(tokens: Iterable[str], vocab: Mapping[str, int]) -> np.ndarray:
    return np.array([vocab.get(t, UNK_ID) for t in tokens], dtype=np.int64)


@dataclass
class Dataset:
    name: str
    train: list[Sentence]
    dev: list[Sentence]
    test: list[Sentence]
    token_vocab: dict[str, int]
    label_vocab: dict[str, int]
    default_label: str | None = None

    @classmethod
    def from_splits(cls, name: str, train: list[Sentence], dev: list[Sentence] | None = None,
                    test: list[Sentence] | None = None, default_label: str | None = None) -> "Dataset":
        dev = dev or []
        test = test or []
        if not train:
            raise InputError(f"dataset '{name}': train split is empty")
        train = [_normalize(s) for s in train]
        dev = [_normalize(s) for s in dev]
        test = [_normalize(s) for s in test]
        token_vocab = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for sent in train:
            for tok, _ in sent:
                if tok not in token_vocab:
                    token_vocab[tok] = len(token_vocab)
        label_vocab: dict[str, int] = {}
        for split in (train, dev, test):
            for sent in split:
                for _, lab in sent:
                    if lab not in label_vocab:
                        label_vocab[lab] = len(label_vocab)
        if default_label is not None and default_label not in label_vocab:
            label_vocab[default_label] = len(label_vocab)
        return cls(name, train, dev, test, token_vocab, label_vocab, default_label)

    @property
    def id_to_label(self) -> list[str]:
        out = [""] * len(self.label_vocab)
        for lab, i in self.label_vocab.items():
            out[i] = lab
        return out

    def encode_sentence(self, sentence: Sentence) -> tuple[np.ndarray, np.ndarray]:
        ids = encode_tokens((t for t, _ in sentence), self.token_vocab)
        labels = np.array([self.label_vocab[l] for _, l in sentence], dtype=np.int64)
        return ids, labels

    def train_token_count(self) -> int:
        return sum(len(s) for s in self.train)

    def train_token_types(self) -> set[str]:
        return {t for s in self.train for t, _ in s}


def _normalize(sentence: Sequence[tuple[str, str]]) -> Sentence:
    return [(tok.lower(), lab) for tok, lab in sentence]


def union_token_vocab(datasets: Sequence[Dataset]) -> dict[str, int]:
    """Joint token vocabulary over the train splits, in first-occurrence order."""
    vocab = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    for ds in datasets:
        for sent in ds.train:
            for tok, _ in sent:
                if tok not in vocab:
                    vocab[tok] = len(vocab)
    return vocab


# ---------------------------------------------------------------------------
# CoNLL-style files: "token<TAB>label" lines, blank line between sentences
# ---------------------------------------------------------------------------

def read_conll_sentences(path) -> list[Sentence]:
    path = Path(path)
    sentences: list[Sentence] = []
    current: Sentence = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if current:
                    sentences.append(current)
                    current = []
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'token<TAB>label', got {len(fields)} fields")
            current.append((fields[0], fields[1]))
    if current:
        sentences.append(current)
    if not sentences:
        raise InputError(f"{path}: no sentences found")
    return sentences


def load_conll(train_path, dev_path=None, test_path=None,
               name: str | None = None, default_label: str | None = None) -> Dataset:
    train = read_conll_sentences(train_path)
    dev = read_conll_sentences(dev_path) if dev_path else []
    test = read_conll_sentences(test_path) if test_path else []
    if name is None:
        name = Path(train_path).stem
    return Dataset.from_splits(name, train, dev, test, default_label=default_label)


def write_conll(sentences: Iterable[Sentence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            for tok, lab in sent:
                fh.write(f"{tok}\t{lab}\n")
            fh.write("\n")


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_conll(dataset.train, directory / "train.tsv")
    if dataset.dev:
        write_conll(dataset.dev, directory / "dev.tsv")
    if dataset.test:
        write_conll(dataset.test, directory / "test.tsv")


def load_dataset(directory, name: str | None = None, default_label: str | None = None) -> Dataset:
    directory = Path(directory)
    dev = directory / "dev.tsv"
    test = directory / "test.tsv"
    return load_conll(directory / "train.tsv",
                      dev if dev.exists() else None,
                      test if test.exists() else None,
                      name=name or directory.name,
                      default_label=default_label)


# ---------------------------------------------------------------------------
# pretrained embeddings: "word v1 ... vdim", single-space separated
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingTable":
        return cls(dim=dim)

    def coverage(self, vocabulary: Iterable[str]) -> float:
        words = set(vocabulary)
        if not words:
            return 0.0
        return sum(1 for w in words if w in self.vectors) / len(words)


def load_embeddings(path, dim: int) -> EmbeddingTable:
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(" ")
            if len(fields) != dim + 1:
                raise ParseError(
                    f"{path}:{lineno}: expected word plus {dim} values, got {len(fields) - 1}"
                )
            try:
                vec = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric embedding value") from exc
            vectors[fields[0]] = vec
    return EmbeddingTable(dim=dim, vectors=vectors)


# ---------------------------------------------------------------------------
# synthetic tasks from a hidden-Markov process
# ---------------------------------------------------------------------------

# Emission mixture: each state owns a block of the vocabulary and leaks a
# little mass over the whole of it, so tokens are informative but not always
# decisive and context carries real signal.
EMISSION_OWN_MASS = 0.85
TRANSITION_CONCENTRATION = 0.5
_SPLIT_CODES = {"train": 0, "dev": 1, "test": 2}


def _label_identity(state: int, num_states: int) -> str:
    return f"s{state}"


def _label_parity(state: int, num_states: int) -> str:
    return "even" if state % 2 == 0 else "odd"


def _label_mod3(state: int, num_states: int) -> str:
    return f"m{state % 3}"


LABEL_MAPS: dict[str, Callable[[int, int], str]] = {
    "identity": _label_identity,
    "parity": _label_parity,
    "mod3": _label_mod3,
}


@dataclass(frozen=True)
class SynthSpec:
    num_states: int
    vocab_size: int
    sentence_length_range: tuple[int, int]
    split_sizes: tuple[int, int, int]  # train, dev, test sentence counts
    label_map: str = "identity"
    transition_seed: int = 0
    emission_seed: int = 0

    def validate(self) -> None:
        lo, hi = self.sentence_length_range
        if lo > hi:
            raise InputError(f"sentence_length_range min {lo} exceeds max {hi}")
        if lo < 1:
            raise InputError("sentence_length_range min must be at least 1")
        if self.num_states < 1:
            raise InputError("num_states must be positive")
        if self.vocab_size < self.num_states:
            raise InputError("vocab_size must be at least num_states")
        if self.split_sizes[0] < 1:
            raise InputError("train split must contain at least one sentence")
        if self.label_map not in LABEL_MAPS:
            raise InputError(f"unknown label_map '{self.label_map}'; known: {sorted(LABEL_MAPS)}")


def _latent_process(spec: SynthSpec):
    """Initial/transition/emission distributions, fixed by the two seeds."""
    n, v = spec.num_states, spec.vocab_size
    rng_t = np.random.default_rng(np.random.SeedSequence([spec.transition_seed]))
    initial = rng_t.dirichlet(np.full(n, TRANSITION_CONCENTRATION) + 1e-3)
    transition = rng_t.dirichlet(np.full(n, TRANSITION_CONCENTRATION) + 1e-3, size=n)
    rng_e = np.random.default_rng(np.random.SeedSequence([spec.emission_seed]))
    order = rng_e.permutation(v)
    blocks = np.array_split(order, n)
    emission = np.full((n, v), (1.0 - EMISSION_OWN_MASS) / v)
    for s, block in enumerate(blocks):
        own = rng_e.dirichlet(np.ones(len(block)))
        emission[s, block] += EMISSION_OWN_MASS * own
    return initial, transition, emission


def generate_synth(spec: SynthSpec, name: str, default_label: str | None = None) -> Dataset:
    """Sample a dataset from the spec's hidden-Markov process.

    The token stream depends only on the two seeds, the shape fields and the
    split, never on label_map: specs sharing seeds produce identical token
    sequences under different labelings.
    """
    spec.validate()
    initial, transition, emission = _latent_process(spec)
    label_fn = LABEL_MAPS[spec.label_map]
    labels = [label_fn(s, spec.num_states) for s in range(spec.num_states)]
    init_cdf = np.cumsum(initial)
    trans_cdf = np.cumsum(transition, axis=1)
    emit_cdf = np.cumsum(emission, axis=1)
    words = [f"w{j}" for j in range(spec.vocab_size)]
    lo, hi = spec.sentence_length_range

    splits: dict[str, list[Sentence]] = {}
    for split_name, size in zip(("train", "dev", "test"), spec.split_sizes):
        rng = np.random.default_rng(np.random.SeedSequence(
            [spec.transition_seed, spec.emission_seed, _SPLIT_CODES[split_name]]))
        sentences: list[Sentence] = []
        for _ in range(size):
            length = int(rng.integers(lo, hi + 1))
            u_state = rng.random(length)
            u_token = rng.random(length)
            sent: Sentence = []
            state = int(np.searchsorted(init_cdf, u_state[0], side="right"))
            state = min(state, spec.num_states - 1)
            for t in range(length):
                if t > 0:
                    state = int(np.searchsorted(trans_cdf[state], u_state[t], side="right"))
                    state = min(state, spec.num_states - 1)
                tok = int(np.searchsorted(emit_cdf[state], u_token[t], side="right"))
                tok = min(tok, spec.vocab_size - 1)
                sent.append((words[tok], labels[state]))
            sentences.append(sent)
        splits[split_name] = sentences
    return Dataset.from_splits(name, splits["train"], splits["dev"], splits["test"],
                               default_label=default_label)

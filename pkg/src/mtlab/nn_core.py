"""Minimal neural substrate: a bi-directional LSTM tagger in plain numpy.

Everything runs in float64. The forward/backward passes operate on padded
batches but sentences only contribute to the loss (and gradients) up to their
true lengths, so results are identical to per-sentence processing.

LSTM recurrences (gate order input/forget/cell/output, concatenated):
    z_t = x_t W + h_{t-1} U + b
    i_t = sigm(z_i)   f_t = sigm(z_f)   g_t = tanh(z_g)   o_t = sigm(z_o)
    c_t = f_t * c_{t-1} + i_t * g_t
    h_t = o_t * tanh(c_t)
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, NumericError

CHECKPOINT_MAGIC = b"MTLCKPT1\n"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParamTensor:
    """A named trainable array with its gradient and Adadelta accumulators."""

    __slots__ = ("name", "values", "grad", "acc_grad_sq", "acc_update_sq")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.acc_grad_sq = np.zeros_like(self.values)
        self.acc_update_sq = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.values.shape})"


def adadelta_step(param: ParamTensor, rho: float = 0.95, epsilon: float = 1e-6) -> ParamTensor:
    """Apply one Adadelta update in place and clear the gradient.

        E[g^2]  <- rho E[g^2] + (1-rho) g^2
        dx      = -sqrt((E[dx^2] + eps) / (E[g^2] + eps)) * g
        E[dx^2] <- rho E[dx^2] + (1-rho) dx^2
    """
    if not 0.0 < rho < 1.0:
        raise InputError(f"rho must lie in (0,1), got {rho}")
    if epsilon <= 0.0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter '{param.name}'")
    param.acc_grad_sq *= rho
    param.acc_grad_sq += (1.0 - rho) * g * g
    update = -np.sqrt((param.acc_update_sq + epsilon) / (param.acc_grad_sq + epsilon)) * g
    param.acc_update_sq *= rho
    param.acc_update_sq += (1.0 - rho) * update * update
    param.values += update
    param.zero_grad()
    return param


class LstmDirection:
    """Weights for one LSTM direction; gates stacked along the last axis."""

    def __init__(self, name: str, embedding_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_in = ParamTensor(f"{name}.w_in", glorot_uniform(rng, (embedding_dim, 4 * hidden)))
        self.w_rec = ParamTensor(f"{name}.w_rec", glorot_uniform(rng, (hidden, 4 * hidden)))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget-gate bias starts open
        self.bias = ParamTensor(f"{name}.bias", bias)

    def params(self) -> list[ParamTensor]:
        return [self.w_in, self.w_rec, self.bias]


class SharedBody:
    """Embeddings plus the two LSTM directions shared by every task."""

    def __init__(
        self,
        vocab_size: int,
        embedding_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
        pretrained=None,
        vocab: Mapping[str, int] | None = None,
    ):
        if hidden_dim % 2 != 0:
            raise InputError(f"hidden_dim must be even (it is split across directions), got {hidden_dim}")
        if vocab_size < 2:
            raise InputError("vocab_size must include the padding and unknown rows")
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        emb = glorot_uniform(rng, (vocab_size, embedding_dim))
        emb[0, :] = 0.0  # padding row
        if pretrained is not None and vocab is not None and len(pretrained.vectors) > 0:
            if pretrained.dim != embedding_dim:
                raise InputError(
                    f"embedding table dim {pretrained.dim} != model embedding_dim {embedding_dim}"
                )
            for word, idx in vocab.items():
                vec = pretrained.vectors.get(word)
                if vec is not None:
                    emb[idx, :] = vec
        self.embeddings = ParamTensor("embeddings", emb)
        half = hidden_dim // 2
        self.fwd = LstmDirection("lstm_fwd", embedding_dim, half, rng)
        self.bwd = LstmDirection("lstm_bwd", embedding_dim, half, rng)

    def params(self) -> list[ParamTensor]:
        return [self.embeddings] + self.fwd.params() + self.bwd.params()


class TaskHead:
    """Task-specific dense projection from the shared hidden layer to labels."""

    def __init__(self, name: str, hidden_dim: int, label_count: int, rng: np.random.Generator):
        if label_count < 1:
            raise InputError("label_count must be positive")
        self.name = name
        self.label_count = label_count
        self.projection = ParamTensor(f"{name}.projection", glorot_uniform(rng, (hidden_dim, label_count)))
        self.bias = ParamTensor(f"{name}.bias", np.zeros(label_count))

    def params(self) -> list[ParamTensor]:
        return [self.projection, self.bias]


def iter_params(body: SharedBody, heads: Iterable[TaskHead]) -> list[ParamTensor]:
    out = body.params()
    for head in heads:
        out.extend(head.params())
    return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _pack_batch(sentences: Sequence[Sequence[int]], vocab_size: int):
    if len(sentences) == 0:
        raise InputError("empty batch")
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    if np.any(lengths == 0):
        raise InputError("empty sentence in batch")
    t_max = int(lengths.max())
    ids = np.zeros((len(sentences), t_max), dtype=np.int64)
    for b, sent in enumerate(sentences):
        row = np.asarray(sent, dtype=np.int64)
        if row.min() < 0 or row.max() >= vocab_size:
            raise InputError(
                f"token id out of range in sentence {b}: vocab size is {vocab_size}"
            )
        ids[b, : lengths[b]] = row
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    # index map that reverses each sentence within its true length
    pos = np.broadcast_to(np.arange(t_max), ids.shape)
    rev = np.where(mask, lengths[:, None] - 1 - pos, pos)
    return ids, lengths, mask, rev


def _lstm_forward(direction: LstmDirection, x: np.ndarray):
    """Run one direction over (B, T, E) inputs; returns hidden states and a cache."""
    b_sz, t_max, _ = x.shape
    h_dim = direction.hidden
    xw = x @ direction.w_in.values  # (B, T, 4H), input contribution for all steps
    u = direction.w_rec.values
    bias = direction.bias.values
    hs = np.empty((b_sz, t_max, h_dim))
    gi = np.empty_like(hs)
    gf = np.empty_like(hs)
    gg = np.empty_like(hs)
    go = np.empty_like(hs)
    tc = np.empty_like(hs)
    h_prev = np.empty_like(hs)
    c_prev = np.empty_like(hs)
    h = np.zeros((b_sz, h_dim))
    c = np.zeros((b_sz, h_dim))
    for t in range(t_max):
        z = xw[:, t] + h @ u + bias
        i = _sigmoid(z[:, :h_dim])
        f = _sigmoid(z[:, h_dim:2 * h_dim])
        g = np.tanh(z[:, 2 * h_dim:3 * h_dim])
        o = _sigmoid(z[:, 3 * h_dim:])
        h_prev[:, t] = h
        c_prev[:, t] = c
        c = f * c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        gi[:, t] = i
        gf[:, t] = f
        gg[:, t] = g
        go[:, t] = o
        tc[:, t] = tanh_c
        hs[:, t] = h
    cache = {"x": x, "i": gi, "f": gf, "g": gg, "o": go, "tc": tc,
             "h_prev": h_prev, "c_prev": c_prev}
    return hs, cache


def _lstm_backward(direction: LstmDirection, cache: dict, dh_out: np.ndarray) -> np.ndarray:
    """Backprop through time for one direction; accumulates into the direction's
    parameter gradients and returns the gradient wrt the inputs (B, T, E)."""
    gi, gf, gg, go = cache["i"], cache["f"], cache["g"], cache["o"]
    tc, h_prev, c_prev, x = cache["tc"], cache["h_prev"], cache["c_prev"], cache["x"]
    b_sz, t_max, h_dim = dh_out.shape
    u = direction.w_rec.values
    dz = np.empty((b_sz, t_max, 4 * h_dim))
    dh_next = np.zeros((b_sz, h_dim))
    dc_next = np.zeros((b_sz, h_dim))
    for t in range(t_max - 1, -1, -1):
        i, f, g, o = gi[:, t], gf[:, t], gg[:, t], go[:, t]
        dh = dh_out[:, t] + dh_next
        dc = dh * o * (1.0 - tc[:, t] ** 2) + dc_next
        dz[:, t, :h_dim] = dc * g * i * (1.0 - i)
        dz[:, t, h_dim:2 * h_dim] = dc * c_prev[:, t] * f * (1.0 - f)
        dz[:, t, 2 * h_dim:3 * h_dim] = dc * i * (1.0 - g * g)
        dz[:, t, 3 * h_dim:] = dh * tc[:, t] * o * (1.0 - o)
        dzt = dz[:, t]
        dh_next = dzt @ u.T
        dc_next = dc * f
    flat_x = x.reshape(-1, x.shape[-1])
    flat_h = h_prev.reshape(-1, h_dim)
    flat_dz = dz.reshape(-1, 4 * h_dim)
    direction.w_in.grad += flat_x.T @ flat_dz
    direction.w_rec.grad += flat_h.T @ flat_dz
    direction.bias.grad += flat_dz.sum(axis=0)
    return dz @ direction.w_in.values.T


def _run_forward(body: SharedBody, head: TaskHead, sentences: Sequence[Sequence[int]]):
    ids, lengths, mask, rev = _pack_batch(sentences, body.vocab_size)
    x = body.embeddings.values[ids]  # (B, T, E)
    hs_f, cache_f = _lstm_forward(body.fwd, x)
    x_rev = np.take_along_axis(x, rev[:, :, None], axis=1)
    hs_b_rev, cache_b = _lstm_forward(body.bwd, x_rev)
    hs_b = np.take_along_axis(hs_b_rev, rev[:, :, None], axis=1)
    hidden = np.concatenate([hs_f, hs_b], axis=-1)  # (B, T, hidden_dim)
    logits = hidden @ head.projection.values + head.bias.values
    m = logits.max(axis=-1, keepdims=True)
    log_probs = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
    return ids, lengths, mask, rev, hidden, cache_f, cache_b, log_probs


def forward_batch(body: SharedBody, head: TaskHead, sentences: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Per-token label distributions for a batch; one (len, labels) array each."""
    _, lengths, _, _, _, _, _, log_probs = _run_forward(body, head, sentences)
    probs = np.exp(log_probs)
    return [probs[b, : lengths[b]] for b in range(len(sentences))]


def forward(body: SharedBody, head: TaskHead, sentence: Sequence[int]) -> np.ndarray:
    """Label distribution for every token of one sentence, shape (len, labels)."""
    return forward_batch(body, head, [sentence])[0]


def _check_golds(golds: Sequence[Sequence[int]], lengths: np.ndarray, label_count: int) -> np.ndarray:
    t_max = int(lengths.max())
    out = np.zeros((len(golds), t_max), dtype=np.int64)
    for b, g in enumerate(golds):
        row = np.asarray(g, dtype=np.int64)
        if len(row) != lengths[b]:
            raise InputError(f"gold labels for sentence {b} have length {len(row)}, expected {lengths[b]}")
        if len(row) and (row.min() < 0 or row.max() >= label_count):
            raise InputError(f"label id out of range in sentence {b}: head has {label_count} labels")
        out[b, : lengths[b]] = row
    return out


def compute_loss(body: SharedBody, head: TaskHead,
                 sentences: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> float:
    """Batch loss without touching gradients: mean over sentences of the
    per-token mean negative log-likelihood."""
    _, lengths, mask, _, _, _, _, log_probs = _run_forward(body, head, sentences)
    gold_ids = _check_golds(golds, lengths, head.label_count)
    picked = np.take_along_axis(log_probs, gold_ids[:, :, None], axis=2)[:, :, 0]
    per_sentence = -(picked * mask).sum(axis=1) / lengths
    return float(per_sentence.mean())


def backward_batch(body: SharedBody, head: TaskHead,
                   sentences: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> float:
    """Loss plus gradients, accumulated into every reachable ParamTensor."""
    ids, lengths, mask, rev, hidden, cache_f, cache_b, log_probs = _run_forward(body, head, sentences)
    gold_ids = _check_golds(golds, lengths, head.label_count)
    b_sz = len(sentences)

    picked = np.take_along_axis(log_probs, gold_ids[:, :, None], axis=2)[:, :, 0]
    per_sentence = -(picked * mask).sum(axis=1) / lengths
    loss = float(per_sentence.mean())

    # d(loss)/d(logits) = (softmax - onehot) weighted by 1/(B * len_b) per token
    dlogits = np.exp(log_probs)
    np.put_along_axis(dlogits, gold_ids[:, :, None],
                      np.take_along_axis(dlogits, gold_ids[:, :, None], axis=2) - 1.0, axis=2)
    weights = np.where(mask, 1.0 / (b_sz * lengths[:, None]), 0.0)
    dlogits *= weights[:, :, None]

    flat_hidden = hidden.reshape(-1, body.hidden_dim)
    flat_dlogits = dlogits.reshape(-1, head.label_count)
    head.projection.grad += flat_hidden.T @ flat_dlogits
    head.bias.grad += flat_dlogits.sum(axis=0)

    dhidden = dlogits @ head.projection.values.T
    half = body.hidden_dim // 2
    dx_f = _lstm_backward(body.fwd, cache_f, dhidden[:, :, :half])
    dh_b_rev = np.take_along_axis(dhidden[:, :, half:], rev[:, :, None], axis=1)
    dx_b_rev = _lstm_backward(body.bwd, cache_b, dh_b_rev)
    dx_b = np.take_along_axis(dx_b_rev, rev[:, :, None], axis=1)
    dx = dx_f + dx_b

    valid = mask.ravel()
    np.add.at(body.embeddings.grad, ids.ravel()[valid], dx.reshape(-1, body.embedding_dim)[valid])
    return loss


def backward(body: SharedBody, head: TaskHead,
             sentence: Sequence[int], golds: Sequence[int]) -> float:
    """Single-sentence loss (mean per-token NLL) with gradient accumulation."""
    return backward_batch(body, head, [sentence], [golds])


def gradient_check(body: SharedBody, head: TaskHead,
                   sentences: Sequence[Sequence[int]], golds: Sequence[Sequence[int]],
                   step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    Perturbs every entry of every parameter, so keep the model small.
    """
    params = iter_params(body, [head])
    for p in params:
        p.zero_grad()
    backward_batch(body, head, sentences, golds)
    worst = 0.0
    for p in params:
        flat_values = p.values.ravel()
        flat_grad = p.grad.ravel()
        for k in range(flat_values.size):
            orig = flat_values[k]
            flat_values[k] = orig + step
            up = compute_loss(body, head, sentences, golds)
            flat_values[k] = orig - step
            down = compute_loss(body, head, sentences, golds)
            flat_values[k] = orig
            fd = (up - down) / (2.0 * step)
            a = flat_grad[k]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, body: SharedBody, heads: Mapping[str, TaskHead]) -> None:
    """Write dims, vocab size and per-head label counts, then the raw
    parameter values (row-major little-endian float64, in header order)."""
    params = body.params()
    head_counts = {}
    for name, head in heads.items():
        head_counts[name] = head.label_count
        params.extend(head.params())
    header = {
        "embedding_dim": body.embedding_dim,
        "hidden_dim": body.hidden_dim,
        "vocab_size": body.vocab_size,
        "heads": head_counts,
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in params:
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SharedBody, dict[str, TaskHead]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a model checkpoint (bad magic)")
        header = json.loads(fh.readline().decode("utf-8"))
        rng = np.random.default_rng(0)  # placeholder init, overwritten below
        body = SharedBody(header["vocab_size"], header["embedding_dim"], header["hidden_dim"], rng)
        heads = {name: TaskHead(name, header["hidden_dim"], count, rng)
                 for name, count in header["heads"].items()}
        by_name = {p.name: p for p in iter_params(body, heads.values())}
        for entry in header["params"]:
            target = by_name.get(entry["name"])
            if target is None:
                raise InputError(f"{path}: unknown parameter '{entry['name']}' in checkpoint")
            shape = tuple(entry["shape"])
            if shape != target.shape:
                raise InputError(f"{path}: shape mismatch for '{entry['name']}'")
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * 8)
            if len(raw) != n * 8:
                raise InputError(f"{path}: truncated checkpoint")
            target.values[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return body, heads

"""Gated 1-D convolution over byte embeddings with temporal max pooling.

The network follows the Malconv layout: a 257-row byte embedding (PAD is
token 256), two parallel convolutions with stride equal to the window, a
sigmoid gate, a global max over windows, one ReLU hidden layer and a sigmoid
output. Everything is plain numpy with hand-written backprop.

Windows never overlap, so a convolution reduces to one matrix product of the
``(L, W*D)`` window matrix against the ``(F, W*D)`` filter bank.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import DegenerateDataset, ModelFormatError, ShapeMismatch

logger = logging.getLogger(__name__)

PAD = 256
VOCAB = 257
PROB_CLIP = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MODEL_SCHEMA = "echelon.convnet/1"
PARAM_NAMES = ("embedding", "conv_filters", "gate_filters", "conv_bias", "gate_bias",
               "fc_weights", "fc_bias", "out_weights", "out_bias")


@dataclass(frozen=True)
class Hyper:
    window: int = 64
    n_filters: int = 32
    embed_dim: int = 8
    hidden: int = 128
    semantic_aware: bool = False
    # Number of section ids in use; the per-filter section feature is id / n_sections.
    n_sections: int = 0

    @property
    def fc_in(self) -> int:
        return 2 * self.n_filters if self.semantic_aware else self.n_filters


@dataclass
class ConvNetModel:
    hyper: Hyper
    embedding: np.ndarray
    conv_filters: np.ndarray
    gate_filters: np.ndarray
    conv_bias: np.ndarray
    gate_bias: np.ndarray
    fc_weights: np.ndarray
    fc_bias: np.ndarray
    out_weights: np.ndarray
    out_bias: np.ndarray

    def __post_init__(self):
        # numpy collapses 0-d results to immutable scalars; keep arrays
        self.out_bias = np.asarray(self.out_bias, dtype=self.embedding.dtype)

    @classmethod
    def init(cls, hyper: Hyper, seed: int = 0, dtype=np.float32) -> "ConvNetModel":
        """Uniform fan-in initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        W, F, D, H = hyper.window, hyper.n_filters, hyper.embed_dim, hyper.hidden

        def u(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        return cls(
            hyper=hyper,
            embedding=u((VOCAB, D), 1),
            conv_filters=u((F, W, D), W * D),
            gate_filters=u((F, W, D), W * D),
            conv_bias=u((F,), W * D),
            gate_bias=u((F,), W * D),
            fc_weights=u((H, hyper.fc_in), hyper.fc_in),
            fc_bias=u((H,), hyper.fc_in),
            out_weights=u((H,), H),
            out_bias=u((), H),
        )

    @classmethod
    def zeros(cls, hyper: Hyper, dtype=np.float32) -> "ConvNetModel":
        shapes = param_shapes(hyper)
        return cls(hyper=hyper, **{k: np.zeros(v, dtype=dtype) for k, v in shapes.items()})

    @property
    def dtype(self):
        return self.embedding.dtype

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ConvNetModel":
        return ConvNetModel(self.hyper, **{k: v.copy() for k, v in self.params().items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params().values())

    def __eq__(self, other):
        if not isinstance(other, ConvNetModel) or self.hyper != other.hyper:
            return False
        return all(a.dtype == b.dtype and np.array_equal(a, b)
                   for a, b in zip(self.params().values(), other.params().values()))


def param_shapes(hyper: Hyper) -> dict:
    W, F, D, H = hyper.window, hyper.n_filters, hyper.embed_dim, hyper.hidden
    return {
        "embedding": (VOCAB, D),
        "conv_filters": (F, W, D),
        "gate_filters": (F, W, D),
        "conv_bias": (F,),
        "gate_bias": (F,),
        "fc_weights": (H, hyper.fc_in),
        "fc_bias": (H,),
        "out_weights": (H,),
        "out_bias": (),
    }


@dataclass
class ForwardRecord:
    pooled: np.ndarray
    argmax_window: np.ndarray
    probability: float
    section_features: Optional[np.ndarray] = None


def sigmoid(x):
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(x), copy=False)


def pad_tokens(data: bytes | np.ndarray, window: int, max_len: Optional[int] = None) -> np.ndarray:
    """Byte values as uint16 tokens, right-padded with PAD to a multiple of ``window``.

    An empty input becomes a single all-PAD window.
    """
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if max_len is not None:
        arr = arr[:max_len]
    n = max(len(arr), 1)
    padded = -(-n // window) * window
    out = np.full(padded, PAD, dtype=np.uint16)
    out[:len(arr)] = arr
    return out


def _check_input(model: ConvNetModel, tokens: np.ndarray, section_ids) -> int:
    W = model.hyper.window
    if tokens.ndim != 1 or len(tokens) == 0 or len(tokens) % W:
        raise ShapeMismatch(f"token length {len(tokens)} is not a positive multiple of W={W}")
    L = len(tokens) // W
    if model.hyper.semantic_aware:
        if section_ids is None or len(section_ids) != L:
            got = None if section_ids is None else len(section_ids)
            raise ShapeMismatch(f"semantic model needs {L} section ids, got {got}")
    return L


class _Batch:
    """Forward-pass cache for a list of samples, reused by the backward pass."""

    def __init__(self, model: ConvNetModel, tokens_list: Sequence[np.ndarray],
                 section_ids_list: Optional[Sequence] = None):
        hp = model.hyper
        W, D, F = hp.window, hp.embed_dim, hp.n_filters
        dt = model.dtype
        lengths = [_check_input(model, t, None if section_ids_list is None else section_ids_list[i])
                   for i, t in enumerate(tokens_list)]
        self.tokens = np.concatenate([np.asarray(t) for t in tokens_list]).reshape(-1, W)
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        X = model.embedding[self.tokens].reshape(-1, W * D)
        self.X = X
        Kc = model.conv_filters.reshape(F, W * D)
        Kg = model.gate_filters.reshape(F, W * D)
        A = X @ Kc.T
        A += model.conv_bias
        G = X @ Kg.T
        G += model.gate_bias
        G = sigmoid(G)
        act = A * G
        B = len(tokens_list)
        argmax = np.empty((B, F), dtype=np.int64)
        for b in range(B):
            argmax[b] = np.argmax(act[self.offsets[b]:self.offsets[b + 1]], axis=0)
        rows = argmax + self.offsets[:-1, None]
        cols = np.arange(F)
        self.rows = rows
        self.A_sel = A[rows, cols]
        self.G_sel = G[rows, cols]
        self.pooled = act[rows, cols]
        self.argmax = argmax
        if hp.semantic_aware:
            scale = float(max(hp.n_sections, 1))
            feats = np.stack([np.asarray(section_ids_list[b], dtype=np.float64)[argmax[b]]
                              for b in range(B)]) / scale
            self.feats = feats.astype(dt)
            Z = np.concatenate([self.pooled, self.feats], axis=1)
        else:
            self.feats = None
            Z = self.pooled
        self.Z = Z
        self.h_pre = Z @ model.fc_weights.T + model.fc_bias
        self.h = np.maximum(self.h_pre, 0)
        self.logit = self.h @ model.out_weights + model.out_bias
        self.prob = sigmoid(self.logit)


def forward(model: ConvNetModel, tokens: np.ndarray, section_ids=None) -> ForwardRecord:
    """Score one token sequence; ``argmax_window`` ties resolve to the lowest index."""
    tokens = np.asarray(tokens)
    batch = _Batch(model, [tokens], None if section_ids is None else [section_ids])
    return ForwardRecord(
        pooled=batch.pooled[0].copy(),
        argmax_window=batch.argmax[0].copy(),
        probability=float(batch.prob[0]),
        section_features=None if batch.feats is None else batch.feats[0].copy(),
    )


def forward_batch(model: ConvNetModel, tokens_list, section_ids_list=None) -> list[ForwardRecord]:
    if not len(tokens_list):
        return []
    batch = _Batch(model, tokens_list, section_ids_list)
    return [ForwardRecord(batch.pooled[b].copy(), batch.argmax[b].copy(), float(batch.prob[b]),
                          None if batch.feats is None else batch.feats[b].copy())
            for b in range(len(tokens_list))]


def bce_loss(prob, target):
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_CLIP, 1 - PROB_CLIP)
    t = np.asarray(target, dtype=np.float64)
    return -(t * np.log(p) + (1 - t) * np.log1p(-p))


def _backward_batch(model: ConvNetModel, batch: _Batch, targets: np.ndarray, weights: np.ndarray):
    """Gradients of ``sum_b weights[b] * BCE_b``.

    The clip only bounds the loss value; the logit gradient is ``p - y``.
    """
    hp = model.hyper
    W, D, F = hp.window, hp.embed_dim, hp.n_filters
    dt = model.dtype
    dlogit = ((batch.prob - targets) * weights).astype(dt)
    g = {}
    g["out_weights"] = dlogit @ batch.h
    g["out_bias"] = np.asarray(dlogit.sum(), dtype=dt)
    dh_pre = np.outer(dlogit, model.out_weights) * (batch.h_pre > 0)
    g["fc_weights"] = dh_pre.T @ batch.Z
    g["fc_bias"] = dh_pre.sum(axis=0)
    dpooled = (dh_pre @ model.fc_weights)[:, :F]
    # Max pooling routes the gradient to the argmax window of each filter only.
    dA = dpooled * batch.G_sel
    dGp = dpooled * batch.A_sel * batch.G_sel * (1 - batch.G_sel)
    g["conv_bias"] = dA.sum(axis=0)
    g["gate_bias"] = dGp.sum(axis=0)
    Xsel = batch.X[batch.rows]  # (B, F, W*D)
    g["conv_filters"] = np.einsum("bf,bfk->fk", dA, Xsel).reshape(F, W, D)
    g["gate_filters"] = np.einsum("bf,bfk->fk", dGp, Xsel).reshape(F, W, D)
    Kc = model.conv_filters.reshape(F, W * D)
    Kg = model.gate_filters.reshape(F, W * D)
    dX = dA[:, :, None] * Kc[None] + dGp[:, :, None] * Kg[None]  # (B, F, W*D)
    emb_grad = np.zeros_like(model.embedding)
    tok = batch.tokens[batch.rows]  # (B, F, W)
    np.add.at(emb_grad, tok.reshape(-1), dX.reshape(-1, D))
    g["embedding"] = emb_grad
    return {k: np.asarray(v, dtype=dt) for k, v in g.items()}


def backward(model: ConvNetModel, tokens, section_ids, target) -> tuple[dict, float]:
    """Exact gradients and the clipped binary cross-entropy of one sample."""
    tokens = np.asarray(tokens)
    batch = _Batch(model, [tokens], None if section_ids is None else [section_ids])
    targets = np.array([float(target)])
    grads = _backward_batch(model, batch, targets, np.ones(1))
    return grads, float(bce_loss(batch.prob[0], target))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_model(cls, model: ConvNetModel) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params().items()},
                   {k: np.zeros_like(p) for k, p in model.params().items()})


def adam_step(model: ConvNetModel, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One in-place Adam update; returns ``(model, state)`` for chaining."""
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name in PARAM_NAMES:
        p = getattr(model, name)
        gr = grads[name]
        if gr.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {gr.shape} / state {state.m[name].shape} "
                                f"vs parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * gr
        v *= beta2
        v += (1 - beta2) * gr * gr
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        setattr(model, name, np.asarray(p - step, dtype=p.dtype))
    return model, state


# ----------------------------------------------------------------- training


@dataclass
class Example:
    tokens: np.ndarray
    label: int
    section_ids: Optional[np.ndarray] = None


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.val_loss)


def _batches_by_size(examples: Sequence[Example], batch_size: int, order: Iterable[int]):
    order = list(order)
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i:i + batch_size]]


def predict_scores(model: ConvNetModel, examples: Sequence[Example], batch_size: int = 64,
                   max_tokens: int = 1 << 21) -> np.ndarray:
    """Malware probabilities for each example, in order."""
    out = np.empty(len(examples), dtype=np.float64)
    i = 0
    while i < len(examples):
        # Bound the window-matrix footprint for large samples.
        j, total = i, 0
        while j < len(examples) and j - i < batch_size and (j == i or total + len(examples[j].tokens) <= max_tokens):
            total += len(examples[j].tokens)
            j += 1
        chunk = examples[i:j]
        sids = [e.section_ids for e in chunk] if model.hyper.semantic_aware else None
        batch = _Batch(model, [e.tokens for e in chunk], sids)
        out[i:j] = batch.prob
        i = j
    return out


def mean_loss(model: ConvNetModel, examples: Sequence[Example], batch_size: int = 64) -> float:
    p = predict_scores(model, examples, batch_size)
    y = np.array([e.label for e in examples], dtype=np.float64)
    return float(bce_loss(p, y).mean())


def train(model: ConvNetModel, dataset: Sequence[Example], validation: Sequence[Example],
          batch_size: int = 64, max_epochs: int = 200, patience: int = 5, lr: float = 1e-3,
          seed: int = 0, class_weight: Optional[dict] = None) -> tuple[ConvNetModel, TrainHistory]:
    """Mini-batch Adam with early stopping on validation loss.

    Training stops once ``max(patience, 1)`` consecutive epochs fail to improve
    the best validation loss; the best epoch's parameters are returned.
    """
    if not dataset or not validation:
        raise DegenerateDataset("training and validation sets must be non-empty")
    labels = np.array([e.label for e in dataset])
    if len(np.unique(labels)) < 2:
        raise DegenerateDataset("training set contains a single class")
    model = model.copy()
    state = AdamState.for_model(model)
    rng = np.random.default_rng(seed)
    cw = np.array([1.0, 1.0]) if class_weight is None else np.array([class_weight[0], class_weight[1]])
    history = TrainHistory()
    best = model.copy()
    best_loss = np.inf
    stale = 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for chunk in _batches_by_size(dataset, batch_size, order):
            sids = [e.section_ids for e in chunk] if model.hyper.semantic_aware else None
            batch = _Batch(model, [e.tokens for e in chunk], sids)
            y = np.array([e.label for e in chunk], dtype=np.float64)
            w = cw[y.astype(int)] / len(chunk)
            epoch_loss += float((bce_loss(batch.prob, y) * w).sum()) * len(chunk)
            grads = _backward_batch(model, batch, y, w)
            adam_step(model, grads, state, lr)
        history.train_loss.append(epoch_loss / len(dataset))
        vloss = mean_loss(model, validation, batch_size)
        history.val_loss.append(vloss)
        logger.debug("epoch %d train %.5f val %.5f", epoch, history.train_loss[-1], vloss)
        if vloss < best_loss:
            best_loss, best, stale = vloss, model.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= max(patience, 1):
                break
    if not best.all_finite():
        raise FloatingPointError("non-finite parameters after training")
    return best, history


# ------------------------------------------------------------ serialization


def _encode_array(a: np.ndarray) -> dict:
    dtype = "<f8" if a.dtype == np.float64 else "<f4"
    raw = np.ascontiguousarray(a, dtype=dtype).tobytes()
    return {"shape": list(a.shape), "dtype": dtype, "data": base64.b64encode(raw).decode("ascii")}


def _decode_array(doc: dict) -> np.ndarray:
    if doc.get("dtype") not in ("<f4", "<f8"):
        raise ModelFormatError(f"unsupported dtype {doc.get('dtype')!r}")
    raw = base64.b64decode(doc["data"])
    arr = np.frombuffer(raw, dtype=doc["dtype"])
    shape = tuple(doc["shape"])
    if arr.size != int(np.prod(shape)):
        raise ModelFormatError(f"payload of {arr.size} values does not fit shape {shape}")
    native = np.float64 if doc["dtype"] == "<f8" else np.float32
    return arr.reshape(shape).astype(native)


def model_to_dict(model: ConvNetModel) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "hyper": {
            "window": model.hyper.window,
            "n_filters": model.hyper.n_filters,
            "embed_dim": model.hyper.embed_dim,
            "hidden": model.hyper.hidden,
            "semantic_aware": model.hyper.semantic_aware,
            "n_sections": model.hyper.n_sections,
        },
        "params": {k: _encode_array(v) for k, v in model.params().items()},
    }


def model_from_dict(doc: dict) -> ConvNetModel:
    if doc.get("schema") != MODEL_SCHEMA:
        raise ModelFormatError(f"unknown model schema {doc.get('schema')!r}")
    hyper = Hyper(**doc["hyper"])
    params = {k: _decode_array(doc["params"][k]) for k in PARAM_NAMES}
    for k, shape in param_shapes(hyper).items():
        if params[k].shape != tuple(shape):
            raise ModelFormatError(f"{k} has shape {params[k].shape}, expected {shape}")
    return ConvNetModel(hyper, **params)


def dumps(model: ConvNetModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1)


def loads(text: str) -> ConvNetModel:
    return model_from_dict(json.loads(text))


def save(model: ConvNetModel, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps(model))


def load(path) -> ConvNetModel:
    with open(path, encoding="ascii") as fh:
        return loads(fh.read())

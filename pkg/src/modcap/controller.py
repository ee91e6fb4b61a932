"""Module collocation: attention over module outputs, the tiny recurrent
controller that weighs the four modules each step, and the auxiliary
word-class supervision for those weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .errors import ShapeError
from .layers import Linear
from .tensor import (
    FLOAT32,
    LstmParams,
    Rng,
    Tensor,
    clamp_min,
    concat,
    log,
    lstm_step,
    make_lstm_params,
    matmul,
    pick,
    reshape,
    slice_axis,
    softmax,
    sum_,
    tanh,
    xavier_uniform,
    zeros,
)

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-12


class ModuleLabel(IntEnum):
    """Index order matches the weight vector layout everywhere."""

    OBJECT = 0
    ATTRIBUTE = 1
    RELATION = 2
    FUNCTION = 3


# word-class tag -> module responsible for producing that kind of word
_TAG_TO_LABEL = {
    "NN": ModuleLabel.OBJECT,
    "ADJ": ModuleLabel.ATTRIBUTE,
    "VB": ModuleLabel.RELATION,
    "PREP": ModuleLabel.RELATION,
    "CD": ModuleLabel.RELATION,
}

# tags we expect to see but that carry no visual content
_FUNCTION_TAGS = {"DT", "CC", "RB", "EOS", "OTHER"}


def pos_to_module_label(tag: str) -> ModuleLabel:
    label = _TAG_TO_LABEL.get(tag)
    if label is not None:
        return label
    if tag not in _FUNCTION_TAGS:
        logger.warning("unknown word-class tag %r, treating as FUNCTION", tag)
    return ModuleLabel.FUNCTION


class Strategy(str, Enum):
    """How the four module weights are produced each decoding step."""

    SOFT = "soft"
    HARD = "hard"
    UNIFORM = "uniform"


class AdditiveAttention:
    """score_n = w_a . tanh(W_v v_n + W_h h); alpha = softmax(scores).

    Returns the weight vector and the alpha-weighted sum of rows.  Works on
    (N, d_v) with an (d_c,) query or batched (B, N, d_v) with (B, d_c).
    """

    def __init__(self, d_v: int, d_c: int, d_a: int, rng: Rng, dtype=FLOAT32):
        self.d_v = d_v
        self.d_a = d_a
        self.W_v = xavier_uniform(rng, (d_a, d_v), d_v, d_a, dtype=dtype)
        self.W_h = xavier_uniform(rng, (d_a, d_c), d_c, d_a, dtype=dtype)
        self.w_a = xavier_uniform(rng, (d_a,), d_a, 1, dtype=dtype)

    def __call__(self, values: Tensor, query: Tensor):
        single = values.ndim == 2
        if single:
            values = reshape(values, (1,) + values.shape)
            query = reshape(query, (1, -1))
        b, n, _ = values.shape
        if n == 0:
            raise ValueError("attention over an empty value set")
        keys = reshape(matmul(reshape(values, (-1, self.d_v)), self.W_v.T), (b, n, self.d_a))
        q = reshape(matmul(query, self.W_h.T), (b, 1, self.d_a))
        scores = reshape(matmul(reshape(tanh(keys + q), (-1, self.d_a)), self.w_a), (b, n))
        alpha = softmax(scores, axis=-1)
        attended = sum_(reshape(alpha, (b, n, 1)) * values, axis=1)
        if single:
            alpha = reshape(alpha, (-1,))
            attended = reshape(attended, (-1,))
        return alpha, attended

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.Wv": self.W_v, f"{prefix}.Wh": self.W_h, f"{prefix}.wa": self.w_a}


@dataclass
class ControllerState:
    h: Tensor
    c: Tensor


@dataclass
class ControllerOutput:
    weights: Tensor        # what fuse() consumes (one-hot under HARD)
    soft: Tensor | None    # noise-free softmax of the logits, None under UNIFORM
    logits: Tensor | None
    state: ControllerState


def straight_through(y_soft: Tensor) -> Tensor:
    """One-hot forward value with the soft distribution's gradient."""
    hard = np.zeros_like(y_soft.data)
    flat = hard.reshape(-1, hard.shape[-1])
    idx = np.argmax(y_soft.data.reshape(-1, hard.shape[-1]), axis=-1)
    flat[np.arange(flat.shape[0]), idx] = 1.0
    return Tensor(hard) - y_soft.detach() + y_soft


class ModuleController:
    """One-layer LSTM over [v_O, v_A, v_R, c] followed by a 4-way softmax.

    SOFT keeps the softmax as-is, HARD draws a Gumbel-softmax sample and
    snaps it to a one-hot straight-through estimate, UNIFORM skips the
    network entirely and pins every weight to 1.
    """

    def __init__(self, d_v: int, d_c: int, rng: Rng, tau: float = 1.0, dtype=FLOAT32):
        self.lstm = make_lstm_params(rng, 3 * d_v + d_c, d_c, dtype=dtype)
        self.proj = Linear(d_c, len(ModuleLabel), rng, dtype=dtype)
        self.tau = tau
        self.dtype = dtype

    def init_state(self, batch: int, d_c: int) -> ControllerState:
        return ControllerState(h=zeros((batch, d_c), dtype=self.dtype),
                               c=zeros((batch, d_c), dtype=self.dtype))

    def step(self, v_obj: Tensor, v_attr: Tensor, v_rel: Tensor, context: Tensor,
             state: ControllerState, strategy: Strategy,
             rng: Rng | None = None) -> ControllerOutput:
        if not isinstance(strategy, Strategy):
            raise ValueError(f"unknown collocation strategy: {strategy!r}")
        if strategy is Strategy.UNIFORM:
            batch = v_obj.shape[0] if v_obj.ndim == 2 else None
            shape = (batch, len(ModuleLabel)) if batch else (len(ModuleLabel),)
            ones = Tensor(np.ones(shape, dtype=v_obj.data.dtype))
            return ControllerOutput(weights=ones, soft=None, logits=None, state=state)
        x = concat([v_obj, v_attr, v_rel, context], axis=-1)
        h, c = lstm_step(x, state.h, state.c, self.lstm)
        logits = self.proj(h)
        soft = softmax(logits, axis=-1)
        if strategy is Strategy.SOFT:
            weights = soft
        else:  # HARD
            if rng is not None:
                noise = np.fromiter((rng.gumbel() for _ in range(logits.data.size)),
                                    dtype=np.float64, count=logits.data.size)
                noise = Tensor(noise.reshape(logits.shape).astype(logits.data.dtype))
            else:
                noise = Tensor(np.zeros(logits.shape, dtype=logits.data.dtype))
            y = softmax((logits + noise) * (1.0 / self.tau), axis=-1)
            weights = straight_through(y)
        return ControllerOutput(weights=weights, soft=soft, logits=logits,
                                state=ControllerState(h=h, c=c))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.lstm.W": self.lstm.W, f"{prefix}.lstm.b": self.lstm.b}
        out.update(self.proj.params(f"{prefix}.proj"))
        return out


def fuse(weights: Tensor, v_obj: Tensor, v_attr: Tensor, v_rel: Tensor,
         v_func: Tensor) -> Tensor:
    """Concat of the four module vectors, each scaled by its weight."""
    parts = (v_obj, v_attr, v_rel, v_func)
    if weights.shape[-1] != len(parts):
        raise ShapeError(f"expected {len(parts)} module weights, got shape {weights.shape}")
    d_v = parts[0].shape[-1]
    for p in parts:
        if p.shape[-1] != d_v:
            raise ShapeError(f"module outputs disagree in width: {p.shape[-1]} vs {d_v}")
    axis = weights.ndim - 1
    blocks = [slice_axis(weights, axis, k, k + 1) * part for k, part in enumerate(parts)]
    return concat(blocks, axis=-1)


def linguistic_loss(weights: Tensor, label: ModuleLabel) -> Tensor:
    """Negative log of the weight assigned to the gold module."""
    w = reshape(weights, (1, -1)) if weights.ndim == 1 else weights
    target = pick(w, [int(label)] * w.shape[0])
    return -sum_(log(clamp_min(target, LOSS_EPS)))

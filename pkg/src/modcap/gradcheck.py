"""Gradient verification battery.

Three tiers, all in float64 against central differences:

* primitives: every differentiable op, one case each, inputs kept away
  from kinks (relu at zero, clamp at its threshold) so the numeric
  derivative is trustworthy;
* composites: seeded random chains of ops, because op-by-op checks miss
  bugs in how gradients accumulate through shared nodes;
* decoder: a miniature two-unit captioning model driven for three
  teacher-forced steps, checking the gradient of the full objective with
  respect to every parameter and both feature inputs.

Everything is deterministic in the seed, so a passing battery is
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .decoder import CaptionModel
from .tensor import (
    FLOAT64,
    LstmParams,
    Rng,
    Tensor,
    clamp_min,
    concat,
    exp,
    finite_diff_grad,
    gather_rows,
    leaky_relu,
    log,
    lstm_step,
    matmul,
    max_relative_error,
    mean_pool_rows,
    pick,
    relu,
    sigmoid,
    slice_axis,
    softmax,
    sum_,
    tanh,
    transpose,
)

DEFAULT_TOLERANCE = 1e-3
FD_EPS = 1e-4
N_COMPOSITES = 25


@dataclass
class CaseResult:
    section: str
    name: str
    error: float
    ok: bool


def _t(rng: Rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform_array(shape, low, high, dtype=FLOAT64),
                  requires_grad=True, dtype=FLOAT64)


def _away_from_zero(rng: Rng, shape, margin=0.2) -> Tensor:
    """Values in [-1, -margin] or [margin, 1]: finite differences never
    step across the relu kink."""
    mag = rng.uniform_array(shape, margin, 1.0, dtype=FLOAT64)
    sign = np.where(rng.uniform_array(shape, 0.0, 1.0, dtype=FLOAT64) < 0.5, -1.0, 1.0)
    return Tensor(mag * sign, requires_grad=True, dtype=FLOAT64)


def check_case(section: str, name: str, f, x: Tensor,
               tol: float = DEFAULT_TOLERANCE) -> CaseResult:
    """Compare the backward gradient of f at x with central differences."""
    x.grad = None
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    numeric = finite_diff_grad(f, x, eps=FD_EPS)
    err = max_relative_error(analytic, numeric)
    return CaseResult(section=section, name=name, error=err, ok=err < tol)


# -- primitives ----------------------------------------------------------------


def primitive_cases(seed: int):
    """(name, scalar function, input tensor) triples covering every op."""
    rng = Rng(seed).derive(71)
    w = Tensor(rng.uniform_array((4, 3), -1, 1, dtype=FLOAT64), dtype=FLOAT64)
    w2 = Tensor(rng.uniform_array((3, 5), -1, 1, dtype=FLOAT64), dtype=FLOAT64)
    bias = Tensor(rng.uniform_array((3,), -1, 1, dtype=FLOAT64), dtype=FLOAT64)
    other = Tensor(rng.uniform_array((2, 4), -1, 1, dtype=FLOAT64), dtype=FLOAT64)
    stacked = Tensor(rng.uniform_array((2, 4, 3), -1, 1, dtype=FLOAT64), dtype=FLOAT64)
    idx_rows = np.array([2, 0, 1])
    idx_cols = np.array([1, 3, 0, 2])
    lstm = LstmParams(
        W=Tensor(rng.uniform_array((7, 12), -0.5, 0.5, dtype=FLOAT64), dtype=FLOAT64),
        b=Tensor(rng.uniform_array((12,), -0.5, 0.5, dtype=FLOAT64), dtype=FLOAT64))
    h0 = Tensor(rng.uniform_array((3,), -0.5, 0.5, dtype=FLOAT64), dtype=FLOAT64)
    c0 = Tensor(rng.uniform_array((3,), -0.5, 0.5, dtype=FLOAT64), dtype=FLOAT64)
    x_fixed = Tensor(np.linspace(-1, 1, 4), dtype=FLOAT64)

    cases = [
        ("add_broadcast", lambda x: (x + bias).sum(), _t(rng, (2, 3))),
        ("sub", lambda x: (x - bias).sum(), _t(rng, (2, 3))),
        ("mul_broadcast", lambda x: (x * bias).sum(), _t(rng, (2, 3))),
        ("div", lambda x: (x / Tensor(np.full((2, 3), 2.5), dtype=FLOAT64)).sum(),
         _t(rng, (2, 3))),
        ("neg", lambda x: (-x).sum(), _t(rng, (2, 3))),
        ("matmul_left", lambda x: matmul(x, w2).sum(), _t(rng, (2, 3))),
        ("matmul_right", lambda x: matmul(w, x).sum(), _t(rng, (3, 5))),
        ("matmul_vec", lambda x: matmul(x, w2).sum(), _t(rng, (3,))),
        ("matmul_batched", lambda x: matmul(x, w2).sum(), _t(rng, (2, 4, 3))),
        ("transpose", lambda x: (transpose(x) * other).sum(), _t(rng, (4, 2))),
        ("transpose_axes",
         lambda x: (transpose(x, (1, 0, 2)) * stacked).sum(), _t(rng, (4, 2, 3))),
        ("reshape",
         lambda x: (x.reshape(6) * Tensor(np.arange(6.0), dtype=FLOAT64)).sum(),
         _t(rng, (2, 3))),
        ("sum_axis", lambda x: (sum_(x, axis=0) * bias).sum(), _t(rng, (4, 3))),
        ("sum_keepdims", lambda x: sum_(x, axis=1, keepdims=True).sum(), _t(rng, (4, 3))),
        ("mean_pool_rows", lambda x: (mean_pool_rows(x) * bias).sum(), _t(rng, (5, 3))),
        ("concat", lambda x: concat([x, x * 2.0], axis=-1).sum(), _t(rng, (2, 3))),
        ("slice_axis", lambda x: slice_axis(x, 1, 1, 3).sum(), _t(rng, (2, 4))),
        ("gather_rows", lambda x: (gather_rows(x, idx_rows) * bias).sum(), _t(rng, (4, 3))),
        ("pick", lambda x: pick(x, idx_cols).sum(), _t(rng, (4, 5))),
        ("tanh", lambda x: tanh(x).sum(), _t(rng, (2, 3))),
        ("sigmoid", lambda x: sigmoid(x).sum(), _t(rng, (2, 3))),
        ("relu", lambda x: relu(x).sum(), _away_from_zero(rng, (3, 4))),
        ("leaky_relu", lambda x: leaky_relu(x, 0.1).sum(), _away_from_zero(rng, (3, 4))),
        ("exp", lambda x: exp(x).sum(), _t(rng, (2, 3))),
        ("log", lambda x: log(x).sum(), _t(rng, (2, 3), low=0.3, high=1.5)),
        ("clamp_min", lambda x: clamp_min(x, 0.0).sum(), _away_from_zero(rng, (3, 4))),
        ("softmax",
         lambda x: (softmax(x, axis=-1) * Tensor(np.arange(5.0), dtype=FLOAT64)).sum(),
         _t(rng, (3, 5))),
        ("fanout", lambda x: (x * x + tanh(x) * x).sum(), _t(rng, (2, 3))),
        ("lstm_step_x", lambda x: _lstm_scalar(x, h0, c0, lstm), _t(rng, (4,))),
        ("lstm_step_h", lambda h: _lstm_scalar(x_fixed, h, c0, lstm), _t(rng, (3,))),
        ("lstm_step_c", lambda c: _lstm_scalar(x_fixed, h0, c, lstm), _t(rng, (3,))),
        ("lstm_step_W",
         lambda W: _lstm_scalar(x_fixed, h0, c0, LstmParams(W=W, b=lstm.b)),
         _t(rng, (7, 12), low=-0.5, high=0.5)),
        ("lstm_step_b",
         lambda b: _lstm_scalar(x_fixed, h0, c0, LstmParams(W=lstm.W, b=b)),
         _t(rng, (12,), low=-0.5, high=0.5)),
    ]
    return cases


def _lstm_scalar(x, h, c, params):
    h2, c2 = lstm_step(x, h, c, params)
    return (h2 * h2).sum() + c2.sum()


# -- random composites ---------------------------------------------------------

# every op preserves the (3, 4) shape, so chains compose in any order
_CHAIN_OPS = (
    ("tanh", lambda x, rng: tanh(x)),
    ("sigmoid", lambda x, rng: sigmoid(x)),
    ("leaky", lambda x, rng: leaky_relu(x, 0.05)),
    ("softmax", lambda x, rng: softmax(x, axis=-1)),
    ("exp_scaled", lambda x, rng: exp(x * 0.5)),
    ("log_safe", lambda x, rng: log(sigmoid(x) + 0.1)),
    ("square", lambda x, rng: x * x),
    ("shift", lambda x, rng: x + tanh(x)),
    ("gate", lambda x, rng: x * sigmoid(x)),
    ("mix", lambda x, rng: matmul(x, Tensor(
        rng.uniform_array((4, 4), -0.7, 0.7, dtype=FLOAT64), dtype=FLOAT64))),
)


def composite_cases(seed: int, count: int = N_COMPOSITES):
    """Seeded random chains of 3 to 6 ops over a (3, 4) input."""
    cases = []
    for i in range(count):
        rng = Rng(seed).derive(5000 + i)
        picked = [_CHAIN_OPS[rng.randint(len(_CHAIN_OPS))]
                  for _ in range(3 + rng.randint(4))]
        weight_seed = Rng(seed).derive(6000 + i).get_state()[0]

        def chain(x, picked=picked, weight_seed=weight_seed):
            r = Rng(weight_seed)        # fresh per call, so chain is pure
            y = x
            for _, fn in picked:
                y = fn(y, r)
            return (y * y).sum()

        label = "-".join(name for name, _ in picked)
        cases.append((f"chain{i:02d}[{label}]", chain, _t(rng, (3, 4))))
    return cases


# -- full decoder step ----------------------------------------------------------


def _tiny_decoder():
    cfg = ModelConfig(vocab_size=7, d_r=8, d_v=4, d_c=4, d_a=3, heads=2,
                      m_units=2, strategy="soft")
    model = CaptionModel(cfg, Rng(1234).derive(9), dtype=FLOAT64)
    # zero-initialized biases leave step-0 pre-activations exactly on the
    # leaky-relu kink, where central differences lie; jitter everything to
    # a generic position first
    noise = Rng(1234).derive(11)
    params = model.named_parameters()
    for name in sorted(params):
        p = params[name]
        p.data = p.data + noise.uniform_array(p.data.shape, -0.3, 0.3, dtype=FLOAT64)
    rng = Rng(1234).derive(10)
    r_obj = rng.uniform_array((2, 8), -1, 1, dtype=FLOAT64)
    r_attr = rng.uniform_array((2, 8), -1, 1, dtype=FLOAT64)
    tokens = [1, 4, 5, 6]          # begin token then three words
    labels = [0, 2, 3]
    return model, r_obj, r_attr, tokens, labels


def _decoder_loss(model, r_obj, r_attr, tokens, labels):
    """Token negative log-likelihood plus module supervision, three steps."""
    enc = model.encode(r_obj, r_attr)
    states = model.init_state(1)
    loss = None
    for t in range(len(tokens) - 1):
        dist, states, traces = model.step([tokens[t]], enc, states)
        nll = -log(clamp_min(pick(dist, [tokens[t + 1]]), 1e-12)).sum()
        for tr in traces:
            nll = nll - log(clamp_min(pick(tr.soft, [labels[t]]), 1e-12)).sum()
        loss = nll if loss is None else loss + nll
    return loss


def decoder_results(tol: float = DEFAULT_TOLERANCE) -> list[CaseResult]:
    model, r_obj, r_attr, tokens, labels = _tiny_decoder()
    params = model.named_parameters()

    for p in params.values():
        p.grad = None
    loss = _decoder_loss(model, r_obj, r_attr, tokens, labels)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    results = []
    for name in sorted(params):
        p = params[name]

        def f(probe, p=p):
            saved = p.data
            p.data = probe.data
            try:
                return _decoder_loss(model, r_obj, r_attr, tokens, labels)
            finally:
                p.data = saved

        numeric = finite_diff_grad(f, Tensor(p.data.copy(), dtype=FLOAT64),
                                   eps=FD_EPS)
        err = max_relative_error(analytic[name], numeric)
        results.append(CaseResult("decoder", f"param:{name}", err, err < tol))

    for label, fn in (
        ("input:r_obj",
         lambda probe: _decoder_loss(model, probe, Tensor(r_attr, dtype=FLOAT64),
                                     tokens, labels)),
        ("input:r_attr",
         lambda probe: _decoder_loss(model, Tensor(r_obj, dtype=FLOAT64), probe,
                                     tokens, labels)),
    ):
        x = Tensor((r_obj if "obj" in label else r_attr).copy(),
                   requires_grad=True, dtype=FLOAT64)
        results.append(check_case("decoder", label, fn, x, tol))
    return results


# -- battery -------------------------------------------------------------------


SECTIONS = ("primitives", "composites", "decoder")


def run_battery(sections=SECTIONS, seed: int = 0,
                tol: float = DEFAULT_TOLERANCE) -> list[CaseResult]:
    results = []
    if "primitives" in sections:
        for name, f, x in primitive_cases(seed):
            results.append(check_case("primitives", name, f, x, tol))
    if "composites" in sections:
        for name, f, x in composite_cases(seed):
            results.append(check_case("composites", name, f, x, tol))
    if "decoder" in sections:
        results.extend(decoder_results(tol))
    return results

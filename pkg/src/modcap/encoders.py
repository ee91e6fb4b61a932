"""The four encoder modules.

Three of them re-embed region features into a common d_v space, each from
its own evidence: the object module and relation module read the
object-oriented feature matrix, the attribute module reads the
attribute-oriented one.  The fourth (function) module has no visual input
at all; it maps the decoder's recurrent context into the same space so
non-visual words have something to attend to.

All modules accept a single feature matrix (N, d_r) or a batch
(B, N, d_r) and return matching (N, d_v) / (B, N, d_v) outputs.
"""

from __future__ import annotations

import math

from .errors import ConfigError
from .layers import Linear
from .tensor import (
    FLOAT32,
    Rng,
    Tensor,
    concat,
    leaky_relu,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
    xavier_uniform,
)


class ObjectModule:
    """Rowwise re-embedding of object features: LeakyReLU(R W + b)."""

    def __init__(self, d_r: int, d_v: int, rng: Rng, slope: float = 0.01, dtype=FLOAT32):
        self.fc = Linear(d_r, d_v, rng, dtype=dtype)
        self.slope = slope

    def __call__(self, r: Tensor) -> Tensor:
        return leaky_relu(self.fc(r), self.slope)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.fc.params(f"{prefix}.fc")


class AttributeModule:
    """Same shape as ObjectModule but trained on attribute features."""

    def __init__(self, d_r: int, d_v: int, rng: Rng, slope: float = 0.01, dtype=FLOAT32):
        self.fc = Linear(d_r, d_v, rng, dtype=dtype)
        self.slope = slope

    def __call__(self, r: Tensor) -> Tensor:
        return leaky_relu(self.fc(r), self.slope)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.fc.params(f"{prefix}.fc")


class RelationModule:
    """Multi-head self-attention over regions, then a two-layer head.

    Each head i projects the rows of R with three (d_r, d_k) matrices to
    form queries, keys and values, mixes values by row-softmaxed scaled
    dot products, and the concatenated heads pass through an output
    projection and FC(d_r) -> ReLU -> FC(d_v) -> LeakyReLU.
    """

    def __init__(self, d_r: int, d_v: int, heads: int, rng: Rng,
                 slope: float = 0.01, dtype=FLOAT32):
        if d_r % heads != 0:
            raise ConfigError(f"d_r={d_r} is not divisible by heads={heads}")
        self.d_r = d_r
        self.heads = heads
        self.d_k = d_r // heads
        self.slope = slope
        self.w_q = [xavier_uniform(rng, (d_r, self.d_k), d_r, self.d_k, dtype=dtype)
                    for _ in range(heads)]
        self.w_k = [xavier_uniform(rng, (d_r, self.d_k), d_r, self.d_k, dtype=dtype)
                    for _ in range(heads)]
        self.w_v = [xavier_uniform(rng, (d_r, self.d_k), d_r, self.d_k, dtype=dtype)
                    for _ in range(heads)]
        self.w_out = xavier_uniform(rng, (d_r, d_r), d_r, d_r, dtype=dtype)
        self.fc1 = Linear(d_r, d_r, rng, dtype=dtype)
        self.fc2 = Linear(d_r, d_v, rng, dtype=dtype)

    def _project(self, r: Tensor, w: Tensor) -> Tensor:
        b, n, _ = r.shape
        return reshape(matmul(reshape(r, (-1, self.d_r)), w), (b, n, self.d_k))

    def __call__(self, r: Tensor, return_attention: bool = False):
        single = r.ndim == 2
        if single:
            r = reshape(r, (1,) + r.shape)
        scale = 1.0 / math.sqrt(self.d_k)
        head_outs = []
        attn_maps = []
        for i in range(self.heads):
            q = self._project(r, self.w_q[i])
            k = self._project(r, self.w_k[i])
            v = self._project(r, self.w_v[i])
            scores = matmul(q, transpose(k, (0, 2, 1))) * scale
            attn = softmax(scores, axis=-1)
            attn_maps.append(attn)
            head_outs.append(matmul(attn, v))
        mixed = matmul(reshape(concat(head_outs, axis=-1), (-1, self.d_r)), self.w_out)
        out = leaky_relu(self.fc2(relu(self.fc1(mixed))), self.slope)
        b, n, _ = r.shape
        out = reshape(out, (b, n, -1))
        if single:
            out = reshape(out, out.shape[1:])
            attn_maps = [reshape(a, a.shape[1:]) for a in attn_maps]
        if return_attention:
            return out, attn_maps
        return out

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i in range(self.heads):
            out[f"{prefix}.head{i}.Wq"] = self.w_q[i]
            out[f"{prefix}.head{i}.Wk"] = self.w_k[i]
            out[f"{prefix}.head{i}.Wv"] = self.w_v[i]
        out[f"{prefix}.Wout"] = self.w_out
        out.update(self.fc1.params(f"{prefix}.fc1"))
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out


class FunctionModule:
    """Context-only module: LeakyReLU(FC(c)) on the recurrent context."""

    def __init__(self, d_c: int, d_v: int, rng: Rng, slope: float = 0.01, dtype=FLOAT32):
        self.fc = Linear(d_c, d_v, rng, dtype=dtype)
        self.slope = slope

    def __call__(self, c: Tensor) -> Tensor:
        return leaky_relu(self.fc(c), self.slope)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.fc.params(f"{prefix}.fc")

"""Neural building blocks: LSTM cell, embedding table, linear layer, attention.

All parameters are drawn uniform(-a, a) with a = 1/sqrt(fan_in) from a seeded
generator, so identical seeds give bit-identical models.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import (
    Tensor, DimensionError, ContractError, accumulate, record, softmax,
    affine, affine_rows, matmul, dot, concat,
)

__all__ = [
    "uniform_init", "init_params", "LstmCell", "lstm_step",
    "Embedding", "Linear", "AttentionHead", "attend",
]


def uniform_init(rng, shape, fan_in):
    a = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-a, a, size=shape)


def init_params(spec, seed):
    """Build a named parameter set from (name, shape, fan_in) entries.

    Deterministic given the seed: the same spec and seed produce
    bit-identical values.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in spec:
        params[name] = ad.parameter(uniform_init(rng, shape, fan_in))
    return params


class LstmCell:
    """Single LSTM cell with gate order [input, forget, cell, output].

    Weights are stored as w_ih (4h x input_dim), w_hh (4h x h) and a single
    bias b (4h).
    """

    def __init__(self, input_dim, hidden_dim, rng):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        h = hidden_dim
        self.w_ih = ad.parameter(uniform_init(rng, (4 * h, input_dim), input_dim))
        self.w_hh = ad.parameter(uniform_init(rng, (4 * h, h), h))
        self.b = ad.parameter(uniform_init(rng, (4 * h,), input_dim))
        # pending per-step weight-gradient contributions, flushed as one
        # matrix product at the end of a backward pass; a cell is only ever
        # trained by one thread at a time (read-only sharing is fine)
        self._pending = []

    def _flush_weight_grads(self):
        dzs = np.stack([p[0] for p in self._pending])
        if self.w_ih.requires_grad:
            xs = np.stack([p[1] for p in self._pending])
            accumulate(self.w_ih, dzs.T @ xs)
        if self.w_hh.requires_grad:
            hs = np.stack([p[2] for p in self._pending])
            accumulate(self.w_hh, dzs.T @ hs)
        accumulate(self.b, dzs.sum(axis=0))
        self._pending = []

    def step(self, x, h, c):
        return lstm_step(self, x, h, c)

    def named_parameters(self, prefix):
        return {prefix + ".w_ih": self.w_ih,
                prefix + ".w_hh": self.w_hh,
                prefix + ".b": self.b}


def lstm_step(cell, x, h, c):
    """One LSTM step; returns (h', c').  Fused into a single tape node."""
    hd = cell.hidden_dim
    if x.data.shape != (cell.input_dim,):
        raise DimensionError(
            f"lstm_step: input shape {x.data.shape} does not match ({cell.input_dim},)")
    if h.data.shape != (hd,) or c.data.shape != (hd,):
        raise DimensionError(
            f"lstm_step: state shapes {h.data.shape}, {c.data.shape} do not match ({hd},)")

    w_ih, w_hh, b = cell.w_ih, cell.w_hh, cell.b
    z = w_ih.data @ x.data + w_hh.data @ h.data + b.data
    i = 1.0 / (1.0 + np.exp(-z[:hd]))
    f = 1.0 / (1.0 + np.exp(-z[hd:2 * hd]))
    g = np.tanh(z[2 * hd:3 * hd])
    o = 1.0 / (1.0 + np.exp(-z[3 * hd:]))
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    h_out = Tensor(h_new)
    c_out = Tensor(c_new)
    if ad.active_tape() is not None and any(
            t.requires_grad for t in (x, h, c, w_ih, w_hh, b)):
        xd, hd_in, cd = x.data, h.data, c.data

        def bwd():
            gh = h_out.grad if h_out.grad is not None else 0.0
            gc = c_out.grad if c_out.grad is not None else 0.0
            dc = gc + gh * o * (1.0 - tc * tc)
            dz = np.empty_like(z)
            dz[:hd] = dc * g * i * (1.0 - i)
            dz[hd:2 * hd] = dc * cd * f * (1.0 - f)
            dz[2 * hd:3 * hd] = dc * i * (1.0 - g * g)
            dz[3 * hd:] = gh * tc * o * (1.0 - o)
            if w_ih.requires_grad or w_hh.requires_grad or b.requires_grad:
                if not cell._pending:
                    ad.defer_flush(cell._flush_weight_grads)
                cell._pending.append((dz, xd, hd_in))
            if x.requires_grad:
                accumulate(x, w_ih.data.T @ dz)
            if h.requires_grad:
                accumulate(h, w_hh.data.T @ dz)
            if c.requires_grad:
                accumulate(c, dc * f)

        record(bwd, h_out, c_out)
    return h_out, c_out


class Embedding:
    """Trainable token embedding table (vocab_size x embed_dim)."""

    def __init__(self, vocab_size, embed_dim, rng):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.w = ad.parameter(uniform_init(rng, (vocab_size, embed_dim), embed_dim))

    def lookup(self, token_id):
        if not 0 <= token_id < self.vocab_size:
            raise ContractError(
                f"embedding lookup: token id {token_id} out of range [0, {self.vocab_size})")
        return ad.row(self.w, token_id)

    def named_parameters(self, prefix):
        return {prefix + ".w": self.w}


class Linear:
    """Affine layer y = W x + b."""

    def __init__(self, in_dim, out_dim, rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = ad.parameter(uniform_init(rng, (out_dim, in_dim), in_dim))
        self.b = ad.parameter(uniform_init(rng, (out_dim,), in_dim))

    def __call__(self, x):
        return affine(self.w, x, self.b)

    def apply_rows(self, m):
        return affine_rows(self.w, m, self.b)

    def named_parameters(self, prefix):
        return {prefix + ".w": self.w, prefix + ".b": self.b}


class AttentionHead:
    """Dot-product attention over K object features after a linear projection.

    Scores are inner products between the query state and each projected
    feature; weights are the softmax over the K scores.
    """

    def __init__(self, feature_dim, hidden_dim, rng):
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.proj = Linear(feature_dim, hidden_dim, rng)

    def project(self, feats):
        """Project a (K x d) feature matrix once so steps reuse it."""
        return self.proj.apply_rows(feats)

    def weights(self, h, projected):
        return softmax(matmul(projected, h))

    def named_parameters(self, prefix):
        return self.proj.named_parameters(prefix + ".proj")


def attend(head, h, feats):
    """Attention weights over a list of K feature vectors for query h."""
    if len(feats) == 0:
        raise ContractError("attend: need at least one object feature")
    scores = concat([dot(h, head.proj(v)) for v in feats])
    return softmax(scores)

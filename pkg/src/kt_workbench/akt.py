"""Attentive knowledge tracing with Rasch embeddings and decaying attention.

Exercise embedding    x_t = c[kc] + mu[question] * d[kc]
Interaction embedding y_t = q[a*K + kc] + mu[question] * f[a*K + kc]

An exercise encoder and a knowledge encoder (causal self-attention layers)
contextualize x and y. The retriever then attends from each exercise to the
knowledge states of strictly earlier questions, and a one-hidden-layer head
maps [h_t, e~_t] to a probability.

Attention weights are softmax(score / sqrt(d_k) - theta * dist) over the
allowed positions, with theta = softplus(raw) per head. ``index_distance``
uses dist = t - tau. ``context_aware`` accumulates 1 - gamma[t, t'] over the
positions t' in (tau, t], where gamma is the undecayed softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import NeuralModel, uniform
from .tensor import Tensor

DECAY_MODES = ("index_distance", "context_aware")


@dataclass
class AKTConfig:
    num_kcs: int
    num_questions: int
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 1
    ff_dim: int = 128
    decay_mode: str = "index_distance"
    dropout: float = 0.05
    rasch_lambda: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")
        if self.num_kcs < 1 or self.num_questions < 1 or self.num_layers < 1:
            raise ValueError("sizes must be positive")


# -- embeddings ---------------------------------------------------------------

def _check_index(idx, size, what):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"{what} index out of range (size {size})")
    return idx


def _scale_rows(table_rows, mu_rows):
    # mu_rows (..., ) times rows (..., D): move D first so mu broadcasts as a suffix
    nd = table_rows.ndim
    axes = (nd - 1,) + tuple(range(nd - 1))
    inv = tuple(range(1, nd)) + (0,)
    return T.transpose(T.transpose(table_rows, axes) * mu_rows, inv)


def embed_exercise(tables, kc, question):
    """c[kc] + mu[question] * d[kc]; ``tables`` maps c, d, mu to Tensors."""
    kc = _check_index(kc, tables["c"].shape[0], "kc")
    question = _check_index(question, tables["mu"].shape[0], "question")
    mu = T.take_rows(tables["mu"], question)
    return T.take_rows(tables["c"], kc) + _scale_rows(T.take_rows(tables["d"], kc), mu)


def embed_interaction(tables, kc, answer, question):
    """q[a*K + kc] + mu[question] * f[a*K + kc]."""
    K = tables["c"].shape[0]
    kc = _check_index(kc, K, "kc")
    answer = np.asarray(answer, dtype=np.int64)
    if np.any((answer != 0) & (answer != 1)):
        raise IndexError("answer must be 0 or 1")
    question = _check_index(question, tables["mu"].shape[0], "question")
    row = answer * K + kc
    mu = T.take_rows(tables["mu"], question)
    return T.take_rows(tables["q"], row) + _scale_rows(T.take_rows(tables["f"], row), mu)


def rasch_penalty(tables, lam=1e-5):
    mu = tables["mu"]
    return (mu * mu).sum() * lam


# -- attention ----------------------------------------------------------------

def _per_head(theta, x):
    """Multiply x (B, h, T, S) by theta (h,) along the head axis."""
    xt = T.transpose(x, (0, 2, 3, 1))
    return T.transpose(xt * theta, (0, 3, 1, 2))


def context_distance(scores, mask, offsets):
    """Sum over positions t' in (tau, t] of (1 - gamma[t, t']).

    gamma is the undecayed attention distribution, zero off the support, so
    this equals (t - tau) minus the attention mass strictly after tau.
    Intermediate positions that resemble the query shorten the distance.
    """
    gamma = T.masked_softmax(scores, mask, allow_empty=True)
    after = T.cumsum(gamma, axis=-1, reverse=True) - gamma
    return Tensor(offsets) - after


def monotonic_attention(queries, keys, values, mask, theta, mode="index_distance", allow_empty=False):
    """Decayed causal attention on per-head tensors of shape (B, h, T, d_k).

    ``mask`` (B or 1, 1 or h, T, S) marks attendable (query, key) pairs;
    ``theta`` (h,) is the non-negative decay rate. Returns (mixed, weights).
    """
    dk = queries.shape[-1]
    scores = T.matmul(queries, T.transpose(keys, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    steps_q, steps_k = scores.shape[-2], scores.shape[-1]
    offsets = np.abs(np.arange(steps_q)[:, None] - np.arange(steps_k)[None, :]).astype(np.float64)
    mask = np.broadcast_to(mask, scores.shape)
    if mode == "index_distance":
        dist = Tensor(np.broadcast_to(offsets, scores.shape).copy())
    elif mode == "context_aware":
        dist = context_distance(scores, mask, offsets)
    else:
        raise ValueError(f"unknown decay mode {mode!r}")
    logits = scores - _per_head(theta, dist)
    weights = T.masked_softmax(logits, mask, allow_empty=allow_empty)
    return T.matmul(weights, values), weights


def _dropout(x, rate, rng):
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


class AKT(NeuralModel):
    kind = "akt"
    config_cls = AKTConfig

    def __init__(self, config: AKTConfig, seed=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        D, K, F = config.d_model, config.num_kcs, config.ff_dim
        b = 1.0 / np.sqrt(D)
        p = {
            "c": uniform(rng, (K, D), b, "c"),
            "d": uniform(rng, (K, D), b, "d"),
            "mu": Tensor(np.zeros(config.num_questions), requires_grad=True, name="mu"),
            "q": uniform(rng, (2 * K, D), b, "q"),
            "f": uniform(rng, (2 * K, D), b, "f"),
        }
        theta_raw = np.log(np.expm1(1.0))  # softplus(raw) == 1
        blocks = [f"{enc}{l}" for enc in ("exe", "kno") for l in range(config.num_layers)] + ["ret"]
        for blk in blocks:
            for w in ("Wq", "Wk", "Wv", "Wo"):
                p[f"{blk}.{w}"] = uniform(rng, (D, D), b, f"{blk}.{w}")
            p[f"{blk}.theta"] = Tensor(np.full(config.num_heads, theta_raw), requires_grad=True, name=f"{blk}.theta")
            if blk == "ret":
                continue
            p[f"{blk}.W1"] = uniform(rng, (F, D), b, f"{blk}.W1")
            p[f"{blk}.b1"] = uniform(rng, (F,), b, f"{blk}.b1")
            p[f"{blk}.W2"] = uniform(rng, (D, F), 1.0 / np.sqrt(F), f"{blk}.W2")
            p[f"{blk}.b2"] = uniform(rng, (D,), b, f"{blk}.b2")
            for ln in ("ln1", "ln2"):
                p[f"{blk}.{ln}.g"] = Tensor(np.ones(D), requires_grad=True, name=f"{blk}.{ln}.g")
                p[f"{blk}.{ln}.b"] = Tensor(np.zeros(D), requires_grad=True, name=f"{blk}.{ln}.b")
        p["head.W1"] = uniform(rng, (D, 2 * D), 1.0 / np.sqrt(2 * D), "head.W1")
        p["head.b1"] = uniform(rng, (D,), b, "head.b1")
        p["head.w"] = uniform(rng, (1, D), b, "head.w")
        p["head.b"] = uniform(rng, (1,), b, "head.b")
        super().__init__(config, p)

    # -- building blocks ------------------------------------------------------
    def _split(self, x):
        B, steps, D = x.shape
        h = self.config.num_heads
        return T.transpose(T.reshape(x, (B, steps, h, D // h)), (0, 2, 1, 3))

    def _merge(self, x):
        B, h, steps, dk = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, steps, h * dk))

    def attention(self, blk, q_in, k_in, v_in, mask, allow_empty=False, rng=None):
        p = self.params
        Q = self._split(T.matmul(q_in, T.transpose(p[f"{blk}.Wq"])))
        K = self._split(T.matmul(k_in, T.transpose(p[f"{blk}.Wk"])))
        V = self._split(T.matmul(v_in, T.transpose(p[f"{blk}.Wv"])))
        theta = T.softplus(p[f"{blk}.theta"])
        mixed, weights = monotonic_attention(Q, K, V, mask, theta, self.config.decay_mode, allow_empty)
        if rng is not None and self.config.dropout > 0:
            mixed = T.matmul(_dropout(weights, self.config.dropout, rng), V)
        return T.matmul(self._merge(mixed), T.transpose(p[f"{blk}.Wo"])), weights

    def encoder_layer(self, blk, x, rng=None):
        p = self.params
        steps = x.shape[1]
        causal = np.tril(np.ones((steps, steps), dtype=bool))[None, None]
        att, _ = self.attention(blk, x, x, x, causal, rng=rng)
        x = T.layer_norm(x + _dropout(att, self.config.dropout, rng), p[f"{blk}.ln1.g"], p[f"{blk}.ln1.b"])
        hidden = T.tanh(T.matmul(x, T.transpose(p[f"{blk}.W1"])) + p[f"{blk}.b1"])
        ff = T.matmul(hidden, T.transpose(p[f"{blk}.W2"])) + p[f"{blk}.b2"]
        return T.layer_norm(x + _dropout(ff, self.config.dropout, rng), p[f"{blk}.ln2.g"], p[f"{blk}.ln2.b"])

    def exercise_encoder(self, x, rng=None):
        for l in range(self.config.num_layers):
            x = self.encoder_layer(f"exe{l}", x, rng)
        return x

    def knowledge_encoder(self, y, rng=None):
        for l in range(self.config.num_layers):
            y = self.encoder_layer(f"kno{l}", y, rng)
        return y

    def knowledge_retriever(self, e_ctx, y_ctx, src, rng=None, return_weights=False):
        """h_t attends over knowledge states at positions <= src[b, t]; empty support gives 0."""
        steps = e_ctx.shape[1]
        allowed = np.arange(steps)[None, None, :] <= src[:, :, None]
        h, weights = self.attention("ret", e_ctx, e_ctx, y_ctx, allowed[:, None], allow_empty=True, rng=rng)
        return (h, weights) if return_weights else h

    def predict_head(self, h, e_ctx):
        p = self.params
        z = T.tanh(T.matmul(T.concat([h, e_ctx], axis=-1), T.transpose(p["head.W1"])) + p["head.b1"])
        logit = T.matmul(z, T.transpose(p["head.w"])) + p["head.b"]
        return T.sigmoid(T.reshape(logit, logit.shape[:-1]))

    def regularization(self):
        return rasch_penalty(self.params, self.config.rasch_lambda)

    def batch_all(self, batch, rng=None):
        """Probabilities at every (b, t), including positions with empty context."""
        x = embed_exercise(self.params, batch.concepts, batch.questions)
        if batch.soft is None:
            y = embed_interaction(self.params, batch.concepts, batch.responses, batch.questions)
        else:
            w = Tensor(np.repeat(batch.soft[..., None], self.config.d_model, axis=-1))
            y0 = embed_interaction(self.params, batch.concepts, np.zeros_like(batch.responses), batch.questions)
            y1 = embed_interaction(self.params, batch.concepts, np.ones_like(batch.responses), batch.questions)
            y = y0 * (1.0 - w) + y1 * w
        e_ctx = self.exercise_encoder(x, rng)
        y_ctx = self.knowledge_encoder(y, rng)
        h = self.knowledge_retriever(e_ctx, y_ctx, batch.src, rng)
        return self.predict_head(h, e_ctx)

    def batch_forward(self, batch, train=False, rng=None):
        probs = self.batch_all(batch, rng if train else None)
        b_idx, t_idx = np.nonzero(batch.predicted())
        return T.getitem(probs, (b_idx, t_idx))

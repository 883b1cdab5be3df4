"""Deep knowledge tracing with a vanilla tanh recurrence or an LSTM cell.

Vanilla cell, per step::

    h_t = tanh(W_hx x_t + W_hh h_{t-1} + b_h)
    p_t = sigmoid(W_hy h_t + b_p)

The LSTM variant stores its four gate blocks (input, forget, candidate,
output) stacked along the rows of W_hx, W_hh and b_h.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import DimensionError, NoSignalError
from .nn import NeuralModel, uniform
from .tensor import Tensor


@dataclass
class DKTConfig:
    num_kcs: int
    hidden_dim: int = 64
    cell: str = "lstm"

    def __post_init__(self):
        if self.num_kcs < 1 or self.hidden_dim < 1:
            raise ValueError("num_kcs and hidden_dim must be positive")
        if self.cell not in ("vanilla", "lstm"):
            raise ValueError(f"unknown cell {self.cell!r}")

    @property
    def input_width(self):
        return 2 * self.num_kcs


def encode_index(kc, response, num_kcs):
    if not 0 <= kc < num_kcs:
        raise IndexError(f"kc {kc} out of range for {num_kcs} KCs")
    return int(response) * num_kcs + int(kc)


def encode_input(kc, response, num_kcs):
    """One-hot (KC, response) vector of width 2 * num_kcs."""
    x = np.zeros(2 * num_kcs)
    x[encode_index(kc, response, num_kcs)] = 1.0
    return x


def binarize(p):
    return 1 if p >= 0.5 else 0


def masked_bce_loss(predictions, targets, selectmask, eps=1e-7):
    """Mean binary cross-entropy over positions whose selectmask is 1."""
    sel = np.flatnonzero(np.asarray(selectmask) == 1)
    if sel.size == 0:
        raise NoSignalError("no unmasked position to compute a loss on")
    p = T.clip(T.getitem(predictions, sel), eps, 1.0 - eps)
    y = np.asarray(targets, dtype=np.float64)[sel]
    ll = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return ll.mean() * -1.0


class DKT(NeuralModel):
    kind = "dkt"
    config_cls = DKTConfig

    def __init__(self, config: DKTConfig, seed=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        H, K = config.hidden_dim, config.num_kcs
        gates = 4 if config.cell == "lstm" else 1
        bound = 1.0 / np.sqrt(H)
        params = {
            "W_hx": uniform(rng, (gates * H, config.input_width), bound, "W_hx"),
            "W_hh": uniform(rng, (gates * H, H), bound, "W_hh"),
            "b_h": uniform(rng, (gates * H,), bound, "b_h"),
            "W_hy": uniform(rng, (K, H), bound, "W_hy"),
            "b_p": uniform(rng, (K,), bound, "b_p"),
        }
        super().__init__(config, params)

    def initial_state(self, batch_size):
        zeros = Tensor(np.zeros((batch_size, self.config.hidden_dim)))
        return (zeros, zeros) if self.config.cell == "lstm" else zeros

    def _cell(self, state, pre_x):
        """Advance one step given the input contribution ``W_hx x``."""
        p = self.params
        if self.config.cell == "vanilla":
            h = T.tanh(pre_x + T.matmul(state, T.transpose(p["W_hh"])) + p["b_h"])
            return h, h
        h_prev, c_prev = state
        H = self.config.hidden_dim
        z = pre_x + T.matmul(h_prev, T.transpose(p["W_hh"])) + p["b_h"]
        i = T.sigmoid(z[:, 0:H])
        f = T.sigmoid(z[:, H : 2 * H])
        g = T.tanh(z[:, 2 * H : 3 * H])
        o = T.sigmoid(z[:, 3 * H : 4 * H])
        c = f * c_prev + i * g
        h = o * T.tanh(c)
        return h, (h, c)

    def output(self, h):
        return T.sigmoid(T.matmul(h, T.transpose(self.params["W_hy"])) + self.params["b_p"])

    def forward_step(self, state, x):
        """One step on dense inputs ``x`` of shape (B, 2K); returns (new_state, p)."""
        x = T.as_tensor(x)
        if x.ndim == 1:
            x = T.reshape(x, (1, -1))
        if x.shape[-1] != self.config.input_width:
            raise DimensionError(f"input width {x.shape[-1]} != {self.config.input_width}")
        h, state = self._cell(state, T.matmul(x, T.transpose(self.params["W_hx"])))
        return state, self.output(h)

    def hidden_states(self, batch):
        """(B, T, H) hidden states after each input step."""
        B, steps = batch.shape
        K = self.config.num_kcs
        idx = batch.responses * K + batch.concepts
        W_in = T.transpose(self.params["W_hx"])
        if batch.soft is not None:
            # fractional correctness w mixes the (kc, 0) and (kc, 1) input columns
            w = Tensor(np.repeat(batch.soft[..., None], W_in.shape[1], axis=-1))
            pre_all = T.take_rows(W_in, batch.concepts) * (1.0 - w) + T.take_rows(W_in, batch.concepts + K) * w
        state = self.initial_state(B)
        hs = []
        for t in range(steps):
            pre = pre_all[:, t] if batch.soft is not None else T.take_rows(W_in, idx[:, t])
            h, state = self._cell(state, pre)
            hs.append(h)
        return T.stack(hs, axis=1)

    def batch_forward(self, batch, train=False, rng=None):
        sel = batch.predicted()
        b_idx, t_idx = np.nonzero(sel)
        src = batch.src[b_idx, t_idx]
        steps = int(src.max()) + 1 if src.size else 0
        if steps == 0:
            return Tensor(np.zeros(0))
        hs = self.hidden_states(_truncate(batch, steps))
        probs = self.output(hs)
        return T.getitem(probs, (b_idx, src, batch.concepts[b_idx, t_idx]))


def _truncate(batch, steps):
    return replace(
        batch,
        concepts=batch.concepts[:, :steps],
        questions=batch.questions[:, :steps],
        responses=batch.responses[:, :steps],
        labels=batch.labels[:, :steps],
        real=batch.real[:, :steps],
        src=batch.src[:, :steps],
        soft=None if batch.soft is None else batch.soft[:, :steps],
    )

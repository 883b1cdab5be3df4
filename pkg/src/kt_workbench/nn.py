"""Shared plumbing for the neural models: parameter storage, inference, checkpoints."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from . import checkpoint
from .batching import make_batch
from .tensor import Tensor, no_grad


def uniform(rng, shape, bound, name):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class NeuralModel:
    """Subclasses set ``kind``, ``config_cls`` and implement ``batch_forward``.

    ``batch_forward(batch, train=False, rng=None)`` returns a Tensor of
    probabilities, one per ``batch.predicted()`` position in row-major order.
    """

    kind = None
    config_cls = None

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def predict_batch(self, sequences, known_lens=None, soft=None):
        """Per-sequence arrays of probabilities (NaN where no prediction is possible)."""
        batch = make_batch(sequences, known_lens, soft)
        with no_grad():
            probs = self.batch_forward(batch).data
        full = np.full(batch.shape, np.nan)
        full[batch.predicted()] = probs
        return [full[b, : s.real_length] for b, s in enumerate(sequences)]

    def predict_sequence(self, seq, known_len=None, soft=None):
        return self.predict_batch([seq], [known_len], None if soft is None else [soft])[0]

    def forward_sequence(self, seq):
        """Teacher-forced predictions for every position that has usable history."""
        p = self.predict_sequence(seq)
        return p[~np.isnan(p)]

    def regularization(self):
        return None

    def to_dict(self):
        return checkpoint.dump_tensors(self.kind, asdict(self.config), self.params)

    @classmethod
    def from_dict(cls, doc):
        config = cls.config_cls(**doc["config"])
        model = cls(config, seed=0)
        for name, arr in checkpoint.tensor_arrays(doc).items():
            if name not in model.params or model.params[name].data.shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name} does not match the model layout")
            model.params[name].data = arr
        return model

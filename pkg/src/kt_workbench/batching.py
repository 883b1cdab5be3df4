"""Turn InteractionSequences into padded index arrays shared by DKT and AKT.

Each real position t gets a *source* index: the last position whose response
the model may use when predicting t. Inside the known prefix it is one before
the start of t's question group, so KC-expanded rows of one question never
see each other's answer, and it never reaches past the known prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    concepts: np.ndarray   # (B, T) KC index, pads mapped to 0
    questions: np.ndarray  # (B, T) question index, pads mapped to 0
    responses: np.ndarray  # (B, T) 0/1 inputs; unknown and pads mapped to 0
    labels: np.ndarray     # (B, T) raw responses (-1 where unknown or padded)
    real: np.ndarray       # (B, T) bool
    known: np.ndarray      # (B,) known-prefix length per row
    src: np.ndarray        # (B, T) source index, -1 when nothing may be used
    soft: np.ndarray | None = None  # (B, T) fractional correctness fed back instead of 0/1

    @property
    def shape(self):
        return self.concepts.shape

    def predicted(self):
        """Positions that receive a prediction."""
        return self.real & (self.src >= 0)

    def scored(self):
        """Predicted positions with a 0/1 label, for training and validation."""
        return self.predicted() & ((self.labels == 0) | (self.labels == 1))


def group_starts(is_repeat):
    """Start index of the question group containing each position."""
    n = len(is_repeat)
    starts = np.zeros(n, dtype=np.int64)
    current = 0
    for t in range(n):
        if t == 0 or is_repeat[t] == 0:
            current = t
        starts[t] = current
    return starts


def source_index(is_repeat, known_len):
    return np.minimum(group_starts(is_repeat), known_len) - 1


def make_batch(sequences, known_lens=None, soft=None):
    """``soft`` optionally gives per-sequence float arrays overriding known responses."""
    B = len(sequences)
    lengths = [s.real_length for s in sequences]
    T = max(max(lengths, default=1), 1)
    out = {k: np.zeros((B, T), dtype=np.int64) for k in ("concepts", "questions", "responses")}
    labels = np.full((B, T), -1, dtype=np.int64)
    real = np.zeros((B, T), dtype=bool)
    src = np.full((B, T), -1, dtype=np.int64)
    known = np.zeros(B, dtype=np.int64)
    for b, (s, n) in enumerate(zip(sequences, lengths)):
        k = n if known_lens is None or known_lens[b] is None else min(int(known_lens[b]), n)
        known[b] = k
        out["concepts"][b, :n] = s.concepts[:n]
        out["questions"][b, :n] = s.questions[:n]
        r = s.responses[:n]
        labels[b, :n] = r
        out["responses"][b, :k] = np.where(r[:k] == 1, 1, 0)
        real[b, :n] = True
        src[b, :n] = source_index(s.is_repeat[:n], k)
    soft_arr = None
    if soft is not None and any(x is not None for x in soft):
        soft_arr = out["responses"].astype(np.float64)
        for b, x in enumerate(soft):
            if x is not None:
                k = known[b]
                soft_arr[b, :k] = np.asarray(x, dtype=np.float64)[:k]
    return Batch(labels=labels, real=real, known=known, src=src, soft=soft_arr, **out)

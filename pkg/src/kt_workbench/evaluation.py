"""Metrics and the test-time protocol: known prefix in, filled suffix out.

Two filling modes are supported. ``non_accumulative`` predicts every suffix
position from the state reached at the end of the known prefix.
``accumulative`` walks the suffix one question at a time and feeds each
binarized prediction back as if it had been observed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompletenessError, ProtocolError, UndefinedAUCError
from .batching import group_starts

MODES = ("accumulative", "non_accumulative")


# -- metrics ------------------------------------------------------------------

def _rankdata(x):
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1], True])
    ranks = np.empty(len(x), dtype=np.float64)
    for lo, hi in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def auc(scores, labels):
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = int(np.count_nonzero(labels == 0))
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both positive and negative labels")
    ranks = _rankdata(scores)
    # sum of positive ranks minus its minimum is the concordant count plus half the ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean((scores >= threshold).astype(np.int64) == labels))


def binarize(p, threshold=0.5):
    return (np.asarray(p) >= threshold).astype(np.int64)


def macro_auc(score_lists, label_lists):
    """Mean per-sequence AUC over sequences that contain both classes (NaN if none do)."""
    values = []
    for s, y in zip(score_lists, label_lists):
        y = np.asarray(y)
        if np.any(y == 1) and np.any(y == 0):
            values.append(auc(s, y))
    return float(np.mean(values)) if values else float("nan")


# -- prediction protocol ------------------------------------------------------

def _predict(model, sequences, known_lens, soft=None):
    if hasattr(model, "predict_batch"):
        return model.predict_batch(sequences, known_lens, soft)
    return [model.predict_sequence(s, k) for s, k in zip(sequences, known_lens)]


def _suffix_start(seq):
    known = seq.known_length
    if known == 0:
        raise ProtocolError(f"sequence of uid {seq.uid} has an empty known prefix")
    if np.any(seq.responses[known : seq.real_length] != -1):
        raise ProtocolError(f"sequence of uid {seq.uid} has observed responses after the first -1")
    return known


def predict_non_accumulative(model, sequences, batch_size=64):
    """Probabilities for every suffix position, all conditioned on the known prefix only."""
    single = not isinstance(sequences, (list, tuple))
    seqs = [sequences] if single else list(sequences)
    knowns = [_suffix_start(s) for s in seqs]
    out = []
    for i in range(0, len(seqs), batch_size):
        chunk, ks = seqs[i : i + batch_size], knowns[i : i + batch_size]
        for s, k, p in zip(chunk, ks, _predict(model, chunk, ks)):
            out.append(p[k : s.real_length].copy())
    return out[0] if single else out


def predict_accumulative(model, sequences, soft_feedback=False, batch_size=64):
    """Fill the suffix question by question, feeding each prediction back.

    Feedback is the binarized prediction (p >= 0.5 gives 1). With
    ``soft_feedback`` the probability itself is fed back instead; only the
    neural models accept fractional responses.
    """
    single = not isinstance(sequences, (list, tuple))
    seqs = [sequences] if single else list(sequences)
    if soft_feedback and not hasattr(model, "predict_batch"):
        raise ValueError("soft feedback needs a neural model")
    out = []
    for i in range(0, len(seqs), batch_size):
        out.extend(_accumulate_chunk(model, seqs[i : i + batch_size], soft_feedback))
    return out[0] if single else out


def _accumulate_chunk(model, seqs, soft_feedback):
    knowns = [_suffix_start(s) for s in seqs]
    # question-group boundaries inside each suffix
    bounds = []
    for s, k in zip(seqs, knowns):
        n = s.real_length
        starts = np.unique(np.r_[k, group_starts(s.is_repeat[:n])[k:n]])
        bounds.append(list(starts) + [n])
    responses = [np.array(s.responses[: s.real_length]) for s in seqs]
    soft = [r.astype(np.float64) for r in responses] if soft_feedback else None
    fills = [np.full(s.real_length - k, np.nan) for s, k in zip(seqs, knowns)]
    steps = max(len(b) - 1 for b in bounds)
    for g in range(steps):
        active = [j for j, b in enumerate(bounds) if g < len(b) - 1]
        cur = [seqs[j].with_responses(np.r_[responses[j], seqs[j].responses[seqs[j].real_length :]]) for j in active]
        known = [bounds[j][g] for j in active]
        probs = _predict(model, cur, known, [soft[j] for j in active] if soft_feedback else None)
        for j, p in zip(active, probs):
            lo, hi = bounds[j][g], bounds[j][g + 1]
            fills[j][lo - knowns[j] : hi - knowns[j]] = p[lo:hi]
            responses[j][lo:hi] = binarize(p[lo:hi])
            if soft_feedback:
                soft[j][lo:hi] = p[lo:hi]
    return fills


def predict(model, sequences, mode="non_accumulative", soft_feedback=False):
    if mode == "non_accumulative":
        return predict_non_accumulative(model, sequences)
    if mode == "accumulative":
        return predict_accumulative(model, sequences, soft_feedback=soft_feedback)
    raise ValueError(f"mode must be one of {MODES}")


def mask_suffix(seq, fraction=0.5):
    """Hide the responses of the last ``1 - fraction`` of question groups (at least one kept)."""
    n = seq.real_length
    groups = seq.question_groups()[:n]
    n_groups = int(groups[-1]) + 1 if n else 0
    keep = max(1, int(np.floor(fraction * n_groups)))
    known = int(np.searchsorted(groups, keep))
    r = np.array(seq.responses)
    r[known:n] = -1
    return seq.with_responses(r), known


def aggregate_to_questions(seq, values):
    """Mean of ``values`` over each question group of the suffix-aligned positions."""
    values = np.asarray(values, dtype=np.float64)
    groups = seq.question_groups()[seq.real_length - len(values) : seq.real_length]
    _, inverse = np.unique(groups, return_inverse=True)
    sums = np.bincount(inverse, weights=values)
    return sums / np.bincount(inverse)


# -- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    mode: str
    auc: float
    accuracy: float
    scored: int
    macro_auc: float
    question_auc: float | None = None
    question_accuracy: float | None = None
    question_scored: int | None = None
    per_fold: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def evaluate_fills(masked, truths, fills, mode):
    """Score suffix fills against the hidden responses.

    ``masked`` are the prefix-only sequences the fills were made from;
    ``truths`` the same sequences with every response present.
    """
    scores, labels, q_scores, q_labels, per_seq_s, per_seq_y = [], [], [], [], [], []
    for m, t, f in zip(masked, truths, fills):
        k = m.known_length
        y = np.asarray(t.responses[k : t.real_length])
        if len(f) != len(y):
            raise CompletenessError(f"uid {m.uid}: {len(f)} fills for {len(y)} hidden responses")
        scores.append(f)
        labels.append(y)
        per_seq_s.append(f)
        per_seq_y.append(y)
        q_scores.append(aggregate_to_questions(t, f))
        q_labels.append(aggregate_to_questions(t, y).round().astype(np.int64))
    s, y = np.concatenate(scores), np.concatenate(labels)
    qs, qy = np.concatenate(q_scores), np.concatenate(q_labels)
    return EvalReport(
        mode=mode,
        auc=auc(s, y),
        accuracy=accuracy(s, y),
        scored=int(len(s)),
        macro_auc=macro_auc(per_seq_s, per_seq_y),
        question_auc=auc(qs, qy),
        question_accuracy=accuracy(qs, qy),
        question_scored=int(len(qs)),
    )


def teacher_forced_scores(model, sequences, batch_size=64):
    """Pooled (probabilities, labels) at every position with history and a 0/1 label."""
    ps, ys = [], []
    for i in range(0, len(sequences), batch_size):
        chunk = sequences[i : i + batch_size]
        for s, p in zip(chunk, _predict(model, chunk, [None] * len(chunk))):
            y = np.asarray(s.responses[: s.real_length])
            ok = ~np.isnan(p) & ((y == 0) | (y == 1))
            ps.append(p[ok])
            ys.append(y[ok])
    if not ps:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(ps), np.concatenate(ys)


# -- submission ---------------------------------------------------------------

def _fmt(p):
    return repr(float(p))


def write_submission(sequences, fills, path):
    """Write the test CSV with -1 responses replaced by probabilities.

    A ``binarized`` column carries the 0/1 responses. Every other column is
    copied verbatim from the parsed input row. For question-level input files
    the KC-level fills of one question are fused by their mean.
    """
    if len(fills) != len(sequences):
        raise CompletenessError(f"{len(fills)} fill lists for {len(sequences)} sequences")
    rows, header = [], None
    for seq, fill in zip(sequences, fills):
        raw = seq.raw or {}
        known = seq.known_length
        need = seq.real_length - known
        fill = np.asarray(fill, dtype=np.float64)
        if len(fill) != need or np.any(np.isnan(fill)):
            raise CompletenessError(f"uid {seq.uid}: missing fills for {need} unknown responses")
        if "row" in raw:
            row = dict(raw["row"])
            header = header or list(raw["header"])
        else:
            row = {
                "uid": str(seq.uid),
                "questions": ",".join(map(str, seq.questions)),
                "concepts": ",".join(map(str, seq.concepts)),
                "responses": ",".join(map(str, seq.responses)),
                "timestamps": ",".join(map(str, seq.timestamps)),
                "is_repeat": ",".join(map(str, seq.is_repeat)),
            }
            header = header or list(row)
        tokens = row["responses"].split(",")
        if raw.get("expanded", True):
            probs = fill
        else:
            probs = aggregate_to_questions(seq, fill)
        unknown = [i for i, tok in enumerate(tokens) if tok.strip() == "-1"]
        if len(unknown) != len(probs):
            raise CompletenessError(f"uid {seq.uid}: {len(probs)} fills for {len(unknown)} -1 responses")
        binary = [tok.strip() for tok in tokens]
        for i, p in zip(unknown, probs):
            tokens[i] = _fmt(p)
            binary[i] = str(int(p >= 0.5))
        row["responses"] = ",".join(tokens)
        row["binarized"] = ",".join(binary)
        rows.append(row)
    header = (header or []) + (["binarized"] if "binarized" not in (header or []) else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return Path(path)


def read_submission(path):
    """Return a list of (uid, probabilities-or-responses list, binarized list) rows."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            probs = [float(t) for t in row["responses"].split(",")] if row["responses"] else []
            binary = [int(t) for t in row["binarized"].split(",")] if row["binarized"] else []
            out.append((int(row["uid"]), probs, binary))
    return out

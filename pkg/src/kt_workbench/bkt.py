"""Bayesian Knowledge Tracing: a two-state HMM per KC with no forgetting.

Filtering follows Corbett & Anderson: condition the mastery probability on
the observed response, then apply the learning transition P(T).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateEvidenceError, InsufficientDataError

CLAMP = 1e-4


@dataclass(frozen=True)
class BKTParams:
    pL0: float
    pT: float
    pS: float
    pG: float
    pF: float = 0.0

    def __post_init__(self):
        for name in ("pL0", "pT", "pS", "pG"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.pF != 0.0:
            raise ValueError("BKT assumes no forgetting (pF must be 0)")

    def clamped(self):
        """Project into [CLAMP, 1-CLAMP] with guess + slip < 1."""
        c = {k: float(np.clip(getattr(self, k), CLAMP, 1 - CLAMP)) for k in ("pL0", "pT", "pS", "pG")}
        excess = c["pG"] + c["pS"] - (1 - CLAMP)
        if excess > 0:
            c["pG" if c["pG"] >= c["pS"] else "pS"] -= excess
        return BKTParams(**c)

    def to_dict(self):
        return asdict(self)


def predict_correct(params: BKTParams, mastery):
    return mastery * (1.0 - params.pS) + (1.0 - mastery) * params.pG


def posterior_update(params: BKTParams, mastery, observed):
    """Bayes update on one response, then the learning transition."""
    if observed:
        num = mastery * (1.0 - params.pS)
        den = num + (1.0 - mastery) * params.pG
    else:
        num = mastery * params.pS
        den = num + (1.0 - mastery) * (1.0 - params.pG)
    if den <= 0.0:
        raise DegenerateEvidenceError(f"observation {observed} has zero probability at mastery {mastery}")
    post = num / den
    return post + (1.0 - post) * params.pT


def filtered_mastery(params: BKTParams, responses):
    """Mastery before each response (length n) given all earlier responses."""
    out = np.empty(len(responses))
    m = params.pL0
    for i, r in enumerate(responses):
        out[i] = m
        m = posterior_update(params, m, r)
    return out


def sequence_likelihood(params: BKTParams, responses):
    """Marginal probability of a response sequence."""
    if len(responses) == 0:
        raise InsufficientDataError("empty response sequence")
    like, m = 1.0, params.pL0
    for r in responses:
        p = predict_correct(params, m)
        like *= p if r else 1.0 - p
        if like == 0.0:
            return 0.0
        m = posterior_update(params, m, r)
    return like


# -- fitting ------------------------------------------------------------------

def _pad(sequences):
    n = max(len(s) for s in sequences)
    obs = np.zeros((len(sequences), n), dtype=np.int64)
    mask = np.zeros((len(sequences), n), dtype=bool)
    for i, s in enumerate(sequences):
        obs[i, : len(s)] = s
        mask[i, : len(s)] = True
    return obs, mask


def _forward_backward(p, obs, mask):
    """Scaled forward-backward over padded sequences; returns log-lik and expected counts."""
    N, T = obs.shape
    # state 0 = unlearned, 1 = learned
    emit1 = np.array([p.pG, 1 - p.pS])
    E = np.where(obs[..., None] == 1, emit1, 1 - emit1)  # N,T,2
    E = np.where(mask[..., None], E, 1.0)
    A = np.array([[1 - p.pT, p.pT], [0.0, 1.0]])
    alpha = np.zeros((N, T, 2))
    scale = np.ones((N, T))
    a = np.array([1 - p.pL0, p.pL0]) * E[:, 0]
    scale[:, 0] = a.sum(1)
    alpha[:, 0] = a / scale[:, 0, None]
    for t in range(1, T):
        a = (alpha[:, t - 1] @ A) * E[:, t]
        s = a.sum(1)
        live = mask[:, t]
        scale[:, t] = np.where(live, s, 1.0)
        alpha[:, t] = np.where(live[:, None], a / np.where(s > 0, s, 1.0)[:, None], alpha[:, t - 1])
    beta = np.ones((N, T, 2))
    for t in range(T - 2, -1, -1):
        live = mask[:, t + 1]
        b = (A @ (E[:, t + 1] * beta[:, t + 1]).T).T / scale[:, t + 1, None]
        beta[:, t] = np.where(live[:, None], b, 1.0)
    gamma = alpha * beta
    gamma /= gamma.sum(-1, keepdims=True)
    # expected unlearned->learned transitions between consecutive live steps
    live_pair = mask[:, 1:]
    xi01 = alpha[:, :-1, 0] * p.pT * E[:, 1:, 1] * beta[:, 1:, 1] / scale[:, 1:]
    loglik = float(np.log(np.where(mask, scale, 1.0)).sum())
    return loglik, gamma, np.where(live_pair, xi01, 0.0)


def _m_step(obs, mask, gamma, xi01):
    m = mask.astype(np.float64)
    g0, g1 = gamma[..., 0] * m, gamma[..., 1] * m
    pL0 = gamma[:, 0, 1].mean()
    from_unlearned = (g0[:, :-1] * mask[:, 1:]).sum()
    pT = xi01.sum() / from_unlearned if from_unlearned > 0 else CLAMP
    pG = (g0 * (obs == 1)).sum() / g0.sum() if g0.sum() > 0 else 0.5
    pS = (g1 * (obs == 0)).sum() / g1.sum() if g1.sum() > 0 else CLAMP
    return BKTParams(float(pL0), float(pT), float(pS), float(pG)).clamped()


def log_likelihood(params: BKTParams, sequences):
    obs, mask = _pad(sequences)
    return _forward_backward(params, obs, mask)[0]


def fit_em(sequences, init=None, tol=1e-6, max_iter=200):
    """EM over the response sequences of one KC.

    Returns (params, loglik_history). The history is non-decreasing; a step
    whose clamped M-update lowers the likelihood is rejected and ends the run.
    """
    sequences = [np.asarray(s, dtype=np.int64) for s in sequences if len(s)]
    if not sequences:
        raise InsufficientDataError("no observations for this KC")
    obs, mask = _pad(sequences)
    params = (init or BKTParams(pL0=0.4, pT=0.1, pS=0.1, pG=0.2)).clamped()
    ll, gamma, xi = _forward_backward(params, obs, mask)
    history = [ll]
    for _ in range(max_iter):
        cand = _m_step(obs, mask, gamma, xi)
        ll_new, g_new, xi_new = _forward_backward(cand, obs, mask)
        if ll_new < ll:
            break
        params, gamma, xi = cand, g_new, xi_new
        history.append(ll_new)
        gain, ll = ll_new - ll, ll_new
        if gain < tol:
            break
    return params, history


def _grid_loglik(lattice, obs, mask):
    """Forward-only log-likelihood for every lattice row (pL0, pT, pS, pG) at once."""
    pL0, pT, pS, pG = (lattice[:, i, None] for i in range(4))
    m = pL0 * np.ones(obs.shape[0])
    ll = np.zeros((lattice.shape[0], obs.shape[0]))
    for t in range(obs.shape[1]):
        o, live = obs[:, t] == 1, mask[:, t]
        p1 = m * (1 - pS) + (1 - m) * pG
        num = np.where(o, m * (1 - pS), m * pS)
        den = np.where(o, p1, 1 - p1)
        ll += np.where(live, np.log(den), 0.0)
        post = num / den
        m = np.where(live, post + (1 - post) * pT, m)
    return ll.sum(axis=1)


def fit_grid(sequences, step=0.05):
    """Exhaustive search on a lattice of interior points subject to pG + pS < 1."""
    sequences = [np.asarray(s, dtype=np.int64) for s in sequences if len(s)]
    if not sequences:
        raise InsufficientDataError("no observations for this KC")
    obs, mask = _pad(sequences)
    axis = np.round(np.arange(step, 1.0 - step / 2, step), 10)
    lattice = np.array(list(itertools.product(axis, repeat=4)))
    lattice = lattice[lattice[:, 2] + lattice[:, 3] < 1.0 - 1e-12]
    chunk = max(1, 2_000_000 // max(1, obs.shape[0]))
    best_ll, best = -np.inf, None
    for start in range(0, len(lattice), chunk):
        part = lattice[start : start + chunk]
        ll = _grid_loglik(part, obs, mask)
        i = int(np.argmax(ll))
        if ll[i] > best_ll:
            best_ll, best = ll[i], part[i]
    return BKTParams(*(float(v) for v in best)).clamped()


def kc_response_sequences(sequences):
    """Map KC -> list of per-student response arrays, joining a student's chunks in order."""
    per_student = {}
    for s in sequences:
        n = s.real_length
        d = per_student.setdefault(s.uid, {})
        for c, r in zip(s.concepts[:n], s.responses[:n]):
            if r in (0, 1):
                d.setdefault(int(c), []).append(int(r))
    grouped = {}
    for d in per_student.values():
        for c, rs in d.items():
            grouped.setdefault(c, []).append(np.array(rs, dtype=np.int64))
    return grouped


def fit(grouped, method="em"):
    """Fit BKTParams per KC from ``{kc: [response arrays]}``."""
    out = {}
    for kc in sorted(grouped):
        if method == "em":
            out[kc] = fit_em(grouped[kc])[0]
        elif method == "grid":
            out[kc] = fit_grid(grouped[kc])
        else:
            raise ValueError(f"unknown fit method {method!r}")
    return out


class BKTModel:
    """Per-KC BKT predictor; KCs never seen in training use ``default``."""

    kind = "bkt"

    def __init__(self, params_by_kc, default=None):
        self.params = dict(params_by_kc)
        self.default = default or BKTParams(pL0=0.5, pT=0.1, pS=0.1, pG=0.2)

    def params_for(self, kc):
        return self.params.get(int(kc), self.default)

    def predict_sequence(self, seq, known_len=None):
        """Probability per real position from responses before its question and before ``known_len``.

        Positions in the first question group are NaN (nothing observed yet),
        matching the neural models' scoring convention.
        """
        n = seq.real_length
        known = n if known_len is None else min(known_len, n)
        groups = seq.question_groups()[:n]
        out = np.full(n, np.nan)
        mastery = {}
        applied = 0
        starts = np.flatnonzero(np.r_[True, np.diff(groups) != 0]) if n else np.zeros(0, int)
        for t in range(n):
            cutoff = min(starts[groups[t]], known)
            while applied < cutoff:
                kc = int(seq.concepts[applied])
                p = self.params_for(kc)
                mastery[kc] = posterior_update(p, mastery.get(kc, p.pL0), int(seq.responses[applied]))
                applied += 1
            if groups[t] == 0:
                continue
            kc = int(seq.concepts[t])
            p = self.params_for(kc)
            out[t] = predict_correct(p, mastery.get(kc, p.pL0))
        return out

    def to_dict(self):
        return {
            "format": "kt-workbench-checkpoint",
            "version": 1,
            "kind": "bkt",
            "default": self.default.to_dict(),
            "params": {str(k): v.to_dict() for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, doc):
        return cls({int(k): BKTParams(**v) for k, v in doc["params"].items()}, BKTParams(**doc["default"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

"""Synthetic students with known latent skills, written in the challenge file formats.

Each student holds a binary mastery state per KC. At every step one question
is drawn uniformly and answered; the response is correct with probability

    prod over the question's KCs k of (1 - pS_k if mastered else pG_k)

After answering, each practiced, unmastered KC becomes mastered with
probability pT_k, but only if all of its prerequisites are mastered. Each
KC not practiced at that step keeps its mastery with probability
``decay_k``. Initial mastery is drawn with probability pL0_k, with the same
prerequisite gate. With decay 1 and no prerequisites this is exactly BKT.

Because the KC count is small, the exact Bayes-optimal predictor is a
forward filter over all 2**K joint mastery states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .bkt import BKTParams
from .errors import ValidationError
from .evaluation import auc, mask_suffix

VERSION = 1
TRAIN_FILE = "train_valid_sequences.csv"
TEST_FILE = "pykt_test.csv"
KEYID_FILE = "keyid2idx.json"
QUESTIONS_FILE = "questions.json"
TRUTH_FILE = "ground_truth.json"
MAX_JOINT_KCS = 12


@dataclass
class GroundTruth:
    kc_names: list
    params: list                      # BKTParams per KC
    questions: list                   # tuple of KC indices per question
    prerequisites: list = field(default_factory=list)   # (u, v): u is a prerequisite of v
    decay: list | None = None         # per-step retention factor in (0, 1] per KC
    n_train: int = 2000
    n_test: int = 500
    steps: int = 50
    seed: int = 0
    known_fraction: float = 0.5
    window: int = D.WINDOW

    def __post_init__(self):
        self.params = [p if isinstance(p, BKTParams) else BKTParams(**p) for p in self.params]
        self.questions = [tuple(int(k) for k in q) for q in self.questions]
        self.prerequisites = [tuple(int(x) for x in e) for e in self.prerequisites]
        if self.decay is None:
            self.decay = [1.0] * len(self.kc_names)
        self.decay = [float(x) for x in self.decay]
        self.validate()

    @property
    def num_kcs(self):
        return len(self.kc_names)

    def validate(self):
        K = self.num_kcs
        if K < 1 or len(self.params) != K or len(self.decay) != K:
            raise ValidationError("kc_names, params and decay must have one entry per KC")
        if K > MAX_JOINT_KCS:
            raise ValidationError(f"at most {MAX_JOINT_KCS} KCs are supported")
        if not self.questions or any(not q for q in self.questions):
            raise ValidationError("every question needs at least one KC")
        for q in self.questions:
            if any(not 0 <= k < K for k in q) or len(set(q)) != len(q):
                raise ValidationError(f"question KC set {q} is invalid")
        if any(not 0.0 < d <= 1.0 for d in self.decay):
            raise ValidationError("decay factors must lie in (0, 1]")
        for u, v in self.prerequisites:
            if not (0 <= u < K and 0 <= v < K) or u == v:
                raise ValidationError(f"prerequisite edge {(u, v)} is invalid")
        self.topological_order()
        if self.n_train < 0 or self.n_test < 0 or self.steps < 1:
            raise ValidationError("student counts must be non-negative and steps positive")
        if not 0.0 < self.known_fraction < 1.0:
            raise ValidationError("known_fraction must lie in (0, 1)")

    def prereqs_of(self, v):
        return [u for u, w in self.prerequisites if w == v]

    def topological_order(self):
        """Kahn's algorithm; raises ValidationError when the graph has a cycle."""
        K = self.num_kcs
        indeg = [0] * K
        for _, v in self.prerequisites:
            indeg[v] += 1
        ready = [k for k in range(K) if indeg[k] == 0]
        order = []
        while ready:
            u = ready.pop(0)
            order.append(u)
            for a, v in self.prerequisites:
                if a == u:
                    indeg[v] -= 1
                    if indeg[v] == 0:
                        ready.append(v)
        if len(order) != K:
            raise ValidationError("prerequisite graph has a cycle")
        return order

    def to_dict(self):
        return {
            "version": VERSION,
            "kc_names": list(self.kc_names),
            "params": [p.to_dict() for p in self.params],
            "questions": [list(q) for q in self.questions],
            "prerequisites": [list(e) for e in self.prerequisites],
            "decay": list(self.decay),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "steps": self.steps,
            "seed": self.seed,
            "known_fraction": self.known_fraction,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        version = doc.pop("version", VERSION)
        if version != VERSION:
            raise ValidationError(f"unsupported ground-truth version {version}")
        for extra in ("counts", "test_responses"):
            doc.pop(extra, None)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_scenario(**overrides):
    """Four school-math KCs with prerequisites equality -> plane vector, equality -> probability,
    inequality -> probability; forgetting is strongest for equality, weakest for probability."""
    doc = dict(
        kc_names=["equality", "inequality", "plane_vector", "probability"],
        params=[
            BKTParams(pL0=0.40, pT=0.25, pS=0.04, pG=0.08),
            BKTParams(pL0=0.35, pT=0.20, pS=0.04, pG=0.08),
            BKTParams(pL0=0.30, pT=0.18, pS=0.05, pG=0.10),
            BKTParams(pL0=0.30, pT=0.18, pS=0.05, pG=0.10),
        ],
        questions=[(0,), (0,), (1,), (1,), (2,), (2,), (3,), (3,), (0, 2), (0, 3), (1, 3), (0, 1)],
        prerequisites=[(0, 2), (0, 3), (1, 3)],
        decay=[0.95, 0.97, 0.98, 0.995],
    )
    doc.update(overrides)
    return GroundTruth(**doc)


def bkt_scenario(**overrides):
    """Independent single-KC questions, no prerequisites, no forgetting: plain per-KC BKT."""
    doc = dict(
        kc_names=["equality", "inequality", "plane_vector", "probability"],
        params=[
            BKTParams(pL0=0.30, pT=0.15, pS=0.10, pG=0.20),
            BKTParams(pL0=0.20, pT=0.10, pS=0.15, pG=0.25),
            BKTParams(pL0=0.40, pT=0.20, pS=0.05, pG=0.15),
            BKTParams(pL0=0.25, pT=0.12, pS=0.10, pG=0.30),
        ],
        questions=[(k,) for k in range(4) for _ in range(3)],
        prerequisites=[],
        decay=[1.0] * 4,
    )
    doc.update(overrides)
    return GroundTruth(**doc)


# -- simulation ---------------------------------------------------------------

@dataclass
class Cohort:
    """Question-level simulated histories: arrays of shape (students, steps)."""

    questions: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    mastery: np.ndarray   # (students, steps, K) state when each question was answered


def _gated(gt, state, k):
    pre = gt.prereqs_of(k)
    if not pre:
        return np.ones(state.shape[0], dtype=bool)
    return np.all(state[:, pre], axis=1)


def simulate(gt: GroundTruth, n_students, rng):
    """Draw ``n_students`` histories. Random draws per step: questions, responses, learning, forgetting."""
    K, S = gt.num_kcs, gt.steps
    pL0 = np.array([p.pL0 for p in gt.params])
    pT = np.array([p.pT for p in gt.params])
    pS = np.array([p.pS for p in gt.params])
    pG = np.array([p.pG for p in gt.params])
    decay = np.array(gt.decay)
    member = np.zeros((len(gt.questions), K), dtype=bool)
    for i, q in enumerate(gt.questions):
        member[i, list(q)] = True

    state = np.zeros((n_students, K), dtype=bool)
    init_draw = rng.random((n_students, K))
    for k in gt.topological_order():
        state[:, k] = _gated(gt, state, k) & (init_draw[:, k] < pL0[k])

    questions = np.zeros((n_students, S), dtype=np.int64)
    responses = np.zeros((n_students, S), dtype=np.int64)
    mastery = np.zeros((n_students, S, K), dtype=bool)
    for t in range(S):
        q = rng.integers(len(gt.questions), size=n_students)
        practiced = member[q]
        per_kc = np.where(state, 1.0 - pS, pG)
        p_correct = np.prod(np.where(practiced, per_kc, 1.0), axis=1)
        r = rng.random(n_students) < p_correct
        learn_draw = rng.random((n_students, K))
        keep_draw = rng.random((n_students, K))
        questions[:, t], responses[:, t], mastery[:, t] = q, r, state
        gate = np.stack([_gated(gt, state, k) for k in range(K)], axis=1)
        learned = practiced & ~state & gate & (learn_draw < pT)
        forgot = ~practiced & state & (keep_draw >= decay)
        state = (state | learned) & ~forgot
    gaps = rng.integers(30_000, 600_000, size=(n_students, S))
    start = 1_600_000_000_000 + rng.integers(0, 10**9, size=(n_students, 1))
    timestamps = start + np.cumsum(gaps, axis=1)
    return Cohort(questions, responses, timestamps, mastery)


# -- exact Bayes-optimal filter -----------------------------------------------

def _joint_tables(gt: GroundTruth):
    """Initial distribution, per-question emission vectors and transition matrices over 2**K states."""
    K = gt.num_kcs
    n = 1 << K
    bits = ((np.arange(n)[:, None] >> np.arange(K)[None, :]) & 1).astype(bool)   # (n, K)
    gate = np.ones((n, K), dtype=bool)
    for k in range(K):
        for u in gt.prereqs_of(k):
            gate[:, k] &= bits[:, u]
    pL0 = np.array([p.pL0 for p in gt.params])
    pT = np.array([p.pT for p in gt.params])
    pS = np.array([p.pS for p in gt.params])
    pG = np.array([p.pG for p in gt.params])
    decay = np.array(gt.decay)

    init_factor = np.where(gate, np.where(bits, pL0, 1.0 - pL0), np.where(bits, 0.0, 1.0))
    prior = np.prod(init_factor, axis=1)

    Q = len(gt.questions)
    emit = np.zeros((Q, n))
    trans = np.zeros((Q, n, n))
    for i, q in enumerate(gt.questions):
        practiced = np.zeros(K, dtype=bool)
        practiced[list(q)] = True
        emit[i] = np.prod(np.where(practiced, np.where(bits, 1.0 - pS, pG), 1.0), axis=1)
        # probability each KC is mastered after the step, given the source state
        p_next = np.where(
            practiced,
            np.where(bits, 1.0, np.where(gate, pT, 0.0)),
            np.where(bits, decay, 0.0),
        )  # (n_src, K)
        trans[i] = np.prod(
            np.where(bits[None, :, :], p_next[:, None, :], 1.0 - p_next[:, None, :]), axis=2
        )
    return prior, emit, trans


def bayes_predictions(gt: GroundTruth, questions, responses):
    """P(correct) for each question-level step given all earlier responses, exactly.

    ``questions`` and ``responses`` are (students, steps) arrays (or one 1-D
    history each).
    """
    single = np.ndim(questions) == 1
    questions = np.atleast_2d(np.asarray(questions, dtype=np.int64))
    responses = np.atleast_2d(np.asarray(responses, dtype=np.int64))
    prior, emit, trans = _joint_tables(gt)
    N, S = questions.shape
    belief = np.tile(prior, (N, 1))
    out = np.zeros((N, S))
    for t in range(S):
        e = emit[questions[:, t]]
        p = np.sum(belief * e, axis=1)
        out[:, t] = p
        like = np.where(responses[:, t : t + 1] == 1, e, 1.0 - e)
        post = belief * like
        post /= post.sum(axis=1, keepdims=True)
        belief = np.einsum("ns,nst->nt", post, trans[questions[:, t]])
    return out[0] if single else out


def _question_level(seq):
    n = seq.real_length
    first = np.flatnonzero(seq.is_repeat[:n] == 0)
    if n and (first.size == 0 or first[0] != 0):
        first = np.r_[0, first]
    return seq.questions[first], seq.responses[first], seq.question_groups()[:n]


def bayes_sequence_scores(gt: GroundTruth, sequences):
    """Bayes-optimal probabilities at KC-row level, NaN on each sequence's first question."""
    out = []
    for s in sequences:
        q, r, groups = _question_level(s)
        p = bayes_predictions(gt, q, np.where(r == 1, 1, 0))
        row = p[groups].copy()
        row[groups == 0] = np.nan
        out.append(row)
    return out


# -- writing the challenge files ----------------------------------------------

def _maps(gt: GroundTruth, n_students):
    return D.IdMaps(
        question_map={str(1000 + i): i for i in range(len(gt.questions))},
        kc_map={name: k for k, name in enumerate(gt.kc_names)},
        user_map={str(50_000 + u): u for u in range(n_students)},
    )


def _bank(gt: GroundTruth):
    routes = {k: ("math", "school", name) for k, name in enumerate(gt.kc_names)}
    questions = {
        i: D.QuestionInfo(
            content=tuple(f"tok{i}_{j}" for j in range(3)),
            analysis=tuple(f"ana{i}_{j}" for j in range(2)),
            kcs=tuple(q),
        )
        for i, q in enumerate(gt.questions)
    }
    return D.QuestionBank(questions=questions, kc_routes=routes)


def _question_sequence(uid, questions, responses, timestamps, fold=None):
    n = len(questions)
    return D.InteractionSequence(
        uid=uid,
        fold=fold,
        questions=questions,
        concepts=np.zeros(n, dtype=np.int64),
        responses=responses,
        timestamps=timestamps,
        selectmask=np.ones(n, dtype=np.int64),
        is_repeat=np.zeros(n, dtype=np.int64),
    )


@dataclass
class SynthData:
    gt: GroundTruth
    bank: D.QuestionBank
    maps: D.IdMaps
    train: list            # padded KC-level training chunks with folds
    test: list             # KC-level test sequences with the -1 suffix
    test_truth: list       # the same test sequences with all responses
    counts: dict


def build(gt: GroundTruth, shuffled=False):
    """Simulate train and test cohorts and assemble challenge-shaped sequences in memory."""
    rng = np.random.default_rng(gt.seed)
    cohort = simulate(gt, gt.n_train + gt.n_test, rng)
    responses = cohort.responses
    if shuffled:
        responses = shuffle_labels(responses, rng)
    bank = _bank(gt)
    maps = _maps(gt, gt.n_train + gt.n_test)
    folds = np.empty(gt.n_train, dtype=np.int64)
    folds[rng.permutation(gt.n_train)] = np.arange(gt.n_train) % 5
    train, test, truth = [], [], []
    for u in range(gt.n_train + gt.n_test):
        is_train = u < gt.n_train
        qseq = _question_sequence(
            u, cohort.questions[u], responses[u], cohort.timestamps[u], int(folds[u]) if is_train else None
        )
        expanded = D.expand_to_kc_level(qseq, bank)
        if is_train:
            train.extend(D.truncate_and_pad(expanded, gt.window))
        else:
            masked, _ = mask_suffix(expanded, gt.known_fraction)
            test.append(masked)
            truth.append(expanded)
    tr_resp = responses[: gt.n_train]
    counts = {
        "students": gt.n_train,
        "questions": int(np.unique(cohort.questions[: gt.n_train]).size),
        "kcs": int(len({k for q in np.unique(cohort.questions[: gt.n_train]) for k in gt.questions[q]})),
        "interactions": int(tr_resp.size),
        "mean_length": float(gt.steps) if gt.n_train else 0.0,
        "positive_rate": float(100.0 * tr_resp.mean()) if gt.n_train else 0.0,
        "test_sequences": gt.n_test,
    }
    return SynthData(gt, bank, maps, train, test, truth, counts)


def shuffle_labels(responses, rng):
    """Permute responses across all students and steps, destroying any signal."""
    flat = np.array(responses).reshape(-1)
    return flat[rng.permutation(flat.size)].reshape(np.shape(responses))


def generate(gt: GroundTruth, out_dir, shuffled=False):
    """Write the four challenge files plus ``ground_truth.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sd = build(gt, shuffled=shuffled)
    D.write_train_valid(out / TRAIN_FILE, sd.train)
    D.write_test(out / TEST_FILE, sd.test)
    D.write_keyid2idx(out / KEYID_FILE, sd.maps)
    D.write_questions(out / QUESTIONS_FILE, sd.bank, sd.maps)
    doc = gt.to_dict()
    doc["shuffled"] = shuffled
    doc["counts"] = sd.counts
    doc["test_responses"] = {str(s.uid): s.responses.tolist() for s in sd.test_truth}
    (out / TRUTH_FILE).write_text(json.dumps(doc, sort_keys=True))
    return {
        "train": out / TRAIN_FILE,
        "test": out / TEST_FILE,
        "keyid2idx": out / KEYID_FILE,
        "questions": out / QUESTIONS_FILE,
        "ground_truth": out / TRUTH_FILE,
    }


def load_truth(path):
    """Ground truth plus the hidden test responses (uid -> list) from ``ground_truth.json``."""
    doc = json.loads(Path(path).read_text())
    answers = {int(k): np.array(v, dtype=np.int64) for k, v in doc.get("test_responses", {}).items()}
    shuffled = doc.pop("shuffled", False)
    return GroundTruth.from_dict(doc), answers, shuffled


# -- recoverability -----------------------------------------------------------

def _pooled(scores, sequences):
    ps, ys = [], []
    for p, s in zip(scores, sequences):
        y = np.asarray(s.responses[: s.real_length])
        ok = ~np.isnan(p) & ((y == 0) | (y == 1))
        ps.append(p[ok])
        ys.append(y[ok])
    return np.concatenate(ps), np.concatenate(ys)


def bayes_auc(gt: GroundTruth, sequences):
    return auc(*_pooled(bayes_sequence_scores(gt, sequences), sequences))


def recoverability_report(gt: GroundTruth, sequences, model=None, fitted_params=None):
    """Compare a model's teacher-forced AUC with the Bayes-optimal AUC on the same positions.

    ``sequences`` are held-out students with every response present.
    ``fitted_params`` (KC -> BKTParams) adds per-parameter absolute errors.
    """
    report = {"bayes_auc": bayes_auc(gt, sequences)}
    if model is not None:
        from .evaluation import teacher_forced_scores

        report["model_auc"] = auc(*teacher_forced_scores(model, sequences))
        report["gap"] = report["bayes_auc"] - report["model_auc"]
    if fitted_params is not None:
        errors = {}
        for k, truth in enumerate(gt.params):
            fit = fitted_params.get(k)
            if fit is None:
                continue
            errors[gt.kc_names[k]] = {
                name: abs(getattr(fit, name) - getattr(truth, name)) for name in ("pL0", "pT", "pS", "pG")
            }
        report["param_errors"] = errors
        report["max_param_error"] = max((v for e in errors.values() for v in e.values()), default=0.0)
    return report


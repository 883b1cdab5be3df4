"""Readers and writers for the challenge files plus sequence transforms.

File conventions
----------------
``train_valid_sequences.csv`` columns: fold, uid, questions, concepts,
responses, timestamps, selectmasks, is_repeat. List cells hold
comma-joined integers inside one quoted field. Padded tail positions carry
-1 in every list column.

``pykt_test.csv`` columns: uid, questions, concepts, responses, timestamps
and optionally is_repeat. Unknown responses are -1 and form a suffix. When
is_repeat is absent the rows are question level and a concepts token may
join several KC ids with ``_``; such rows are expanded on read.

``keyid2idx.json``: ``{"questions": {orig: idx}, "concepts": {...}, "uid": {...}}``.

``questions.json``: ``{orig_qid: {"content": str, "analysis": str,
"kc_routes": ["root----...----leaf", ...], ...}}``; the leaf of each route is
an original KC id resolved through ``keyid2idx["concepts"]``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CorruptMappingError, DataError, ParseError, ProtocolError, SchemaError

WINDOW = 200
PAD = -1
ROUTE_SEP = "----"

TRAIN_COLUMNS = ("fold", "uid", "questions", "concepts", "responses", "timestamps", "selectmasks", "is_repeat")
TEST_COLUMNS = ("uid", "questions", "concepts", "responses", "timestamps", "is_repeat")
_LIST_FIELDS = ("questions", "concepts", "responses", "timestamps", "selectmasks", "is_repeat")


class ParseWarning(UserWarning):
    pass


def _frozen(values):
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class InteractionSequence:
    """One student's (sub)sequence of KC-level interactions; arrays are read-only."""

    uid: int
    questions: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    selectmask: np.ndarray
    is_repeat: np.ndarray
    fold: int | None = None
    raw: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("questions", "concepts", "responses", "timestamps", "selectmask", "is_repeat"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        fields = ("questions", "concepts", "responses", "timestamps", "selectmask", "is_repeat")
        if len({len(getattr(self, f)) for f in fields}) != 1:
            raise DataError(f"parallel fields disagree in length for uid {self.uid}")

    def __len__(self):
        return len(self.questions)

    @property
    def real_length(self):
        return int(np.count_nonzero(self.selectmask == 1))

    @property
    def known_length(self):
        """Index of the first unknown (-1) response among real positions."""
        real = self.responses[: self.real_length]
        unknown = np.flatnonzero(real == -1)
        return int(unknown[0]) if unknown.size else len(real)

    def trimmed(self):
        n = self.real_length
        return replace(
            self,
            questions=self.questions[:n],
            concepts=self.concepts[:n],
            responses=self.responses[:n],
            timestamps=self.timestamps[:n],
            selectmask=self.selectmask[:n],
            is_repeat=self.is_repeat[:n],
        )

    def with_responses(self, responses):
        return replace(self, responses=np.asarray(responses, dtype=np.int64))

    def question_groups(self):
        """Group id per position: consecutive rows of one question share an id."""
        starts = (self.is_repeat == 0).astype(np.int64)
        if len(starts):
            starts[0] = 1
        return np.cumsum(starts) - 1


@dataclass(frozen=True)
class IdMaps:
    question_map: dict
    kc_map: dict
    user_map: dict

    @property
    def num_questions(self):
        return len(self.question_map)

    @property
    def num_kcs(self):
        return len(self.kc_map)

    @property
    def num_users(self):
        return len(self.user_map)

    def counts(self):
        return {"questions": self.num_questions, "concepts": self.num_kcs, "uid": self.num_users}


@dataclass(frozen=True)
class QuestionInfo:
    content: tuple
    analysis: tuple
    kcs: tuple
    raw: dict = field(default_factory=dict, repr=False, compare=False)


@dataclass(frozen=True)
class QuestionBank:
    """Per-question tokens and KC lists keyed by internal question index, and KC routes."""

    questions: dict
    kc_routes: dict

    def kcs_of(self, question):
        try:
            kcs = self.questions[int(question)].kcs
        except KeyError:
            raise DataError(f"question {question} not in question bank") from None
        if not kcs:
            raise DataError(f"question {question} has no KCs")
        return kcs


# -- keyid2idx.json -----------------------------------------------------------

def _check_bijection(section, mapping):
    if not isinstance(mapping, dict):
        raise SchemaError(f"section {section!r} must be an object")
    seen = {}
    for key, idx in mapping.items():
        if not isinstance(idx, int) or isinstance(idx, bool) or idx < 0:
            raise CorruptMappingError(f"{section}: index for {key!r} is not a non-negative integer")
        if idx in seen:
            raise CorruptMappingError(f"{section}: {key!r} and {seen[idx]!r} share index {idx}")
        seen[idx] = key
    if seen and max(seen) != len(seen) - 1:
        raise CorruptMappingError(f"{section}: indices are not contiguous 0..{len(seen) - 1}")
    return {str(k): v for k, v in mapping.items()}


def id_maps_from_dict(doc):
    if not isinstance(doc, dict):
        raise SchemaError("keyid2idx root must be an object")
    if "questions" not in doc:
        raise SchemaError("keyid2idx is missing the 'questions' section")
    return IdMaps(
        question_map=_check_bijection("questions", doc["questions"]),
        kc_map=_check_bijection("concepts", doc.get("concepts", {})),
        user_map=_check_bijection("uid", doc.get("uid", {})),
    )


def parse_keyid2idx(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    return id_maps_from_dict(doc)


def write_keyid2idx(path, maps: IdMaps):
    doc = {"questions": maps.question_map, "concepts": maps.kc_map, "uid": maps.user_map}
    Path(path).write_text(json.dumps(doc))


# -- questions.json -----------------------------------------------------------

def _tokens(value):
    if value is None:
        return ()
    if isinstance(value, str):
        return tuple(value.split())
    return tuple(str(v) for v in value)


def parse_questions(path, maps: IdMaps):
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise SchemaError("questions.json root must be an object")
    questions, routes = {}, {}
    for orig_q, info in doc.items():
        if orig_q not in maps.question_map:
            raise SchemaError(f"questions.json: question {orig_q!r} missing from keyid2idx")
        kcs = []
        for route in info.get("kc_routes", []):
            parts = tuple(route.split(ROUTE_SEP))
            leaf = parts[-1]
            if leaf not in maps.kc_map:
                raise SchemaError(f"questions.json: KC {leaf!r} of question {orig_q!r} missing from keyid2idx")
            kc = maps.kc_map[leaf]
            routes.setdefault(kc, parts)
            if kc not in kcs:
                kcs.append(kc)
        questions[maps.question_map[orig_q]] = QuestionInfo(
            content=_tokens(info.get("content")),
            analysis=_tokens(info.get("analysis")),
            kcs=tuple(kcs),
            raw=info,
        )
    return QuestionBank(questions=questions, kc_routes=routes)


def write_questions(path, bank: QuestionBank, maps: IdMaps):
    inv_q = {v: k for k, v in maps.question_map.items()}
    doc = {}
    for q in sorted(bank.questions):
        info = bank.questions[q]
        doc[inv_q[q]] = {
            "content": " ".join(info.content),
            "analysis": " ".join(info.analysis),
            "kc_routes": [ROUTE_SEP.join(bank.kc_routes[k]) for k in info.kcs],
        }
    Path(path).write_text(json.dumps(doc))


# -- CSV helpers --------------------------------------------------------------

def _int_list(cell, column, line):
    cell = cell.strip()
    if not cell:
        return np.zeros(0, dtype=np.int64)
    try:
        return np.array([int(tok) for tok in cell.split(",")], dtype=np.int64)
    except ValueError:
        raise ParseError(f"column {column!r} holds a non-integer value", line) from None


def _join(values):
    return ",".join(str(int(v)) for v in values)


def _open_rows(path, required):
    fh = open(path, newline="")
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    return fh, reader, header


def _warn_extra(path, header, known):
    extra = [c for c in header if c not in known]
    if extra:
        warnings.warn(f"{path}: ignoring unknown column(s) {', '.join(extra)}", ParseWarning, stacklevel=3)


def _check_is_repeat(questions, is_repeat, line):
    bad = np.flatnonzero(is_repeat[1:] == 1)
    if bad.size and np.any(questions[bad + 1] != questions[bad]):
        raise ParseError("is_repeat=1 where the question differs from its predecessor", line)
    if np.any((is_repeat != 0) & (is_repeat != 1)):
        raise ParseError("is_repeat values must be 0 or 1", line)


def _check_indices(maps, questions, concepts, line):
    if maps is None or not len(questions):
        return
    if questions.min() < 0 or questions.max() >= maps.num_questions:
        raise ParseError("question index outside keyid2idx range", line)
    if concepts.min() < 0 or concepts.max() >= maps.num_kcs:
        raise ParseError("concept index outside keyid2idx range", line)


def validate_train_row(fold, uid, lists, window, line, maps=None):
    n = {len(v) for v in lists.values()}
    if len(n) != 1:
        raise ParseError("parallel list fields disagree in length", line)
    if fold not in range(5):
        raise SchemaError(f"line {line}: fold {fold} outside 0..4")
    length = n.pop()
    if window is not None and length != window:
        raise ParseError(f"sequence length {length} != padded window {window}", line)
    sm = lists["selectmasks"]
    if np.any((sm != 1) & (sm != PAD)):
        raise ParseError("selectmasks values must be 1 or -1", line)
    real = int(np.count_nonzero(sm == 1))
    if np.any(sm[:real] != 1):
        raise ParseError("padding (-1) in selectmasks is not a suffix", line)
    for col in ("questions", "concepts", "responses", "timestamps", "is_repeat"):
        if np.any(lists[col][real:] != PAD):
            raise ParseError(f"padded tail of {col!r} must be -1", line)
    resp = lists["responses"][:real]
    if np.any((resp != 0) & (resp != 1)):
        raise ParseError("training responses must be 0 or 1", line)
    if np.any(np.diff(lists["timestamps"][:real]) < 0):
        raise ParseError("timestamps decrease", line)
    _check_is_repeat(lists["questions"][:real], lists["is_repeat"][:real], line)
    _check_indices(maps, lists["questions"][:real], lists["concepts"][:real], line)


def parse_train_valid(path, window=WINDOW, maps=None):
    """Read train_valid_sequences.csv into padded InteractionSequences."""
    fh, reader, header = _open_rows(path, TRAIN_COLUMNS)
    _warn_extra(path, header, TRAIN_COLUMNS)
    out = []
    with fh:
        for row in reader:
            line = reader.line_num
            try:
                fold, uid = int(row["fold"]), int(row["uid"])
            except (TypeError, ValueError):
                raise ParseError("fold/uid must be integers", line) from None
            lists = {c: _int_list(row[c] or "", c, line) for c in _LIST_FIELDS}
            validate_train_row(fold, uid, lists, window, line, maps)
            out.append(
                InteractionSequence(
                    uid=uid,
                    fold=fold,
                    questions=lists["questions"],
                    concepts=lists["concepts"],
                    responses=lists["responses"],
                    timestamps=lists["timestamps"],
                    selectmask=lists["selectmasks"],
                    is_repeat=lists["is_repeat"],
                )
            )
    return out


def _expand_joined(questions, concept_tokens, responses, timestamps):
    qs, cs, rs, ts, rep = [], [], [], [], []
    for q, tok, r, t in zip(questions, concept_tokens, responses, timestamps):
        kcs = [int(k) for k in tok.split("_") if k != ""]
        if not kcs:
            raise DataError(f"question {q} has no KCs")
        for j, k in enumerate(kcs):
            qs.append(q)
            cs.append(k)
            rs.append(r)
            ts.append(t)
            rep.append(1 if j else 0)
    return qs, cs, rs, ts, rep


def validate_test_responses(responses, line=None):
    resp = np.asarray(responses)
    if np.any((resp != 0) & (resp != 1) & (resp != -1)):
        raise ParseError("test responses must be 0, 1 or -1", line)
    unknown = np.flatnonzero(resp == -1)
    if unknown.size and np.any(resp[unknown[0]:] != -1):
        raise ProtocolError(
            (f"line {line}: " if line else "") + "a known response follows an unknown (-1) one"
        )


def parse_test(path, maps=None):
    """Read pykt_test.csv; each sequence is a known prefix followed by a -1 suffix."""
    fh, reader, header = _open_rows(path, ("uid", "questions", "concepts", "responses", "timestamps"))
    _warn_extra(path, header, TEST_COLUMNS + ("fold", "selectmasks"))
    expanded = "is_repeat" in header
    out = []
    with fh:
        for row in reader:
            line = reader.line_num
            uid = int(row["uid"])
            questions = _int_list(row["questions"], "questions", line)
            responses = _int_list(row["responses"], "responses", line)
            timestamps = _int_list(row["timestamps"], "timestamps", line)
            if expanded:
                concepts = _int_list(row["concepts"], "concepts", line)
                is_repeat = _int_list(row["is_repeat"], "is_repeat", line)
            else:
                tokens = [t for t in row["concepts"].split(",")] if row["concepts"].strip() else []
                if len(tokens) != len(questions):
                    raise ParseError("parallel list fields disagree in length", line)
                q, concepts, responses, timestamps, is_repeat = _expand_joined(questions, tokens, responses, timestamps)
                questions = np.array(q, dtype=np.int64)
            if len({len(questions), len(concepts), len(responses), len(timestamps), len(is_repeat)}) != 1:
                raise ParseError("parallel list fields disagree in length", line)
            validate_test_responses(responses, line)
            questions, concepts = np.asarray(questions), np.asarray(concepts)
            _check_is_repeat(questions, np.asarray(is_repeat), line)
            _check_indices(maps, questions, concepts, line)
            if np.any(np.diff(timestamps) < 0):
                raise ParseError("timestamps decrease", line)
            out.append(
                InteractionSequence(
                    uid=uid,
                    questions=questions,
                    concepts=concepts,
                    responses=responses,
                    timestamps=timestamps,
                    selectmask=np.ones(len(questions), dtype=np.int64),
                    is_repeat=is_repeat,
                    raw={"header": tuple(header), "row": dict(row), "expanded": expanded},
                )
            )
    return out


def write_train_valid(path, sequences):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_COLUMNS)
        for s in sequences:
            writer.writerow(
                [
                    s.fold,
                    s.uid,
                    _join(s.questions),
                    _join(s.concepts),
                    _join(s.responses),
                    _join(s.timestamps),
                    _join(s.selectmask),
                    _join(s.is_repeat),
                ]
            )


def write_test(path, sequences):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TEST_COLUMNS)
        for s in sequences:
            writer.writerow(
                [s.uid, _join(s.questions), _join(s.concepts), _join(s.responses), _join(s.timestamps), _join(s.is_repeat)]
            )


# -- transforms ---------------------------------------------------------------

def expand_to_kc_level(question_seq: InteractionSequence, bank: QuestionBank) -> InteractionSequence:
    """Repeat each question once per KC; rows after the first carry is_repeat=1."""
    qs, cs, rs, ts, rep = [], [], [], [], []
    for q, r, t in zip(question_seq.questions, question_seq.responses, question_seq.timestamps):
        for j, k in enumerate(bank.kcs_of(q)):
            qs.append(q)
            cs.append(k)
            rs.append(r)
            ts.append(t)
            rep.append(1 if j else 0)
    return InteractionSequence(
        uid=question_seq.uid,
        fold=question_seq.fold,
        questions=qs,
        concepts=cs,
        responses=rs,
        timestamps=ts,
        selectmask=np.ones(len(qs), dtype=np.int64),
        is_repeat=rep,
    )


def truncate_and_pad(seq: InteractionSequence, window=WINDOW):
    """Cut into consecutive chunks of at most ``window`` and right-pad each with -1."""
    if window < 1:
        raise ValueError("window must be >= 1")
    seq = seq.trimmed() if np.any(seq.selectmask != 1) else seq
    chunks = []
    for start in range(0, len(seq), window):
        stop = min(start + window, len(seq))
        pad = window - (stop - start)

        def cut(arr):
            return np.concatenate([arr[start:stop], np.full(pad, PAD, dtype=np.int64)])

        chunks.append(
            InteractionSequence(
                uid=seq.uid,
                fold=seq.fold,
                questions=cut(seq.questions),
                concepts=cut(seq.concepts),
                responses=cut(seq.responses),
                timestamps=cut(seq.timestamps),
                selectmask=np.concatenate([np.ones(stop - start, dtype=np.int64), np.full(pad, PAD, dtype=np.int64)]),
                is_repeat=cut(seq.is_repeat),
            )
        )
    return chunks


def concatenate_real(chunks):
    """Inverse of truncate_and_pad: join the unpadded parts of consecutive chunks."""
    parts = [c.trimmed() for c in chunks]
    if not parts:
        return None
    first = parts[0]
    return replace(
        first,
        questions=np.concatenate([p.questions for p in parts]),
        concepts=np.concatenate([p.concepts for p in parts]),
        responses=np.concatenate([p.responses for p in parts]),
        timestamps=np.concatenate([p.timestamps for p in parts]),
        selectmask=np.concatenate([p.selectmask for p in parts]),
        is_repeat=np.concatenate([p.is_repeat for p in parts]),
    )


def dataset_stats(sequences):
    """Counts over real positions; interactions are question level (is_repeat == 0)."""
    students, questions, kcs = set(), set(), set()
    interactions = kc_rows = positives = n_sequences = 0
    for s in sequences:
        n_sequences += 1
        n = s.real_length
        students.add(s.uid)
        q, c, r, rep = s.questions[:n], s.concepts[:n], s.responses[:n], s.is_repeat[:n]
        questions.update(np.unique(q).tolist())
        kcs.update(np.unique(c).tolist())
        first = rep == 0
        interactions += int(np.count_nonzero(first))
        kc_rows += n
        positives += int(np.count_nonzero(first & (r == 1)))
    n_students = len(students)
    return {
        "students": n_students,
        "questions": len(questions),
        "kcs": len(kcs),
        "interactions": interactions,
        "kc_interactions": kc_rows,
        "sequences": n_sequences,
        "mean_length": interactions / n_students if n_students else 0.0,
        "positive_rate": 100.0 * positives / interactions if interactions else 0.0,
    }

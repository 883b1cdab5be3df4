import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kt_workbench import bkt, data, evaluation as ev, synth
from kt_workbench.bkt import BKTModel, BKTParams
from kt_workbench.dkt import DKT, DKTConfig
from kt_workbench.errors import CompletenessError, ProtocolError, UndefinedAUCError

from conftest import make_seq, random_seq


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def masked(seq, known):
    r = np.array(seq.responses)
    r[known : seq.real_length] = -1
    return seq.with_responses(r)


def question_seq(kcs, responses, uid=0):
    """One KC per question, so every position is its own question group."""
    return make_seq(kcs, responses, questions=list(range(len(kcs))), uid=uid)


class TestAUC:
    def test_hand_computed(self):
        assert ev.auc([0.9, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75

    def test_perfect_and_reversed(self):
        assert ev.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert ev.auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_ties_count_half(self):
        assert ev.auc([0.5, 0.5, 0.5], [1, 0, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedAUCError):
            ev.auc([0.2, 0.4], [1, 1])

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            ev.auc([0.2, 0.4], [1, 2])

    def test_matches_pairwise_definition(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            y = rng.integers(0, 2, n)
            y[0], y[1] = 0, 1
            s = rng.integers(0, 6, n) / 5.0  # coarse grid produces ties
            assert abs(ev.auc(s, y) - pairwise_auc(s, y)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1000).map(lambda i: i / 1000), st.integers(0, 1)), min_size=2, max_size=40))
    def test_invariances(self, pairs):
        s = np.array([p for p, _ in pairs])
        y = np.array([l for _, l in pairs])
        if y.min() == y.max():
            return
        base = ev.auc(s, y)
        assert 0.0 <= base <= 1.0
        assert ev.auc(np.sqrt(s), y) == pytest.approx(base, abs=1e-12)
        assert ev.auc(2 * s + 1, y) == pytest.approx(base, abs=1e-12)
        assert ev.auc(-s, y) == pytest.approx(1 - base, abs=1e-12)
        perm = np.random.default_rng(len(pairs)).permutation(len(s))
        assert ev.auc(s[perm], y[perm]) == pytest.approx(base, abs=1e-12)

    def test_accuracy(self):
        scores = [0.9, 0.2, 0.7, 0.4, 0.5, 0.1, 0.8, 0.3, 0.6, 0.45]
        labels = [1, 0, 1, 1, 0, 0, 1, 0, 0, 0]
        assert ev.accuracy(scores, labels) == pytest.approx(0.7)

    def test_macro_auc_skips_single_class(self):
        assert ev.macro_auc([[0.1, 0.9], [0.3, 0.4]], [[0, 1], [1, 1]]) == 1.0


class TestProtocol:
    model = BKTModel({0: BKTParams(0.3, 0.2, 0.1, 0.2), 1: BKTParams(0.6, 0.1, 0.2, 0.25)})

    def test_empty_prefix_is_an_error(self):
        seq = make_seq([0, 1], [-1, -1])
        with pytest.raises(ProtocolError):
            ev.predict_non_accumulative(self.model, seq)

    def test_observed_after_unknown_is_an_error(self):
        with pytest.raises(ProtocolError):
            ev.predict_accumulative(self.model, make_seq([0, 1, 0], [1, -1, 1]))

    def test_modes_agree_on_single_question_suffix(self, rng):
        neural = DKT(DKTConfig(num_kcs=2, hidden_dim=6), seed=0)
        for model in (self.model, neural):
            seq = masked(make_seq([0, 1, 0, 1], [1, 0, 1, 1], questions=[0, 1, 2, 2], is_repeat=[0, 0, 0, 1]), 2)
            a = ev.predict(model, seq, "accumulative")
            b = ev.predict(model, seq, "non_accumulative")
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_bkt_non_accumulative_uses_frozen_state(self):
        seq = masked(question_seq([0, 1, 0, 0, 1, 0], [1, 0, 1, 1, 1, 0]), 3)
        fill = ev.predict_non_accumulative(self.model, seq)
        p0, p1 = self.model.params[0], self.model.params[1]
        m0 = bkt.posterior_update(p0, bkt.posterior_update(p0, p0.pL0, 1), 1)
        m1 = bkt.posterior_update(p1, p1.pL0, 0)
        expected = [bkt.predict_correct(self.model.params[k], m) for k, m in ((0, m0), (1, m1), (0, m0))]
        np.testing.assert_allclose(fill, expected, atol=1e-14)

    def test_non_accumulative_fill_ignores_other_suffix_rows(self, rng):
        neural = DKT(DKTConfig(num_kcs=3, hidden_dim=6), seed=1)
        seq = masked(question_seq([0, 1, 2, 0, 1, 2], [1, 0, 1, 0, 0, 0]), 3)
        base = ev.predict_non_accumulative(neural, seq)
        changed = make_seq([0, 1, 2, 0, 2, 2], list(seq.responses), questions=list(range(6)))
        other = ev.predict_non_accumulative(neural, changed)
        assert other[0] == base[0] and other[2] == base[2]

    def test_accumulative_feeds_back_binarized_predictions(self):
        mastered = BKTModel({0: BKTParams(0.999, 0.5, 0.01, 0.2)})
        seq = masked(question_seq([0] * 8, [1] * 8), 2)
        fill = ev.predict_accumulative(mastered, seq)
        assert np.all(ev.binarize(fill) == 1)
        # feeding back 1s keeps the mastery probability from dropping
        assert np.all(np.diff(fill) >= -1e-15)
        # filtered_mastery gives the mastery before each observation
        expected_state = bkt.filtered_mastery(mastered.params[0], [1] * 8)[2:]
        np.testing.assert_allclose(fill, [bkt.predict_correct(mastered.params[0], m) for m in expected_state], atol=1e-12)

    def test_soft_feedback_needs_neural_model(self):
        with pytest.raises(ValueError):
            ev.predict_accumulative(self.model, masked(question_seq([0, 1], [1, 0]), 1), soft_feedback=True)

    def test_soft_feedback_differs_from_hard(self, rng):
        neural = DKT(DKTConfig(num_kcs=3, hidden_dim=6), seed=1)
        seq = masked(random_seq(rng, 10, 3, 10), 4)
        hard = ev.predict_accumulative(neural, seq)
        soft = ev.predict_accumulative(neural, seq, soft_feedback=True)
        assert hard[0] == soft[0] and len(hard) == len(soft) == 6

    def test_fill_lengths(self, small_dataset):
        model = BKTModel({})
        for mode in ev.MODES:
            fills = ev.predict(model, small_dataset.test, mode)
            for s, f in zip(small_dataset.test, fills):
                assert len(f) == s.real_length - s.known_length and not np.any(np.isnan(f))

    def test_mask_suffix_keeps_at_least_one_group(self):
        seq, known = ev.mask_suffix(question_seq([0, 1], [1, 1]), 0.1)
        assert known == 1 and list(seq.responses) == [1, -1]
        seq, known = ev.mask_suffix(question_seq([0, 1, 0, 1], [1, 0, 1, 0]), 0.5)
        assert known == 2

    def test_evaluate_fills(self, small_dataset):
        fills = ev.predict(BKTModel({}), small_dataset.test, "accumulative")
        report = ev.evaluate_fills(small_dataset.test, small_dataset.test_truth, fills, "accumulative")
        assert 0 <= report.auc <= 1 and report.scored == sum(len(f) for f in fills)
        assert report.question_scored <= report.scored


class TestSubmission:
    def test_complete_and_prefix_untouched(self, synth_dir, tmp_path):
        maps = data.parse_keyid2idx(synth_dir / synth.KEYID_FILE)
        test = data.parse_test(synth_dir / synth.TEST_FILE, maps)
        fills = ev.predict(BKTModel({}), test, "non_accumulative")
        out = ev.write_submission(test, fills, tmp_path / "sub.csv")
        with open(synth_dir / synth.TEST_FILE, newline="") as fh:
            original = list(csv.DictReader(fh))
        with open(out, newline="") as fh:
            written = list(csv.DictReader(fh))
        assert len(written) == len(original)
        for o, w in zip(original, written):
            for col in o:
                if col != "responses":
                    assert w[col] == o[col]
            src, dst = o["responses"].split(","), w["responses"].split(",")
            assert len(src) == len(dst)
            for a, b in zip(src, dst):
                if a == "-1":
                    assert 0.0 <= float(b) <= 1.0
                else:
                    assert a == b
            binary = w["binarized"].split(",")
            assert all(tok in ("0", "1") for tok in binary)
        rows = ev.read_submission(out)
        assert all("-1" not in map(str, probs) for _, probs, _ in rows)

    def test_missing_fill_is_rejected(self, synth_dir, tmp_path):
        maps = data.parse_keyid2idx(synth_dir / synth.KEYID_FILE)
        test = data.parse_test(synth_dir / synth.TEST_FILE, maps)
        fills = ev.predict(BKTModel({}), test, "non_accumulative")
        fills[0] = fills[0][:-1]
        with pytest.raises(CompletenessError):
            ev.write_submission(test, fills, tmp_path / "sub.csv")
        with pytest.raises(CompletenessError):
            ev.write_submission(test, fills[:-1], tmp_path / "sub.csv")

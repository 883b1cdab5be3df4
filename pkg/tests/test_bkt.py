import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kt_workbench import bkt, synth
from kt_workbench.bkt import BKTParams
from kt_workbench.errors import DegenerateEvidenceError, InsufficientDataError

from conftest import make_seq

P = BKTParams(pL0=0.5, pT=0.2, pS=0.1, pG=0.2)


def enumerate_likelihood(p, responses):
    """Sum over all 2^n hidden mastery paths (0 = unlearned, 1 = learned)."""
    total = 0.0
    for path in itertools.product((0, 1), repeat=len(responses)):
        prob = p.pL0 if path[0] else 1 - p.pL0
        for a, b in zip(path, path[1:]):
            if a == 1:
                prob *= 1.0 if b == 1 else 0.0
            else:
                prob *= p.pT if b == 1 else 1 - p.pT
        for s, r in zip(path, responses):
            pc = 1 - p.pS if s else p.pG
            prob *= pc if r else 1 - pc
        total += prob
    return total


def random_params(r):
    pS, pG = r.uniform(0, 0.5, 2)
    return BKTParams(pL0=r.uniform(), pT=r.uniform(), pS=pS, pG=pG)


class TestFiltering:
    def test_first_step_prediction(self):
        assert bkt.predict_correct(P, P.pL0) == pytest.approx(0.55, abs=1e-15)

    def test_noiseless_emission_returns_mastery(self):
        p = BKTParams(0.3, 0.1, 0.0, 0.0)
        assert bkt.predict_correct(p, 0.37) == 0.37

    def test_uninformative_emission(self):
        p = BKTParams(0.3, 0.0, 0.5, 0.5)
        assert bkt.predict_correct(p, 0.9) == 0.5
        assert bkt.posterior_update(p, 0.42, 1) == pytest.approx(0.42, abs=1e-15)

    def test_update_after_correct(self):
        m = bkt.posterior_update(P, 0.5, 1)
        post = 0.45 / 0.55
        assert m == pytest.approx(post + (1 - post) * 0.2, abs=1e-14)
        assert m == pytest.approx(0.854545, abs=1e-6)

    def test_mastery_is_absorbing(self):
        for obs in (0, 1):
            assert bkt.posterior_update(P, 1.0, obs) == 1.0

    def test_degenerate_evidence(self):
        with pytest.raises(DegenerateEvidenceError):
            bkt.posterior_update(BKTParams(0.0, 0.1, 0.1, 0.0), 0.0, 1)

    def test_affine_in_mastery(self, rng):
        for _ in range(50):
            p = random_params(rng)
            m1, m2 = rng.uniform(size=2)
            slope = (bkt.predict_correct(p, m2) - bkt.predict_correct(p, m1)) / (m2 - m1)
            assert slope == pytest.approx(1 - p.pS - p.pG, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.0, 0.49), st.floats(0.0, 0.49), st.integers(1, 12))
    def test_consecutive_correct_never_lowers_mastery(self, pL0, pT, pS, pG, n):
        p = BKTParams(pL0, pT, pS, pG)
        m = bkt.filtered_mastery(p, [1] * n)
        assert np.all(np.diff(m) >= -1e-15)


class TestLikelihood:
    def test_single_correct(self):
        assert bkt.sequence_likelihood(P, [1]) == pytest.approx(0.55, abs=1e-15)

    def test_two_correct_matches_enumeration(self):
        expected = enumerate_likelihood(P, [1, 1])
        assert expected == pytest.approx(0.439, abs=1e-12)
        assert bkt.sequence_likelihood(P, [1, 1]) == pytest.approx(expected, abs=1e-15)
        assert bkt.predict_correct(P, bkt.posterior_update(P, 0.5, 1)) == pytest.approx(0.798182, abs=1e-6)

    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_uninformative_emissions(self, n, rng):
        p = BKTParams(0.3, 0.4, 0.5, 0.5)
        assert bkt.sequence_likelihood(p, rng.integers(0, 2, n)) == pytest.approx(0.5**n, abs=1e-15)

    def test_matches_path_enumeration(self, rng):
        for _ in range(200):
            p = random_params(rng)
            r = rng.integers(0, 2, rng.integers(1, 9))
            assert abs(bkt.sequence_likelihood(p, r) - enumerate_likelihood(p, r)) <= 1e-12

    def test_empty_sequence(self):
        with pytest.raises(InsufficientDataError):
            bkt.sequence_likelihood(P, [])

    def test_batched_log_likelihood_agrees(self, rng):
        seqs = [rng.integers(0, 2, n) for n in (3, 8, 1, 5)]
        expected = sum(np.log(bkt.sequence_likelihood(P, s)) for s in seqs)
        assert bkt.log_likelihood(P, seqs) == pytest.approx(expected, abs=1e-10)


def simulate_kc(truth, students, steps, seed):
    gt = synth.GroundTruth(kc_names=["k"], params=[truth], questions=[(0,)], n_train=students, n_test=0, steps=steps, seed=seed)
    cohort = synth.simulate(gt, students, np.random.default_rng(seed))
    return list(cohort.responses)


class TestFitting:
    truth = BKTParams(pL0=0.3, pT=0.25, pS=0.1, pG=0.15)

    def test_em_recovers_generating_parameters(self):
        data = simulate_kc(self.truth, 500, 20, seed=3)
        fitted, history = bkt.fit_em(data)
        for name in ("pL0", "pT", "pS", "pG"):
            assert abs(getattr(fitted, name) - getattr(self.truth, name)) <= 0.05, name
        assert np.all(np.diff(history) >= 0)

    def test_grid_on_small_sample_is_valid_and_close(self):
        data = simulate_kc(self.truth, 150, 12, seed=4)
        fitted = bkt.fit_grid(data, step=0.05)
        assert fitted.pG + fitted.pS < 1
        assert bkt.log_likelihood(fitted, data) >= bkt.log_likelihood(self.truth, data) - 1e-9

    def test_all_correct_hits_boundary(self):
        fitted, history = bkt.fit_em([np.ones(10, dtype=int)] * 20)
        assert bkt.CLAMP <= min(fitted.pL0, fitted.pT, fitted.pS, fitted.pG)
        assert max(fitted.pL0, fitted.pT, fitted.pS, fitted.pG) <= 1 - bkt.CLAMP
        assert fitted.pG + fitted.pS < 1 and np.all(np.isfinite(history))

    def test_single_observation(self):
        fitted, _ = bkt.fit_em([[1]])
        assert fitted.pG + fitted.pS < 1

    def test_empty_group(self):
        with pytest.raises(InsufficientDataError):
            bkt.fit_em([])
        with pytest.raises(InsufficientDataError):
            bkt.fit_grid([[]])

    def test_em_history_non_decreasing_on_random_data(self, rng):
        data = [rng.integers(0, 2, rng.integers(1, 15)) for _ in range(40)]
        _, history = bkt.fit_em(data)
        assert all(b >= a for a, b in zip(history, history[1:]))

    def test_clamping_keeps_identifiability(self):
        c = BKTParams(0.0, 1.0, 0.6, 0.7).clamped()
        assert c.pG + c.pS < 1 and c.pL0 == bkt.CLAMP and c.pT == 1 - bkt.CLAMP

    def test_forgetting_is_rejected(self):
        with pytest.raises(ValueError):
            BKTParams(0.1, 0.1, 0.1, 0.1, pF=0.2)


class TestModel:
    def test_predictions_follow_the_filter_per_kc(self):
        model = bkt.BKTModel({0: P, 1: BKTParams(0.2, 0.1, 0.2, 0.3)})
        seq = make_seq([0, 1, 0, 0], [1, 0, 1, 0])
        p = model.predict_sequence(seq)
        assert np.isnan(p[0])
        assert p[1] == pytest.approx(bkt.predict_correct(model.params[1], 0.2))
        m0 = bkt.filtered_mastery(P, [1, 1])
        assert p[2] == pytest.approx(bkt.predict_correct(P, m0[1]))

    def test_expanded_rows_do_not_see_their_own_answer(self):
        model = bkt.BKTModel({0: P})
        a = make_seq([0, 0, 0], [1, 1, 1], questions=[3, 4, 4], is_repeat=[0, 0, 1])
        b = a.with_responses([1, 0, 0])
        np.testing.assert_array_equal(model.predict_sequence(a)[1:], model.predict_sequence(b)[1:])

    def test_save_and_load(self, tmp_path):
        from kt_workbench.checkpoint import load_model

        model = bkt.BKTModel({0: P, 3: BKTParams(0.2, 0.1, 0.2, 0.3)})
        model.save(tmp_path / "b.json")
        doc = json.loads((tmp_path / "b.json").read_text())
        assert set(doc["params"]) == {"0", "3"}
        back = load_model(tmp_path / "b.json")
        assert back.params == model.params and back.default == model.default

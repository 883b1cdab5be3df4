import numpy as np
import pytest

from kt_workbench import synth
from kt_workbench.data import InteractionSequence


def make_seq(concepts, responses, questions=None, is_repeat=None, uid=0, fold=None, timestamps=None):
    n = len(concepts)
    return InteractionSequence(
        uid=uid,
        fold=fold,
        questions=list(range(n)) if questions is None else questions,
        concepts=concepts,
        responses=responses,
        timestamps=list(range(n)) if timestamps is None else timestamps,
        selectmask=[1] * n,
        is_repeat=[0] * n if is_repeat is None else is_repeat,
    )


def random_seq(rng, n, num_kcs, num_questions, uid=0, fold=None):
    return make_seq(
        rng.integers(0, num_kcs, n).tolist(),
        rng.integers(0, 2, n).tolist(),
        questions=rng.integers(0, num_questions, n).tolist(),
        uid=uid,
        fold=fold,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_truth():
    return synth.default_scenario(n_train=100, n_test=20, steps=16, seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_truth):
    return synth.build(small_truth)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory, small_truth):
    out = tmp_path_factory.mktemp("synth")
    synth.generate(small_truth, out)
    return out

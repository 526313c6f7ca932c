from __future__ import annotations

import pytest

import helpers


@pytest.fixture(scope="session")
def train_seqs():
    return helpers.build_train_seqs()


@pytest.fixture(scope="session")
def eval_suite():
    return helpers.build_eval_suite()


@pytest.fixture(scope="session")
def trained(train_seqs, eval_suite, tmp_path_factory):
    """One full training run plus its evaluation artifacts on disk.

    Shared by the acceptance criteria that exercise the trained models;
    the idempotence criterion repeats the whole recipe and compares bytes.
    """
    seg, record, pre_state = helpers.train_segmenter_full(train_seqs)
    tracker = helpers.train_tracker_full(train_seqs)
    artifacts = tmp_path_factory.mktemp("run1")
    helpers.write_eval_artifacts(seg, tracker, eval_suite, artifacts)
    return {
        "seg": seg,
        "tracker": tracker,
        "record": record,
        "pre_state": pre_state,
        "artifacts": artifacts,
    }

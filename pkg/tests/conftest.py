"""Shared fixtures and the acceptance-summary hook.

Acceptance tests are named ``test_criterion_<n>_<slug>``; after the run, one
PASS/FAIL line per criterion is appended to the terminal summary so the
gate can be read without scrolling through the full pytest output.
"""

import re

import numpy as np
import pytest

from unlearnkit.data import generate_gaussian_blobs
from unlearnkit.models import ArchSpec
from unlearnkit.training import TrainConfig, train

_CRITERION = re.compile(r"test_criterion_(\d+)_([a-z0-9_]+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status != "error":
                continue
            m = _CRITERION.search(rep.location[2])
            if m:
                n, slug = int(m.group(1)), m.group(2)
                verdict = "PASS" if status == "passed" else "FAIL"
                # a criterion split over parametrized cases fails as a whole
                if outcomes.get(n, ("", "PASS"))[1] == "FAIL":
                    verdict = "FAIL"
                outcomes[n] = (slug, verdict)
    if not outcomes:
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for n in sorted(outcomes):
        slug, verdict = outcomes[n]
        tw.write_line(f"criterion {n}: {verdict}  {slug.replace('_', ' ')}")


@pytest.fixture(scope="session")
def blob_problem():
    """A well-separated 3-class problem with a converged logistic model.

    Shared read-only by tests that only need some trained model and its
    data; anything mutating state must build its own.
    """
    data = generate_gaussian_blobs(50, 3, 5, 3.0, seed=11)
    test = generate_gaussian_blobs(40, 3, 5, 3.0, seed=12, split_tag="test", id_start=150)
    arch = ArchSpec("logistic_regression", 5, 3)
    cfg = TrainConfig(optimizer="gd", learning_rate=0.5, epochs=5000, seed=3)
    result = train(data, arch, 0.05, cfg)
    assert result.converged
    return {
        "train": data, "test": test, "arch": arch, "l2_lambda": 0.05,
        "config": cfg, "result": result, "params": result.params,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20260822)

import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# a coarse grid with the same physical extent as the default phantom; keeps pipeline tests quick
SMALL_PHANTOM = {"dims": [24, 24, 16], "spacing_mm": [3.0, 3.0, 6.0]}
SMALL_TRAIN = {"epochs": 3, "samples_per_case": 400, "batch_size": 128, "class_balanced": False}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_gen_config(seed=0, n=None):
    n = n or {"A": 6, "B": 4, "C": 4, "D": 3}
    return {"version": 1, "seed": seed, "phantom": dict(SMALL_PHANTOM),
            "roles": {r: {"n": k} for r, k in n.items()}}


def small_pipeline_config(root, seed=0, folds=2, **extra):
    d = {"version": 1, "seed": seed, "folds": folds,
         "manifests": {r: str(Path(root) / r / "manifest.json") for r in "ABCD"},
         "train": {m: dict(SMALL_TRAIN) for m in ("teacher_a", "teacher_b", "ta", "student")}}
    d.update(extra)
    return d


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four tiny role datasets on disk, shared read-only by the pipeline/cli tests."""
    from selfseg.config import gen_config_from_dict
    from selfseg.phantom import generate_dataset

    root = tmp_path_factory.mktemp("small_ds")
    g = gen_config_from_dict(small_gen_config())
    for role, rc in g.roles.items():
        generate_dataset(rc.spec, role, rc.n, g.seed, root)
    return root


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])

import os

# single-threaded BLAS keeps timings honest and results reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import time  # noqa: E402
import warnings  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

from icaenc import synth  # noqa: E402
from icaenc.config import load_config  # noqa: E402
from icaenc.dataio import Mask, VolumeGrid, VolumeSeries  # noqa: E402
from icaenc.pipeline import Pipeline  # noqa: E402

settings.register_profile("icaenc", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("icaenc")

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        ACCEPTANCE[number] = (title, report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, outcome, detail = ACCEPTANCE[number]
        mark = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{mark}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# shared data
# ---------------------------------------------------------------------------

def small_series(rng, dims=(4, 3, 2), t=40, tr=2.0, mask=None):
    grid = VolumeGrid(dims, (2.0, 2.0, 2.0))
    mask = mask if mask is not None else Mask.full(grid)
    return VolumeSeries(grid, mask, tr, rng.standard_normal((t, mask.v)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_dataset():
    return synth.generate(synth.SynthSpec())


class PipelineRun:
    def __init__(self, dataset, config_path, seconds, pipeline):
        self.dataset = dataset
        self.config_path = config_path
        self.seconds = seconds
        self.pipeline = pipeline
        self.out = pipeline.out


def run_default_pipeline(dataset, root, n_perm=100):
    path = synth.write_dataset(dataset, root)
    cfg = load_config(path, {"stats.n_perm": n_perm})
    pipe = Pipeline(cfg)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipe.run_all()
    return PipelineRun(dataset, path, time.perf_counter() - start, pipe)


@pytest.fixture(scope="session")
def default_run(default_dataset, tmp_path_factory):
    """The default synthetic subject pushed through run-all once per session."""
    return run_default_pipeline(default_dataset, tmp_path_factory.mktemp("default_run"))

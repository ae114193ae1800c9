import time
from pathlib import Path

import pytest

from patchood.pipeline import RunConfig, cmd_evaluate, cmd_fit, cmd_score
from patchood.synth import ShiftSpec, generate

ACCEPTANCE_SPEC = ShiftSpec(d=64, n_train=1000, n_val=50, n_test=100, n_ood=100, mean_shift=5.0, seed=20211)

# method, extra RunConfig fields
BASELINES = [
    ("max_softmax", {}),
    ("temp_scaling", {"temperature": 10.0}),
    ("temp_scaling", {"temperature": 100.0}),
    ("temp_scaling", {"temperature": 1000.0}),
    ("kl_uniform", {}),
    ("mc_dropout", {}),
]


def run_pipeline(manifest_path: Path, out: Path, methods, workers: int = 1) -> dict:
    """fit -> score -> evaluate for each method; returns {tag: report doc}."""
    base = RunConfig(manifest=manifest_path, out=out, model=out / "model.zip", workers=workers)
    reports = {}
    for method, extra in methods:
        cfg = RunConfig(**{**base.__dict__, "method": method, **extra})
        if method == "mahalanobis":
            cmd_fit(cfg)
        summary = cmd_score(cfg)
        assert summary.ok, summary.failures
        reports[cfg.tag] = cmd_evaluate(cfg)
    return reports


@pytest.fixture(scope="session")
def acceptance_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    generate(ACCEPTANCE_SPEC, root / "data")
    return root / "data" / "manifest.json"


@pytest.fixture(scope="session")
def acceptance_run(acceptance_data, tmp_path_factory):
    """Single-threaded Mahalanobis run plus every baseline on the acceptance fixture."""
    out = tmp_path_factory.mktemp("acceptance_run")
    t0 = time.perf_counter()
    reports = run_pipeline(acceptance_data, out, [("mahalanobis", {})])
    elapsed = time.perf_counter() - t0
    reports.update(run_pipeline(acceptance_data, out, BASELINES))
    return {"out": out, "reports": reports, "mahalanobis_seconds": elapsed}


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

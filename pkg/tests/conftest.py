import pytest

# criterion number -> (passed, detail), filled in by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """One full scripted run on toy defaults (pretraining, distillation, sweeps, fusion)."""
    from controlpe.pipeline import run_pipeline

    return run_pipeline(tmp_path_factory.mktemp("run_a"), seed=0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

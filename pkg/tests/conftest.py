import numpy as np
import pytest

from pdfd.cli import main

TRAINED_EPOCHS = 30

# criterion name -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """Full model trained through the CLI once per session."""
    out = tmp_path_factory.mktemp("trained")
    code = main(["train", "--out", str(out), "--epochs", str(TRAINED_EPOCHS), "--quiet", "--no-figures"])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def trained_model(trained_run):
    from pdfd.trainer import load_trained

    return load_trained(trained_run / "checkpoint.bin")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {name}: {detail}")

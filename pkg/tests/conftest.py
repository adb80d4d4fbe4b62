from pathlib import Path

import pytest

import ssav
from ssav.model import load_model

CONFIG_DIR = Path(ssav.__file__).parent / "configs"

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def config_dir() -> Path:
    return CONFIG_DIR


@pytest.fixture(scope="session")
def model_gm():
    return load_model(CONFIG_DIR / "gaussian_mixture.json")


@pytest.fixture(scope="session")
def model_dw1():
    return load_model(CONFIG_DIR / "double_well_1.json")


@pytest.fixture(scope="session")
def model_dw2():
    return load_model(CONFIG_DIR / "double_well_2.json")


@pytest.fixture(scope="session")
def model_dw20():
    return load_model(CONFIG_DIR / "double_well_20.json")


@pytest.fixture(scope="session")
def model_bimodal():
    return load_model(CONFIG_DIR / "bimodal.json")


@pytest.fixture(scope="session")
def criterion():
    """Recorder for acceptance criteria: prints one pass/fail line each and
    fails the test on a red criterion."""

    def record(name: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, f"{name} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

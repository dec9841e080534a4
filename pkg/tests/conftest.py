import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(int(os.environ.get("CMDIFF_TEST_THREADS", "1")))

TOY_ROOT = Path(os.environ.get("CMDIFF_TOY_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "toy"))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """12 synthetic 16x16 pairs with precomputed edge files."""
    from cmdiff.data_io import generate_synthetic_pairs

    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_synthetic_pairs(root, 12, resolution=16, seed=3, with_edges=True)
    return root


@pytest.fixture(scope="session")
def toy_run():
    """Cached desk-scale toy run; trains on first use (slow on CPU)."""
    from cmdiff.toy import ensure_toy_run

    return ensure_toy_run(TOY_ROOT)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert."""

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_support import CriteriaLog, StandardRun  # noqa: E402

# deterministic single-threaded mode for every test
torch.set_num_threads(1)

_CRITERIA = CriteriaLog()


@pytest.fixture(scope="session")
def criteria():
    return _CRITERIA


@pytest.fixture(scope="session")
def standard(tmp_path_factory):
    root = os.environ.get("MTSS_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return StandardRun(root)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA.lines:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA.lines:
            terminalreporter.write_line(line)

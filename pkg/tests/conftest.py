import os
import re
from pathlib import Path

import numpy as np
import pytest
import torch

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture(scope="session")
def data_dir():
    return Path(os.environ.get("TIMEVQ_DATA_DIR", DATA_DIR))


def write_ucr(path, rows, sep="\t"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(sep.join(str(v) for v in r) for r in rows) + "\n")
    return path


def has_dataset(name):
    root = Path(os.environ.get("TIMEVQ_DATA_DIR", DATA_DIR))
    return (root / name / f"{name}_TRAIN.tsv").exists()


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(re.match(r"\d+", s).group()), s)):
        terminalreporter.write_line(line)

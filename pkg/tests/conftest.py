import numpy as np
import pytest

from cupart import dataset


@pytest.fixture(scope="session")
def intra_db(tmp_path_factory):
    """Manifest path of a small intra database (6 stills of 128x128)."""
    d = tmp_path_factory.mktemp("intra")
    src = dataset.gen_synthetic(11, 6, 128, 128, "stills", d / "src")
    dataset.build_db(src, out=d / "db.cphs")
    return d / "db.json"


@pytest.fixture(scope="session")
def inter_db(tmp_path_factory):
    """Manifest path of a small inter (residue) database: 3 sequences, 12 frames."""
    d = tmp_path_factory.mktemp("inter")
    src = dataset.gen_synthetic(12, 3, 128, 128, "sequence", d / "src", frames=12)
    dataset.build_db(src, mode="inter", out=d / "db.cphs")
    return d / "db.json"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

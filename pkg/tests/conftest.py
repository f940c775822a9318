import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gmixer.graphs import MolecularGraph  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_graph(rng, n, p=0.4, vocab_atoms=5, vocab_bonds=3):
    bonds = [(i, j, int(rng.integers(vocab_bonds)))
             for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    atoms = tuple(int(a) for a in rng.integers(1, vocab_atoms + 1, size=n))
    return MolecularGraph(atoms, tuple(bonds), float(rng.normal()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def path3():
    return MolecularGraph((1, 2, 1), ((0, 1, 0), (1, 2, 1)), 0.5)

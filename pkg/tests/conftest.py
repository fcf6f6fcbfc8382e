import numpy as np
import pytest

from leaf.predictor import BranchConfig, Predictor
from leaf.stgraph import RoadNetwork, build_st_graph


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (modifies ``x`` in place, restores it)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = f()
        flat[j] = orig - h
        down = f()
        flat[j] = orig
        gflat[j] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_network():
    # 4 vertices: a path 0-1-2 plus a pendant 3 hanging off 1
    return RoadNetwork.from_edges(4, [(0, 1), (1, 2), (1, 3)])


@pytest.fixture
def toy_cfg():
    return BranchConfig(d=8, L=2, m=3, T=3, T_out=3)


@pytest.fixture
def toy_setup(toy_network, toy_cfg):
    st = build_st_graph(toy_network, toy_cfg.T)
    predictor = Predictor.init(toy_cfg, seed=7)
    return st, predictor


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from ssp.graph import Partition, build_graph

# Nine-vertex example: a square (v0..v3), a path v4-v6-v5 and a pair v7-v8,
# linked by six transition edges.
NINE_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (7, 8),
    (4, 6), (6, 5),
    (1, 7), (7, 2), (2, 8),
    (3, 4), (4, 2), (2, 5),
]
NINE_GT = [0, 0, 0, 0, 1, 1, 1, 2, 2]
NINE_PROPOSED = [0, 0, 0, 0, 0, 0, 0, 1, 2]


@pytest.fixture
def nine_vertex():
    g = build_graph(9, NINE_EDGES)
    return g, Partition(NINE_GT), Partition(NINE_PROPOSED)


def random_graph(rng, n, p=0.4, connected=False):
    """Erdos-Renyi graph; with ``connected`` a random spanning tree is added."""
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = list(zip(iu[0][keep], iu[1][keep]))
    if connected:
        perm = rng.permutation(n)
        for i in range(1, n):
            edges.append((perm[i], perm[rng.integers(i)]))
    return build_graph(n, edges)



_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, text = mark.args
    entry = _CRITERIA.setdefault(n, dict(text=text, ok=True, details={}))
    entry["ok"] &= rep.passed
    entry["details"].update(item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        detail = ", ".join(f"{k}={v}" for k, v in entry["details"].items())
        line = f"{'PASS' if entry['ok'] else 'FAIL'}  {n:2d}. {entry['text']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))

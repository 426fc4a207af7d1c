import itertools

import networkx as nx
import numpy as np
import pytest

from ssp.gmpp.maxflow import binary_labeling


def energy(unary, pairs, w, x):
    return unary[np.arange(len(x)), x].sum() + (w * (x[pairs[:, 0]] != x[pairs[:, 1]])).sum()


def brute(unary, pairs, w):
    n = len(unary)
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n):
        best = min(best, energy(unary, pairs, w, np.array(bits)))
    return best


def random_instance(rng, n):
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < 0.4
    pairs = np.stack([iu[0][keep], iu[1][keep]], 1)
    return rng.random((n, 2)) * 2, pairs, rng.random(len(pairs)) * rng.choice([0.1, 1.0, 3.0])


@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    unary, pairs, w = random_instance(rng, n)
    x = binary_labeling(unary, pairs, w)
    assert set(np.unique(x)) <= {0, 1}
    assert energy(unary, pairs, w, x) == pytest.approx(brute(unary, pairs, w), abs=1e-10)


def test_matches_networkx_min_cut_on_larger_graph():
    rng = np.random.default_rng(0)
    n = 300
    unary, pairs, w = random_instance(rng, n)
    pairs, w = pairs[::20], w[::20]
    x = binary_labeling(unary, pairs, w)
    d = unary - unary.min(1, keepdims=True)
    G = nx.DiGraph()
    for i in range(n):
        G.add_edge("s", i, capacity=d[i, 1])
        G.add_edge(i, "t", capacity=d[i, 0])
    for (i, j), c in zip(pairs, w):
        G.add_edge(i, j, capacity=c)
        G.add_edge(j, i, capacity=c)
    cut, _ = nx.minimum_cut(G, "s", "t")
    ours = energy(unary, pairs, w, x) - unary.min(1).sum()
    assert ours == pytest.approx(cut, rel=1e-9)


def test_trivial_cases():
    assert binary_labeling(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)).size == 0
    x = binary_labeling(np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros((0, 2)), np.zeros(0))
    assert x.tolist() == [0, 1]
    # strong coupling forces agreement
    x = binary_labeling(np.array([[0.0, 1.0], [0.4, 0.0]]), np.array([[0, 1]]), np.array([10.0]))
    assert x.tolist() == [0, 0]

import itertools
from pathlib import Path

import numpy as np
import pytest

from rspnkit.bayesnet import BayesNet, BnVariable, Cpt, IohmmSpec

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def random_bn(rng, n_vars, max_parents=3, cardinality=2):
    """Random DAG over ``n_vars`` variables (declared in a shuffled order) with Dirichlet CPTs."""
    rng = np.random.default_rng(rng)
    order = [f"v{i}" for i in range(n_vars)]
    cards = {v: (cardinality if np.isscalar(cardinality) else int(rng.integers(*cardinality))) for v in order}
    cpts = {}
    for i, v in enumerate(order):
        k = int(rng.integers(0, min(i, max_parents) + 1))
        parents = tuple(rng.choice(order[:i], size=k, replace=False).tolist()) if k else ()
        shape = tuple(cards[p] for p in parents) + (cards[v],)
        table = rng.dirichlet(np.ones(cards[v]), size=shape[:-1]).reshape(shape)
        cpts[v] = Cpt(v, parents, table)
    declared = list(rng.permutation(order))
    return BayesNet([BnVariable(v, cards[v]) for v in declared], cpts)


def assignments(cards):
    names = list(cards)
    for values in itertools.product(*(range(cards[n]) for n in names)):
        yield dict(zip(names, values))


def brute_marginal(net, evidence):
    """Sum of CPT products over all completions of ``evidence``."""
    total = 0.0
    for a in assignments(net.cardinality):
        if all(v is None or a[k] == v for k, v in evidence.items()):
            total += net.joint(a)
    return total


@pytest.fixture
def generator():
    return IohmmSpec.load(CONFIGS / "generator_iohmm.json")


@pytest.fixture
def chain_bn():
    """A -> B -> C with hand-picked tables."""
    return BayesNet(
        [BnVariable("A", 2), BnVariable("B", 2), BnVariable("C", 3)],
        {
            "A": Cpt("A", (), np.array([0.3, 0.7])),
            "B": Cpt("B", ("A",), np.array([[0.9, 0.1], [0.2, 0.8]])),
            "C": Cpt("C", ("B",), np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])),
        },
    )


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)

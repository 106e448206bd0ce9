import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cstp.decoder import PeelingGraph, build_graph, is_complete, peel
from cstp.model import ContractViolation, RunMetrics, SlotSignal, SplitTree, Trace, TreeNode, UserPopulation, split, transmit
from oracles import peel_all_orders, peel_fixed_point


def graph_of(checks):
    g = PeelingGraph()
    for i, c in enumerate(checks):
        g.add_check(i, c)
    return g


def random_checks(rng, users, trees):
    """Each tree splits the users into a random number of possibly empty leaves."""
    checks = []
    for _ in range(trees):
        leaves = int(rng.integers(1, users + 2))
        where = rng.integers(0, leaves, size=users)
        checks.extend(frozenset(np.flatnonzero(where == j).tolist()) for j in range(leaves))
    return checks


def grown_trees(n, k, seed, steps):
    pop = UserPopulation(n, seed)
    rng = np.random.default_rng(seed)
    trees, m = [SplitTree(i) for i in range(k)], RunMetrics()
    for t in trees:
        transmit(pop, t, t.root, m)
    incremental = build_graph(trees)
    peel(incremental)
    for _ in range(steps):
        pending = [(t, leaf) for t in trees for leaf in t.collision_leaves()]
        if not pending:
            break
        t, leaf = pending[int(rng.integers(len(pending)))]
        left, right = split(t, leaf, pop, m)
        incremental.replace_check(
            (t.index, leaf.path), [((t.index, left.path), left.signal.active), ((t.index, right.path), right.signal.active)]
        )
        peel(incremental)
    return trees, incremental


# ---------------------------------------------------------------- examples


def test_chain():
    g = graph_of([frozenset({1}), frozenset({1, 2})])
    assert peel(g) == {1, 2}
    assert is_complete(g)


def test_stopping_set():
    g = graph_of([frozenset({1, 2}), frozenset({1, 2})])
    assert peel(g) == set()
    assert not is_complete(g)
    assert sorted(g.unresolved_checks()) == [0, 1]


def test_empty_population_is_complete():
    assert is_complete(PeelingGraph())
    assert is_complete(graph_of([frozenset()]))


def test_single_tree_resolved_at_build():
    trees, _ = grown_trees(6, 1, seed=2, steps=200)
    g = build_graph(trees)
    assert g.resolved == set(range(6))


def test_replica_cancellation():
    t0, t1 = SplitTree(0), SplitTree(1)
    t0.root.signal = SlotSignal(frozenset({0, 1, 2, 3}))
    a, b = TreeNode("0", SlotSignal(frozenset({0}))), TreeNode("1", SlotSignal(frozenset({1, 2, 3})))
    c, d = TreeNode("0", SlotSignal(frozenset({0, 1, 2}))), TreeNode("1", SlotSignal(frozenset({3})))
    t0.leaves, t1.leaves = [a, b], [c, d]
    g = build_graph([t0, t1])
    assert g.resolved == {0, 3}
    assert g.residual_degree((1, "0")) == 2
    assert g.residual_degree((0, "1")) == 2
    assert g.resolved_in((1, "0")) == 1


def test_missing_signal_rejected():
    with pytest.raises(ContractViolation):
        build_graph([SplitTree(0)])


def test_duplicate_check_rejected():
    g = graph_of([frozenset({1})])
    with pytest.raises(ContractViolation):
        g.add_check(0, {2})


def test_decode_events_name_their_check():
    trace = Trace()
    g = PeelingGraph(trace=trace)
    g.add_check("a", {1})
    g.add_check("b", {1, 2})
    peel(g)
    assert trace == [("decode", 1, "a"), ("decode", 2, "b")]


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("case", range(25))
def test_confluence_exhaustive(case):
    rng = np.random.default_rng(case)
    checks = random_checks(rng, int(rng.integers(1, 11)), int(rng.integers(1, 4)))
    finals = peel_all_orders(checks)
    assert len(finals) == 1
    g = graph_of(checks)
    peel(g)
    assert frozenset(g.resolved) == finals.pop() == peel_fixed_point(checks)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 3), st.integers(0, 2**32), st.integers(0, 40))
def test_incremental_equals_batch(n, k, seed, steps):
    trees, incremental = grown_trees(n, k, seed, steps)
    batch = build_graph(trees)
    peel(batch)
    assert incremental.resolved == batch.resolved
    assert set(incremental.original) == set(batch.original)
    for key in batch.residual:
        assert incremental.residual[key] == batch.residual[key] == set(batch.original[key] - batch.resolved)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_adding_checks_never_loses_users(seed):
    rng = np.random.default_rng(seed)
    checks = random_checks(rng, int(rng.integers(1, 11)), 3)
    g = graph_of(checks[:-2])
    peel(g)
    before = set(g.resolved)
    g.add_check("x", checks[-2])
    g.add_check("y", checks[-1])
    peel(g)
    assert before <= g.resolved


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 3), st.integers(0, 2**32))
def test_each_user_in_one_leaf_per_tree(n, k, seed):
    trees, g = grown_trees(n, k, seed, 15)
    for u in range(n):
        keys = [key for key, members in g.original.items() if u in members]
        assert len(keys) == k
        assert len({t for t, _ in keys}) == k

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cstp.model import ContractViolation, RunMetrics, ScriptedPopulation, SplitTree, Trace, UserPopulation, transmit
from cstp.protocols import (
    FeedbackPolicy,
    replay,
    run_bts,
    run_cstp,
    run_estimation_phase,
    run_scheme,
    run_sicta,
    verify_soundness,
)
from cstp.walkthrough import run_worked_example
from oracles import bts_two_user_expected_throughput, sicta_two_user_expected_slots, sicta_two_user_expected_throughput


def internal_nodes(tree):
    count, stack = 0, [tree.root]
    while stack:
        node = stack.pop()
        if node.children:
            count += 1
            stack.extend(node.children)
    return count


def events(result, kind):
    return [e for e in result.trace if e[0] == kind]


# ---------------------------------------------------------------- baselines


@pytest.mark.parametrize("engine", [run_bts, run_sicta])
def test_one_user(engine):
    res = engine(UserPopulation(1, 0))
    assert res.metrics.slots_used == 1
    assert res.metrics.throughput == 1.0


def test_bts_two_users_split_at_once():
    res = run_bts(ScriptedPopulation([["0", "1"]]))
    assert res.metrics.slots_used == 3
    assert res.metrics.throughput == pytest.approx(2 / 3)


def test_two_user_means_match_recursion():
    seeds = range(4000)
    sicta = [run_sicta(UserPopulation(2, s)) for s in seeds]
    bts = [run_bts(UserPopulation(2, s)) for s in seeds]
    slots = np.array([r.metrics.slots_used for r in sicta])
    assert abs(slots.mean() - float(sicta_two_user_expected_slots())) < 4 * slots.std() / math.sqrt(len(slots))
    for runs, want in ((sicta, sicta_two_user_expected_throughput()), (bts, bts_two_user_expected_throughput())):
        t = np.array([r.metrics.throughput for r in runs])
        assert abs(t.mean() - want) < 4 * t.std() / math.sqrt(len(t))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32))
def test_baseline_slot_counts(n, seed):
    bts = run_bts(UserPopulation(n, seed))
    sicta = run_sicta(UserPopulation(n, seed))
    assert bts.metrics.slots_used == 1 + 2 * internal_nodes(bts.trees[0])
    assert sicta.metrics.slots_used == 1 + internal_nodes(sicta.trees[0])
    for res in (bts, sicta):
        assert res.recovered_users == set(range(n))
        assert replay(res.trace) == res.metrics
        verify_soundness(res.trace)


def test_bts_feedback_is_one_per_round():
    res = run_bts(UserPopulation(20, 3))
    depth = max(len(leaf.path) for leaf in res.trees[0].leaves)
    assert res.metrics.feedback == depth


def test_sicta_is_depth_first_left_first():
    res = run_sicta(UserPopulation(25, 8))
    paths = [e[2] for e in events(res, "transmit")][1:]
    parents = [p[:-1] for p in paths]
    # a left-first stack visits parents in preorder
    stack, order = [""], []
    tree = res.trees[0]
    while stack:
        path = stack.pop()
        node = tree.find(path)
        if node.children:
            order.append(path)
            stack.extend([path + "1", path + "0"])
    assert parents == order


# ---------------------------------------------------------------- estimation


def test_estimation_needs_alpha_in_range():
    pop = UserPopulation(4, 0)
    trees, m = [SplitTree(0)], RunMetrics()
    transmit(pop, trees[0], trees[0].root, m)
    for alpha in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            run_estimation_phase(trees, pop, alpha, m)


def test_estimation_needs_transmitted_roots():
    with pytest.raises(ContractViolation):
        run_estimation_phase([SplitTree(0)], UserPopulation(3, 0), 0.2, RunMetrics())


def test_estimation_with_one_user():
    pop = UserPopulation(1, 0)
    trees, m = [SplitTree(0), SplitTree(1)], RunMetrics()
    for t in trees:
        transmit(pop, t, t.root, m)
    profile = run_estimation_phase(trees, pop, 0.3, m)
    assert [p.as_dict() for p in profile.posteriors] == [{1: 1.0}, {1: 1.0}]
    assert m.slots_used == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 120), st.integers(0, 2**32), st.sampled_from([0.1, 0.2, 0.35, 0.5]))
def test_estimation_stops_just_past_alpha(n, seed, alpha):
    pop = UserPopulation(n, seed)
    trees, m, trace = [SplitTree(k) for k in range(2)], RunMetrics(), Trace()
    for t in trees:
        transmit(pop, t, t.root, m, trace)
    profile = run_estimation_phase(trees, pop, alpha, m, trace)
    for t in trees:
        observed = sum(float(l.mass) for l in t.leaves if l.status.observed_degree is not None)
        assert observed > alpha
        # the last observation pushed it over, so without it we were at or below alpha
        cover = [e[2] for e in trace if e[0] == "covered" and e[1] == t.index]
        if len(cover) > 1:
            assert cover[-2] <= alpha
    assert len(profile) == sum(len(t.leaves) for t in trees)
    assert profile.labels == [(t.index, l.path) for t in trees for l in t.leaves]


# ---------------------------------------------------------------- CSTP


@pytest.mark.parametrize("k", [2, 3, 4])
def test_cstp_one_user(k):
    res = run_cstp(UserPopulation(1, 0), K=k, alpha=0.3)
    assert res.metrics.slots_used == k
    assert res.metrics.throughput == pytest.approx(1 / k)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 80), st.integers(2, 4), st.sampled_from([0.1, 0.2, 0.3, 0.45]), st.integers(0, 2**32))
def test_cstp_recovers_everyone(n, k, alpha, seed):
    res = run_cstp(UserPopulation(n, seed), K=k, alpha=alpha)
    m = res.metrics
    assert res.recovered_users == set(range(n))
    assert m.recovered == len(res.recovered_users) == n
    assert 0 < m.throughput <= 1
    assert replay(res.trace) == m
    verify_soundness(res.trace)
    splits = sum(internal_nodes(t) for t in res.trees)
    assert m.slots_used == k + splits


def test_cstp_feedback_accounting():
    for seed in range(15):
        res = run_cstp(UserPopulation(48, seed), K=3, alpha=0.25)
        kinds = {}
        for _, kind, count in events(res, "feedback"):
            kinds[kind] = kinds.get(kind, 0) + count
        end = max(i for i, e in enumerate(res.trace) if e[0] == "estimation_end")
        est_splits = sum(1 for e in res.trace[:end] if e[0] == "transmit" and e[2])
        assert kinds.get("estimation", 0) == est_splits
        assert kinds.get("order", 0) == (1 if res.planned_order_length else 0)
        assert kinds.get("tail", 0) == res.tail_splits
        assert kinds["terminate"] == 1
        assert res.metrics.feedback == sum(kinds.values())


def test_zero_feedback_policy():
    res = run_cstp(UserPopulation(30, 1), K=3, alpha=0.2, policy=FeedbackPolicy(0, 0, 0, 0))
    assert res.metrics.feedback == 0
    assert res.recovered_users == set(range(30))


def test_feedback_grows_with_alpha():
    f = {a: np.mean([run_cstp(UserPopulation(64, s), K=3, alpha=a).metrics.feedback for s in range(25)]) for a in (0.1, 0.3, 0.5)}
    assert f[0.1] < f[0.3] < f[0.5]


def test_decode_attempt_after_every_split_past_estimation():
    for seed in range(10):
        res = run_cstp(UserPopulation(64, seed), K=3, alpha=0.2)
        start = max(i for i, e in enumerate(res.trace) if e[0] == "estimation_end")
        tail = res.trace[start + 1 :]
        pending = False
        for e in tail:
            if e[0] == "transmit":
                assert not pending
                pending = True
            elif e[0] == "decode_attempt":
                pending = False
        assert not pending
        assert res.decode_attempts == len(events(res, "decode_attempt"))


def test_cstp_is_reproducible():
    a = run_cstp(UserPopulation(50, 11), K=3, alpha=0.2)
    b = run_cstp(UserPopulation(50, 11), K=3, alpha=0.2)
    assert a.trace == b.trace
    assert a.metrics == b.metrics


def test_per_tree_inference_mode_runs():
    res = run_cstp(UserPopulation(40, 2), K=3, alpha=0.2, joint=False)
    assert res.recovered_users == set(range(40))


# ---------------------------------------------------------------- worked example


def test_worked_example_phase_boundaries():
    res = run_worked_example()
    ends = {e[1]: e[2] for e in events(res, "estimation_end")}
    assert ends == {0: pytest.approx(0.375), 1: pytest.approx(0.375)}
    cover = [(e[1], e[2]) for e in events(res, "covered")]
    assert cover == [(0, 0.125), (0, 0.375), (1, 0.125), (1, 0.375)]
    left, right = res.trees
    # left tree observes 1/8 first, then restarts at the level-2 collision and sees 1/4
    first = [e for e in events(res, "transmit") if e[1] == 0][:4]
    assert [e[2] for e in first] == ["", "0", "00", "000"]
    assert left.find("1").children is not None
    assert left.find("11").status.observed_degree == 1
    # the right tree's three observations all sit at level 4
    obs_levels = sorted(l.level for l in right.leaves if l.status.observed_degree is not None and len(l.path) <= 3)
    assert obs_levels[:3] == [4, 4, 4]


def test_worked_example_decodes_after_each_planned_split():
    res = run_worked_example()
    planned = [e for e in res.trace if e[0] == "decode_attempt" and e[1] == "planned"]
    executed = len(res.order) - len(events(res, "skip"))
    assert len(res.order) > 0
    assert len(planned) == executed
    verify_soundness(res.trace)
    assert res.recovered_users == set(range(12))


# ---------------------------------------------------------------- misc


def test_policy_parse():
    assert FeedbackPolicy.parse("1,2,3,4") == FeedbackPolicy(1, 2, 3, 4)
    named = FeedbackPolicy.parse("order=0,terminate=2")
    assert named == FeedbackPolicy(order_broadcast=0, terminate=2)
    assert FeedbackPolicy.parse(named.describe()) == named
    with pytest.raises(ValueError):
        FeedbackPolicy.parse("1,2")
    with pytest.raises(ValueError):
        FeedbackPolicy.parse("bogus=1")
    with pytest.raises(ValueError):
        FeedbackPolicy(-1)


def test_run_scheme_dispatch():
    assert run_scheme("bts", 5, 0).scheme == "BTS"
    assert run_scheme("SICTA", 5, 0).scheme == "SICTA"
    assert run_scheme("cstp", 5, 0, K=2, alpha=0.2).scheme == "CSTP"
    with pytest.raises(ValueError):
        run_scheme("ALOHA", 5, 0)


def test_soundness_catches_forged_decode():
    res = run_sicta(UserPopulation(6, 0))
    forged = Trace(res.trace)
    forged.record("decode", 99, ("no", "such"))
    with pytest.raises(AssertionError):
        verify_soundness(forged)
    forged = Trace(e for e in res.trace if e[0] != "transmit" or e[2] != "")
    with pytest.raises(AssertionError):
        verify_soundness(forged)

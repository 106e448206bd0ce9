"""Protocol engines: plain binary tree splitting, SICTA, and the coded splitting tree protocol."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from .decoder import PeelingGraph, build_graph, is_complete, peel
from .inference import (
    DEFAULT_EPS_TAIL,
    DegreeProfile,
    LeafDegreePosterior,
    LeafObservation,
    infer_profile,
)
from .model import (
    ContractViolation,
    RunMetrics,
    SlotStatus,
    SplitTree,
    Trace,
    TreeNode,
    UserPopulation,
    classify,
    SlotSignal,
    split,
    transmit,
)
from .planner import (
    DEFAULT_IMPROVEMENT_EPS,
    RewardFunction,
    SplitOrder,
    plan_split_order,
    select_tail_split,
)


@dataclass(frozen=True)
class FeedbackPolicy:
    estimation_per_slot: int = 1
    order_broadcast: int = 1
    tail_per_split: int = 1
    terminate: int = 1

    def __post_init__(self):
        if min(self.estimation_per_slot, self.order_broadcast, self.tail_per_split, self.terminate) < 0:
            raise ValueError("feedback counts must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "FeedbackPolicy":
        """Accepts ``"1,1,1,1"`` or ``"estimation=1,order=1,tail=1,terminate=1"``."""
        names = {
            "estimation": "estimation_per_slot",
            "estimation_per_slot": "estimation_per_slot",
            "order": "order_broadcast",
            "order_broadcast": "order_broadcast",
            "tail": "tail_per_split",
            "tail_per_split": "tail_per_split",
            "terminate": "terminate",
        }
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if all("=" not in p for p in parts):
            if len(parts) != 4:
                raise ValueError("positional feedback policy needs four counts")
            return cls(*(int(p) for p in parts))
        kwargs = {}
        for p in parts:
            key, _, val = p.partition("=")
            if key.strip() not in names:
                raise ValueError(f"unknown feedback policy field {key!r}")
            kwargs[names[key.strip()]] = int(val)
        return cls(**kwargs)

    def describe(self) -> str:
        return (
            f"estimation={self.estimation_per_slot},order={self.order_broadcast},"
            f"tail={self.tail_per_split},terminate={self.terminate}"
        )


@dataclass
class ProtocolResult:
    scheme: str
    metrics: RunMetrics
    trees: list[SplitTree]
    recovered_users: set
    trace: Trace
    planned_order_length: int = 0
    tail_splits: int = 0
    decode_attempts: int = 0
    order: SplitOrder | None = None


def _feedback(metrics: RunMetrics, trace: Trace, kind: str, count: int) -> None:
    if count:
        metrics.feedback += count
        trace.record("feedback", kind, count)


def _finish(scheme, metrics, trees, recovered, trace, **extra) -> ProtocolResult:
    metrics.recovered = len(recovered)
    return ProtocolResult(scheme, metrics, trees, set(recovered), trace, **extra)


def _record_singles(tree: SplitTree, trace: Trace) -> set:
    found = set()
    for leaf in tree.leaves:
        if leaf.status is SlotStatus.SINGLE:
            (user,) = leaf.signal.active
            found.add(user)
            trace.record("decode", user, (tree.index, leaf.path))
    return found


def run_bts(population: UserPopulation, policy: FeedbackPolicy | None = None) -> ProtocolResult:
    """Level-by-level binary splitting without SIC: both children of every split are transmitted."""
    metrics, trace = RunMetrics(), Trace()
    tree = SplitTree(0)
    transmit(population, tree, tree.root, metrics, trace)
    while True:
        pending = tree.collision_leaves()
        if not pending:
            break
        _feedback(metrics, trace, "round", 1)
        for leaf in pending:
            split(tree, leaf, population, metrics, trace, sic=False)
    return _finish("BTS", metrics, [tree], _record_singles(tree, trace), trace)


def run_sicta(population: UserPopulation, policy: FeedbackPolicy | None = None) -> ProtocolResult:
    """Depth-first, left-first splitting where each split transmits one child and derives the other."""
    policy = policy or FeedbackPolicy()
    metrics, trace = RunMetrics(), Trace()
    tree = SplitTree(0)
    transmit(population, tree, tree.root, metrics, trace)
    stack = [tree.root] if tree.root.status is SlotStatus.COLLISION else []
    while stack:
        node = stack.pop()
        _feedback(metrics, trace, "slot", policy.estimation_per_slot)
        left, right = split(tree, node, population, metrics, trace)
        for child in (right, left):
            if child.status is SlotStatus.COLLISION:
                stack.append(child)
    return _finish("SICTA", metrics, [tree], _record_singles(tree, trace), trace)


# ---------------------------------------------------------------- CSTP


def _restart_node(tree: SplitTree) -> TreeNode | None:
    pending = tree.collision_leaves()
    return min(pending, key=lambda n: n.sort_key) if pending else None


def estimate_tree(
    tree: SplitTree,
    population: UserPopulation,
    alpha: float,
    metrics: RunMetrics,
    trace: Trace,
    policy: FeedbackPolicy,
) -> float:
    """Partial splitting of one tree until idle/single leaves cover more than ``alpha``.

    Returns the covered mass.
    """
    covered = 0.0
    if tree.root.status is not SlotStatus.COLLISION:
        return 1.0
    node = tree.root
    while covered <= alpha and node is not None:
        _feedback(metrics, trace, "estimation", policy.estimation_per_slot)
        left, right = split(tree, node, population, metrics, trace)
        seen = [c for c in (left, right) if c.status is not SlotStatus.COLLISION]
        if seen:
            covered += float(sum(c.mass for c in seen))
            trace.record("covered", tree.index, covered)
            node = _restart_node(tree)
        else:
            node = left
    trace.record("estimation_end", tree.index, covered)
    return covered


def observations_of(trees: list[SplitTree]) -> list[list[LeafObservation]]:
    return [[LeafObservation(float(leaf.mass), leaf.status) for leaf in t.leaves] for t in trees]


def profile_of(trees: list[SplitTree], eps_tail: float = DEFAULT_EPS_TAIL, joint: bool = True) -> DegreeProfile:
    posts = infer_profile(observations_of(trees), eps_tail=eps_tail, joint=joint)
    flat = [p for row in posts for p in row]
    labels = [(t.index, leaf.path) for t in trees for leaf in t.leaves]
    return DegreeProfile(flat, labels)


def run_estimation_phase(
    trees: list[SplitTree],
    population: UserPopulation,
    alpha: float,
    metrics: RunMetrics,
    trace: Trace | None = None,
    policy: FeedbackPolicy | None = None,
    eps_tail: float = DEFAULT_EPS_TAIL,
    joint: bool = True,
) -> DegreeProfile:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie strictly between 0 and 1")
    trace = trace if trace is not None else Trace()
    policy = policy or FeedbackPolicy()
    for tree in trees:
        if tree.root.signal is None:
            raise ContractViolation("roots must be transmitted before estimation")
        estimate_tree(tree, population, alpha, metrics, trace, policy)
    return profile_of(trees, eps_tail, joint)


class _ResidualBeliefs:
    """Distributions of the number of still-unknown users in each leaf.

    Each belief is stored relative to the count of recovered users the leaf
    had when it was formed; later cancellations shift it, and the leaf's
    residual status truncates it.
    """

    def __init__(self):
        self.store: dict[tuple, tuple[np.ndarray, int]] = {}

    def set(self, key, probs: np.ndarray, resolved_then: int) -> None:
        self.store[key] = (np.asarray(probs, dtype=float), resolved_then)

    def current(self, key, graph: PeelingGraph) -> np.ndarray:
        residual = graph.residual_degree(key)
        if residual <= 1:
            out = np.zeros(residual + 1)
            out[residual] = 1.0
            return out
        probs, then = self.store.get(key, (None, 0))
        shift = graph.resolved_in(key) - then
        if probs is None or shift >= len(probs):
            return _floor_belief()
        now = probs[shift:].copy()
        now[:2] = 0.0
        total = now.sum()
        if total <= 0:
            return _floor_belief()
        return now / total


def _floor_belief() -> np.ndarray:
    out = np.zeros(3)
    out[2] = 1.0
    return out


def _split_belief(parent: np.ndarray, left_status: SlotStatus, right_status: SlotStatus):
    """Children residual beliefs given the parent's and both children's residual statuses."""
    m = np.arange(len(parent))
    a = np.arange(len(parent))
    joint = parent[:, None] * np.where(a[None, :] <= m[:, None], binom.pmf(a[None, :], m[:, None], 0.5), 0.0)
    b = m[:, None] - a[None, :]

    def allowed(x, status):
        if status is SlotStatus.IDLE:
            return x == 0
        if status is SlotStatus.SINGLE:
            return x == 1
        return x >= 2

    joint = joint * allowed(a[None, :], left_status) * allowed(b, right_status)
    z = joint.sum()
    if z <= 0:
        return None, None
    joint /= z
    left = joint.sum(axis=0)
    right = np.zeros(len(parent))
    np.add.at(right, np.clip(b, 0, None).ravel(), joint.ravel())
    return left, right


def _residual_status(graph: PeelingGraph, key) -> SlotStatus:
    return classify(SlotSignal(frozenset(graph.residual[key])))


def _refresh_beliefs(
    trees: list[SplitTree], graph: PeelingGraph, eps_tail: float, joint: bool
) -> _ResidualBeliefs:
    """Exact posterior of unknown-user counts from the residual statuses of all leaves."""
    obs = []
    for t in trees:
        obs.append(
            [
                LeafObservation(float(leaf.mass), _residual_status(graph, (t.index, leaf.path)))
                for leaf in t.leaves
            ]
        )
    beliefs = _ResidualBeliefs()
    posts = infer_profile(obs, eps_tail=eps_tail, joint=joint)
    for t, row in zip(trees, posts):
        for leaf, post in zip(t.leaves, row):
            key = (t.index, leaf.path)
            if graph.residual_degree(key) >= 2:
                beliefs.set(key, post.probs, graph.resolved_in(key))
    return beliefs


def _split_into_graph(tree, node, population, metrics, trace, graph) -> tuple[TreeNode, TreeNode]:
    left, right = split(tree, node, population, metrics, trace)
    graph.replace_check(
        (tree.index, node.path),
        [((tree.index, left.path), left.signal.active), ((tree.index, right.path), right.signal.active)],
    )
    return left, right


def run_cstp(
    population: UserPopulation,
    K: int = 3,
    alpha: float = 0.3,
    reward: RewardFunction | None = None,
    policy: FeedbackPolicy | None = None,
    eps_tail: float = DEFAULT_EPS_TAIL,
    improvement_eps: float = DEFAULT_IMPROVEMENT_EPS,
    max_len: int | None = None,
    joint: bool = True,
    max_steps: int | None = None,
) -> ProtocolResult:
    """Two-phase coded splitting over ``K`` trees, decoded jointly by peeling."""
    if K < 1:
        raise ValueError("K must be positive")
    reward = reward or RewardFunction()
    policy = policy or FeedbackPolicy()
    metrics, trace = RunMetrics(), Trace()
    trees = [SplitTree(k) for k in range(K)]
    for tree in trees:
        transmit(population, tree, tree.root, metrics, trace)
    profile = run_estimation_phase(trees, population, alpha, metrics, trace, policy, eps_tail, joint)

    graph = build_graph(trees, trace)
    peel(graph)
    trace.record("decode_attempt", "estimation")
    attempts = 1
    order = None
    planned = 0
    tail_splits = 0
    watchdog = max_steps if max_steps is not None else 64 * max(population.size, 1) * K + 64

    if not is_complete(graph):
        order = plan_split_order(profile, reward, improvement_eps, max_len)
        planned = len(order)
        if planned:
            _feedback(metrics, trace, "order", policy.order_broadcast)
        for step, (k, path) in enumerate(order.labels):
            node = trees[k].find(path)
            if node is None or not node.is_leaf or node.status is not SlotStatus.COLLISION:
                # the node turned out idle/single (or was never formed): nothing to split
                trace.record("skip", k, path)
                continue
            _split_into_graph(trees[k], node, population, metrics, trace, graph)
            peel(graph)
            attempts += 1
            trace.record("decode_attempt", "planned", step)
            if is_complete(graph):
                break

    if not is_complete(graph):
        beliefs = _refresh_beliefs(trees, graph, eps_tail, joint)
        while not is_complete(graph):
            if tail_splits >= watchdog:
                raise RuntimeError("tail phase exceeded its step budget")
            keys, posts = [], []
            candidates = []
            for t in trees:
                for leaf in t.leaves:
                    key = (t.index, leaf.path)
                    if graph.residual_degree(key) >= 2:
                        candidates.append(len(keys))
                        posts.append(LeafDegreePosterior(beliefs.current(key, graph)))
                    else:
                        posts.append(_SETTLED)
                    keys.append(key)
            pick = select_tail_split(DegreeProfile(posts, keys), candidates)
            k, path = keys[pick]
            node = trees[k].find(path)
            parent_belief = posts[pick].probs
            _feedback(metrics, trace, "tail", policy.tail_per_split)
            left, right = _split_into_graph(trees[k], node, population, metrics, trace, graph)
            lkey, rkey = (k, left.path), (k, right.path)
            lb, rb = _split_belief(
                parent_belief, _residual_status(graph, lkey), _residual_status(graph, rkey)
            )
            if lb is not None:
                beliefs.set(lkey, lb, graph.resolved_in(lkey))
                beliefs.set(rkey, rb, graph.resolved_in(rkey))
            tail_splits += 1
            peel(graph)
            attempts += 1
            trace.record("decode_attempt", "tail", tail_splits)

    _feedback(metrics, trace, "terminate", policy.terminate)
    return _finish(
        "CSTP",
        metrics,
        trees,
        graph.resolved,
        trace,
        planned_order_length=planned,
        tail_splits=tail_splits,
        decode_attempts=attempts,
        order=order,
    )


_SETTLED = LeafDegreePosterior.point(0)


def replay(trace: Trace) -> RunMetrics:
    """Recompute the run counters from an event log."""
    metrics = RunMetrics()
    users = set()
    for event in trace:
        kind = event[0]
        if kind == "transmit":
            metrics.slots_used += 1
        elif kind == "decode":
            users.add(event[1])
        elif kind == "feedback":
            metrics.feedback += event[2]
    metrics.recovered = len(users)
    return metrics


def verify_soundness(trace: Trace) -> None:
    """Check that every derived signal and every recovery follows from earlier ones.

    Raises ``AssertionError`` naming the first offending event.
    """
    known: dict[tuple, frozenset] = {}
    decoded: set = set()
    for i, event in enumerate(trace):
        kind = event[0]
        if kind == "transmit":
            _, k, path, active = event
            if path:
                parent = known.get((k, path[:-1]))
                assert parent is not None and active <= parent, f"event {i}: orphan transmission"
            known[(k, path)] = frozenset(active)
        elif kind == "derive":
            _, k, path, active = event
            parent = known.get((k, path[:-1]))
            sibling = known.get((k, path[:-1] + "0"))
            assert parent is not None and sibling is not None, f"event {i}: derivation without sources"
            assert sibling <= parent, f"event {i}: sibling not a subset of parent"
            assert frozenset(active) == parent - sibling, f"event {i}: wrong complement"
            known[(k, path)] = frozenset(active)
        elif kind == "decode":
            _, user, via = event
            assert via in known, f"event {i}: decode from unknown check {via}"
            assert known[via] - decoded == {user}, f"event {i}: check {via} does not isolate user {user}"
            decoded.add(user)


SCHEMES = ("BTS", "SICTA", "CSTP")


def run_scheme(
    scheme: str,
    n: int,
    seed: int,
    K: int = 3,
    alpha: float = 0.3,
    reward: RewardFunction | None = None,
    policy: FeedbackPolicy | None = None,
) -> ProtocolResult:
    """Uniform entry point: (population size, scheme parameters, seed) -> result."""
    population = UserPopulation(n, seed)
    scheme = scheme.upper()
    if scheme == "BTS":
        return run_bts(population, policy)
    if scheme == "SICTA":
        return run_sicta(population, policy)
    if scheme == "CSTP":
        return run_cstp(population, K=K, alpha=alpha, reward=reward, policy=policy)
    raise ValueError(f"unknown scheme {scheme!r}")

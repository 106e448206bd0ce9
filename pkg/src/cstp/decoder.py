"""SIC over the combined leaves of all trees, run as an erasure peeling decoder.

Checks are leaves; variables are users.  A check whose residual (its
active set minus already recovered users) holds exactly one user reveals
that user, whose replicas are then cancelled from every other check.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Iterable

from .model import ContractViolation, SplitTree, Trace

CheckKey = Hashable


@dataclass
class PeelingGraph:
    original: dict[CheckKey, frozenset] = field(default_factory=dict)
    residual: dict[CheckKey, set] = field(default_factory=dict)
    incidence: dict[int, set] = field(default_factory=dict)
    resolved: set = field(default_factory=set)
    trace: Trace | None = None
    _ready: deque = field(default_factory=deque)

    def add_check(self, key: CheckKey, active: Iterable[int]) -> None:
        if key in self.original:
            raise ContractViolation(f"check {key!r} already present")
        members = frozenset(active)
        self.original[key] = members
        left = set(members - self.resolved)
        self.residual[key] = left
        for u in left:
            self.incidence.setdefault(u, set()).add(key)
        if len(left) == 1:
            self._ready.append(key)

    def remove_check(self, key: CheckKey) -> None:
        for u in self.residual.pop(key):
            self.incidence[u].discard(key)
        del self.original[key]

    def replace_check(self, key: CheckKey, children: Iterable[tuple[CheckKey, Iterable[int]]]) -> None:
        """A split leaf leaves the code and its children enter it."""
        self.remove_check(key)
        for child_key, active in children:
            self.add_check(child_key, active)

    def resolve(self, user: int, via: CheckKey | None = None) -> None:
        if user in self.resolved:
            return
        self.resolved.add(user)
        if self.trace is not None:
            self.trace.record("decode", user, via)
        for key in self.incidence.pop(user, ()):
            res = self.residual[key]
            res.discard(user)
            if len(res) == 1:
                self._ready.append(key)

    def residual_degree(self, key: CheckKey) -> int:
        return len(self.residual[key])

    def resolved_in(self, key: CheckKey) -> int:
        return len(self.original[key]) - len(self.residual[key])

    def unresolved_checks(self) -> list[CheckKey]:
        return [k for k, r in self.residual.items() if r]


def build_graph(trees: Iterable[SplitTree], trace: Trace | None = None) -> PeelingGraph:
    """One check per leaf of every tree; users seen alone in a leaf start out resolved."""
    graph = PeelingGraph(trace=trace)
    for tree in trees:
        for leaf in tree.leaves:
            if leaf.signal is None:
                raise ContractViolation(f"leaf {leaf.path!r} of tree {tree.index} has no signal")
            graph.add_check((tree.index, leaf.path), leaf.signal.active)
    singles = [(key, next(iter(act))) for key, act in graph.original.items() if len(act) == 1]
    graph._ready.clear()
    for key, user in singles:
        graph.resolve(user, key)
    return graph


def peel(graph: PeelingGraph) -> set:
    """Run cancellation to its fixed point; returns the users it newly recovered."""
    before = set(graph.resolved)
    ready = graph._ready
    while ready:
        key = ready.popleft()
        res = graph.residual.get(key)
        if res is None or len(res) != 1:
            continue
        graph.resolve(next(iter(res)), key)
    return graph.resolved - before


def is_complete(graph: PeelingGraph) -> bool:
    return not any(graph.residual.values())

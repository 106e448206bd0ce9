"""Scripted two-tree scenario with 12 users and alpha = 0.2.

Left tree: the first observation is at level 4 (mass 1/8), after which the
restart at the shallowest collision finds another at level 3 (mass 1/4).
Right tree: three level-4 observations.  Both trees stop at covered mass
0.375.  Run ``python -m cstp.walkthrough`` to print the event log.
"""
from __future__ import annotations

from .model import ScriptedPopulation
from .protocols import ProtocolResult, run_cstp

# leaf path -> number of users sent there during the estimation phase
LEFT_TREE = {"000": 3, "001": 1, "01": 3, "10": 4, "11": 1}
RIGHT_TREE = {"000": 3, "001": 1, "01": 3, "100": 1, "101": 1, "11": 3}
RIGHT_ORDER = [4, 9, 1, 6, 11, 2, 7, 0, 5, 10, 3, 8]
ALPHA = 0.2


def _prefixes(layout: dict[str, int], order: list[int]) -> list[str]:
    out = [""] * len(order)
    users = iter(order)
    for path, count in layout.items():
        for _ in range(count):
            out[next(users)] = path
    return out


def worked_example_population(seed: int = 0) -> ScriptedPopulation:
    n = sum(LEFT_TREE.values())
    return ScriptedPopulation(
        [_prefixes(LEFT_TREE, list(range(n))), _prefixes(RIGHT_TREE, RIGHT_ORDER)], seed=seed
    )


def run_worked_example(seed: int = 0) -> ProtocolResult:
    return run_cstp(worked_example_population(seed), K=2, alpha=ALPHA)


def _slot_names(result: ProtocolResult) -> dict[tuple[int, str], str]:
    names = {}
    for tree in result.trees:
        stack = [tree.root]
        while stack:
            node = stack.pop()
            names[(tree.index, node.path)] = node.name
            if node.children:
                stack.extend(node.children)
    return names


def describe(result: ProtocolResult) -> str:
    names = _slot_names(result)
    lines = []
    for event in result.trace:
        kind = event[0]
        if kind in ("transmit", "derive"):
            _, k, path, active = event
            lines.append(
                f"tree {k} slot {names[(k, path)]:>4}  path {path or '-':<6} users {sorted(active)}"
            )
        elif kind == "covered":
            lines.append(f"tree {event[1]} covered mass {event[2]:.3f}")
        elif kind == "estimation_end":
            lines.append(f"tree {event[1]} estimation ends at {event[2]:.3f}")
        elif kind == "feedback" and event[1] == "order":
            planned = ", ".join(f"tree {k} path {p}" for k, p in result.order.labels)
            lines.append(f"split order broadcast: {planned}")
        elif kind == "decode":
            lines.append(f"  recovered user {event[1]} from {names.get(event[2], event[2])}")
        elif kind == "decode_attempt":
            lines.append(f"  decode attempt ({event[1]})")
    m = result.metrics
    lines.append(f"slots {m.slots_used}, recovered {m.recovered}, feedback {m.feedback}, T = {m.throughput:.3f}")
    return "\n".join(lines)


if __name__ == "__main__":
    print(describe(run_worked_example()))

"""Users, binary contention trees, symbolic slot signals and run counters.

A slot signal is modelled as the set of user ids that transmitted in it.
Under the noiseless-sum channel that set carries exactly the information of
the superposed waveform, so subtraction of stored signals is set difference.
Protocol logic only ever looks at :class:`SlotStatus`; the sets themselves
are ground truth for the decoder and for tests.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

_WORD_BITS = 64


class ContractViolation(RuntimeError):
    """A precondition of a tree operation was broken by the caller."""


class SlotStatus(enum.Enum):
    IDLE = "idle"
    SINGLE = "single"
    COLLISION = "collision"

    @property
    def observed_degree(self) -> int | None:
        """Exact degree for idle/single, ``None`` for a collision."""
        if self is SlotStatus.IDLE:
            return 0
        if self is SlotStatus.SINGLE:
            return 1
        return None


class Origin(enum.Enum):
    TRANSMITTED = "transmitted"
    DERIVED = "derived"


@dataclass(frozen=True)
class SlotSignal:
    active: frozenset = frozenset()

    def __len__(self) -> int:
        return len(self.active)

    def __sub__(self, other: "SlotSignal") -> "SlotSignal":
        if not other.active <= self.active:
            raise ContractViolation("signal subtraction needs a subset")
        return SlotSignal(self.active - other.active)


def classify(signal: SlotSignal) -> SlotStatus:
    n = len(signal.active)
    if n == 0:
        return SlotStatus.IDLE
    if n == 1:
        return SlotStatus.SINGLE
    return SlotStatus.COLLISION


class UserPopulation:
    """N users with independent fair coin-flip descent paths per tree.

    Bits are drawn lazily in 64-level blocks.  Each ``(tree, block)`` pair has
    its own generator keyed on the seed, so the bits a user sees never depend
    on the order in which nodes are visited, and a population used with K
    trees agrees with the same seed used with K + 1 trees on the first K.
    """

    def __init__(self, size: int, seed: int = 0):
        if size < 0:
            raise ValueError("population size must be non-negative")
        self.size = int(size)
        self.seed = int(seed)
        self._blocks: dict[tuple[int, int], np.ndarray] = {}
        self.users = frozenset(range(self.size))

    def _block(self, tree: int, block: int) -> np.ndarray:
        key = (tree, block)
        words = self._blocks.get(key)
        if words is None:
            rng = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, tree, block])
            words = rng.integers(0, 2**64, size=self.size, dtype=np.uint64)
            self._blocks[key] = words
        return words

    def bit(self, user: int, tree: int, depth: int) -> int:
        """Coin flip of ``user`` at ``depth`` (0 = first split) in ``tree``: 0 left, 1 right."""
        return int(self.bits(np.array([user]), tree, depth)[0])

    def bits(self, users: np.ndarray, tree: int, depth: int) -> np.ndarray:
        words = self._block(tree, depth // _WORD_BITS)
        return (words[users] >> np.uint64(depth % _WORD_BITS)) & np.uint64(1)

    def path(self, user: int, tree: int, length: int) -> str:
        return "".join(str(self.bit(user, tree, i)) for i in range(length))

    def active_in(self, tree: int, path: str, candidates=None) -> frozenset:
        """Users whose path in ``tree`` starts with ``path``.

        ``candidates`` may restrict the search to a known superset (the
        parent node's users); the answer is the same either way.
        """
        if candidates is None:
            members = np.arange(self.size, dtype=np.int64)
            start = 0
        else:
            members = np.fromiter(sorted(candidates), dtype=np.int64, count=len(candidates))
            start = max(len(path) - 1, 0)
        for depth in range(start, len(path)):
            if members.size == 0:
                break
            want = np.uint64(int(path[depth]))
            members = members[self.bits(members, tree, depth) == want]
        return frozenset(members.tolist())


class ScriptedPopulation(UserPopulation):
    """Population whose leading coin flips are fixed per user and tree.

    ``prefixes[k][u]`` is the forced start of user ``u``'s path in tree ``k``;
    deeper flips fall back to the seeded random bits.
    """

    def __init__(self, prefixes: list[list[str]], seed: int = 0):
        sizes = {len(p) for p in prefixes}
        if len(sizes) != 1:
            raise ValueError("every tree needs a prefix for every user")
        super().__init__(sizes.pop(), seed)
        self.prefixes = prefixes

    def bits(self, users: np.ndarray, tree: int, depth: int) -> np.ndarray:
        out = super().bits(users, tree, depth)
        if tree < len(self.prefixes):
            forced = self.prefixes[tree]
            for i, u in enumerate(np.asarray(users).tolist()):
                if depth < len(forced[u]):
                    out[i] = np.uint64(int(forced[u][depth]))
        return out


@dataclass(eq=False)
class TreeNode:
    path: str = ""
    signal: SlotSignal | None = None
    status: SlotStatus | None = None
    origin: Origin | None = None
    label: int | None = None  # slot number; a derived node shares its sibling's
    parent: "TreeNode | None" = None
    children: tuple["TreeNode", "TreeNode"] | None = None

    @property
    def level(self) -> int:
        return len(self.path) + 1

    @property
    def mass(self) -> Fraction:
        return Fraction(1, 2 ** len(self.path))

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def sort_key(self) -> tuple[int, int, int]:
        """Depth first, then slot label, transmitted ``j`` before derived ``j'``."""
        return (
            len(self.path),
            self.label if self.label is not None else -1,
            0 if self.origin is Origin.TRANSMITTED else 1,
        )

    @property
    def name(self) -> str:
        if self.label is None:
            return "?"
        return f"{self.label}'" if self.origin is Origin.DERIVED else str(self.label)


@dataclass(eq=False)
class SplitTree:
    index: int
    root: TreeNode = field(default_factory=TreeNode)
    leaves: list[TreeNode] = field(default_factory=list)

    def __post_init__(self):
        if not self.leaves:
            self.leaves = [self.root]

    def find(self, path: str) -> TreeNode | None:
        node = self.root
        for step in path:
            if node.children is None:
                return None
            node = node.children[int(step)]
        return node

    def collision_leaves(self) -> list[TreeNode]:
        return [leaf for leaf in self.leaves if leaf.status is SlotStatus.COLLISION]

    def leaf_mass(self) -> Fraction:
        return sum((leaf.mass for leaf in self.leaves), Fraction(0))


@dataclass
class RunMetrics:
    slots_used: int = 0
    recovered: int = 0
    feedback: int = 0

    @property
    def throughput(self) -> float:
        return self.recovered / self.slots_used if self.slots_used else 0.0


class Trace(list):
    """Ordered event log; each event is a plain tuple whose first item is its kind."""

    def record(self, *event) -> None:
        self.append(tuple(event))


def transmit(
    population: UserPopulation,
    tree: SplitTree,
    node: TreeNode,
    metrics: RunMetrics,
    trace: Trace | None = None,
) -> SlotSignal:
    if node.signal is not None:
        raise ContractViolation(f"node {node.path!r} of tree {tree.index} already holds a signal")
    if not node.is_leaf:
        raise ContractViolation("only leaves are transmitted")
    candidates = None
    if node.parent is not None and node.parent.signal is not None:
        candidates = node.parent.signal.active
    node.signal = SlotSignal(population.active_in(tree.index, node.path, candidates))
    node.status = classify(node.signal)
    node.origin = Origin.TRANSMITTED
    metrics.slots_used += 1
    node.label = metrics.slots_used
    if trace is not None:
        trace.record("transmit", tree.index, node.path, node.signal.active)
    return node.signal


def derive_complement(
    parent: SlotSignal,
    child: SlotSignal,
    node: TreeNode,
    trace: Trace | None = None,
    tree_index: int | None = None,
) -> SlotSignal:
    if node.signal is not None:
        raise ContractViolation("derived node already holds a signal")
    node.signal = parent - child
    node.status = classify(node.signal)
    node.origin = Origin.DERIVED
    if trace is not None:
        trace.record("derive", tree_index, node.path, node.signal.active)
    return node.signal


def split(
    tree: SplitTree,
    leaf: TreeNode,
    population: UserPopulation,
    metrics: RunMetrics,
    trace: Trace | None = None,
    sic: bool = True,
) -> tuple[TreeNode, TreeNode]:
    """Split a collision leaf in place.

    The left child is always transmitted.  With ``sic`` the right child is
    derived from the stored parent signal at no slot cost; without it the
    right child is transmitted too (plain tree splitting).
    """
    if leaf.status is not SlotStatus.COLLISION:
        raise ContractViolation(f"cannot split a {leaf.status} leaf")
    if not leaf.is_leaf:
        raise ContractViolation("node was already split")
    left = TreeNode(path=leaf.path + "0", parent=leaf)
    right = TreeNode(path=leaf.path + "1", parent=leaf)
    leaf.children = (left, right)
    pos = tree.leaves.index(leaf)
    tree.leaves[pos : pos + 1] = [left, right]
    transmit(population, tree, left, metrics, trace)
    if sic:
        derive_complement(leaf.signal, left.signal, right, trace, tree.index)
        right.label = left.label
    else:
        transmit(population, tree, right, metrics, trace)
    return left, right

"""Split-order planning for the degree optimization phase.

The planner is purely predictive: a split replaces a leaf's degree
distribution by two identical binomial(d, 1/2) mixtures, and candidates are
ranked by the reward-weighted expected leaf-degree counts that result.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .inference import DegreeProfile, LeafDegreePosterior, omega
from .model import ContractViolation

DEFAULT_IMPROVEMENT_EPS = 1e-6

_half_binom = np.ones((1, 1))


def _half_binomial(size: int) -> np.ndarray:
    """Matrix ``B[dp, d] = Binomial(d; dp, 1/2)`` for dp, d < size (grown on demand).

    Rows come from Pascal's rule with halving, which is exact in floating
    point while the binomial coefficients fit in the mantissa.
    """
    global _half_binom
    if _half_binom.shape[0] < size:
        size = max(size, 2 * _half_binom.shape[0], 64)
        table = np.zeros((size, size))
        table[0, 0] = 1.0
        for dp in range(1, size):
            table[dp, 1:] = table[dp - 1, :-1]
            table[dp] += table[dp - 1]
            table[dp] *= 0.5
        _half_binom = table
    return _half_binom


def _child_probs(probs: np.ndarray) -> np.ndarray:
    size = len(probs)
    return probs @ _half_binomial(size)[:size, :size]


@dataclass(frozen=True)
class RewardFunction:
    values: Mapping[int, float] = field(default_factory=lambda: {2: 0.5, 3: 0.5})

    def __post_init__(self):
        if any(v < 0 for v in self.values.values()):
            raise ValueError("rewards must be non-negative")

    def __call__(self, d: int) -> float:
        return self.values.get(d, 0.0)

    def vector(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        for d, v in self.values.items():
            if 0 <= d < size:
                out[d] = v
        return out

    @classmethod
    def parse(cls, text: str) -> "RewardFunction":
        """Parse ``"d=2:0.5,d=3:0.5"`` (the ``d=`` prefix is optional)."""
        values = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition(":")
            key = key.strip()
            if key.startswith("d="):
                key = key[2:]
            values[int(key)] = float(val)
        return cls(values)

    def describe(self) -> str:
        return ",".join(f"d={d}:{v:g}" for d, v in sorted(self.values.items()))


@dataclass
class SplitOrder:
    indices: list[int] = field(default_factory=list)
    labels: list[tuple[int, str]] = field(default_factory=list)
    profiles: list[DegreeProfile] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)


def predict_children(parent: LeafDegreePosterior) -> tuple[LeafDegreePosterior, LeafDegreePosterior]:
    probs = _child_probs(parent.probs)
    child = LeafDegreePosterior(
        probs, truncation=parent.truncation, tail_mass_bound=parent.tail_mass_bound
    )
    twin = LeafDegreePosterior(
        probs.copy(), truncation=parent.truncation, tail_mass_bound=parent.tail_mass_bound
    )
    return child, twin


def apply_split(profile: DegreeProfile, s: int) -> DegreeProfile:
    """Replace entry ``s`` by its two predicted children; later entries shift by one."""
    parent = profile.posteriors[s]
    if parent.collision_mass <= 0:
        raise ContractViolation(f"entry {s} cannot hold a collision")
    left, right = predict_children(parent)
    tree, path = profile.labels[s]
    posts = profile.posteriors[:s] + [left, right] + profile.posteriors[s + 1 :]
    labels = profile.labels[:s] + [(tree, path + "0"), (tree, path + "1")] + profile.labels[s + 1 :]
    return DegreeProfile(posts, labels)


def score(profile: DegreeProfile, reward: RewardFunction) -> float:
    counts = omega(profile).expected_count
    return float(sum(c * reward(d) for d, c in counts.items()))


def _gain(post: LeafDegreePosterior, reward: RewardFunction) -> float:
    lam = reward.vector(len(post.probs))
    child = _child_probs(post.probs)
    return float(2.0 * child @ lam - post.probs @ lam)


def plan_split_order(
    profile: DegreeProfile,
    reward: RewardFunction | None = None,
    improvement_eps: float = DEFAULT_IMPROVEMENT_EPS,
    max_len: int | None = None,
    keep_profiles: bool = False,
) -> SplitOrder:
    """Greedy split order.

    A split only changes the score by the gain of the split entry, so each
    step picks the collision-capable entry with the largest gain (lowest
    index on ties) and stops once no gain exceeds ``improvement_eps``.
    """
    reward = reward or RewardFunction()
    order = SplitOrder()
    posts = list(profile.posteriors)
    labels = list(profile.labels)
    if max_len is None:
        trees = len({t for t, _ in labels}) or 1
        max_len = 4 * trees * len(profile.collision_indices())
    gains = [_gain(p, reward) if p.collision_mass > 0 else -np.inf for p in posts]
    current = score(profile, reward) if len(profile) else 0.0
    while len(order) < max_len and gains:
        best = int(np.argmax(gains))  # first maximum wins ties
        if not gains[best] > improvement_eps:
            break
        tree, path = labels[best]
        left, right = predict_children(posts[best])
        order.indices.append(best)
        order.labels.append((tree, path))
        posts[best : best + 1] = [left, right]
        labels[best : best + 1] = [(tree, path + "0"), (tree, path + "1")]
        current += gains[best]
        g = _gain(left, reward) if left.collision_mass > 0 else -np.inf
        gains[best : best + 1] = [g, g]
        order.scores.append(current)
        if keep_profiles:
            order.profiles.append(DegreeProfile(list(posts), list(labels)))
    return order


def select_tail_split(profile: DegreeProfile, candidates: list[int] | None = None) -> int:
    """Index of the collision entry with the highest expected degree (lowest index on ties)."""
    if candidates is None:
        candidates = profile.collision_indices()
    if not candidates:
        raise ContractViolation("no unresolved collision to split")
    best, best_mean = candidates[0], profile.posteriors[candidates[0]].mean()
    for i in candidates[1:]:
        m = profile.posteriors[i].mean()
        if m > best_mean:
            best, best_mean = i, m
    return best

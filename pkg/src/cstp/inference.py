"""Posterior of unobserved leaf collision degrees under an unknown population.

Given N users, the leaf degrees of one tree are multinomial with the leaf
masses as cell probabilities; distinct trees are independent given N.  With
a flat (improper) weight on N, the posterior of a collision leaf's degree is

    Pr(D_l = d)  ∝  sum_N  Pr(D_l = d, observations | N).

The per-tree likelihoods are computed with Poisson scaling: multiplying the
probability that ``n`` users land consistently in a region of mass ``q`` by
``Poisson(n; t q)`` turns the binomial merge of two regions into an ordinary
convolution of nonnegative sequences, which numpy evaluates with full
relative precision.  The scale ``t`` only affects numerics, not results.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from .model import SlotStatus

DEFAULT_EPS_TAIL = 1e-9
# Slices whose log-weight sits this far below the peak are dropped (e^-80 ~ 1e-35).
_LOG_WINDOW = 80.0
_BRUTE_MAX_LEAVES = 6
_BRUTE_MAX_N = 14


class InferenceDivergence(RuntimeError):
    pass


class EnumerationRefused(ValueError):
    pass


@dataclass(frozen=True)
class LeafObservation:
    mass: float
    status: SlotStatus


@dataclass
class LeafDegreePosterior:
    """``probs[d]`` is Pr(D = d); indices past the array are zero."""

    probs: np.ndarray
    truncation: int = 0
    tail_mass_bound: float = 0.0
    observed: bool = False

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if not self.truncation:
            self.truncation = len(self.probs) - 1

    @classmethod
    def point(cls, degree: int) -> "LeafDegreePosterior":
        probs = np.zeros(degree + 1)
        probs[degree] = 1.0
        return cls(probs, truncation=degree, observed=True)

    def pmf(self, d: int) -> float:
        return float(self.probs[d]) if 0 <= d < len(self.probs) else 0.0

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probs)), self.probs))

    @property
    def collision_mass(self) -> float:
        return float(self.probs[2:].sum())

    def as_dict(self, cutoff: float = 0.0) -> dict[int, float]:
        return {d: float(p) for d, p in enumerate(self.probs) if p > cutoff}


@dataclass
class DegreeProfile:
    """Leaf posteriors of all trees concatenated in frontier order, tree by tree.

    ``labels[i]`` is ``(tree index, node path)`` of entry ``i``.
    """

    posteriors: list[LeafDegreePosterior]
    labels: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [(0, str(i)) for i in range(len(self.posteriors))]
        if len(self.labels) != len(self.posteriors):
            raise ValueError("labels and posteriors differ in length")

    def __len__(self) -> int:
        return len(self.posteriors)

    def __getitem__(self, i: int) -> LeafDegreePosterior:
        return self.posteriors[i]

    def expected_degrees(self) -> np.ndarray:
        return np.array([p.mean() for p in self.posteriors])

    def collision_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.posteriors) if p.collision_mass > 0]


@dataclass
class Omega:
    expected_count: dict[int, float]
    fraction: dict[int, float]
    leaves: int

    def __getitem__(self, d: int) -> float:
        return self.expected_count.get(d, 0.0)


def omega(profile: DegreeProfile) -> Omega:
    """Aggregate leaf degree distribution; index 0 is kept for the idle share."""
    if not len(profile):
        raise ValueError("empty profile")
    width = max(len(p.probs) for p in profile.posteriors)
    total = np.zeros(width)
    for post in profile.posteriors:
        total[: len(post.probs)] += post.probs
    counts = {d: float(v) for d, v in enumerate(total) if v > 0}
    m = len(profile)
    return Omega(counts, {d: v / m for d, v in counts.items()}, m)


# ---------------------------------------------------------------- likelihood


def _log_poisson(k, mu: float):
    k = np.asarray(k, dtype=float)
    if mu <= 0:
        return np.where(k == 0, 0.0, -np.inf)
    return k * math.log(mu) - mu - gammaln(k + 1)


def _collision_u(mass: float, t: float, length: int) -> np.ndarray:
    """Poisson-scaled weight of one collision leaf: Pois(k; t*mass) for k >= 2."""
    u = np.exp(_log_poisson(np.arange(length), t * mass))
    u[:2] = 0.0
    return u


def _conv(a: np.ndarray, b: np.ndarray, length: int) -> np.ndarray:
    return np.convolve(a, b)[:length]


def _power(u: np.ndarray, count: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    out[0] = 1.0
    base = u
    while count:
        if count & 1:
            out = _conv(out, base, length)
        count >>= 1
        if count:
            base = _conv(base, base, length)
    return out


def _as_trees(observations) -> list[list[LeafObservation]]:
    obs = list(observations)
    if obs and isinstance(obs[0], LeafObservation):
        return [obs]
    return [list(tree) for tree in obs]


class _TreeTerms:
    """Poisson-scaled likelihood pieces of one tree for n = 0 .. length-1."""

    def __init__(self, leaves: Sequence[LeafObservation], t: float, length: int):
        self.t = t
        self.length = length
        self.total_mass = float(sum(o.mass for o in leaves))
        self.singles = [o.mass for o in leaves if o.status is SlotStatus.SINGLE]
        self.observed_mass = float(
            sum(o.mass for o in leaves if o.status is not SlotStatus.COLLISION)
        )
        self.s = len(self.singles)
        self.classes = Counter(o.mass for o in leaves if o.status is SlotStatus.COLLISION)
        self.class_keys = sorted(self.classes)
        self.n_collisions = sum(self.classes.values())
        self.floor = self.s + 2 * self.n_collisions
        # idle and single leaves jointly pin their users: a spike at n = s
        self.log_obs = -t * self.observed_mass + sum(math.log(t * p) for p in self.singles)

        leaf_u = {m: _collision_u(m, t, length) for m in self.class_keys}
        self.leaf_u = leaf_u
        powers = [_power(leaf_u[m], self.classes[m], length) for m in self.class_keys]
        prefix = [np.eye(1, length)[0]]
        for p in powers:
            prefix.append(_conv(prefix[-1], p, length))
        self.u_coll = prefix[-1]
        self._prefix = prefix
        self._powers = powers
        self._rest: dict[float, np.ndarray] = {}

    def rest(self, mass: float) -> np.ndarray:
        """Collision part with one leaf of the given mass removed."""
        if mass not in self._rest:
            j = self.class_keys.index(mass)
            suffix = np.eye(1, self.length)[0]
            for p in self._powers[j + 1 :]:
                suffix = _conv(suffix, p, self.length)
            reduced = _power(self.leaf_u[mass], self.classes[mass] - 1, self.length)
            self._rest[mass] = _conv(_conv(self._prefix[j], reduced, self.length), suffix, self.length)
        return self._rest[mass]

    def log_weight(self, n: np.ndarray) -> np.ndarray:
        """log Pr(observations of this tree | n users)."""
        n = np.asarray(n)
        m = n - self.s
        out = np.full(n.shape, -np.inf)
        ok = (m >= 0) & (m < self.length)
        with np.errstate(divide="ignore"):
            out[ok] = (
                self.log_obs
                + np.log(self.u_coll[m[ok]])
                - _log_poisson(n[ok], self.t)
                - self.t * (1.0 - self.total_mass)
            )
        return out

    def log_tail_envelope(self, n: np.ndarray) -> np.ndarray:
        """Upper bound on log_weight from the idle/single leaves alone."""
        n = np.asarray(n, dtype=float)
        if self.observed_mass <= 0:
            return np.zeros_like(n)
        out = np.full(n.shape, -np.inf)
        ok = n >= self.s
        q = self.observed_mass
        free = 1.0 - q
        lp = sum(math.log(p) for p in self.singles)
        with np.errstate(divide="ignore"):
            out[ok] = (
                lp
                + gammaln(n[ok] + 1)
                - gammaln(n[ok] - self.s + 1)
                + (n[ok] - self.s) * (math.log(free) if free > 0 else -np.inf)
            )
        return out

    def envelope_ratio(self, n: float) -> float:
        """Ratio bound envelope(n+1)/envelope(n); decreasing in n."""
        if self.observed_mass <= 0:
            return 1.0
        return (n + 1) / (n + 1 - self.s) * (1.0 - self.observed_mass)


def _scale_guess(trees: list[list[LeafObservation]]) -> float:
    guesses = []
    floor = 0
    for leaves in trees:
        singles = sum(1 for o in leaves if o.status is SlotStatus.SINGLE)
        coll = sum(1 for o in leaves if o.status is SlotStatus.COLLISION)
        q = sum(o.mass for o in leaves if o.status is not SlotStatus.COLLISION)
        floor = max(floor, singles + 2 * coll)
        if q > 0:
            guesses.append(max(singles, 1) / q)
    guess = float(np.mean(guesses)) if guesses else float(floor)
    return max(guess, float(floor), 1.0)


class _Likelihood:
    """Per-tree terms plus the combined slice weights for one choice of scale and length."""

    def __init__(self, trees, t: float, length: int, joint: bool):
        self.trees = [_TreeTerms(leaves, t, length) for leaves in trees]
        self.length = length
        self.joint = joint
        self.n = np.arange(length)
        self.tree_logw = [tt.log_weight(self.n) for tt in self.trees]
        self.floor = max(tt.floor for tt in self.trees)
        self.memo: dict[tuple[int, float], LeafDegreePosterior] = {}

    def others(self, k: int) -> np.ndarray:
        """Summed log-weights of the trees other than ``k`` (zero in per-tree mode)."""
        if not self.joint:
            return np.zeros(self.length)
        out = np.zeros(self.length)
        for j, lw in enumerate(self.tree_logw):
            if j != k:
                out = out + lw
        return out

    def total(self, k: int | None = None) -> np.ndarray:
        if k is not None and not self.joint:
            return self.tree_logw[k]
        return np.sum(self.tree_logw, axis=0)

    def log_tail(self, k: int | None, n_stop: int) -> float:
        """Upper bound on log sum_{n > n_stop} of the combined weight."""
        members = range(len(self.trees)) if (self.joint or k is None) else [k]
        ratio = 1.0
        log_term = 0.0
        nxt = np.array([n_stop + 1.0])
        for j in members:
            tt = self.trees[j]
            ratio *= tt.envelope_ratio(n_stop + 1)
            log_term += float(tt.log_tail_envelope(nxt)[0])
        if ratio >= 1.0:
            return math.inf
        if log_term == -math.inf:
            return -math.inf
        return log_term - math.log1p(-ratio)


def _logsumexp(x: np.ndarray) -> float:
    finite = x[np.isfinite(x)]
    if finite.size == 0:
        return -math.inf
    top = finite.max()
    return float(top + math.log(np.exp(finite - top).sum()))


def _mixed_conditional(
    tt: _TreeTerms, mass: float, n_values: np.ndarray, weights: np.ndarray, d_max: int
) -> np.ndarray:
    """sum_n weights[n] * Pr(D_leaf = d | n users, observations of the tree).

    ``n_values`` must be a contiguous ascending run with n >= s.
    """
    rest = tt.rest(mass)
    n_lo, n_hi = int(n_values[0]), int(n_values[-1])
    width = d_max + 1
    log_pois = _log_poisson(np.arange(width), tt.t * mass)
    pois = np.exp(log_pois)
    pois[:2] = 0.0
    top = min(n_hi - tt.s + 1, tt.length)
    body = np.zeros(n_hi - tt.s + 1)
    body[:top] = rest[:top]
    # row normaliser: sum_d pois[d] * rest[n - s - d]
    sums = np.convolve(pois, body)[n_lo - tt.s : n_hi - tt.s + 1]
    good = (sums > 0) & np.isfinite(sums)
    coef = np.zeros_like(weights)
    coef[good] = weights[good] / sums[good]
    padded = np.concatenate([np.zeros(d_max), body])
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)[n_lo - tt.s : n_hi - tt.s + 1]
    probs = pois * (coef @ windows)[::-1]
    for i in np.flatnonzero(~good & (weights > 0)):
        # the linear products underflow for this slice: redo it in log space
        d = np.arange(width)
        idx = n_lo + i - tt.s - d
        ok = (idx >= 0) & (idx < tt.length) & (d >= 2)
        with np.errstate(divide="ignore"):
            logr = np.full(width, -np.inf)
            logr[ok] = np.log(rest[idx[ok]]) + log_pois[ok]
        if np.isfinite(logr).any():
            w = np.exp(logr - logr[np.isfinite(logr)].max())
            probs += weights[i] * w / w.sum()
    return probs


def _converged_likelihood(trees, eps_tail, n_cap, joint, focus_tree):
    """Grow the slice range until the discarded tail is below ``eps_tail`` of the mass."""
    t = _scale_guess(trees)
    floor = max(
        sum(1 for o in tr if o.status is SlotStatus.SINGLE)
        + 2 * sum(1 for o in tr if o.status is SlotStatus.COLLISION)
        for tr in trees
    )
    if n_cap is None:
        n_cap = 64 * max(floor, 1) + 64
    n_stop = int(min(max(2 * floor, 3 * t, floor + 40), n_cap))
    rescaled = False
    while True:
        like = _Likelihood(trees, t, n_stop + 1, joint)
        total = like.total(focus_tree)
        log_z = _logsumexp(total)
        log_tail = like.log_tail(focus_tree, n_stop)
        if log_z > -math.inf and log_tail - log_z < math.log(eps_tail):
            weights = np.exp(total - log_z)
            mean_n = float(np.dot(like.n, weights))
            sd = math.sqrt(max(float(np.dot((like.n - mean_n) ** 2, weights)), 1.0))
            if not rescaled and abs(mean_n - t) > 2 * sd + 2:
                t = max(mean_n, 1.0)
                rescaled = True
                continue
            return like, total, log_z, math.exp(log_tail - log_z)
        if n_stop >= n_cap:
            which = "all trees" if focus_tree is None else f"tree {focus_tree}"
            raise InferenceDivergence(
                f"posterior over the population size did not converge by N={n_cap} ({which}); "
                "an idle or single leaf is needed"
            )
        n_stop = int(min(n_cap, math.ceil(n_stop * 1.5) + 8))


def infer_profile(
    observations,
    eps_tail: float = DEFAULT_EPS_TAIL,
    n_cap: int | None = None,
    joint: bool = True,
    n_range: Iterable[int] | None = None,
) -> list[list[LeafDegreePosterior]]:
    """Posteriors for every leaf, returned per tree in input order.

    ``n_range`` replaces the convergence loop by a flat sum over the given
    population sizes; a single value yields the conditional posterior of
    that slice.
    """
    if eps_tail <= 0:
        raise ValueError("eps_tail must be positive")
    trees = _as_trees(observations)
    has_collision = any(o.status is SlotStatus.COLLISION for tr in trees for o in tr)
    point = {SlotStatus.IDLE: 0, SlotStatus.SINGLE: 1}
    if not has_collision:
        return [[LeafDegreePosterior.point(point[o.status]) for o in tr] for tr in trees]

    cache: dict[tuple, tuple] = {}
    results: list[list[LeafDegreePosterior]] = []
    for k, tr in enumerate(trees):
        row = []
        for o in tr:
            if o.status is not SlotStatus.COLLISION:
                row.append(LeafDegreePosterior.point(point[o.status]))
                continue
            focus = None if joint else k
            key = (focus,)
            if key not in cache:
                if n_range is not None:
                    ns = sorted(set(int(n) for n in n_range))
                    t = max(_scale_guess(trees), float(np.mean(ns)))
                    like = _Likelihood(trees, t, max(ns) + 1, joint)
                    total = like.total(focus)
                    sel = np.full(like.length, -np.inf)
                    sel[ns] = total[ns]
                    log_z = _logsumexp(sel)
                    cache[key] = (like, sel, log_z, 0.0)
                else:
                    cache[key] = _converged_likelihood(trees, eps_tail, n_cap, joint, focus)
            row.append(_class_posterior(cache[key], k, o.mass, eps_tail))
        results.append(row)
    return results


def _class_posterior(state, k: int, mass: float, eps_tail: float) -> LeafDegreePosterior:
    like, total, log_z, tail = state
    memo = like.memo
    if (k, mass) in memo:
        return memo[(k, mass)]
    if log_z == -math.inf:
        raise InferenceDivergence(f"observations of tree {k} are inconsistent with every population size")
    keep = np.flatnonzero(np.isfinite(total) & (total - log_z > -_LOG_WINDOW))
    n_values = like.n[keep[0] : keep[-1] + 1]
    slice_w = np.exp(total[n_values] - log_z)
    slice_w[~np.isfinite(slice_w)] = 0.0
    slice_w /= slice_w.sum()
    tt = like.trees[k]
    d_max = int(n_values.max() - tt.s)
    probs = _mixed_conditional(tt, mass, n_values, slice_w, d_max)
    probs[:2] = 0.0
    probs /= probs.sum()
    # drop a negligible upper tail
    tail_from_top = np.cumsum(probs[::-1])[::-1]
    cut = int(np.searchsorted(-tail_from_top, -eps_tail * 1e-3))
    cut = max(cut, 3)
    trimmed = float(probs[cut:].sum())
    probs = probs[:cut].copy()
    post = LeafDegreePosterior(probs, truncation=int(n_values.max()), tail_mass_bound=tail + trimmed)
    memo[(k, mass)] = post
    return post


def _locate(trees, leaf) -> tuple[int, int]:
    if isinstance(leaf, tuple):
        return leaf
    flat = int(leaf)
    for k, tr in enumerate(trees):
        if flat < len(tr):
            return k, flat
        flat -= len(tr)
    raise IndexError(leaf)


def leaf_degree_posterior(
    observations,
    leaf,
    eps_tail: float = DEFAULT_EPS_TAIL,
    n_cap: int | None = None,
    joint: bool = True,
    n_range: Iterable[int] | None = None,
) -> LeafDegreePosterior:
    """Posterior of one leaf; ``leaf`` is a concatenated index or ``(tree, position)``."""
    trees = _as_trees(observations)
    k, pos = _locate(trees, leaf)
    o = trees[k][pos]
    if o.status is not SlotStatus.COLLISION:
        return LeafDegreePosterior.point(o.status.observed_degree)
    if n_range is None:
        tt_obs = sum(x.mass for x in trees[k] if x.status is not SlotStatus.COLLISION)
        if tt_obs <= 0 and not joint:
            raise InferenceDivergence(f"tree {k} has no idle or single leaf; its posterior diverges")
    return infer_profile(trees, eps_tail, n_cap, joint, n_range)[k][pos]


def joint_weight(observations, pinned: tuple[int, int] | None = None, n_hat: int = 0) -> float:
    """Probability of the observations (and the pin) given ``n_hat`` users, multiplied over trees.

    ``pinned`` is ``(concatenated leaf index, degree)``.
    """
    trees = _as_trees(observations)
    n_hat = int(n_hat)
    if pinned is not None:
        k, pos = _locate(trees, pinned[0])
        d = int(pinned[1])
        o = trees[k][pos]
        if o.status is not SlotStatus.COLLISION:
            if d != o.status.observed_degree:
                return 0.0
            pinned = None
    t = max(float(n_hat), 1.0)
    length = n_hat + 1
    log_total = 0.0
    for j, tr in enumerate(trees):
        tt = _TreeTerms(tr, t, length)
        if pinned is not None and j == k:
            others = [x for i, x in enumerate(tr) if i != pos]
            rest = _TreeTerms(others, t, length)
            m = n_hat - tt.s - d
            if d < 2 or m < 0 or rest.u_coll[m] <= 0:
                return 0.0
            lw = tt.log_obs + float(_log_poisson(d, t * o.mass)) + math.log(rest.u_coll[m])
            lw += -float(_log_poisson(n_hat, t)) - t * (1.0 - tt.total_mass)
        else:
            lw = float(tt.log_weight(np.array([n_hat]))[0])
        if lw == -math.inf:
            return 0.0
        log_total += lw
    return math.exp(log_total)


# ---------------------------------------------------------------- oracle


def _compositions(n: int, parts: int):
    if parts == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for tail in _compositions(n - first, parts - 1):
            yield (first,) + tail


def _consistent(degree: int, status: SlotStatus) -> bool:
    return degree >= 2 if status is SlotStatus.COLLISION else degree == status.observed_degree


def _tree_slice_table(leaves: list[LeafObservation], n: int, target: int | None):
    """Enumerate occupancy vectors of one tree; returns (total weight, weight by target degree)."""
    total = 0.0
    by_degree: dict[int, float] = {}
    log_nfact = math.lgamma(n + 1)
    for counts in _compositions(n, len(leaves)):
        if not all(_consistent(c, o.status) for c, o in zip(counts, leaves)):
            continue
        logw = log_nfact
        for c, o in zip(counts, leaves):
            if c:
                logw += c * math.log(o.mass) - math.lgamma(c + 1)
        w = math.exp(logw)
        total += w
        if target is not None:
            by_degree[counts[target]] = by_degree.get(counts[target], 0.0) + w
    return total, by_degree


def brute_force_posterior(observations, leaf, n_range: Iterable[int], joint: bool = True) -> LeafDegreePosterior:
    """Exhaustive enumeration of leaf occupancies, each weighted by its multinomial probability.

    Trees are independent given N, so each tree is enumerated on its own and
    the size guard applies per tree.
    """
    trees = _as_trees(observations)
    ns = sorted(set(int(n) for n in n_range))
    if max(len(t) for t in trees) > _BRUTE_MAX_LEAVES or (ns and ns[-1] > _BRUTE_MAX_N):
        raise EnumerationRefused(
            f"enumeration limited to {_BRUTE_MAX_LEAVES} leaves per tree and N <= {_BRUTE_MAX_N}"
        )
    k, pos = _locate(trees, leaf)
    acc: dict[int, float] = {}
    for n in ns:
        target_total, by_degree = _tree_slice_table(trees[k], n, pos)
        if target_total == 0.0:
            continue
        other = 1.0
        if joint:
            for j, tr in enumerate(trees):
                if j != k:
                    other *= _tree_slice_table(tr, n, None)[0]
        for d, w in by_degree.items():
            acc[d] = acc.get(d, 0.0) + other * w
    z = sum(acc.values())
    if z == 0.0:
        return LeafDegreePosterior(np.zeros(1), truncation=0)
    probs = np.zeros(max(acc) + 1)
    for d, w in acc.items():
        probs[d] = w / z
    return LeafDegreePosterior(probs, truncation=ns[-1] if ns else 0)


def labeled_assignment_weights(leaves: list[LeafObservation], n: int) -> float:
    """Sum over all labelled user-to-leaf assignments consistent with the observations."""
    if len(leaves) ** n > 2_000_000:
        raise EnumerationRefused("too many labelled assignments")
    total = 0.0
    for assignment in itertools.product(range(len(leaves)), repeat=n):
        counts = Counter(assignment)
        if all(_consistent(counts.get(i, 0), o.status) for i, o in enumerate(leaves)):
            total += math.prod(leaves[i].mass for i in assignment)
    return total

"""Shared test utilities: concentration bounds and planted-type builders."""

import math

import numpy as np

from cfsim.itemspace import FiniteMixture, ItemType


def chernoff_upper(mean: float, eps: float) -> float:
    """P(X >= (1+eps) E[X]) bound for sums of [0,1] variables."""
    return math.exp(-eps * eps / (2.0 + eps) * mean)


def chernoff_lower(mean: float, eps: float) -> float:
    """P(X <= (1-eps) E[X]) bound for sums of [0,1] variables."""
    return math.exp(-eps * eps / 2.0 * mean)


def binom_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 1e-12) / n)


def type_with_flips(base: ItemType, flip_users) -> ItemType:
    bits = base.bits
    for u in flip_users:
        bits ^= 1 << u
    return ItemType(base.n, bits)


def planted_pair(n_users: int, n_disagree: int) -> tuple[ItemType, ItemType]:
    """Two types at exact distance n_disagree / n_users."""
    base = ItemType(n_users, (1 << (n_users // 2)) - 1)
    other = type_with_flips(base, range(n_disagree))
    return base, other


def equidistant_mixture(k: int, n_users: int) -> FiniteMixture:
    """K equal-weight types with disjoint like-sets (pairwise equal distance)."""
    if n_users % k:
        raise ValueError("need k | n_users")
    width = n_users // k
    types = [
        ItemType(n_users, ((1 << width) - 1) << (c * width)) for c in range(k)
    ]
    return FiniteMixture(types, [1.0 / k] * k)

"""Item types, item measures, and the disagreement metric.

An item is identified by its *type*: the column of binary preferences
(one per user) it induces.  Types are stored as bitmasks (bit u set means
user u likes the item), which makes the disagreement distance a popcount
and keeps the simulation hot path cheap.  Measures over the type space are
sampleable generators; finite-support measures additionally admit an exact
doubling-dimension computation.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Two item types of different lengths were compared."""


class ParameterError(ValueError):
    """A parameter is outside its documented range."""


class UnsupportedMeasureError(TypeError):
    """Operation requires a finite-support measure."""


class ConstructionError(RuntimeError):
    """A generated measure could not satisfy its constraints."""


class ItemType:
    """A length-N vector of user preferences, packed into an int bitmask.

    Bit u set means user u likes the item (L = +1); clear means dislike.
    Instances are immutable and hashable; the ±1 numpy view is materialized
    lazily for vectorized user sampling.
    """

    __slots__ = ("n", "bits", "_arr")

    def __init__(self, n: int, bits: int):
        if n <= 0:
            raise ParameterError("user count must be positive")
        if bits < 0 or bits >> n:
            raise ParameterError("bitmask has bits outside user range")
        self.n = n
        self.bits = bits
        self._arr = None

    @classmethod
    def from_signs(cls, signs: Sequence[int]) -> "ItemType":
        bits = 0
        for u, s in enumerate(signs):
            if s == 1:
                bits |= 1 << u
            elif s != -1:
                raise ParameterError("preferences must be +1 or -1")
        return cls(len(signs), bits)

    @classmethod
    def from_string(cls, s: str) -> "ItemType":
        """Parse a '+'/'-' string, character u being user u's preference."""
        bits = 0
        for u, ch in enumerate(s):
            if ch == "+":
                bits |= 1 << u
            elif ch != "-":
                raise ParameterError(f"bad preference character {ch!r}")
        return cls(len(s), bits)

    def to_string(self) -> str:
        return "".join("+" if self.bits >> u & 1 else "-" for u in range(self.n))

    def to_array(self) -> np.ndarray:
        """±1 int8 array indexed by user (cached)."""
        if self._arr is None:
            bits = np.frombuffer(
                self.bits.to_bytes((self.n + 7) // 8, "little"), dtype=np.uint8
            )
            unpacked = np.unpackbits(bits, bitorder="little")[: self.n]
            self._arr = (unpacked.astype(np.int8) * 2 - 1).copy()
            self._arr.flags.writeable = False
        return self._arr

    def like_count(self) -> int:
        return self.bits.bit_count()

    def preference(self, user: int) -> int:
        return 1 if self.bits >> user & 1 else -1

    def __eq__(self, other):
        return (
            isinstance(other, ItemType)
            and self.n == other.n
            and self.bits == other.bits
        )

    def __hash__(self):
        return hash((self.n, self.bits))

    def __repr__(self):
        return f"ItemType(n={self.n}, likes={self.like_count()})"


def gamma_distance(x: ItemType, y: ItemType) -> float:
    """Fraction of users whose preferences for x and y disagree.

    This is the normalized Hamming distance between the two type vectors;
    it is exact (popcount over N) up to the final float division.
    """
    if x.n != y.n:
        raise DimensionError(f"type lengths differ: {x.n} != {y.n}")
    return (x.bits ^ y.bits).bit_count() / x.n


def disagreement_count(x: ItemType, y: ItemType) -> int:
    """Integer numerator of gamma_distance (number of disagreeing users)."""
    if x.n != y.n:
        raise DimensionError(f"type lengths differ: {x.n} != {y.n}")
    return (x.bits ^ y.bits).bit_count()


# ---------------------------------------------------------------------------
# Measures
# ---------------------------------------------------------------------------

class ItemMeasure:
    """Sampleable probability measure over item types for N users."""

    n_users: int

    def sample(self, rng: np.random.Generator) -> ItemType:
        raise NotImplementedError

    def is_finite(self) -> bool:
        return False


class FiniteMixture(ItemMeasure):
    """Finitely supported measure: explicit types with probability weights."""

    def __init__(self, types: Sequence[ItemType], weights: Sequence[float]):
        if len(types) == 0:
            raise ParameterError("mixture needs at least one type")
        if len(types) != len(weights):
            raise ParameterError("types and weights must align")
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ParameterError("weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ParameterError(f"weights sum to {w.sum()!r}, not 1")
        n = types[0].n
        for t in types:
            if t.n != n:
                raise DimensionError("all types in a mixture must share N")
        self.n_users = n
        self.types = list(types)
        self.weights = w
        cum = np.cumsum(w)
        cum[-1] = 1.0
        self._cum = cum.tolist()

    def sample(self, rng: np.random.Generator) -> ItemType:
        k = bisect_right(self._cum, rng.random())
        return self.types[min(k, len(self.types) - 1)]

    def is_finite(self) -> bool:
        return True

    def support(self) -> list[tuple[ItemType, float]]:
        """Deduplicated (type, mass) pairs with positive mass."""
        agg: dict[ItemType, float] = {}
        for t, w in zip(self.types, self.weights):
            if w > 0:
                agg[t] = agg.get(t, 0.0) + float(w)
        return list(agg.items())

    def user_like_probs(self) -> np.ndarray:
        """mu-probability, per user, of liking a sampled item."""
        mat = np.stack([t.to_array() for t in self.types])  # K x N
        return self.weights @ (mat > 0)

    def __len__(self):
        return len(self.types)


class UniformCube(ItemMeasure):
    """Uniform measure over all 2^N type vectors (the unstructured regime)."""

    def __init__(self, n_users: int):
        if n_users <= 0:
            raise ParameterError("user count must be positive")
        self.n_users = n_users

    def sample(self, rng: np.random.Generator) -> ItemType:
        raw = int.from_bytes(rng.bytes((self.n_users + 7) // 8), "little")
        return ItemType(self.n_users, raw & ((1 << self.n_users) - 1))


def sample_item(measure: ItemMeasure, rng: np.random.Generator) -> ItemType:
    """Draw one item type i.i.d. from the measure."""
    return measure.sample(rng)


# ---------------------------------------------------------------------------
# Exact doubling dimension for finite supports
# ---------------------------------------------------------------------------

def doubling_dimension_exact(measure: ItemMeasure) -> float:
    """Exact doubling dimension of a finite-support measure.

    The ball-mass ratio mu(B(x,2r))/mu(B(x,r)) is piecewise constant in r,
    jumping only where r or 2r crosses a realized support distance, so the
    supremum over r>0 is attained on the finite grid of critical radii
    {dist/2, dist}.  Working with integer disagreement counts keeps every
    ball-membership comparison exact: a radius j/(2N) admits distance
    count c iff 2c <= j.
    """
    if not isinstance(measure, FiniteMixture) or not measure.is_finite():
        raise UnsupportedMeasureError("exact oracle needs a finite mixture")
    support = measure.support()
    best = 1.0  # ratio 1 is always realized (radii below the closest point)
    for x, _wx in support:
        counts = np.array([disagreement_count(x, y) for y, _ in support])
        masses = np.array([w for _, w in support])
        pos = sorted({int(c) for c in counts if c > 0})
        # critical radii j/(2N): j in {c, 2c} for realized positive counts c
        for j in {c for c in pos} | {2 * c for c in pos}:
            num = masses[2 * counts <= 2 * j].sum()   # B(x, 2r), r = j/(2N)
            den = masses[2 * counts <= j].sum()       # B(x, r)
            if den > 0:
                best = max(best, float(num / den))
    return math.log2(best)


def ball_mass(measure: FiniteMixture, center: ItemType, radius: float) -> float:
    """mu(B(center, radius)) with the closed-ball (<=) convention."""
    total = 0.0
    for t, w in measure.support():
        if gamma_distance(center, t) <= radius + 1e-15:
            total += w
    return total


def critical_radii(measure: FiniteMixture, center: ItemType) -> list[float]:
    """Radii where ball-mass ratios around the center can change."""
    radii = set()
    for t, _ in measure.support():
        d = gamma_distance(center, t)
        if d > 0:
            radii.add(d / 2)
            radii.add(d)
    return sorted(radii)


# ---------------------------------------------------------------------------
# Assumption validation
# ---------------------------------------------------------------------------

_TOL = 1e-12


@dataclass
class AssumptionReport:
    """Checks of the structural assumptions for a measure at a given nu.

    a2_user_ok: every user's mu-probability of liking lies in [nu, 2nu].
    a2_item_ok: every support item's like-fraction lies in [nu, 2nu].
    d_exact is filled when the exact oracle applies.  For unbounded
    supports the item check is Monte-Carlo over `sampled_items` draws.
    """

    nu: float
    per_user_like_prob: np.ndarray
    per_item_like_frac: np.ndarray
    a2_user_ok: bool
    a2_item_ok: bool
    d_exact: Optional[float] = None
    sampled_items: int = 0

    def summary(self) -> dict:
        return {
            "nu": self.nu,
            "a2_user_ok": self.a2_user_ok,
            "a2_item_ok": self.a2_item_ok,
            "user_like_prob_min": float(np.min(self.per_user_like_prob)),
            "user_like_prob_max": float(np.max(self.per_user_like_prob)),
            "item_like_frac_min": float(np.min(self.per_item_like_frac)),
            "item_like_frac_max": float(np.max(self.per_item_like_frac)),
            "d_exact": self.d_exact,
            "sampled_items": self.sampled_items,
        }


def _in_band(values: np.ndarray, nu: float) -> bool:
    return bool(np.all(values >= nu - _TOL) and np.all(values <= 2 * nu + _TOL))


def validate_assumptions(
    measure: ItemMeasure,
    nu: float,
    sample_budget: int = 10_000,
    rng: Optional[np.random.Generator] = None,
) -> AssumptionReport:
    """Check the like-fraction band [nu, 2nu] per user and per item.

    Finite mixtures are checked exactly.  For UniformCube the per-user like
    probability is exactly 1/2 analytically, and the item side is estimated
    from `sample_budget` draws.
    """
    if not (0 < nu < 0.25):
        raise ParameterError("nu must lie in (0, 1/4)")
    if isinstance(measure, FiniteMixture):
        user_probs = measure.user_like_probs()
        fracs = np.array(
            [t.like_count() / t.n for t, _ in measure.support()]
        )
        return AssumptionReport(
            nu=nu,
            per_user_like_prob=user_probs,
            per_item_like_frac=fracs,
            a2_user_ok=_in_band(user_probs, nu),
            a2_item_ok=_in_band(fracs, nu),
            d_exact=doubling_dimension_exact(measure),
        )
    if isinstance(measure, UniformCube):
        user_probs = np.full(measure.n_users, 0.5)
        rng = rng if rng is not None else np.random.default_rng(0)
        draws = max(1, sample_budget)
        fracs = np.array(
            [measure.sample(rng).like_count() / measure.n_users for _ in range(draws)]
        )
        return AssumptionReport(
            nu=nu,
            per_user_like_prob=user_probs,
            per_item_like_frac=fracs,
            a2_user_ok=_in_band(user_probs, nu),
            a2_item_ok=_in_band(fracs, nu),
            d_exact=None,
            sampled_items=draws,
        )
    raise UnsupportedMeasureError(f"unknown measure kind {type(measure)!r}")


# ---------------------------------------------------------------------------
# Generated cluster measures
# ---------------------------------------------------------------------------

@dataclass
class GeneratedSpace:
    """A constructed measure together with its certification."""

    measure: FiniteMixture
    d_exact: float
    report: AssumptionReport
    params: dict = field(default_factory=dict)


def _feasible_m(K: int, nu: float) -> int:
    """Number of types each user likes so the per-user band holds."""
    lo = math.ceil(K * nu - _TOL)
    hi = math.floor(2 * K * nu + _TOL)
    if lo > hi or hi < 1:
        raise ConstructionError(
            f"no integer per-user like count in [{K * nu:.3f}, {2 * K * nu:.3f}]"
            f" for K={K}, nu={nu}; need ceil(K*nu) <= floor(2*K*nu) and >= 1"
        )
    return min(max(int(round(1.5 * nu * K)), max(lo, 1)), hi)


def _balanced_subsets(n_users: int, K: int, m: int, rng: np.random.Generator):
    """Each user gets m distinct types; per-type loads balanced within one.

    Deals a shuffled multiset of type ids with balanced multiplicities, then
    repairs duplicate assignments by swapping with other users.
    """
    total = n_users * m
    base, extra = divmod(total, K)
    loads = [base + (1 if k < extra else 0) for k in range(K)]
    pool: list[int] = []
    for k, c in enumerate(loads):
        pool.extend([k] * c)
    pool = list(rng.permutation(pool))
    liked = [set() for _ in range(n_users)]
    leftovers: list[int] = []
    idx = 0
    for u in range(n_users):
        while len(liked[u]) < m and idx < len(pool):
            t = pool[idx]
            idx += 1
            if t in liked[u]:
                leftovers.append(t)
            else:
                liked[u].add(t)
    # place leftover copies with users that lack the type, swapping if needed
    for t in leftovers:
        placed = False
        order = rng.permutation(n_users)
        for u in order:
            if t not in liked[u] and len(liked[u]) < m:
                liked[u].add(t)
                placed = True
                break
        if not placed:
            for u in order:
                if t in liked[u]:
                    continue
                # u is full: evict some type t2 that another non-full user lacks
                for t2 in list(liked[u]):
                    for v in order:
                        if len(liked[v]) < m and t2 not in liked[v]:
                            liked[u].discard(t2)
                            liked[u].add(t)
                            liked[v].add(t2)
                            placed = True
                            break
                    if placed:
                        break
                if placed:
                    break
        if not placed:
            raise ConstructionError("could not balance type assignment")
    return liked


def _flat_cluster_types(
    K: int, n_users: int, nu: float, rng: np.random.Generator
) -> list[ItemType]:
    m = _feasible_m(K, nu)
    liked = _balanced_subsets(n_users, K, m, rng)
    masks = [0] * K
    for u, ts in enumerate(liked):
        for t in ts:
            masks[t] |= 1 << u
    return [ItemType(n_users, b) for b in masks]


def _swap_members(bits: int, n_users: int, r: int, rng: np.random.Generator) -> int:
    """Replace r liked users with r currently-disliked ones (size preserved)."""
    ones = [u for u in range(n_users) if bits >> u & 1]
    zeros = [u for u in range(n_users) if not bits >> u & 1]
    r = min(r, len(ones), len(zeros))
    for u in rng.choice(len(ones), size=r, replace=False):
        bits &= ~(1 << ones[int(u)])
    for u in rng.choice(len(zeros), size=r, replace=False):
        bits |= 1 << zeros[int(u)]
    return bits


def make_cluster_measure(
    K: int,
    n_users: int,
    nu: float,
    depth: int = 1,
    seed: int = 0,
    max_tries: int = 20,
) -> GeneratedSpace:
    """Build an equal-weight K-type mixture satisfying the like-fraction band.

    depth=1 gives a flat layout: every user likes m ~ 1.5*nu*K of the K
    types, balanced so each type's like-fraction also lands in [nu, 2nu],
    and the K types sit at near-equal pairwise distances.  depth>=2 arranges
    the K types as leaves of a binary hierarchy over K / 2^(depth-1)
    prototypes, with geometrically shrinking membership swaps between
    siblings, so the realized doubling dimension is controlled by the tree.

    The construction validates the band after generation and retries with
    derived subseeds; a measure that cannot be certified raises
    ConstructionError naming the violated constraint.
    """
    if not (0 < nu < 0.25):
        raise ParameterError("nu must lie in (0, 1/4)")
    if K < 1 or depth < 1:
        raise ParameterError("K and depth must be positive")

    last_err = "unknown"
    for attempt in range(max_tries):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt, 0xC1]))
        try:
            if K == 1:
                size = int(round(1.5 * nu * n_users))
                size = min(max(size, math.ceil(nu * n_users - _TOL)),
                           math.floor(2 * nu * n_users + _TOL))
                if size < 1:
                    raise ConstructionError(
                        f"no feasible like count for a single type at nu={nu}, N={n_users}"
                    )
                members = rng.choice(n_users, size=size, replace=False)
                bits = 0
                for u in members:
                    bits |= 1 << int(u)
                types = [ItemType(n_users, bits)]
            elif depth == 1:
                types = _flat_cluster_types(K, n_users, nu, rng)
            else:
                leaves_per_proto = 2 ** (depth - 1)
                if K % leaves_per_proto:
                    raise ConstructionError(
                        f"K={K} not divisible by 2^(depth-1)={leaves_per_proto}"
                    )
                G = K // leaves_per_proto
                protos = (
                    _flat_cluster_types(G, n_users, nu, rng)
                    if G > 1
                    else [_flat_cluster_types(2, n_users, nu, rng)[0]]
                )
                level_bits = [t.bits for t in protos]
                base_swap = max(1, int(round(0.25 * nu * n_users)))
                for level in range(1, depth):
                    r = max(1, base_swap >> (2 * (level - 1)))
                    nxt = []
                    for b in level_bits:
                        nxt.append(_swap_members(b, n_users, r, rng))
                        nxt.append(_swap_members(b, n_users, r, rng))
                    level_bits = nxt
                types = [ItemType(n_users, b) for b in level_bits]

            weights = [1.0 / len(types)] * len(types)
            measure = FiniteMixture(types, weights)
            report = validate_assumptions(measure, nu)
            item_ok = report.a2_item_ok
            user_ok = report.a2_user_ok if K > 1 else True
            if not item_ok:
                raise ConstructionError(
                    "item like-fraction outside [nu, 2nu]: "
                    f"range [{report.per_item_like_frac.min():.4f}, "
                    f"{report.per_item_like_frac.max():.4f}]"
                )
            if not user_ok:
                raise ConstructionError(
                    "user like-probability outside [nu, 2nu]: "
                    f"range [{report.per_user_like_prob.min():.4f}, "
                    f"{report.per_user_like_prob.max():.4f}]"
                )
            return GeneratedSpace(
                measure=measure,
                d_exact=report.d_exact,
                report=report,
                params={"K": K, "n_users": n_users, "nu": nu,
                        "depth": depth, "seed": seed, "attempt": attempt},
            )
        except ConstructionError as e:
            last_err = str(e)
            if "no integer per-user" in last_err or "not divisible" in last_err \
                    or "no feasible like count" in last_err:
                raise
    raise ConstructionError(
        f"could not build a conforming measure after {max_tries} tries: {last_err}"
    )


def make_user_cluster_measure(
    K: int,
    n_users: int,
    nu: float,
    seed: int = 0,
    like_mass: Optional[float] = None,
    flip_weight: Optional[float] = None,
) -> GeneratedSpace:
    """Measure with K latent user clusters for user-similarity contrasts.

    Users are split into K equal clusters with identical in-cluster
    preferences.  Most item mass is split between a type liked by everyone
    and a type liked by nobody; for each cluster c a `flip_weight / K`
    mass inverts c's preference on both.  Same-cluster users agree on
    every item, users from different clusters disagree on item mass
    2*flip_weight/K, and per-user like probability stays near `like_mass`
    (default 1.5*nu) for every K.  Keeping the total flip mass fixed makes
    the item-side geometry seen by partitioning K-independent, so only
    user-similarity inference gets harder as K grows.  Note the per-item
    like fractions are deliberately NOT in the [nu, 2nu] band; this family
    trades that away for exact user clusters.
    """
    if not (0 < nu < 0.25):
        raise ParameterError("nu must lie in (0, 1/4)")
    if K < 2 or n_users < 2 * K:
        raise ParameterError("need K >= 2 and at least 2 users per cluster")
    p = 1.5 * nu if like_mass is None else like_mass
    total_flip = 0.3 * nu if flip_weight is None else flip_weight
    rho = total_flip / K
    if K * rho >= 0.5:
        raise ConstructionError(f"total flip mass {K * rho:.3f} too large")

    full = (1 << n_users) - 1
    bounds = [round(c * n_users / K) for c in range(K + 1)]
    cluster_masks = []
    for c in range(K):
        mask = 0
        for u in range(bounds[c], bounds[c + 1]):
            mask |= 1 << u
        cluster_masks.append(mask)

    types = [ItemType(n_users, full), ItemType(n_users, 0)]
    weights = [p * (1 - K * rho), (1 - p) * (1 - K * rho)]
    for c in range(K):
        types.append(ItemType(n_users, full & ~cluster_masks[c]))  # all but c
        weights.append(p * rho)
        types.append(ItemType(n_users, cluster_masks[c]))          # only c
        weights.append((1 - p) * rho)
    weights = [w / sum(weights) for w in weights]
    measure = FiniteMixture(types, weights)
    report = validate_assumptions(measure, nu)
    return GeneratedSpace(
        measure=measure,
        d_exact=report.d_exact,
        report=report,
        params={"K": K, "n_users": n_users, "nu": nu, "seed": seed,
                "like_mass": p, "flip_weight": total_flip,
                "per_cluster_flip": rho, "kind": "user_cluster"},
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def measure_to_json(measure: ItemMeasure) -> dict:
    if isinstance(measure, FiniteMixture):
        return {
            "variant": "finite_mixture",
            "n_users": measure.n_users,
            "types": [t.to_string() for t in measure.types],
            "weights": [float(w) for w in measure.weights],
        }
    if isinstance(measure, UniformCube):
        return {"variant": "uniform_cube", "n_users": measure.n_users}
    raise UnsupportedMeasureError(f"cannot serialize {type(measure)!r}")


def measure_from_json(doc: dict) -> ItemMeasure:
    variant = doc.get("variant")
    if variant == "finite_mixture":
        n = int(doc["n_users"])
        types = [ItemType.from_string(s) for s in doc["types"]]
        for t in types:
            if t.n != n:
                raise DimensionError("type string length != n_users")
        return FiniteMixture(types, [float(w) for w in doc["weights"]])
    if variant == "uniform_cube":
        return UniformCube(int(doc["n_users"]))
    raise ParameterError(f"unknown measure variant {variant!r}")


def save_measure(measure: ItemMeasure, path) -> None:
    with open(path, "w") as fh:
        json.dump(measure_to_json(measure), fh)


def load_measure(path) -> ItemMeasure:
    with open(path) as fh:
        return measure_from_json(json.load(fh))

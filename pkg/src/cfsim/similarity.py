"""Similarity testing, net construction, and item partitioning.

The three routines (pairwise similarity testing, greedy net construction,
and partition assembly) are written as *programs*: generators that yield
feedback requests and receive answers.  A program can be driven two ways:

  * standalone, against a ``TypeOracle`` that samples users itself and
    answers from the hidden types (used by unit tests, property suites,
    and the acceptance checks), or
  * interleaved, by the online engine, which materializes each request as
    real recommendations to arriving users (see ``cfsim.engine``).

Both modes execute the identical decision logic, which is what makes the
standalone/interleaved equivalence checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .itemspace import ItemMeasure, ItemType, ParameterError


# ---------------------------------------------------------------------------
# Scale configuration and closed-form constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaleConfig:
    """Per-family multipliers on the magnitude constants.

    At the default of 1.0 every derived quantity equals its closed form;
    the `desk` preset shrinks the proof-artifact magnitudes so that runs
    with N <= 2000 finish at desk scale while preserving each formula's
    structure and coupling.
    """

    q: float = 1.0        # sample-size constant (the 630 family)
    eps_n: float = 1.0    # asymptotic-precision constant (the 2^(5d+18) family)
    m: float = 1.0        # items-per-epoch constant (the 2^(max(3.5d,8)) family)
    wait: float = 1.0     # net-construction patience (max-wait family)
    mp: float = 1.0       # cold-start work bound (MP(1) family)
    c: float = 1.0        # epoch-precision numerator (the 148*20 family)
    t_min: float = 1.0    # epoch warm-up bound (the 12/eps family)

    name: str = "paper"


PAPER_SCALE = ScaleConfig()

# Shrunk magnitudes tuned so that cold start is observable at N ~ 1000,
# T <= 5000 (every acceptance run states this preset when it uses it).
DESK_SCALE = ScaleConfig(
    q=2.6e-5,
    eps_n=8.4e-13,
    m=7.5e-8,
    wait=2.6e-3,
    mp=1.0e-12,
    c=617.0,
    t_min=4.8e-3,
    name="desk",
)

SCALE_PRESETS = {"paper": PAPER_SCALE, "desk": DESK_SCALE}


def q_sample_size(eps: float, delta: float, d: float, scale: float = 1.0) -> int:
    """Number of user probes for one similarity test: ceil(630 (d+1)/eps ln(1/delta))."""
    if not (0 < eps <= 1):
        raise ParameterError(f"eps={eps} outside (0, 1]")
    if not (0 < delta < 1):
        raise ParameterError(f"delta={delta} outside (0, 1)")
    if d < 0:
        raise ParameterError("d must be nonnegative")
    return math.ceil(630.0 * scale * (d + 1) / eps * math.log(1.0 / delta))


@dataclass(frozen=True)
class TheoryConstants:
    """Closed-form algorithm constants for a given (d, nu, N) and scale.

    All real-valued formulas are exposed unrounded; integer counts are
    ceilings of the corresponding real value (rounding up is the
    conservative direction for sample sizes and waits).
    """

    d: float
    nu: float
    n_users: int
    scale: ScaleConfig = field(default_factory=ScaleConfig)

    def __post_init__(self):
        if not (0 < self.nu < 0.25):
            raise ParameterError("nu must lie in (0, 1/4)")
        if self.d < 0:
            raise ParameterError("d must be nonnegative")
        if self.n_users < 1:
            raise ParameterError("need at least one user")

    # -- epoch schedule -----------------------------------------------------

    @property
    def c_precision(self) -> float:
        """Precision prefactor C = nu / (148 * 20)."""
        return self.nu / (148.0 * 20.0) * self.scale.c

    @property
    def eps_n(self) -> float:
        """Plateau precision: the N-limited epoch accuracy floor."""
        d = self.d
        inner = (
            self.scale.eps_n
            * 2.0 ** (5 * d + 18)
            / self.nu
            * 630.0
            * (2 * d + 11)
            * (d + 2) ** 4
            / self.n_users
        )
        return inner ** (1.0 / (d + 5))

    def eps_tau(self, tau: int) -> float:
        """Target accuracy for epoch tau: max(2^-tau, eps_N) * C."""
        if tau < 1:
            raise ParameterError("epochs are indexed from 1")
        return max(2.0 ** -tau, self.eps_n) * self.c_precision

    def m_tau(self, tau: int) -> float:
        """Number of items introduced for epoch tau (real-valued form)."""
        eps = self.eps_tau(tau)
        return (
            self.scale.m
            * 2.0 ** max(3.5 * self.d, 8.0)
            / self.nu
            * (3 * self.d + 1)
            / eps ** (self.d + 2)
            * math.log(2.0 / eps)
        )

    def d_tau(self, tau: int) -> float:
        """Duration of epoch tau in per-user time units: (nu/2) * M_tau."""
        return self.nu / 2.0 * self.m_tau(tau)

    def epoch_schedule(self, tau: int) -> tuple[float, float, float]:
        return self.eps_tau(tau), self.m_tau(tau), self.d_tau(tau)

    def t_min_tau(self, tau: int) -> float:
        """Warm-up horizon within an epoch before the regret slope settles."""
        eps = self.eps_tau(tau)
        return self.scale.t_min * 12.0 / eps * math.log(1.0 / eps)

    # -- similarity / net constants ------------------------------------------

    def q_sample_size(self, eps: float, delta: float) -> int:
        return q_sample_size(eps, delta, self.d, self.scale.q)

    def max_size(self, eps: float) -> float:
        """Net size cap (4/eps)^d (real-valued form)."""
        if not (0 < eps <= 1):
            raise ParameterError(f"eps={eps} outside (0, 1]")
        return (4.0 / eps) ** self.d

    def max_size_count(self, eps: float) -> int:
        return max(1, math.ceil(self.max_size(eps)))

    def max_wait(self, eps: float, delta: float) -> float:
        """Consecutive covered draws tolerated before the net is declared done."""
        if not (0 < delta < 1):
            raise ParameterError(f"delta={delta} outside (0, 1)")
        return (
            self.scale.wait
            * (5.0 / eps) ** self.d
            * math.log(2.0 * self.max_size(eps) / delta)
        )

    def delta_prime(self, eps: float, delta: float) -> float:
        """Per-test failure budget inside net construction."""
        return delta / (4.0 * self.max_wait(eps, delta) * self.max_size(eps) ** 2)

    def mp1(self) -> float:
        """Upper bound on recommendations consumed by the cold-start partition."""
        eps1 = self.eps_tau(1)
        m1 = self.m_tau(1)
        return (
            self.scale.mp
            * (8.0 / eps1) ** (self.d + 1)
            * 4.0
            * 630.0
            * (self.d + 1) ** 3
            * m1
            * math.log(8.0 / eps1) ** 2
            * math.log(m1)
        )

    def with_scale(self, scale: ScaleConfig) -> "TheoryConstants":
        return replace(self, scale=scale)


# ---------------------------------------------------------------------------
# Feedback requests and programs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DrawItem:
    """Request: introduce one fresh item drawn from the measure."""


@dataclass(frozen=True)
class PairBatch:
    """Request: q independent same-user disagreement probes on (i, j).

    The fulfiller must sample q users uniformly at random (with
    replacement), obtain each sampled user's preference for both items,
    and return the number of users who disagree.
    """

    i: int
    j: int
    q: int


def similar_decision(disagreements: int, q: int, eps: float) -> bool:
    """True unless the empirical disagreement mean reaches 0.9 * eps."""
    return not (disagreements >= 0.9 * eps * q)


def similar_program(i: int, j: int, eps: float, delta: float, tc: TheoryConstants):
    """Similarity test between two introduced items; returns a bool."""
    q = tc.q_sample_size(eps, delta)
    disagreements = yield PairBatch(i, j, q)
    return similar_decision(disagreements, q, eps)


def get_net_program(eps: float, delta: float, tc: TheoryConstants):
    """Greedy net construction; returns the list of member handles.

    Draws items from the measure and inserts any draw not judged similar
    to an existing member (scanning members in insertion order and
    stopping at the first hit).  The consecutive-covered-draw counter
    resets on every insertion; the loop ends once the counter exceeds
    max-wait or the net reaches max-size.
    """
    max_size = tc.max_size_count(eps)
    max_wait = tc.max_wait(eps, delta)
    dprime = tc.delta_prime(eps, delta)
    members: list[int] = []
    count = 0
    while count <= max_wait and len(members) < max_size:
        h = yield DrawItem()
        covered = False
        for c in members:
            if (yield from similar_program(h, c, eps, dprime, tc)):
                covered = True
                break
        if covered:
            count += 1
        else:
            members.append(h)
            count = 0
    return members


def make_partition_program(
    m_items: int,
    eps: float,
    delta: float,
    tc: TheoryConstants,
    rng_assign: np.random.Generator,
    progress: Optional[dict] = None,
):
    """Full partition construction; returns a Partition.

    Builds a net at (eps/2, delta/2), draws m_items fresh items, assigns
    each to a uniformly random block among the net members judged similar
    at (0.6 eps, delta / (4 m |C|)), discards unassigned items, and breaks
    oversized blocks into pieces of size between 1/(2 eps) and 1/eps.
    """
    if m_items < 0:
        raise ParameterError("item count must be nonnegative")
    if m_items == 0:
        return Partition(blocks=[], eps=eps, delta=delta, m_requested=0,
                         net_members=[], unassigned=[])
    members = yield from get_net_program(eps / 2.0, delta / 2.0, tc)
    if progress is not None:
        progress["net"] = list(members)
    samples = []
    for _ in range(m_items):
        samples.append((yield DrawItem()))
    if progress is not None:
        progress["samples"] = list(samples)
    pair_delta = delta / (4.0 * m_items * len(members))
    assigned: dict[int, list[int]] = {c: [] for c in members}
    unassigned: list[int] = []
    for j in samples:
        sj = []
        for c in members:
            if (yield from similar_program(c, j, 0.6 * eps, pair_delta, tc)):
                sj.append(c)
        if sj:
            pick = sj[0] if len(sj) == 1 else sj[int(rng_assign.integers(len(sj)))]
            assigned[pick].append(j)
            if progress is not None:
                progress.setdefault("assigned", []).append((j, pick))
        else:
            unassigned.append(j)
    blocks = []
    for c in members:
        blocks.extend(split_block(assigned[c], eps))
    return Partition(
        blocks=blocks,
        eps=eps,
        delta=delta,
        m_requested=m_items,
        net_members=list(members),
        unassigned=unassigned,
    )


def split_block(items: list[int], eps: float) -> list[list[int]]:
    """Break an oversized block into balanced chunks of size <= 1/eps.

    Chunk count is ceil(len * eps), sizes balanced to within one element;
    for len > 1/eps this lands every chunk size in [1/(2 eps), 1/eps].
    Blocks that were never filled past 1/eps pass through unsplit (empty
    ones are dropped).
    """
    if not items:
        return []
    if len(items) <= 1.0 / eps:
        return [list(items)]
    chunks = math.ceil(len(items) * eps)
    base, extra = divmod(len(items), chunks)
    out = []
    start = 0
    for k in range(chunks):
        size = base + (1 if k < extra else 0)
        out.append(list(items[start:start + size]))
        start += size
    # integer sizes can undershoot the real lower bound by less than one
    assert all(
        len(b) >= math.floor(1.0 / (2 * eps)) and len(b) <= math.ceil(1.0 / eps)
        for b in out
    )
    return out


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass
class Net:
    """An eps-net certificate: member handles plus call parameters."""

    members: list[int]
    eps: float
    delta: float
    max_size: int

    def to_json(self) -> dict:
        return {
            "members": list(self.members),
            "eps": self.eps,
            "delta": self.delta,
            "max_size": self.max_size,
        }


@dataclass
class Partition:
    """Blocks of item handles produced by one partition construction."""

    blocks: list[list[int]]
    eps: float
    delta: float
    m_requested: int
    net_members: list[int]
    unassigned: list[int] = field(default_factory=list)

    def n_blocks(self) -> int:
        return len(self.blocks)

    def n_items(self) -> int:
        return sum(len(b) for b in self.blocks)

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "delta": self.delta,
            "m_requested": self.m_requested,
            "net_members": list(self.net_members),
            "blocks": [list(b) for b in self.blocks],
            "n_unassigned": len(self.unassigned),
        }


class QueryBudgetError(RuntimeError):
    """The engine-imposed feedback-query budget ran out mid-test."""

    def __init__(self, partial_disagreements: int, probes_served: int):
        super().__init__(
            f"query budget exhausted after {probes_served} probes"
        )
        self.partial_disagreements = partial_disagreements
        self.probes_served = probes_served


class PartialPartitionError(RuntimeError):
    """Partition construction aborted; carries whatever was built."""

    def __init__(self, net: list[int], assigned: list[tuple[int, int]], cause: Exception):
        super().__init__(f"partition aborted: {cause}")
        self.net = net
        self.assigned = assigned
        self.cause = cause


# ---------------------------------------------------------------------------
# Standalone execution against a type oracle
# ---------------------------------------------------------------------------

class ItemStore:
    """Append-only registry mapping handles to materialized item types."""

    def __init__(self):
        self._types: list[ItemType] = []

    def introduce(self, t: ItemType) -> int:
        self._types.append(t)
        return len(self._types) - 1

    def type_of(self, handle: int) -> ItemType:
        return self._types[handle]

    def __len__(self):
        return len(self._types)


class TypeOracle:
    """Feedback oracle answering from hidden types, sampling its own users.

    Answers are consistent by construction (types never change).  An
    optional query budget (counted in user-item lookups) models the
    engine's recommendation limits; exhaustion raises QueryBudgetError
    carrying the partial disagreement count.
    """

    def __init__(
        self,
        measure: ItemMeasure,
        store: ItemStore,
        rng_items: np.random.Generator,
        rng_users: np.random.Generator,
        query_budget: Optional[int] = None,
    ):
        self.measure = measure
        self.store = store
        self.n_users = measure.n_users
        self.rng_items = rng_items
        self.rng_users = rng_users
        self.queries_left = query_budget
        self.queries_made = 0

    def draw_item(self) -> int:
        return self.store.introduce(self.measure.sample(self.rng_items))

    def sample_user(self) -> int:
        return int(self.rng_users.integers(self.n_users))

    def query(self, user: int, handle: int) -> int:
        self._spend(1)
        return self.store.type_of(handle).preference(user)

    def pair_disagreements(self, i: int, j: int, q: int) -> int:
        ti = self.store.type_of(i).to_array()
        tj = self.store.type_of(j).to_array()
        if self.queries_left is not None and 2 * q > self.queries_left:
            q_fit = self.queries_left // 2
            users = self.rng_users.integers(0, self.n_users, size=q_fit)
            partial = int(np.count_nonzero(ti[users] != tj[users]))
            self._spend(2 * q_fit)
            raise QueryBudgetError(partial, q_fit)
        users = self.rng_users.integers(0, self.n_users, size=q)
        self._spend(2 * q)
        return int(np.count_nonzero(ti[users] != tj[users]))

    def _spend(self, n: int) -> None:
        self.queries_made += n
        if self.queries_left is not None:
            self.queries_left -= n
            if self.queries_left < 0:
                raise QueryBudgetError(0, 0)


def run_program(program, oracle: TypeOracle):
    """Drive a request-yielding program to completion against an oracle."""
    try:
        req = next(program)
        while True:
            if isinstance(req, DrawItem):
                result = oracle.draw_item()
            elif isinstance(req, PairBatch):
                result = oracle.pair_disagreements(req.i, req.j, req.q)
            else:
                raise TypeError(f"unknown request {req!r}")
            req = program.send(result)
    except StopIteration as stop:
        return stop.value


def similar(
    i: int, j: int, eps: float, delta: float, oracle: TypeOracle, tc: TheoryConstants
) -> bool:
    """Standalone similarity test on two already-introduced items."""
    return run_program(similar_program(i, j, eps, delta, tc), oracle)


def get_net(eps: float, delta: float, oracle: TypeOracle, tc: TheoryConstants) -> Net:
    """Standalone greedy net construction over the oracle's measure."""
    members = run_program(get_net_program(eps, delta, tc), oracle)
    return Net(members=members, eps=eps, delta=delta,
               max_size=tc.max_size_count(eps))


def make_partition(
    m_items: int,
    eps: float,
    delta: float,
    oracle: TypeOracle,
    tc: TheoryConstants,
    rng_assign: Optional[np.random.Generator] = None,
) -> Partition:
    """Standalone partition construction over the oracle's measure."""
    rng_assign = rng_assign if rng_assign is not None else np.random.default_rng(0)
    progress: dict = {"net": [], "assigned": []}
    program = make_partition_program(m_items, eps, delta, tc, rng_assign, progress)
    try:
        return run_program(program, oracle)
    except QueryBudgetError as e:
        raise PartialPartitionError(
            net=progress.get("net", []),
            assigned=progress.get("assigned", []),
            cause=e,
        ) from e

"""Recommender implementations behind a common interface.

Recommenders see only the history of their own recommendations (ledger
and feedback); the hidden preference matrix stays inside the environment.
The one exception, OracleRecommender, reads hidden types by design and is
for benchmarking only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .engine import (
    Environment,
    ExploreDriver,
    PHASE_EXPLOIT,
    PHASE_EXPLORE,
    PHASE_FALLBACK,
    _STREAM_ALGO,
    _STREAM_DRIVER_BASE,
)
from .itemspace import FiniteMixture, ParameterError
from .similarity import (
    Partition,
    ScaleConfig,
    TheoryConstants,
    make_partition_program,
)


class Recommender:
    """Interface every policy implements; bound to one environment per run."""

    algo_id = "base"

    def __init__(self):
        self.env: Optional[Environment] = None
        self.current_epoch = 0

    def bind(self, env: Environment) -> "Recommender":
        self.env = env
        return self

    def pending_user(self) -> Optional[int]:
        """User the next arrival must be, when a probe holds one (else None)."""
        return None

    def recommend(self, user: int) -> tuple[int, int]:
        """Return (item handle, phase tag); never an item the user consumed."""
        raise NotImplementedError

    def observe(self, user: int, handle: int, feedback: int) -> None:
        """Feedback for the recommendation just served."""


class RandomRecommender(Recommender):
    """Draws a fresh item from the measure at every step."""

    algo_id = "random"

    def recommend(self, user: int) -> tuple[int, int]:
        return self.env.draw_new_item(), PHASE_EXPLORE


class OracleImpossibleError(RuntimeError):
    """A user likes no item the measure can produce."""


class OracleRecommender(Recommender):
    """All-knowing benchmark: recommends only liked items (test-only).

    Reads the hidden types.  Scans already-introduced items first, then
    resamples the measure until a liked item appears (those draws are not
    recommendations, so they cost nothing).  A user with zero like mass
    under a finite measure is flagged and refused.
    """

    algo_id = "oracle"

    def __init__(self, max_resample: int = 1_000_000):
        super().__init__()
        self.max_resample = max_resample
        self.impossible_users: set[int] = set()
        self._cursor: dict[int, int] = {}

    def bind(self, env: Environment) -> "OracleRecommender":
        super().bind(env)
        if isinstance(env.measure, FiniteMixture):
            probs = env.measure.user_like_probs()
            self.impossible_users = {u for u in range(env.n_users) if probs[u] <= 0}
        return self

    def recommend(self, user: int) -> tuple[int, int]:
        if user in self.impossible_users:
            raise OracleImpossibleError(f"user {user} likes nothing under this measure")
        env = self.env
        k = self._cursor.get(user, 0)
        while k < env.n_items():
            if env.feedback(user, k) > 0 and not env.is_consumed(user, k):
                self._cursor[user] = k
                return k, PHASE_EXPLOIT
            k += 1
        self._cursor[user] = k
        for _ in range(self.max_resample):
            h = env.draw_new_item()
            if env.feedback(user, h) > 0:
                return h, PHASE_EXPLOIT
        raise OracleImpossibleError(
            f"no liked item for user {user} after {self.max_resample} draws"
        )


# ---------------------------------------------------------------------------
# User-user baseline
# ---------------------------------------------------------------------------

def user_user_q_min(k_clusters: int, nu: float) -> int:
    """Common ratings needed before the agreement rule may accept a neighbor.

    Acceptance after q all-agreeing common ratings requires
    (K-1)/K * (1 - 0.2 nu)^q <= 1/K; at least one common rating is always
    required.
    """
    if k_clusters < 2:
        raise ParameterError("the cluster prior needs K >= 2")
    if not (0 < nu < 0.25):
        raise ParameterError("nu must lie in (0, 1/4)")
    threshold = math.log(k_clusters - 1) / -math.log(1 - 0.2 * nu)
    return max(1, math.ceil(threshold))


@dataclass
class _UserUserView:
    """Per-user neighbor-search state."""

    accepted: list[int] = field(default_factory=list)
    supply_ptr: dict[int, int] = field(default_factory=dict)
    supply_cursor: int = 0
    candidate: Optional[int] = None
    probe_ptr: int = 0
    agreements: int = 0
    rejected: set[int] = field(default_factory=set)


class UserUserRecommender(Recommender):
    """Neighbor-matching baseline driven by exact rating agreement.

    Probes one candidate user at a time by recommending items the
    candidate rated; any disagreement rejects the candidate, and a
    candidate whose q_min common ratings all agree is accepted as a
    neighbor.  Accepted neighbors' liked items are recommended while any
    remain; when the liked supply is empty the arrival splits between
    probing and fresh random items (the fresh draws keep the shared item
    pool growing, without which every user's supply would starve).
    """

    algo_id = "user_user"

    MAX_NEIGHBORS = 64

    def __init__(self, k_clusters: int, nu: float):
        super().__init__()
        self.k_clusters = k_clusters
        self.nu = nu
        self.q_min = user_user_q_min(k_clusters, nu)
        self._rated: list[list[tuple[int, int]]] = []   # per user: (handle, fb)
        self._liked: list[list[int]] = []
        self._consumed_any: list[bool] = []
        self._views: dict[int, _UserUserView] = {}
        self._rng = None
        self._last: Optional[tuple] = None

    def bind(self, env: Environment) -> "UserUserRecommender":
        super().bind(env)
        self._rated = [[] for _ in range(env.n_users)]
        self._liked = [[] for _ in range(env.n_users)]
        self._consumed_any = [False] * env.n_users
        self._rng = env.spawn_random(_STREAM_ALGO)
        return self

    def _view(self, user: int) -> _UserUserView:
        view = self._views.get(user)
        if view is None:
            view = self._views[user] = _UserUserView()
        return view

    def _supply(self, user: int, view: _UserUserView) -> Optional[int]:
        # rotate through accepted neighbors, staying on one until it drains
        env = self.env
        accepted = view.accepted
        n = len(accepted)
        for offset in range(n):
            idx = (view.supply_cursor + offset) % n
            v = accepted[idx]
            likes = self._liked[v]
            ptr = view.supply_ptr.get(v, 0)
            while ptr < len(likes):
                h = likes[ptr]
                if not env.is_consumed(user, h):
                    view.supply_ptr[v] = ptr
                    view.supply_cursor = idx
                    return h
                ptr += 1
            view.supply_ptr[v] = ptr
        return None

    def _pick_candidate(self, user: int, view: _UserUserView) -> Optional[int]:
        # uniform among users with ratings, excluding self / rejected / accepted
        n = self.env.n_users
        rng = self._rng
        taken = view.rejected
        accepted = view.accepted
        for _ in range(8):
            v = rng.randrange(n)
            if (
                v != user
                and self._consumed_any[v]
                and v not in taken
                and v not in accepted
            ):
                return v
        pool = [
            v for v in range(n)
            if v != user and self._consumed_any[v]
            and v not in taken and v not in accepted
        ]
        if not pool:
            return None
        return pool[rng.randrange(len(pool))]

    def _next_probe(self, user: int, view: _UserUserView) -> Optional[tuple[int, int]]:
        env = self.env
        for _ in range(8):
            if view.candidate is None:
                view.candidate = self._pick_candidate(user, view)
                view.probe_ptr = 0
                view.agreements = 0
                if view.candidate is None:
                    return None
            rated = self._rated[view.candidate]
            ptr = view.probe_ptr
            while ptr < len(rated):
                h, fb = rated[ptr]
                if not env.is_consumed(user, h):
                    view.probe_ptr = ptr
                    return h, fb
                ptr += 1
            view.probe_ptr = ptr
            # candidate has nothing new to compare right now; move on
            view.rejected.add(view.candidate)
            view.candidate = None
        return None

    def recommend(self, user: int) -> tuple[int, int]:
        view = self._view(user)
        h = self._supply(user, view)
        if h is not None:
            self._last = ("supply", user, h)
            return h, PHASE_EXPLOIT
        want_probe = (
            len(view.accepted) < self.MAX_NEIGHBORS and self._rng.random() < 0.5
        )
        if want_probe:
            probe = self._next_probe(user, view)
            if probe is not None:
                h, cand_fb = probe
                self._last = ("probe", user, h, view.candidate, cand_fb)
                return h, PHASE_EXPLORE
        self._last = ("random", user)
        return self.env.draw_new_item(), PHASE_FALLBACK

    def observe(self, user: int, handle: int, feedback: int) -> None:
        self._rated[user].append((handle, feedback))
        self._consumed_any[user] = True
        if feedback > 0:
            self._liked[user].append(handle)
        last = self._last
        self._last = None
        if last is None or last[0] != "probe":
            return
        _, pu, ph, cand, cand_fb = last
        if pu != user or ph != handle:
            return
        view = self._view(user)
        if view.candidate != cand:
            return
        view.probe_ptr += 1
        if feedback != cand_fb:
            view.rejected.add(cand)
            view.candidate = None
            view.agreements = 0
        else:
            view.agreements += 1
            if view.agreements >= self.q_min:
                view.accepted.append(cand)
                view.supply_ptr[cand] = 0
                view.candidate = None
                view.agreements = 0


# ---------------------------------------------------------------------------
# Item-item collaborative filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ItemItemConfig:
    """Knobs for the epoch-based item-item recommender."""

    d: float
    nu: float
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    epoch_failure: str = "finish"          # or "reuse"
    blocks_with_replacement: bool = False
    audit: bool = False


@dataclass
class _UserEpochState:
    queue: list[int] = field(default_factory=list)
    queue_block: int = -1
    sampled: set[int] = field(default_factory=set)


def epoch_schedule(tc: TheoryConstants, tau: int) -> tuple[float, float, float]:
    """(eps_tau, M_tau, D_tau) for epoch tau, in closed form."""
    return tc.epoch_schedule(tau)


class ItemItemCF(Recommender):
    """Epoch-based partition recommender.

    Cold start runs the first partition construction as pure exploration.
    Each epoch tau then exploits the partition built during tau-1 (block
    sampling per user, full-block recommendation on a like) while a small
    explore fraction of arrivals feeds the next construction.  A
    construction still unfinished at the epoch boundary is either driven
    to completion at the start of the next epoch ("finish") or kept
    running while the previous partition stays in service ("reuse").
    """

    algo_id = "item_item"

    def __init__(self, config: ItemItemConfig):
        super().__init__()
        self.config = config
        self.tc: Optional[TheoryConstants] = None
        self.partition: Optional[Partition] = None
        self.driver: Optional[ExploreDriver] = None
        self._staged: Optional[Partition] = None
        self._users: dict[int, _UserEpochState] = {}
        self._steps_left = 0
        self._catchup = False
        self._rng = None
        self._last: Optional[tuple] = None
        self.audit_log: list[tuple] = []
        self.epochs_driver_finished: list[bool] = []

    # -- lifecycle -------------------------------------------------------------

    def bind(self, env: Environment) -> "ItemItemCF":
        super().bind(env)
        cfg = self.config
        self.tc = TheoryConstants(cfg.d, cfg.nu, env.n_users, cfg.scale)
        self._rng = env.spawn_random(_STREAM_ALGO)
        self.current_epoch = 0
        self._start_driver(tau=1)
        return self

    def _start_driver(self, tau: int) -> None:
        eps, m_real, _ = self.tc.epoch_schedule(tau)
        m_items = max(1, math.ceil(m_real))
        rng_assign = self.env.spawn_generator(_STREAM_DRIVER_BASE + tau)
        program = make_partition_program(m_items, eps, eps, self.tc, rng_assign)
        self.driver = ExploreDriver(program, self.env)
        self._driver_tau = tau

    def _begin_epoch(self, tau: int, partition: Partition) -> None:
        self.current_epoch = tau
        self.partition = partition
        self._users = {}
        self._steps_left = max(1, math.ceil(self.tc.d_tau(tau) * self.env.n_users))
        self._staged = None
        self._start_driver(tau + 1)

    def _on_boundary(self) -> None:
        tau_next = self.current_epoch + 1
        if self.driver.finished:
            self.epochs_driver_finished.append(True)
            self._begin_epoch(tau_next, self.driver.result)
        elif self._staged is not None:
            self.epochs_driver_finished.append(True)
            self._begin_epoch(tau_next, self._staged)
        elif self.config.epoch_failure == "reuse":
            self.epochs_driver_finished.append(False)
            # keep the partition and cursors; the running driver keeps its slot
            self.current_epoch = tau_next
            self._steps_left = max(1, math.ceil(self.tc.d_tau(tau_next) * self.env.n_users))
        else:
            self.epochs_driver_finished.append(False)
            # drive construction to completion on the next epoch's budget
            self.current_epoch = tau_next
            self._steps_left = max(1, math.ceil(self.tc.d_tau(tau_next) * self.env.n_users))
            self._catchup = True

    # -- the recommendation policy ----------------------------------------------

    def pending_user(self) -> Optional[int]:
        return self.driver.pending_user() if self.driver is not None else None

    def recommend(self, user: int) -> tuple[int, int]:
        if self.driver.pending_user() is not None:
            h = self.driver.serve(user)
            self._last = ("driver", user, h)
            return h, PHASE_EXPLORE

        if self.current_epoch == 0:
            h = self.driver.serve(user)
            if h is not None:
                self._last = ("driver", user, h)
                return h, PHASE_EXPLORE
            if not self.driver.finished:
                # arrival can't feed the pending probe; nothing to exploit yet
                h = self.env.draw_new_item()
                self._last = ("fallback", user, h)
                return h, PHASE_FALLBACK
            self._begin_epoch(1, self.driver.result)
            return self._exploit(user)

        if self._steps_left <= 0:
            self._on_boundary()

        if self._catchup:
            h = self.driver.serve(user)
            if h is not None:
                self._last = ("driver", user, h)
                return h, PHASE_EXPLORE
            if self.driver.finished:
                # construction done: swap mid-epoch, budget already charged
                self._catchup = False
                self.partition = self.driver.result
                self._users = {}
                self._staged = None
                self._start_driver(self.current_epoch + 1)
            # else: this arrival can't feed the probe; exploit instead

        if not self.driver.finished:
            eps = self.tc.eps_tau(self.current_epoch)
            if self._rng.random() < eps / 2.0:
                h = self.driver.serve(user)
                if h is not None:
                    self._last = ("driver", user, h)
                    return h, PHASE_EXPLORE
        elif self._staged is None:
            self._staged = self.driver.result

        return self._exploit(user)

    def _exploit(self, user: int) -> tuple[int, int]:
        env = self.env
        state = self._users.get(user)
        if state is None:
            state = self._users[user] = _UserEpochState()
        queue = state.queue
        while queue:
            h = queue.pop()
            if not env.is_consumed(user, h):
                self._last = ("queue", user, h, state.queue_block)
                return h, PHASE_EXPLOIT
        blocks = self.partition.blocks
        n_blocks = len(blocks)
        rng = self._rng
        if self.config.blocks_with_replacement and n_blocks:
            for _ in range(4 * n_blocks + 8):
                k = rng.randrange(n_blocks)
                eligible = [h for h in blocks[k] if not env.is_consumed(user, h)]
                if eligible:
                    return self._sample_from(user, state, k, eligible)
            h = env.draw_new_item()
            self._last = ("fallback", user, h)
            return h, PHASE_FALLBACK
        return self._sample_without_replacement(user, state)

    def _sample_without_replacement(self, user: int, state: _UserEpochState):
        env = self.env
        blocks = self.partition.blocks
        n_blocks = len(blocks)
        rng = self._rng
        sampled = state.sampled
        remaining = n_blocks - len(sampled)
        while remaining > 0:
            if remaining * 3 > n_blocks:
                while True:
                    k = rng.randrange(n_blocks)
                    if k not in sampled:
                        break
            else:
                pool = [k for k in range(n_blocks) if k not in sampled]
                k = pool[rng.randrange(len(pool))]
            eligible = [h for h in blocks[k] if not env.is_consumed(user, h)]
            if eligible:
                return self._sample_from(user, state, k, eligible)
            sampled.add(k)
            remaining -= 1
        h = env.draw_new_item()
        self._last = ("fallback", user, h)
        return h, PHASE_FALLBACK

    def _sample_from(self, user: int, state: _UserEpochState, k: int, eligible: list[int]):
        h = eligible[self._rng.randrange(len(eligible))]
        state.sampled.add(k)
        self._last = ("sample", user, h, k)
        return h, PHASE_EXPLOIT

    def observe(self, user: int, handle: int, feedback: int) -> None:
        self._steps_left -= 1
        last = self._last
        self._last = None
        if self.config.audit and last is not None:
            self.audit_log.append((*last, feedback))
        if last is None:
            return
        kind = last[0]
        if kind == "driver":
            self.driver.feed(user, handle, feedback)
        elif kind == "sample" and feedback > 0:
            k = last[3]
            state = self._users[user]
            state.queue = [
                h for h in self.partition.blocks[k]
                if h != handle and not self.env.is_consumed(user, h)
            ]
            state.queue_block = k

"""Online recommendation protocol: arrivals, feedback, and explore interleaving.

One run is a single-threaded loop: at each step a uniformly random user
requests a recommendation, the recommender picks an item never shown to
that user, and the hidden preference matrix answers.  Partition
construction work is interleaved into the stream by the ExploreDriver,
which materializes the partition program's feedback requests as real
recommendations to arriving users.

The one deliberate protocol bend (documented in the project notes): a
similarity probe needs a single user's preference on *both* probe items.
Stored answers are replayed from the ledger for free, but when both
ratings are fresh the probing user is held for the immediately following
step to rate the second item.  This keeps the probe statistics exact
(same-user disagreement) and the recommendation accounting identical to
the sequential construction, at the cost of arrival draws being skipped
on those follow-up steps.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .itemspace import ItemMeasure, ItemType
from .similarity import DrawItem, PairBatch, Partition

PHASES = ("explore", "exploit", "fallback")
PHASE_EXPLORE, PHASE_EXPLOIT, PHASE_FALLBACK = 0, 1, 2

# fixed labels for per-run random streams (stable across code paths)
_STREAM_ARRIVALS = 1
_STREAM_ITEMS = 2
_STREAM_ALGO = 3
_STREAM_DRIVER_BASE = 1000


class ProtocolViolation(RuntimeError):
    """A recommender returned an item already consumed by the user."""


class AuditError(RuntimeError):
    """A replay audit could not be carried out."""


def seeded_generator(seed: int, label: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, label]))


def seeded_random(seed: int, label: int) -> random.Random:
    state = np.random.SeedSequence([seed, label]).generate_state(2, np.uint64)
    return random.Random(int(state[0]) << 64 | int(state[1]))


class Environment:
    """Hidden preference matrix grown lazily, plus the no-repeat ledger."""

    def __init__(self, measure: ItemMeasure, seed: int):
        self.measure = measure
        self.n_users = measure.n_users
        self.seed = seed
        self.rng_arrivals = seeded_random(seed, _STREAM_ARRIVALS)
        self.rng_items = seeded_generator(seed, _STREAM_ITEMS)
        self.types: list[ItemType] = []
        self._bytes: list[bytes] = []  # packed preference rows, O(1) lookups
        self._nbytes = (self.n_users + 7) // 8
        self.consumed: list[set[int]] = [set() for _ in range(self.n_users)]
        self.t = 0
        self.bad_count = 0  # online regret numerator (dual accounting check)

    # -- item introduction ---------------------------------------------------

    def introduce(self, item_type: ItemType) -> int:
        self.types.append(item_type)
        self._bytes.append(item_type.bits.to_bytes(self._nbytes, "little"))
        return len(self.types) - 1

    def draw_new_item(self) -> int:
        return self.introduce(self.measure.sample(self.rng_items))

    def n_items(self) -> int:
        return len(self.types)

    # -- feedback and the ledger ----------------------------------------------

    def feedback(self, user: int, handle: int) -> int:
        return 1 if self._bytes[handle][user >> 3] >> (user & 7) & 1 else -1

    def is_consumed(self, user: int, handle: int) -> bool:
        return handle in self.consumed[user]

    def recommend(self, user: int, handle: int) -> int:
        """Record one recommendation; enforces the no-repeat constraint."""
        seen = self.consumed[user]
        if handle in seen:
            raise ProtocolViolation(
                f"item {handle} recommended to user {user} twice"
            )
        seen.add(handle)
        self.t += 1
        fb = 1 if self._bytes[handle][user >> 3] >> (user & 7) & 1 else -1
        if fb < 0:
            self.bad_count += 1
        return fb

    def spawn_generator(self, label: int) -> np.random.Generator:
        return seeded_generator(self.seed, label)

    def spawn_random(self, label: int) -> random.Random:
        return seeded_random(self.seed, label)


@dataclass
class RunTrace:
    """Time-ordered record of every recommendation in a run."""

    n_users: int
    seed: int
    algo_id: str = ""
    t: list[int] = field(default_factory=list)
    user: list[int] = field(default_factory=list)
    item: list[int] = field(default_factory=list)
    feedback: list[int] = field(default_factory=list)
    phase: list[int] = field(default_factory=list)
    epoch: list[int] = field(default_factory=list)

    def append(self, t, user, item, feedback, phase, epoch):
        self.t.append(t)
        self.user.append(user)
        self.item.append(item)
        self.feedback.append(feedback)
        self.phase.append(phase)
        self.epoch.append(epoch)

    def __len__(self):
        return len(self.t)

    def bad_cumulative(self) -> np.ndarray:
        fb = np.asarray(self.feedback, dtype=np.int64)
        return np.cumsum(fb < 0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "user", "item", "feedback", "phase", "epoch"])
            for k in range(len(self.t)):
                w.writerow([
                    self.t[k], self.user[k], self.item[k],
                    self.feedback[k], PHASES[self.phase[k]], self.epoch[k],
                ])

    @classmethod
    def from_csv(cls, path, n_users: int = 0, seed: int = -1) -> "RunTrace":
        trace = cls(n_users=n_users, seed=seed)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                trace.append(
                    int(row["t"]), int(row["user"]), int(row["item"]),
                    int(row["feedback"]), PHASES.index(row["phase"]),
                    int(row["epoch"]),
                )
        return trace

    def equals(self, other: "RunTrace") -> bool:
        return self.first_divergence(other) is None

    def first_divergence(self, other: "RunTrace") -> Optional[int]:
        n = min(len(self), len(other))
        for k in range(n):
            if (
                self.t[k] != other.t[k]
                or self.user[k] != other.user[k]
                or self.item[k] != other.item[k]
                or self.feedback[k] != other.feedback[k]
                or self.phase[k] != other.phase[k]
                or self.epoch[k] != other.epoch[k]
            ):
                return k
        if len(self) != len(other):
            return n
        return None


# ---------------------------------------------------------------------------
# Interleaved partition construction
# ---------------------------------------------------------------------------

class ExploreDriver:
    """Resumable partition construction fed by arriving explore users.

    Drives a partition program (see cfsim.similarity): item draws are
    resolved instantly against the environment, and each similarity probe
    is bound to the arriving user.  Ledger collisions replay the stored
    answer without consuming the arrival; a probe needing both ratings
    fresh recommends the first item now and holds the user (pending_user)
    so the very next step serves the second.

    The sequence of probe verdicts equals what the standalone program
    would compute from the same user stream and the same item draws, which
    the equivalence tests assert.
    """

    def __init__(self, program, env: Environment):
        self._program = program
        self._env = env
        self.finished = False
        self.result: Optional[Partition] = None
        self._batch: Optional[PairBatch] = None
        self._done = 0
        self._disagreements = 0
        # service state: None, ("finish", user, item, other_fb),
        # ("forced", user, second_item, first_fb)
        self._await: Optional[tuple] = None
        self.probe_users: list[int] = []
        self.draw_handles: list[int] = []
        self.recommendations = 0
        self._primed = False
        self._advance(None)

    def _advance(self, send_value) -> None:
        try:
            if not self._primed:
                self._primed = True
                req = next(self._program)
            else:
                req = self._program.send(send_value)
            while True:
                if isinstance(req, DrawItem):
                    h = self._env.draw_new_item()
                    self.draw_handles.append(h)
                    req = self._program.send(h)
                elif isinstance(req, PairBatch):
                    self._batch = req
                    self._done = 0
                    self._disagreements = 0
                    return
                else:
                    raise TypeError(f"unknown request {req!r}")
        except StopIteration as stop:
            self.finished = True
            self.result = stop.value
            self._batch = None

    def _complete_verdict(self, user: int, disagree: bool) -> None:
        self.probe_users.append(user)
        self._disagreements += 1 if disagree else 0
        self._done += 1
        if self._done == self._batch.q:
            self._advance(self._disagreements)

    def pending_user(self) -> Optional[int]:
        if self._await is not None and self._await[0] == "forced":
            return self._await[1]
        return None

    def serve(self, user: int) -> Optional[int]:
        """Item the pending probe needs this user to rate, or None if done.

        Consumes stored answers silently (no recommendation slot) and
        returns at most one item needing fresh feedback; the engine must
        report that item's feedback via feed().
        """
        if self._await is not None:
            kind = self._await[0]
            if kind == "forced":
                pu, second, first_fb = self._await[1], self._await[2], self._await[3]
                if user != pu:
                    raise ProtocolViolation(
                        f"pending probe belongs to user {pu}, got {user}"
                    )
                self._await = ("finish", pu, second, first_fb)
                return second
            raise ProtocolViolation("serve() called with a probe mid-flight")
        env = self._env
        while not self.finished:
            batch = self._batch
            i, j = batch.i, batch.j
            ci = env.is_consumed(user, i)
            cj = env.is_consumed(user, j)
            if ci and cj:
                disagree = env.feedback(user, i) != env.feedback(user, j)
                self._complete_verdict(user, disagree)
                if self._batch is batch:
                    # remaining verdicts of this test need other users'
                    # samples; this arrival has nothing fresh to rate
                    return None
                continue
            if ci:
                self._await = ("finish", user, j, env.feedback(user, i))
                return j
            if cj:
                self._await = ("finish", user, i, env.feedback(user, j))
                return i
            self._await = ("first", user, i, j)
            return i
        return None

    def feed(self, user: int, item: int, fb: int) -> None:
        """Report the feedback the recommendation from serve() produced."""
        if self._await is None:
            raise ProtocolViolation("feed() without a pending probe")
        kind = self._await[0]
        self.recommendations += 1
        if kind == "finish":
            _, pu, expected_item, other_fb = self._await
            if user != pu or item != expected_item:
                raise ProtocolViolation("feed() does not match the served probe")
            self._await = None
            self._complete_verdict(user, fb != other_fb)
        elif kind == "first":
            _, pu, first_item, second_item = self._await
            if user != pu or item != first_item:
                raise ProtocolViolation("feed() does not match the served probe")
            self._await = ("forced", pu, second_item, fb)
        else:
            raise ProtocolViolation(f"feed() in state {kind!r}")


def serve_explore(driver: ExploreDriver, user: int, env: Environment) -> Optional[int]:
    """Next item the interleaved construction needs rated, or None if done."""
    return driver.serve(user)


# ---------------------------------------------------------------------------
# The run loop
# ---------------------------------------------------------------------------

def step(env: Environment, algo, trace: RunTrace) -> None:
    """One protocol step: arrival, recommendation, feedback, bookkeeping."""
    forced = algo.pending_user()
    user = forced if forced is not None else env.rng_arrivals.randrange(env.n_users)
    handle, phase = algo.recommend(user)
    fb = env.recommend(user, handle)
    algo.observe(user, handle, fb)
    trace.append(env.t, user, handle, fb, phase, algo.current_epoch)


def run(env: Environment, algo, horizon_t: int) -> RunTrace:
    """Execute horizon_t * N steps; deterministic given seed and config."""
    if horizon_t < 0:
        raise ValueError("horizon must be nonnegative")
    trace = RunTrace(n_users=env.n_users, seed=env.seed,
                     algo_id=getattr(algo, "algo_id", ""))
    total = horizon_t * env.n_users
    rng_arrivals = env.rng_arrivals
    n = env.n_users
    for _ in range(total):
        forced = algo.pending_user()
        user = forced if forced is not None else rng_arrivals.randrange(n)
        handle, phase = algo.recommend(user)
        fb = env.recommend(user, handle)
        algo.observe(user, handle, fb)
        trace.append(env.t, user, handle, fb, phase, algo.current_epoch)
    if total and env.bad_count != int(trace.bad_cumulative()[-1]):
        raise AuditError("online regret counter diverged from the trace")
    return trace


@dataclass
class ReplayReport:
    ok: bool
    first_divergence: Optional[int]
    detail: str


def replay(
    trace: RunTrace,
    build: Callable[[], tuple[Environment, object]],
    horizon_t: int,
    expected_version: Optional[str] = None,
    actual_version: Optional[str] = None,
) -> ReplayReport:
    """Re-execute a run from its configuration and compare every record."""
    if expected_version is not None and actual_version is not None:
        if expected_version != actual_version:
            raise AuditError(
                f"trace written by version {expected_version}, "
                f"replaying under {actual_version}"
            )
    env, algo = build()
    fresh = run(env, algo, horizon_t)
    k = fresh.first_divergence(trace)
    if k is None:
        return ReplayReport(True, None, "replay identical")
    return ReplayReport(
        False, k,
        f"first divergence at record {k}: "
        f"replayed (t={fresh.t[k] if k < len(fresh) else 'EOF'}) vs "
        f"stored (t={trace.t[k] if k < len(trace) else 'EOF'})",
    )

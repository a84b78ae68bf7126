# src/worker/coordinated.py
"""
Round preparation for coordinated reads.

With n workers and m consumers, worker `my_index` owns every round r with
r mod n == my_index. For each owned round it sets aside m batches from one
bucket, so all consumers of that step get similarly sized batches. Nothing
here talks to other workers.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Set

from src.core.errors import RoundExpired, WrongWorkerForRound
from src.pipeline.elements import END_OF_DATA, PENDING, Batch

logger = logging.getLogger(__name__)

# Rounds are kept for this many of the worker's own turns behind the newest
# request. Older rounds are released even if some consumer never fetched them.
RETENTION_HORIZON = 2


@dataclass
class PreparedRound:
    round_index: int
    bucket_id: int
    batches: List[Batch]
    fetched: Set[int] = field(default_factory=set)


class RoundRobinState:
    """
    Per-bucket batch queues and prepared rounds of one coordinated task.

    Not thread-safe; the owning task serializes access.
    """

    def __init__(self, num_workers: int, num_consumers: int, my_index: int):
        if not 0 <= my_index < num_workers:
            raise ValueError(f"worker index {my_index} outside [0, {num_workers})")
        if num_consumers < 1:
            raise ValueError("num_consumers must be at least 1")
        self.n = num_workers
        self.m = num_consumers
        self.my_index = my_index
        self.buckets: Dict[int, Deque[Batch]] = {}
        self.rounds: Dict[int, PreparedRound] = {}
        self.next_round = my_index
        # Owned rounds prepared since each bucket was last chosen.
        self.age: Dict[int, int] = {}
        self.exhausted = False
        self.dropped = 0
        self.expired_rounds = 0
        self._released_below = 0

    # --- production side ---
    @property
    def queued(self) -> int:
        return sum(len(q) for q in self.buckets.values())

    @property
    def prepared_ahead(self) -> int:
        return len(self.rounds)

    def add(self, batch: Batch) -> None:
        bucket = batch.bucket_id if batch.bucket_id is not None else 0
        self.buckets.setdefault(bucket, deque()).append(batch)
        self.age.setdefault(bucket, 0)

    def choose_bucket(self) -> Optional[int]:
        """
        Most-queued bucket holding at least m batches; a bucket passed over
        for n owned rounds takes priority. Ties go to the lower bucket id.
        """
        ready = [b for b, q in self.buckets.items() if len(q) >= self.m]
        if not ready:
            return None
        starved = [b for b in ready if self.age.get(b, 0) >= self.n]
        if starved:
            return max(starved, key=lambda b: (self.age[b], -b))
        return max(ready, key=lambda b: (len(self.buckets[b]), -b))

    def _take_short_round(self) -> Optional[List[Batch]]:
        """End-of-data round: the highest non-empty bucket, filled from the nearest buckets below it."""
        if self.queued < self.m:
            return None
        nonempty = sorted(b for b, q in self.buckets.items() if q)
        top = nonempty[-1]
        order = [top] + [b for b in reversed(nonempty[:-1])]
        taken: List[Batch] = []
        for bucket in order:
            q = self.buckets[bucket]
            while q and len(taken) < self.m:
                taken.append(q.popleft())
        return taken

    def prepare(self) -> Optional[int]:
        """Prepares the next owned round if enough batches are queued; returns its index."""
        bucket = self.choose_bucket()
        if bucket is not None:
            q = self.buckets[bucket]
            batches = [q.popleft() for _ in range(self.m)]
        elif self.exhausted:
            batches = self._take_short_round()
            if batches is None:
                return None
            bucket = batches[0].bucket_id if batches[0].bucket_id is not None else 0
        else:
            return None
        r = self.next_round
        self.rounds[r] = PreparedRound(
            round_index=r,
            bucket_id=bucket,
            batches=[b.for_round(r, bucket) for b in batches],
        )
        for b in self.age:
            self.age[b] = 0 if b == bucket else self.age[b] + 1
        self.next_round += self.n
        return r

    def finish(self) -> None:
        """Marks the source exhausted and prepares every remaining full round."""
        self.exhausted = True
        while self.prepare() is not None:
            pass
        leftover = self.queued
        if leftover:
            self.dropped += leftover
            logger.info(f"Dropping {leftover} batch(es) that cannot fill a round of {self.m}.")
            self.buckets.clear()

    # --- serving side ---
    def owns(self, round_index: int) -> bool:
        return round_index % self.n == self.my_index

    def _expire_through(self, last: int) -> None:
        """Releases every retained round up to `last`; batches nobody fetched count as dropped."""
        for r in sorted(r for r in self.rounds if r <= last):
            prepared = self.rounds.pop(r)
            unfetched = self.m - len(prepared.fetched)
            self.dropped += unfetched
            self.expired_rounds += 1
            self._released_below = max(self._released_below, r + 1)
            logger.info(f"Round {r} passed the retention horizon with {unfetched} batch(es) unfetched.")

    def get(self, round_index: int, consumer_index: int):
        """
        Returns the consumer's batch of a round, PENDING, or END_OF_DATA.

        Raises:
            WrongWorkerForRound: another worker owns the round.
            RoundExpired: the round was already released.
        """
        if not 0 <= consumer_index < self.m:
            raise ValueError(f"consumer index {consumer_index} outside [0, {self.m})")
        if not self.owns(round_index):
            raise WrongWorkerForRound(
                f"round {round_index} belongs to worker index {round_index % self.n}, not {self.my_index}"
            )
        if round_index < self._released_below and round_index not in self.rounds:
            raise RoundExpired(f"round {round_index} has been released")
        while round_index >= self.next_round:
            if self.prepare() is None:
                break
        self._expire_through(round_index - RETENTION_HORIZON * self.n)
        if round_index >= self.next_round:
            return END_OF_DATA if self.exhausted else PENDING
        prepared = self.rounds.get(round_index)
        if prepared is None:
            raise RoundExpired(f"round {round_index} has been released")
        prepared.fetched.add(consumer_index)
        batch = prepared.batches[consumer_index]
        if len(prepared.fetched) == self.m:
            del self.rounds[round_index]
            self._released_below = max(self._released_below, round_index + 1)
        return batch

"""Dispatch policy: score nodes by available resources, serve jobs FCFS.

A node's score is the equal-weight average of its idle CPU fraction and
its available-memory fraction, both in integer milli-units, so identical
inputs always produce identical decisions.  Each un-heartbeated dispatch
subtracts a fixed penalty from a node's score, which spreads bursts
across the cluster instead of stampeding the current best node.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import List, Optional

from .model import Config, JobRecord
from .registry import NodeRecord, Registry


def score(rec: NodeRecord) -> int:
    """Availability in [0, 1000]: mean of CPU and memory fractions."""
    amr_frac = (1000 * rec.last.amr_bytes) // rec.static.total_mem_bytes
    return (rec.last.acr_milli + amr_frac) // 2


def effective_score(rec: NodeRecord, cfg: Config) -> int:
    """Score damped by dispatches not yet reflected in a heartbeat."""
    return max(0, score(rec) - cfg.dispatch_penalty_milli * rec.in_flight)


def select_node(candidates: List[NodeRecord], cfg: Config) -> Optional[str]:
    """The most available candidate, or None if there are none.

    Ties break on fewer reported running jobs, then node id ascending,
    making selection a total order.
    """
    best: Optional[NodeRecord] = None
    best_key = None
    for rec in candidates:
        key = (-effective_score(rec, cfg), rec.last.running_jobs, rec.static.id)
        if best_key is None or key < best_key:
            best, best_key = rec, key
    return best.static.id if best is not None else None


class PendingQueue:
    """Queued jobs totally ordered by (submit_ts, seq) ascending."""

    def __init__(self) -> None:
        self._items: List[JobRecord] = []

    def __len__(self) -> int:
        return len(self._items)

    def push(self, job: JobRecord) -> None:
        bisect.insort(self._items, job, key=lambda j: (j.submit_ts, j.seq))

    def head(self) -> JobRecord:
        return self._items[0]

    def pop_head(self) -> JobRecord:
        return self._items.pop(0)

    def jobs(self) -> List[JobRecord]:
        return list(self._items)


@dataclass(frozen=True)
class DispatchDecision:
    job_id: int
    node: str
    decided_at: int


def drain(
    queue: PendingQueue, registry: Registry, now: int, cfg: Config
) -> List[DispatchDecision]:
    """Dispatch queued jobs head-first until the queue empties or no node
    is eligible.  Each decision bumps the chosen node's in-flight count,
    lowering its effective score for the next iteration.
    """
    decisions: List[DispatchDecision] = []
    while len(queue):
        node = select_node(registry.eligible(now, cfg), cfg)
        if node is None:
            break
        job = queue.pop_head()
        registry.note_dispatch(node)
        decisions.append(DispatchDecision(job_id=job.job_id, node=node, decided_at=now))
    return decisions

"""Shared domain types for the cluster middleware.

Plain value types used everywhere else: node identity and static facts,
resource snapshots, job records with their lifecycle state machine,
configuration defaults, and the clock abstraction.  Everything here is
safe to copy between threads; the id counter needs external
serialization by its owner.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional

NAME_RE = re.compile(r"[A-Za-z0-9._-]+\Z")

ACR_MAX = 1000


class ValidationError(ValueError):
    """A value violates a domain invariant; ``code`` names the field."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def is_valid_name(s: str) -> bool:
    """Node ids and user names: nonempty, no spaces, [A-Za-z0-9._-]+.

    The single dash is reserved: it marks an absent field on the wire.
    """
    return s != "-" and bool(NAME_RE.fullmatch(s))


def is_valid_ip(s: str) -> bool:
    parts = s.split(".")
    if len(parts) != 4:
        return False
    for p in parts:
        if not p.isdigit() or len(p) > 3 or int(p) > 255:
            return False
    return True


@dataclass(frozen=True)
class NodeStatic:
    """A worker's static identity: id, address, and capacity."""

    id: str
    ip: str
    cpu_cores: int
    total_mem_bytes: int


def validate_node_static(s: NodeStatic) -> None:
    """Raise ValidationError naming the first violated field."""
    if not is_valid_name(s.id):
        raise ValidationError("BadId", f"bad node id: {s.id!r}")
    if not is_valid_ip(s.ip):
        raise ValidationError("BadIp", f"bad ip: {s.ip!r}")
    if s.cpu_cores < 1:
        raise ValidationError("BadCores", f"cpu_cores must be >= 1, got {s.cpu_cores}")
    if s.total_mem_bytes < 1:
        raise ValidationError("BadMem", f"total_mem_bytes must be >= 1, got {s.total_mem_bytes}")


@dataclass(frozen=True)
class ResourceSnapshot:
    """One reported measurement: idle CPU in milli-units, free memory in bytes."""

    acr_milli: int
    amr_bytes: int
    running_jobs: int
    taken_at: int  # epoch ms


def validate_snapshot(snap: ResourceSnapshot) -> None:
    if not 0 <= snap.acr_milli <= ACR_MAX:
        raise ValidationError("BadAcr", f"acr_milli out of range: {snap.acr_milli}")
    if snap.amr_bytes < 0:
        raise ValidationError("BadAmr", f"amr_bytes negative: {snap.amr_bytes}")
    if snap.running_jobs < 0:
        raise ValidationError("BadRunning", f"running_jobs negative: {snap.running_jobs}")


@dataclass(frozen=True)
class JobSpec:
    user: str
    workdir: str
    command: str


def validate_job_spec(spec: JobSpec) -> None:
    if not is_valid_name(spec.user):
        raise ValidationError("BadUser", f"bad user: {spec.user!r}")
    if not spec.workdir.startswith("/") or " " in spec.workdir:
        raise ValidationError("BadWorkdir", f"workdir must be absolute: {spec.workdir!r}")
    if not spec.command:
        raise ValidationError("BadCommand", "command is empty")


class JobState(str, Enum):
    QUEUED = "QUEUED"
    DISPATCHED = "DISPATCHED"
    DONE = "DONE"
    FAILED = "FAILED"
    LOST = "LOST"


# The only legal lifecycle edges.  QUEUED->FAILED covers rejection at
# dispatch time (unreachable node); everything else is terminal.
LEGAL_TRANSITIONS = frozenset(
    {
        (JobState.QUEUED, JobState.DISPATCHED),
        (JobState.DISPATCHED, JobState.DONE),
        (JobState.DISPATCHED, JobState.FAILED),
        (JobState.DISPATCHED, JobState.LOST),
        (JobState.QUEUED, JobState.FAILED),
    }
)


class IllegalTransition(Exception):
    def __init__(self, from_state: JobState, to_state: JobState):
        super().__init__(f"illegal transition {from_state.value} -> {to_state.value}")
        self.from_state = from_state
        self.to_state = to_state


@dataclass
class JobRecord:
    """A submitted job and where it is in its lifecycle."""

    job_id: int
    spec: JobSpec
    submit_ts: int
    seq: int
    state: JobState = JobState.QUEUED
    assigned: Optional[str] = None
    exit_code: Optional[int] = None


def job_transition(
    record: JobRecord,
    to: JobState,
    *,
    assigned: Optional[str] = None,
    exit_code: Optional[int] = None,
) -> JobRecord:
    """Apply a lifecycle edge in place; raise IllegalTransition otherwise."""
    if (record.state, to) not in LEGAL_TRANSITIONS:
        raise IllegalTransition(record.state, to)
    record.state = to
    if assigned is not None:
        record.assigned = assigned
    if exit_code is not None:
        record.exit_code = exit_code
    return record


@dataclass(frozen=True)
class Config:
    heartbeat_interval_ms: int = 2000
    stale_after_ms: int = 6000
    dispatch_penalty_milli: int = 50
    listen_port: int = 7070
    workspace_root: str = "/Jugrid"

    def __post_init__(self) -> None:
        if self.stale_after_ms < self.heartbeat_interval_ms:
            raise ValidationError(
                "BadStale", "stale_after_ms must be >= heartbeat_interval_ms"
            )
        if self.dispatch_penalty_milli < 0:
            raise ValidationError("BadPenalty", "dispatch_penalty_milli must be >= 0")


class Clock:
    """Source of epoch milliseconds; monotonic non-decreasing per process."""

    def now(self) -> int:
        raise NotImplementedError


class SystemClock(Clock):
    def __init__(self) -> None:
        self._last = 0

    def now(self) -> int:
        t = int(time.time() * 1000)
        if t < self._last:
            t = self._last
        self._last = t
        return t


class ManualClock(Clock):
    """Virtual clock for the simulator and tests."""

    def __init__(self, start: int = 0) -> None:
        self._t = start

    def now(self) -> int:
        return self._t

    def advance_to(self, t: int) -> None:
        if t < self._t:
            raise ValueError(f"clock moved backwards: {self._t} -> {t}")
        self._t = t


class JobIdCounter:
    """Monotonic job ids, starting at 1 (or past a replayed maximum)."""

    def __init__(self, start_after: int = 0) -> None:
        self._last = start_after

    def next(self) -> int:
        self._last += 1
        return self._last

    @property
    def last(self) -> int:
        return self._last

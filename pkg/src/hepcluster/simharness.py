"""Deterministic in-process cluster simulator.

Drives the real MasterCore (registry, scheduler, tick) with a virtual
clock: scripted heartbeat traces stand in for agents, job arrivals stand
in for clients, and completions fire after a per-job service time.  No
randomness anywhere; equal-time events process completions first, then
heartbeats, then arrivals, each in insertion order.
"""

from __future__ import annotations

import argparse
import heapq
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .master import MasterCore
from .model import Config, JobRecord, JobSpec, NodeStatic, validate_job_spec, validate_node_static
from .protocol import Dispatch, Heartbeat, JobDone, JobId, Register, Submit
from .registry import NodeRecord

_PRIO_COMPLETION = 0
_PRIO_HEARTBEAT = 1
_PRIO_ARRIVAL = 2


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class TracePoint:
    at: int
    acr_milli: int
    amr_bytes: int


@dataclass(frozen=True)
class Arrival:
    at: int
    spec: JobSpec
    service_time_ms: int


@dataclass
class Scenario:
    nodes: List[Tuple[NodeStatic, List[TracePoint]]]
    arrivals: List[Arrival]
    horizon_ms: int
    cfg: Config = field(default_factory=Config)


@dataclass
class DispatchLog:
    entries: List[Tuple[int, int, str]]  # (virtual ms, job_id, node_id)
    jobs: Dict[int, JobRecord]


def validate_scenario(s: Scenario) -> None:
    if s.horizon_ms <= 0:
        raise InvalidScenario("horizon must be positive")
    seen = set()
    for static, trace in s.nodes:
        try:
            validate_node_static(static)
        except ValueError as exc:
            raise InvalidScenario(str(exc)) from None
        if static.id in seen:
            raise InvalidScenario(f"duplicate node {static.id}")
        seen.add(static.id)
        last = -1
        for tp in trace:
            if tp.at < last:
                raise InvalidScenario(f"trace for {static.id} not sorted")
            if tp.at >= s.horizon_ms:
                raise InvalidScenario(f"trace time {tp.at} beyond horizon")
            if not 0 <= tp.acr_milli <= 1000 or tp.amr_bytes < 0:
                raise InvalidScenario(f"bad trace point for {static.id}")
            last = tp.at
    last = -1
    for arr in s.arrivals:
        if arr.at < last:
            raise InvalidScenario("arrivals not sorted")
        if arr.at >= s.horizon_ms:
            raise InvalidScenario(f"arrival time {arr.at} beyond horizon")
        if arr.service_time_ms < 0:
            raise InvalidScenario("negative service time")
        try:
            validate_job_spec(arr.spec)
        except ValueError as exc:
            raise InvalidScenario(str(exc)) from None
        last = arr.at


def run(s: Scenario) -> DispatchLog:
    """Execute the scenario on a virtual clock and return the dispatch log."""
    validate_scenario(s)
    core = MasterCore(s.cfg)
    entries: List[Tuple[int, int, str]] = []
    in_service: Dict[str, int] = {}
    service_ms: Dict[int, int] = {}
    cur_t = 0
    counter = 0
    heap: List[tuple] = []

    def push(at: int, prio: int, payload: tuple) -> None:
        nonlocal counter
        heapq.heappush(heap, (at, prio, counter, payload))
        counter += 1

    def make_send(node_id: str):
        def send(msg) -> None:
            assert isinstance(msg, Dispatch)
            entries.append((cur_t, msg.job_id, node_id))
            in_service[node_id] += 1
            push(cur_t + service_ms[msg.job_id], _PRIO_COMPLETION,
                 ("done", node_id, msg.job_id))
        return send

    # All nodes join at t=0, before any scripted event.
    for static, trace in sorted(s.nodes, key=lambda n: n[0].id):
        core.on_message(Register(static), 0)
        core.attach_agent(static.id, make_send(static.id))
        in_service[static.id] = 0
        for tp in trace:
            push(tp.at, _PRIO_HEARTBEAT, ("hb", static.id, tp))
    for arr in s.arrivals:
        push(arr.at, _PRIO_ARRIVAL, ("job", arr))

    while heap:
        at, _prio, _seq, payload = heapq.heappop(heap)
        cur_t = at
        kind = payload[0]
        if kind == "done":
            _, node_id, job_id = payload
            in_service[node_id] -= 1
            core.on_message(JobDone(node_id=node_id, job_id=job_id, exit_code=0), at)
        elif kind == "hb":
            _, node_id, tp = payload
            core.on_message(
                Heartbeat(
                    node_id=node_id,
                    acr_milli=tp.acr_milli,
                    amr_bytes=tp.amr_bytes,
                    running_jobs=in_service[node_id],
                ),
                at,
            )
            core.tick(at)
        else:
            _, arr = payload
            replies = core.on_message(
                Submit(user=arr.spec.user, workdir=arr.spec.workdir,
                       command=arr.spec.command),
                at,
            )
            assert isinstance(replies[0], JobId), replies
            service_ms[replies[0].job_id] = arr.service_time_ms
            core.tick(at)

    return DispatchLog(entries=entries, jobs=dict(core.jobs))


def oracle_select(candidates: List[NodeRecord], cfg: Config) -> Optional[str]:
    """Naive reference policy: exact-arithmetic scoring, full sort,
    first element.  Test-only counterpart of scheduler.select_node.
    """
    if not candidates:
        return None

    def eff(rec: NodeRecord) -> int:
        amr = min(rec.last.amr_bytes, rec.static.total_mem_bytes)
        avail = (Fraction(rec.last.acr_milli)
                 + Fraction(1000 * amr, rec.static.total_mem_bytes)) / 2
        penalized = math.floor(avail) - cfg.dispatch_penalty_milli * rec.in_flight
        return penalized if penalized > 0 else 0

    ordered = sorted(
        candidates, key=lambda r: (-eff(r), r.last.running_jobs, r.static.id)
    )
    return ordered[0].static.id


def balance_report(log: DispatchLog) -> Tuple[Dict[str, int], int]:
    """Dispatch counts per node and the max-min spread."""
    counts = Counter(node for _, _, node in log.entries)
    if not counts:
        return {}, 0
    return dict(counts), max(counts.values()) - min(counts.values())


# --- scenario files ------------------------------------------------------


def parse_scenario(text: str, cfg: Optional[Config] = None) -> Scenario:
    """Parse the line-oriented scenario format:

        NODE <id> <ip> <cores> <mem_bytes>
        TRACE <id> <at_ms> <acr_milli> <amr_bytes>
        JOB <at_ms> <user> <workdir> <service_ms> <command...>
        HORIZON <ms>

    Blank lines and lines starting with '#' are ignored.
    """
    nodes: Dict[str, Tuple[NodeStatic, List[TracePoint]]] = {}
    arrivals: List[Arrival] = []
    horizon: Optional[int] = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(" ")
        try:
            if parts[0] == "NODE" and len(parts) == 5:
                static = NodeStatic(parts[1], parts[2], int(parts[3]), int(parts[4]))
                nodes[static.id] = (static, [])
            elif parts[0] == "TRACE" and len(parts) == 5:
                if parts[1] not in nodes:
                    raise InvalidScenario(f"TRACE for unknown node {parts[1]}")
                nodes[parts[1]][1].append(
                    TracePoint(int(parts[2]), int(parts[3]), int(parts[4]))
                )
            elif parts[0] == "JOB":
                fields = line.split(" ", 5)
                if len(fields) != 6:
                    raise InvalidScenario("JOB needs at/user/workdir/service/command")
                arrivals.append(
                    Arrival(
                        at=int(fields[1]),
                        spec=JobSpec(user=fields[2], workdir=fields[3],
                                     command=fields[5]),
                        service_time_ms=int(fields[4]),
                    )
                )
            elif parts[0] == "HORIZON" and len(parts) == 2:
                horizon = int(parts[1])
            else:
                raise InvalidScenario(f"unrecognized record {parts[0]!r}")
        except (ValueError, InvalidScenario) as exc:
            raise InvalidScenario(f"line {line_no}: {exc}") from None
    if horizon is None:
        raise InvalidScenario("missing HORIZON record")
    scenario = Scenario(
        nodes=list(nodes.values()),
        arrivals=sorted(arrivals, key=lambda a: a.at),
        horizon_ms=horizon,
        cfg=cfg or Config(),
    )
    validate_scenario(scenario)
    return scenario


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="hepsim", description="cluster policy simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("scenario")
    args = parser.parse_args(argv)

    try:
        with open(args.scenario, encoding="utf-8") as fh:
            scenario = parse_scenario(fh.read())
    except (OSError, InvalidScenario) as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 2
    log = run(scenario)
    for t, job_id, node in log.entries:
        print(f"{t} {job_id} {node}")
    counts, spread = balance_report(log)
    for node in sorted(counts):
        print(f"# {node} {counts[node]}")
    print(f"# spread {spread}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

"""Master daemon: owns the registry, queue, job table, and ledger.

All state lives in MasterCore, which is transport-free so the simulator
can drive the exact same logic with a virtual clock.  The TCP server
wraps it with one reader thread per connection; a single lock serializes
every mutation, and the ledger append for an event always completes
before the outbound messages it implies are sent.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, TextIO, Tuple

from . import protocol
from .model import (
    Config,
    JobIdCounter,
    JobRecord,
    JobSpec,
    JobState,
    SystemClock,
    ValidationError,
    is_valid_name,
    job_transition,
    validate_node_static,
    validate_snapshot,
    validate_job_spec,
)
from .model import ResourceSnapshot
from .protocol import (
    Dispatch,
    Err,
    Heartbeat,
    JobDone,
    JobId,
    Jobs,
    Message,
    Nodes,
    Ok,
    Register,
    State,
    Status,
    Submit,
)
from .registry import Registry, UnknownNode
from .scheduler import DispatchDecision, PendingQueue, drain

log = logging.getLogger("hepcluster.master")

SendFn = Callable[[Message], None]


# --- ledger --------------------------------------------------------------

LEDGER_KINDS = ("SUBMIT", "ASSIGN", "DONE", "FAIL", "LOST")


@dataclass(frozen=True)
class LedgerEvent:
    ts: int
    kind: str
    job_id: int
    user: Optional[str] = None
    workdir: Optional[str] = None
    command: Optional[str] = None
    node_id: Optional[str] = None
    exit_code: Optional[int] = None
    reason: Optional[str] = None


class CorruptLedger(Exception):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def format_event(ev: LedgerEvent) -> str:
    if ev.kind == "SUBMIT":
        return f"{ev.ts} SUBMIT {ev.job_id} {ev.user} {ev.workdir} {ev.command}\n"
    if ev.kind == "ASSIGN":
        return f"{ev.ts} ASSIGN {ev.job_id} {ev.node_id}\n"
    if ev.kind == "DONE":
        return f"{ev.ts} DONE {ev.job_id} {ev.exit_code}\n"
    if ev.kind == "FAIL":
        return f"{ev.ts} FAIL {ev.job_id} {ev.reason}\n"
    if ev.kind == "LOST":
        return f"{ev.ts} LOST {ev.job_id} {ev.node_id}\n"
    raise ValueError(f"unknown ledger kind: {ev.kind}")


def parse_event(line: str) -> LedgerEvent:
    """Parse one ledger line (no terminator); raises ValueError on junk."""
    head = line.split(" ", 3)
    if len(head) < 3:
        raise ValueError("too few fields")
    ts = int(head[0])
    kind = head[1]
    job_id = int(head[2])
    if ts < 0 or job_id < 1:
        raise ValueError("bad ts or job id")
    if kind == "SUBMIT":
        if len(head) != 4:
            raise ValueError("SUBMIT needs user/workdir/command")
        rest = head[3].split(" ", 2)
        if len(rest) != 3 or not rest[2]:
            raise ValueError("SUBMIT needs user/workdir/command")
        user, workdir, command = rest
        spec = JobSpec(user=user, workdir=workdir, command=command)
        validate_job_spec(spec)
        return LedgerEvent(ts, "SUBMIT", job_id, user=user, workdir=workdir, command=command)
    if kind in ("ASSIGN", "LOST"):
        if len(head) != 4 or not is_valid_name(head[3]):
            raise ValueError(f"{kind} needs a node id")
        return LedgerEvent(ts, kind, job_id, node_id=head[3])
    if kind == "DONE":
        if len(head) != 4:
            raise ValueError("DONE needs an exit code")
        return LedgerEvent(ts, "DONE", job_id, exit_code=int(head[3]))
    if kind == "FAIL":
        if len(head) != 4 or not is_valid_name(head[3]):
            raise ValueError("FAIL needs a reason token")
        return LedgerEvent(ts, "FAIL", job_id, reason=head[3])
    raise ValueError(f"unknown event kind: {kind}")


def read_ledger(path: str) -> List[LedgerEvent]:
    """Read events from a ledger file.

    A final line without its terminator is a torn write and is ignored;
    any other malformed line raises CorruptLedger.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        return []
    lines = raw.split(b"\n")
    # split leaves b"" after a terminated final line; anything else there
    # is a torn final line, dropped.
    lines = lines[:-1]
    events: List[LedgerEvent] = []
    for i, line_bytes in enumerate(lines, start=1):
        try:
            events.append(parse_event(line_bytes.decode("utf-8")))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CorruptLedger(i, str(exc)) from None
    return events


def replay(events: List[LedgerEvent]) -> Dict[int, JobRecord]:
    """Rebuild the job table from a ledger; jobs still DISPATCHED at the
    end of the log are marked LOST (their agents died with the master).
    """
    jobs: Dict[int, JobRecord] = {}
    seq = 0
    for i, ev in enumerate(events, start=1):
        try:
            if ev.kind == "SUBMIT":
                if ev.job_id in jobs:
                    raise ValueError(f"duplicate SUBMIT for job {ev.job_id}")
                jobs[ev.job_id] = JobRecord(
                    job_id=ev.job_id,
                    spec=JobSpec(ev.user, ev.workdir, ev.command),
                    submit_ts=ev.ts,
                    seq=seq,
                )
                seq += 1
                continue
            rec = jobs.get(ev.job_id)
            if rec is None:
                raise ValueError(f"event for unknown job {ev.job_id}")
            if ev.kind == "ASSIGN":
                job_transition(rec, JobState.DISPATCHED, assigned=ev.node_id)
            elif ev.kind == "DONE":
                to = JobState.DONE if ev.exit_code == 0 else JobState.FAILED
                job_transition(rec, to, exit_code=ev.exit_code)
            elif ev.kind == "FAIL":
                job_transition(rec, JobState.FAILED)
            elif ev.kind == "LOST":
                job_transition(rec, JobState.LOST)
        except Exception as exc:
            raise CorruptLedger(i, str(exc)) from None
    for rec in jobs.values():
        if rec.state is JobState.DISPATCHED:
            rec.state = JobState.LOST
    return jobs


# --- core ----------------------------------------------------------------


class MasterCore:
    """All master state and message handling, independent of transport.

    Callers deliver decoded messages via on_message() and are expected to
    call tick() after every SUBMIT and HEARTBEAT plus periodically; the
    TCP server and the simulator both follow that contract.
    """

    def __init__(self, cfg: Config, ledger_file: Optional[TextIO] = None) -> None:
        self.cfg = cfg
        self.registry = Registry()
        self.queue = PendingQueue()
        self.jobs: Dict[int, JobRecord] = {}
        self.counter = JobIdCounter()
        self.agents: Dict[str, SendFn] = {}
        self._ledger = ledger_file
        self._seq = 0

    @classmethod
    def recover(cls, cfg: Config, ledger_path: str) -> "MasterCore":
        """Rebuild state from the ledger, then reopen it for append.

        The registry starts empty: agents must re-register.
        """
        events = read_ledger(ledger_path)
        core = cls(cfg, ledger_file=open(ledger_path, "a", encoding="utf-8"))
        core.jobs = replay(events)
        max_id = max(core.jobs, default=0)
        core.counter = JobIdCounter(start_after=max_id)
        core._seq = len([ev for ev in events if ev.kind == "SUBMIT"])
        for rec in sorted(core.jobs.values(), key=lambda r: (r.submit_ts, r.seq)):
            if rec.state is JobState.QUEUED:
                core.queue.push(rec)
        return core

    def close(self) -> None:
        if self._ledger is not None:
            self._ledger.close()
            self._ledger = None

    def _append(self, ev: LedgerEvent) -> None:
        if self._ledger is not None:
            self._ledger.write(format_event(ev))
            self._ledger.flush()

    def attach_agent(self, node_id: str, send: SendFn) -> None:
        self.agents[node_id] = send

    def on_message(self, m: Message, now: int) -> List[Message]:
        """Handle one inbound message; returns the replies for its sender."""
        try:
            if isinstance(m, Register):
                validate_node_static(m.node)
                self.registry.register(m.node, now)
                return [Ok()]
            if isinstance(m, Heartbeat):
                snap = ResourceSnapshot(
                    acr_milli=m.acr_milli,
                    amr_bytes=m.amr_bytes,
                    running_jobs=m.running_jobs,
                    taken_at=now,
                )
                validate_snapshot(snap)
                try:
                    self.registry.heartbeat(m.node_id, snap, now)
                except UnknownNode:
                    return [Err("unknown-node", f"{m.node_id} is not registered")]
                return [Ok()]
            if isinstance(m, Submit):
                spec = JobSpec(user=m.user, workdir=m.workdir, command=m.command)
                validate_job_spec(spec)
                job_id = self.counter.next()
                rec = JobRecord(job_id=job_id, spec=spec, submit_ts=now, seq=self._seq)
                self._seq += 1
                self._append(
                    LedgerEvent(
                        now, "SUBMIT", job_id,
                        user=spec.user, workdir=spec.workdir, command=spec.command,
                    )
                )
                self.jobs[job_id] = rec
                self.queue.push(rec)
                return [JobId(job_id)]
            if isinstance(m, JobDone):
                rec = self.jobs.get(m.job_id)
                if rec is None:
                    return [Err("unknown-job", f"no job {m.job_id}")]
                if rec.state is not JobState.DISPATCHED or rec.assigned != m.node_id:
                    return [Err("bad-request", f"job {m.job_id} not running on {m.node_id}")]
                to = JobState.DONE if m.exit_code == 0 else JobState.FAILED
                job_transition(rec, to, exit_code=m.exit_code)
                self._append(LedgerEvent(now, "DONE", m.job_id, exit_code=m.exit_code))
                return [Ok()]
            if isinstance(m, Status):
                rec = self.jobs.get(m.job_id)
                if rec is None:
                    return [Err("unknown-job", f"no job {m.job_id}")]
                return [self._state_row(rec)]
            if isinstance(m, Nodes):
                rows: List[Message] = list(self.registry.table_rows(now, self.cfg))
                rows.append(Ok())
                return rows
            if isinstance(m, Jobs):
                rows = [self._state_row(self.jobs[j]) for j in sorted(self.jobs)]
                rows.append(Ok())
                return rows
            return [Err("bad-request", f"unexpected message {type(m).__name__}")]
        except ValidationError as exc:
            return [Err("bad-request", str(exc))]

    @staticmethod
    def _state_row(rec: JobRecord) -> State:
        return State(
            job_id=rec.job_id,
            state=rec.state,
            node_id=rec.assigned,
            submit_ts=rec.submit_ts,
            exit_code=rec.exit_code,
        )

    def tick(self, now: int) -> List[DispatchDecision]:
        """Drain the queue; for each decision write ASSIGN, then DISPATCH.

        Jobs decided for a node with no live connection fail with reason
        "unreachable"; a send error counts as an agent disconnect.
        """
        decisions = drain(self.queue, self.registry, now, self.cfg)
        for dec in decisions:
            rec = self.jobs[dec.job_id]
            send = self.agents.get(dec.node)
            if send is None:
                job_transition(rec, JobState.FAILED)
                self._append(LedgerEvent(now, "FAIL", dec.job_id, reason="unreachable"))
                continue
            job_transition(rec, JobState.DISPATCHED, assigned=dec.node)
            self._append(LedgerEvent(now, "ASSIGN", dec.job_id, node_id=dec.node))
            msg = Dispatch(
                job_id=rec.job_id,
                user=rec.spec.user,
                workdir=rec.spec.workdir,
                command=rec.spec.command,
            )
            try:
                send(msg)
            except Exception:
                log.warning("dispatch to %s failed, dropping agent", dec.node)
                self.on_agent_disconnect(dec.node, now)
        return decisions

    def on_agent_disconnect(self, node_id: str, now: int) -> None:
        """Mark every job running on the node LOST; the node stays
        registered and may reconnect with a fresh REGISTER.
        """
        self.agents.pop(node_id, None)
        for rec in sorted(self.jobs.values(), key=lambda r: r.job_id):
            if rec.state is JobState.DISPATCHED and rec.assigned == node_id:
                job_transition(rec, JobState.LOST)
                self._append(LedgerEvent(now, "LOST", rec.job_id, node_id=node_id))


# --- TCP server ----------------------------------------------------------


class MasterServer:
    """Serves agents and clients on one TCP port.

    Each connection gets a reader thread; all core access is under one
    lock, which also keeps ledger-append-before-send ordering.
    """

    def __init__(self, core: MasterCore, host: str = "0.0.0.0", port: Optional[int] = None):
        self.core = core
        self.clock = SystemClock()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port if port is not None else core.cfg.listen_port))
        self._sock.listen(64)
        self.port = self._sock.getsockname()[1]
        self._threads: List[threading.Thread] = []

    def start(self) -> None:
        for target in (self._accept_loop, self._tick_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def serve_forever(self) -> None:
        self.start()
        self._stop.wait()

    def _tick_loop(self) -> None:
        interval = self.core.cfg.heartbeat_interval_ms / 1000.0
        while not self._stop.wait(interval):
            with self._lock:
                self.core.tick(self.clock.now())

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn, addr), daemon=True)
            t.start()

    def _serve_conn(self, conn: socket.socket, addr: Tuple[str, int]) -> None:
        framer = protocol.LineFramer()
        write_lock = threading.Lock()

        def send(msg: Message) -> None:
            data = protocol.encode(msg).encode("utf-8")
            with write_lock:
                conn.sendall(data)

        bound_node: Optional[str] = None
        try:
            while True:
                data = conn.recv(4096)
                if not data:
                    break
                try:
                    lines = framer.feed(data)
                except protocol.FramingError:
                    send(Err("bad-request", "line too long"))
                    break
                for line in lines:
                    try:
                        msg = protocol.decode(line)
                    except protocol.DecodeError as exc:
                        send(Err("bad-request", str(exc) or type(exc).__name__))
                        continue
                    with self._lock:
                        now = self.clock.now()
                        replies = self.core.on_message(msg, now)
                        if isinstance(msg, Register) and any(
                            isinstance(r, Ok) for r in replies
                        ):
                            bound_node = msg.node.id
                            self.core.attach_agent(bound_node, send)
                        for reply in replies:
                            send(reply)
                        if isinstance(msg, (Submit, Heartbeat)):
                            self.core.tick(now)
        except OSError:
            pass
        finally:
            with self._lock:
                if bound_node is not None and self.core.agents.get(bound_node) is send:
                    self.core.on_agent_disconnect(bound_node, self.clock.now())
            try:
                conn.close()
            except OSError:
                pass


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="hepmaster", description="cluster master daemon")
    parser.add_argument("--listen", default=None, metavar="ADDR:PORT",
                        help="bind address (default 0.0.0.0:7070)")
    parser.add_argument("--ledger", required=True, help="append-only event log path")
    parser.add_argument("--heartbeat-ms", type=int, default=None)
    parser.add_argument("--stale-ms", type=int, default=None)
    parser.add_argument("--penalty", type=int, default=None)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    defaults = Config()
    cfg = Config(
        heartbeat_interval_ms=args.heartbeat_ms or defaults.heartbeat_interval_ms,
        stale_after_ms=args.stale_ms or defaults.stale_after_ms,
        dispatch_penalty_milli=(
            args.penalty if args.penalty is not None else defaults.dispatch_penalty_milli
        ),
    )
    host, port = "0.0.0.0", cfg.listen_port
    if args.listen:
        host, _, port_s = args.listen.rpartition(":")
        host = host or "0.0.0.0"
        port = int(port_s)

    os.makedirs(os.path.dirname(os.path.abspath(args.ledger)), exist_ok=True)
    core = MasterCore.recover(cfg, args.ledger)
    server = MasterServer(core, host=host, port=port)
    log.info("master listening on %s:%d, ledger %s", host, server.port, args.ledger)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

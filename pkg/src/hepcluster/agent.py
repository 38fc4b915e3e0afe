"""Worker-node daemon: report resources, run dispatched commands.

The agent keeps one long-lived connection to the master (REGISTER first,
then heartbeats and completions upstream, dispatches downstream).  Jobs
run as child processes inside the shared workspace; their stdout/stderr
land next to the job as <workdir>/<job_id>.out and .err.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import signal
import socket
import subprocess
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Tuple

import psutil

from . import protocol
from .model import Config, NodeStatic, ResourceSnapshot, SystemClock
from .protocol import Dispatch, Heartbeat, JobDone, Register

log = logging.getLogger("hepcluster.agent")

EXIT_BAD_WORKDIR = 126
EXIT_CANNOT_START = 127

BACKOFF_INITIAL_S = 1.0
BACKOFF_MAX_S = 30.0


class ProbeUnavailable(Exception):
    pass


class SystemProbe:
    """Where resource measurements come from; swapped out in tests."""

    def cores(self) -> int:
        raise NotImplementedError

    def load1(self) -> float:
        raise NotImplementedError

    def mem_total_bytes(self) -> int:
        raise NotImplementedError

    def mem_available_bytes(self) -> int:
        raise NotImplementedError


class RealProbe(SystemProbe):
    def cores(self) -> int:
        n = os.cpu_count()
        if not n:
            raise ProbeUnavailable("cpu count unavailable")
        return n

    def load1(self) -> float:
        try:
            return os.getloadavg()[0]
        except OSError as exc:
            raise ProbeUnavailable(str(exc)) from None

    def mem_total_bytes(self) -> int:
        return psutil.virtual_memory().total

    def mem_available_bytes(self) -> int:
        return psutil.virtual_memory().available


def sample(probe: SystemProbe, now: int, running_jobs: int = 0) -> ResourceSnapshot:
    """Measure idle CPU (1-minute load over cores) and available memory.

    acr_milli = max(0, 1000 - floor(1000 * load1 / cores)), clamped so an
    overloaded node reports 0, never a negative.
    """
    cores = probe.cores()
    load = probe.load1()
    busy = math.floor(Fraction(1000) * Fraction(load) / cores)
    acr = max(0, 1000 - busy)
    amr = min(probe.mem_available_bytes(), probe.mem_total_bytes())
    return ResourceSnapshot(
        acr_milli=min(acr, 1000), amr_bytes=amr, running_jobs=running_jobs, taken_at=now
    )


@dataclass
class RunningJob:
    job_id: int
    process: subprocess.Popen
    started_at: int


def _contained(workdir: str, workspace_root: str) -> bool:
    root = os.path.normpath(workspace_root)
    path = os.path.normpath(workdir)
    return path == root or path.startswith(root + os.sep)


def start_job(
    d: Dispatch, workspace_root: str, now: int
) -> Tuple[Optional[RunningJob], Optional[int]]:
    """Launch a dispatched command; returns (job, None) on success or
    (None, exit_code) when nothing could be started (126 for a bad
    workdir, 127 for an unstartable command).
    """
    if not _contained(d.workdir, workspace_root) or not os.path.isdir(d.workdir):
        return None, EXIT_BAD_WORKDIR
    try:
        out = open(os.path.join(d.workdir, f"{d.job_id}.out"), "wb")
        err = open(os.path.join(d.workdir, f"{d.job_id}.err"), "wb")
        proc = subprocess.Popen(
            d.command, shell=True, cwd=d.workdir, stdout=out, stderr=err,
            stdin=subprocess.DEVNULL,
        )
        out.close()
        err.close()
    except OSError:
        return None, EXIT_CANNOT_START
    return RunningJob(job_id=d.job_id, process=proc, started_at=now), None


def wait_job(job: RunningJob) -> int:
    """Wait for exit; a signal death reports 128 + signal number."""
    rc = job.process.wait()
    if rc < 0:
        return 128 - rc
    return rc


class Agent:
    def __init__(
        self,
        master_addr: Tuple[str, int],
        node_id: str,
        workroot: str,
        cfg: Optional[Config] = None,
        probe: Optional[SystemProbe] = None,
    ):
        self.master_addr = master_addr
        self.node_id = node_id
        self.workroot = workroot
        self.cfg = cfg or Config()
        self.probe = probe or RealProbe()
        self.clock = SystemClock()
        self._running: Dict[int, RunningJob] = {}
        self._running_lock = threading.Lock()
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()

    def run(self) -> None:
        """Connect, serve, and on connection loss reconnect with capped
        exponential backoff (1 s, 2 s, 4 s, ... max 30 s), re-registering
        each time.
        """
        backoff = BACKOFF_INITIAL_S
        while not self._stop.is_set():
            try:
                sock = socket.create_connection(self.master_addr, timeout=10)
            except OSError as exc:
                log.warning("connect failed (%s); retrying in %.0fs", exc, backoff)
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2, BACKOFF_MAX_S)
                continue
            backoff = BACKOFF_INITIAL_S
            try:
                self._session(sock)
            except OSError as exc:
                log.warning("connection lost: %s", exc)
            finally:
                try:
                    sock.close()
                except OSError:
                    pass

    def _session(self, sock: socket.socket) -> None:
        sock.settimeout(None)
        write_lock = threading.Lock()

        def send(msg: protocol.Message) -> None:
            data = protocol.encode(msg).encode("utf-8")
            with write_lock:
                sock.sendall(data)

        static = NodeStatic(
            id=self.node_id,
            ip=sock.getsockname()[0],
            cpu_cores=self.probe.cores(),
            total_mem_bytes=self.probe.mem_total_bytes(),
        )
        send(Register(static))

        hb = threading.Thread(target=self._heartbeat_loop, args=(send,), daemon=True)
        hb.start()

        framer = protocol.LineFramer()
        while not self._stop.is_set():
            data = sock.recv(4096)
            if not data:
                raise ConnectionError("master closed connection")
            for line in framer.feed(data):
                try:
                    msg = protocol.decode(line)
                except protocol.DecodeError as exc:
                    log.warning("undecodable line from master: %s", exc)
                    continue
                if isinstance(msg, Dispatch):
                    self._handle_dispatch(msg, send)
                # OK / ERR replies to our own messages need no action.

    def _heartbeat_loop(self, send) -> None:
        interval = self.cfg.heartbeat_interval_ms / 1000.0
        while not self._stop.is_set():
            try:
                with self._running_lock:
                    running = len(self._running)
                snap = sample(self.probe, self.clock.now(), running)
                send(
                    Heartbeat(
                        node_id=self.node_id,
                        acr_milli=snap.acr_milli,
                        amr_bytes=snap.amr_bytes,
                        running_jobs=snap.running_jobs,
                    )
                )
            except ProbeUnavailable as exc:
                log.warning("probe unavailable, skipping heartbeat: %s", exc)
            except OSError:
                return  # connection died; run() will reconnect
            if self._stop.wait(interval):
                return

    def _handle_dispatch(self, d: Dispatch, send) -> None:
        job, immediate = start_job(d, self.workroot, self.clock.now())
        if job is None:
            send(JobDone(node_id=self.node_id, job_id=d.job_id, exit_code=immediate))
            return
        with self._running_lock:
            self._running[d.job_id] = job
        waiter = threading.Thread(target=self._wait_and_report, args=(job, send), daemon=True)
        waiter.start()

    def _wait_and_report(self, job: RunningJob, send) -> None:
        code = wait_job(job)
        with self._running_lock:
            self._running.pop(job.job_id, None)
        try:
            send(JobDone(node_id=self.node_id, job_id=job.job_id, exit_code=code))
        except OSError:
            log.warning("could not report completion of job %d", job.job_id)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hepagent", description="worker-node daemon")
    parser.add_argument("--master", default=os.environ.get("HEP_MASTER_ADDR"),
                        metavar="ADDR:PORT")
    parser.add_argument("--node-id", required=True)
    parser.add_argument("--workroot", default="/Jugrid")
    parser.add_argument("--heartbeat-ms", type=int, default=None)
    args = parser.parse_args(argv)
    if not args.master:
        parser.error("--master or HEP_MASTER_ADDR is required")

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    host, _, port_s = args.master.rpartition(":")
    defaults = Config()
    cfg = Config(heartbeat_interval_ms=args.heartbeat_ms or defaults.heartbeat_interval_ms)
    agent = Agent((host, int(port_s)), args.node_id, args.workroot, cfg=cfg)

    def handle_term(signum, frame):
        agent.stop()

    signal.signal(signal.SIGTERM, handle_term)
    agent.run()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

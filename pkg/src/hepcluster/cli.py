"""hepctl: submit jobs, query status, list nodes and jobs.

Each invocation opens one short-lived connection to the master, sends a
single request, renders the replies, and exits.  Exit status: 0 success,
1 error reply from the master, 2 usage, 3 master unreachable.
"""

from __future__ import annotations

import argparse
import getpass
import os
import socket
import sys
from dataclasses import dataclass
from typing import List, Optional, Tuple

from . import protocol
from .protocol import Err, Jobs, JobId, Node, Nodes, Ok, State, Status, Submit

EXIT_OK = 0
EXIT_ERR_REPLY = 1
EXIT_USAGE = 2
EXIT_NO_MASTER = 3

NODES_HEADER = ("NODE", "IP", "ACR", "AMR", "RUN", "AGE", "ELIG")


@dataclass(frozen=True)
class ParsedCommand:
    master: str
    request: protocol.Message


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hepctl", description="cluster client")
    parser.add_argument("--master", default=os.environ.get("HEP_MASTER_ADDR"),
                        metavar="ADDR:PORT")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_submit = sub.add_parser("submit", help="queue a job on the cluster")
    p_submit.add_argument("--user", default=None)
    p_submit.add_argument("--workdir", required=True)
    p_submit.add_argument("command", nargs=argparse.REMAINDER,
                          metavar="-- command...")

    p_status = sub.add_parser("status", help="show one job")
    p_status.add_argument("job_id", type=int)

    sub.add_parser("nodes", help="list worker nodes")
    sub.add_parser("jobs", help="list all jobs")
    return parser


def parse_args(argv: List[str]) -> ParsedCommand:
    """Turn argv into a request message; exits with status 2 on misuse."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.master:
        parser.error("--master or HEP_MASTER_ADDR is required")
    if args.cmd == "submit":
        words = list(args.command)
        if words and words[0] == "--":
            words = words[1:]
        if not words:
            parser.error("submit needs a command after --")
        user = args.user or getpass.getuser()
        return ParsedCommand(args.master, Submit(user=user, workdir=args.workdir,
                                                 command=" ".join(words)))
    if args.cmd == "status":
        if args.job_id < 1:
            parser.error("job id must be positive")
        return ParsedCommand(args.master, Status(job_id=args.job_id))
    if args.cmd == "nodes":
        return ParsedCommand(args.master, Nodes())
    return ParsedCommand(args.master, Jobs())


def request(master: str, msg: protocol.Message) -> List[protocol.Message]:
    """Send one request, collect replies until the terminal one.

    Single-reply requests finish on their reply; NODES/JOBS stream rows
    until OK (or ERR).
    """
    host, _, port_s = master.rpartition(":")
    multi = isinstance(msg, (Nodes, Jobs))
    with socket.create_connection((host, int(port_s)), timeout=10) as sock:
        sock.sendall(protocol.encode(msg).encode("utf-8"))
        framer = protocol.LineFramer()
        replies: List[protocol.Message] = []
        while True:
            data = sock.recv(4096)
            if not data:
                return replies
            for line in framer.feed(data):
                reply = protocol.decode(line)
                replies.append(reply)
                if isinstance(reply, (Ok, Err)) or not multi:
                    return replies


def render_state(row: State) -> str:
    node = row.node_id if row.node_id is not None else "-"
    exit_ = str(row.exit_code) if row.exit_code is not None else "-"
    return f"{row.job_id} {row.state.value} {node} {row.submit_ts} {exit_}"


def render_nodes(rows: List[Node]) -> List[str]:
    """Spaces-aligned table with a fixed header."""
    table = [NODES_HEADER]
    for r in rows:
        table.append(
            (r.node_id, r.ip, str(r.acr_milli), str(r.amr_bytes),
             str(r.running_jobs), str(r.age_ms), "yes" if r.eligible else "no")
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(NODES_HEADER))]
    lines = []
    for row in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return lines


def execute(cmd: ParsedCommand) -> Tuple[int, List[str]]:
    """Run one command against the master; returns (exit status, output lines)."""
    try:
        replies = request(cmd.master, cmd.request)
    except OSError as exc:
        return EXIT_NO_MASTER, [f"cannot reach master at {cmd.master}: {exc}"]
    if not replies:
        return EXIT_NO_MASTER, [f"master at {cmd.master} closed the connection"]

    first = replies[0]
    if isinstance(first, Err):
        return EXIT_ERR_REPLY, [f"error: {first.code}: {first.text}"]

    if isinstance(cmd.request, Submit):
        if isinstance(first, JobId):
            return EXIT_OK, [f"job {first.job_id} submitted"]
    elif isinstance(cmd.request, Status):
        if isinstance(first, State):
            return EXIT_OK, [render_state(first)]
    elif isinstance(cmd.request, Nodes):
        rows = [r for r in replies if isinstance(r, Node)]
        return EXIT_OK, render_nodes(rows)
    elif isinstance(cmd.request, Jobs):
        rows = [r for r in replies if isinstance(r, State)]
        return EXIT_OK, [render_state(r) for r in rows]
    return EXIT_ERR_REPLY, [f"unexpected reply: {first!r}"]


def main(argv: Optional[List[str]] = None) -> int:
    cmd = parse_args(sys.argv[1:] if argv is None else argv)
    code, lines = execute(cmd)
    stream = sys.stdout if code == EXIT_OK else sys.stderr
    for line in lines:
        print(line, file=stream)
    return code


if __name__ == "__main__":
    raise SystemExit(main())

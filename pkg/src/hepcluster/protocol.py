"""Line-oriented text wire protocol between agents, clients, and the master.

One message per line: UPPERCASE keyword, single-space-delimited fields,
'\\n' terminator.  Free text (job commands, error text) is always the
final field and consumes the rest of the line, so no quoting is needed.
Encoder and decoder are pure functions and round-trip exactly on
canonical lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Optional, Union

from .model import ACR_MAX, JobState, NodeStatic, is_valid_ip, is_valid_name

MAX_LINE_BYTES = 65536

_UINT_RE = re.compile(r"0|[1-9][0-9]*\Z")
_SINT_RE = re.compile(r"-?(0|[1-9][0-9]*)\Z")


class ProtocolError(Exception):
    pass


class DecodeError(ProtocolError):
    pass


class UnknownKeyword(DecodeError):
    pass


class BadArity(DecodeError):
    pass


class BadField(DecodeError):
    """``index`` is the offending token's position in the line (keyword = 0)."""

    def __init__(self, index: int, message: str):
        super().__init__(f"field {index}: {message}")
        self.index = index


class FramingError(ProtocolError):
    pass


class LineTooLong(FramingError):
    pass


class TruncatedFinalLine(FramingError):
    pass


# --- message types -------------------------------------------------------


@dataclass(frozen=True)
class Register:
    node: NodeStatic


@dataclass(frozen=True)
class Heartbeat:
    node_id: str
    acr_milli: int
    amr_bytes: int
    running_jobs: int


@dataclass(frozen=True)
class JobDone:
    node_id: str
    job_id: int
    exit_code: int


@dataclass(frozen=True)
class Submit:
    user: str
    workdir: str
    command: str


@dataclass(frozen=True)
class Status:
    job_id: int


@dataclass(frozen=True)
class Nodes:
    pass


@dataclass(frozen=True)
class Jobs:
    pass


@dataclass(frozen=True)
class Dispatch:
    job_id: int
    user: str
    workdir: str
    command: str


@dataclass(frozen=True)
class JobId:
    job_id: int


@dataclass(frozen=True)
class State:
    job_id: int
    state: JobState
    node_id: Optional[str]
    submit_ts: int
    exit_code: Optional[int]


@dataclass(frozen=True)
class Node:
    node_id: str
    ip: str
    acr_milli: int
    amr_bytes: int
    running_jobs: int
    age_ms: int
    eligible: bool


@dataclass(frozen=True)
class Ok:
    pass


@dataclass(frozen=True)
class Err:
    code: str
    text: str


Message = Union[
    Register, Heartbeat, JobDone, Submit, Status, Nodes, Jobs,
    Dispatch, JobId, State, Node, Ok, Err,
]


# --- encoding ------------------------------------------------------------


def encode(m: Message) -> str:
    """Encode a well-formed message as one '\\n'-terminated line."""
    if isinstance(m, Register):
        n = m.node
        line = f"REGISTER {n.id} {n.ip} {n.cpu_cores} {n.total_mem_bytes}"
    elif isinstance(m, Heartbeat):
        line = f"HEARTBEAT {m.node_id} {m.acr_milli} {m.amr_bytes} {m.running_jobs}"
    elif isinstance(m, JobDone):
        line = f"JOBDONE {m.node_id} {m.job_id} {m.exit_code}"
    elif isinstance(m, Submit):
        line = f"SUBMIT {m.user} {m.workdir} {m.command}"
    elif isinstance(m, Status):
        line = f"STATUS {m.job_id}"
    elif isinstance(m, Nodes):
        line = "NODES"
    elif isinstance(m, Jobs):
        line = "JOBS"
    elif isinstance(m, Dispatch):
        line = f"DISPATCH {m.job_id} {m.user} {m.workdir} {m.command}"
    elif isinstance(m, JobId):
        line = f"JOBID {m.job_id}"
    elif isinstance(m, State):
        node = m.node_id if m.node_id is not None else "-"
        exit_ = str(m.exit_code) if m.exit_code is not None else "-"
        line = f"STATE {m.job_id} {m.state.value} {node} {m.submit_ts} {exit_}"
    elif isinstance(m, Node):
        flag = "yes" if m.eligible else "no"
        line = (
            f"NODE {m.node_id} {m.ip} {m.acr_milli} {m.amr_bytes} "
            f"{m.running_jobs} {m.age_ms} {flag}"
        )
    elif isinstance(m, Ok):
        line = "OK"
    elif isinstance(m, Err):
        line = f"ERR {m.code} {m.text}"
    else:
        raise TypeError(f"not a protocol message: {m!r}")
    return line + "\n"


# --- decoding ------------------------------------------------------------


def _uint(tok: str, index: int, lo: int = 0, hi: Optional[int] = None) -> int:
    if not _UINT_RE.fullmatch(tok):
        raise BadField(index, f"not a canonical unsigned integer: {tok!r}")
    v = int(tok)
    if v < lo or (hi is not None and v > hi):
        raise BadField(index, f"integer out of range: {v}")
    return v


def _sint(tok: str, index: int) -> int:
    if not _SINT_RE.fullmatch(tok):
        raise BadField(index, f"not a canonical integer: {tok!r}")
    return int(tok)


def _name(tok: str, index: int) -> str:
    if not is_valid_name(tok):
        raise BadField(index, f"bad name: {tok!r}")
    return tok


def _ip(tok: str, index: int) -> str:
    if not is_valid_ip(tok):
        raise BadField(index, f"bad ip: {tok!r}")
    return tok


def _workdir(tok: str, index: int) -> str:
    if not tok.startswith("/"):
        raise BadField(index, f"workdir not absolute: {tok!r}")
    return tok


def _split_exact(line: str, n: int) -> List[str]:
    parts = line.split(" ")
    if len(parts) != n:
        raise BadArity(f"expected {n} fields, got {len(parts)}")
    return parts


def _split_rest(line: str, n_fixed: int) -> List[str]:
    # n_fixed fields before a rest-of-line field; the rest must be nonempty.
    parts = line.split(" ", n_fixed)
    if len(parts) != n_fixed + 1 or not parts[n_fixed]:
        raise BadArity(f"expected at least {n_fixed + 1} fields")
    return parts


def decode(data: Union[str, bytes]) -> Message:
    """Decode one line (terminator optional) into a Message.

    Raises UnknownKeyword, BadArity, or BadField; never anything else,
    whatever the input bytes are.
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8: {exc}") from None
    line = data[:-1] if data.endswith("\n") else data
    if "\n" in line or "\r" in line or "\x00" in line:
        raise DecodeError("embedded control byte in line")
    if not line:
        raise BadArity("empty line")
    keyword = line.split(" ", 1)[0]

    if keyword == "REGISTER":
        p = _split_exact(line, 5)
        return Register(
            NodeStatic(
                id=_name(p[1], 1),
                ip=_ip(p[2], 2),
                cpu_cores=_uint(p[3], 3, lo=1),
                total_mem_bytes=_uint(p[4], 4, lo=1),
            )
        )
    if keyword == "HEARTBEAT":
        p = _split_exact(line, 5)
        return Heartbeat(
            node_id=_name(p[1], 1),
            acr_milli=_uint(p[2], 2, hi=ACR_MAX),
            amr_bytes=_uint(p[3], 3),
            running_jobs=_uint(p[4], 4),
        )
    if keyword == "JOBDONE":
        p = _split_exact(line, 4)
        return JobDone(
            node_id=_name(p[1], 1),
            job_id=_uint(p[2], 2, lo=1),
            exit_code=_sint(p[3], 3),
        )
    if keyword == "SUBMIT":
        p = _split_rest(line, 3)
        return Submit(user=_name(p[1], 1), workdir=_workdir(p[2], 2), command=p[3])
    if keyword == "STATUS":
        p = _split_exact(line, 2)
        return Status(job_id=_uint(p[1], 1, lo=1))
    if keyword == "NODES":
        _split_exact(line, 1)
        return Nodes()
    if keyword == "JOBS":
        _split_exact(line, 1)
        return Jobs()
    if keyword == "DISPATCH":
        p = _split_rest(line, 4)
        return Dispatch(
            job_id=_uint(p[1], 1, lo=1),
            user=_name(p[2], 2),
            workdir=_workdir(p[3], 3),
            command=p[4],
        )
    if keyword == "JOBID":
        p = _split_exact(line, 2)
        return JobId(job_id=_uint(p[1], 1, lo=1))
    if keyword == "STATE":
        p = _split_exact(line, 6)
        try:
            state = JobState(p[2])
        except ValueError:
            raise BadField(2, f"bad job state: {p[2]!r}") from None
        node = None if p[3] == "-" else _name(p[3], 3)
        exit_code = None if p[5] == "-" else _sint(p[5], 5)
        return State(
            job_id=_uint(p[1], 1, lo=1),
            state=state,
            node_id=node,
            submit_ts=_uint(p[4], 4),
            exit_code=exit_code,
        )
    if keyword == "NODE":
        p = _split_exact(line, 8)
        if p[7] not in ("yes", "no"):
            raise BadField(7, f"bad eligibility flag: {p[7]!r}")
        return Node(
            node_id=_name(p[1], 1),
            ip=_ip(p[2], 2),
            acr_milli=_uint(p[3], 3, hi=ACR_MAX),
            amr_bytes=_uint(p[4], 4),
            running_jobs=_uint(p[5], 5),
            age_ms=_uint(p[6], 6),
            eligible=(p[7] == "yes"),
        )
    if keyword == "OK":
        _split_exact(line, 1)
        return Ok()
    if keyword == "ERR":
        p = _split_rest(line, 2)
        return Err(code=_name(p[1], 1), text=p[2])
    raise UnknownKeyword(f"unknown keyword: {keyword!r}")


# --- framing -------------------------------------------------------------


class LineFramer:
    """Splits a byte stream into '\\n'-terminated frames.

    A partial trailing line is buffered until more bytes arrive; lines
    longer than MAX_LINE_BYTES are rejected.
    """

    def __init__(self, max_line: int = MAX_LINE_BYTES) -> None:
        self._buf = bytearray()
        self._max = max_line

    def feed(self, data: bytes) -> List[bytes]:
        self._buf += data
        lines: List[bytes] = []
        while True:
            i = self._buf.find(b"\n")
            if i < 0:
                if len(self._buf) > self._max:
                    raise LineTooLong(f"{len(self._buf)} bytes without newline")
                break
            if i > self._max:
                raise LineTooLong(f"line of {i} bytes")
            lines.append(bytes(self._buf[:i]))
            del self._buf[: i + 1]
        return lines

    def close(self) -> None:
        """End of stream: leftover unterminated bytes are an error."""
        if self._buf:
            raise TruncatedFinalLine(f"{len(self._buf)} trailing bytes")

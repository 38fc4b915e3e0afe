import pytest

from hypothesis import given, settings
from hypothesis import strategies as st

from hepcluster.model import JobState, NodeStatic
from hepcluster.protocol import (
    BadArity,
    BadField,
    DecodeError,
    Dispatch,
    Err,
    Heartbeat,
    JobDone,
    JobId,
    Jobs,
    LineFramer,
    LineTooLong,
    Node,
    Nodes,
    Ok,
    Register,
    State,
    Status,
    Submit,
    TruncatedFinalLine,
    UnknownKeyword,
    decode,
    encode,
)

# --- strategies ----------------------------------------------------------

# "-" alone is reserved on the wire for absent optional fields.
names = st.from_regex(r"[A-Za-z0-9._-]{1,12}", fullmatch=True).filter(lambda s: s != "-")
ips = st.builds(
    lambda a, b, c, d: f"{a}.{b}.{c}.{d}",
    *[st.integers(0, 255)] * 4,
)
acr = st.integers(0, 1000)
amr = st.integers(0, 1 << 40)
counts = st.integers(0, 100)
job_ids = st.integers(1, 10**6)
timestamps = st.integers(0, 1 << 45)
exit_codes = st.integers(-255, 255)
# Rest-of-line text: no newlines, no leading/inner issues beyond what the
# grammar allows; must be nonempty and not start with a space we can't
# re-derive... leading spaces are preserved by maxsplit so any printable
# text without control characters round-trips.
free_text = st.text(
    alphabet=st.characters(blacklist_characters="\n\r\x00", blacklist_categories=("Cs",)),
    min_size=1,
)

node_statics = st.builds(
    NodeStatic,
    id=names,
    ip=ips,
    cpu_cores=st.integers(1, 256),
    total_mem_bytes=st.integers(1, 1 << 44),
)
workdirs = names.map(lambda n: f"/Jugrid/{n}")

messages = st.one_of(
    st.builds(Register, node=node_statics),
    st.builds(Heartbeat, node_id=names, acr_milli=acr, amr_bytes=amr, running_jobs=counts),
    st.builds(JobDone, node_id=names, job_id=job_ids, exit_code=exit_codes),
    st.builds(Submit, user=names, workdir=workdirs, command=free_text),
    st.builds(Status, job_id=job_ids),
    st.just(Nodes()),
    st.just(Jobs()),
    st.builds(Dispatch, job_id=job_ids, user=names, workdir=workdirs, command=free_text),
    st.builds(JobId, job_id=job_ids),
    st.builds(
        State,
        job_id=job_ids,
        state=st.sampled_from(list(JobState)),
        node_id=st.none() | names,
        submit_ts=timestamps,
        exit_code=st.none() | exit_codes,
    ),
    st.builds(
        Node,
        node_id=names,
        ip=ips,
        acr_milli=acr,
        amr_bytes=amr,
        running_jobs=counts,
        age_ms=timestamps,
        eligible=st.booleans(),
    ),
    st.just(Ok()),
    st.builds(Err, code=names, text=free_text),
)


# --- encoding examples ---------------------------------------------------

class TestEncode:
    def test_heartbeat(self):
        m = Heartbeat("node01", 800, 4294967296, 2)
        assert encode(m) == "HEARTBEAT node01 800 4294967296 2\n"

    def test_submit_rest_of_line(self):
        m = Submit("alice", "/Jugrid/alice", "aliroot -b -q run.C")
        assert encode(m) == "SUBMIT alice /Jugrid/alice aliroot -b -q run.C\n"

    def test_keyword_only(self):
        assert encode(Nodes()) == "NODES\n"
        assert encode(Ok()) == "OK\n"

    def test_state_with_dashes(self):
        m = State(job_id=3, state=JobState.QUEUED, node_id=None, submit_ts=1700, exit_code=None)
        assert encode(m) == "STATE 3 QUEUED - 1700 -\n"

    def test_node_row(self):
        m = Node("node01", "192.0.0.2", 800, 4096, 2, 1000, True)
        assert encode(m) == "NODE node01 192.0.0.2 800 4096 2 1000 yes\n"


class TestDecode:
    def test_heartbeat(self):
        assert decode("HEARTBEAT node01 800 4294967296 2") == Heartbeat(
            "node01", 800, 4294967296, 2
        )

    def test_acr_over_range_names_position(self):
        with pytest.raises(BadField) as exc:
            decode("HEARTBEAT node01 1500 0 0")
        assert exc.value.index == 2

    def test_unknown_keyword(self):
        with pytest.raises(UnknownKeyword):
            decode("FROBNICATE x")

    def test_arity_mismatch(self):
        with pytest.raises(BadArity):
            decode("HEARTBEAT node01 800 0")

    def test_terminator_optional(self):
        assert decode("OK\n") == decode("OK") == Ok()

    def test_leading_zero_rejected(self):
        with pytest.raises(BadField):
            decode("STATUS 007")

    def test_dispatch_command_keeps_spaces(self):
        m = decode("DISPATCH 7 alice /Jugrid/alice aliroot -b -q run.C")
        assert m == Dispatch(7, "alice", "/Jugrid/alice", "aliroot -b -q run.C")

    def test_err_free_text(self):
        assert decode("ERR unknown-job no job 9") == Err("unknown-job", "no job 9")

    def test_state_dash_fields(self):
        m = decode("STATE 3 QUEUED - 1700 -")
        assert m.node_id is None and m.exit_code is None

    def test_bad_eligibility_flag(self):
        with pytest.raises(BadField) as exc:
            decode("NODE n 1.2.3.4 0 0 0 0 maybe")
        assert exc.value.index == 7

    def test_invalid_utf8_bytes(self):
        with pytest.raises(DecodeError):
            decode(b"OK\xff\xfe")

    def test_relative_workdir_rejected(self):
        with pytest.raises(BadField):
            decode("SUBMIT alice home/alice ls")


# --- properties ----------------------------------------------------------

class TestRoundTrip:
    @given(messages)
    @settings(max_examples=500)
    def test_decode_encode_identity(self, m):
        assert decode(encode(m)) == m

    @given(messages)
    @settings(max_examples=300)
    def test_canonical_line_round_trip(self, m):
        line = encode(m)
        assert encode(decode(line[:-1])) == line

    @given(st.binary(max_size=200))
    @settings(max_examples=500)
    def test_decoder_never_crashes(self, data):
        try:
            decode(data)
        except DecodeError:
            pass


class TestFraming:
    def test_two_lines(self):
        f = LineFramer()
        assert f.feed(b"OK\nOK\n") == [b"OK", b"OK"]

    def test_partial_line_buffered(self):
        f = LineFramer()
        assert f.feed(b"OK\nHEART") == [b"OK"]
        assert f.feed(b"BEAT n 1 2 3\n") == [b"HEARTBEAT n 1 2 3"]

    def test_line_too_long(self):
        f = LineFramer()
        with pytest.raises(LineTooLong):
            f.feed(b"x" * 70000)

    def test_truncated_final_line(self):
        f = LineFramer()
        f.feed(b"OK\nHEART")
        with pytest.raises(TruncatedFinalLine):
            f.close()

    def test_clean_close(self):
        f = LineFramer()
        f.feed(b"OK\n")
        f.close()

    @given(
        st.lists(st.binary(max_size=40).filter(lambda b: b"\n" not in b), max_size=10),
        st.integers(1, 7),
    )
    @settings(max_examples=200)
    def test_rechunking_invariance(self, lines, chunk):
        stream = b"".join(l + b"\n" for l in lines)
        whole = LineFramer().feed(stream)
        f = LineFramer()
        parts = []
        for i in range(0, len(stream), chunk):
            parts.extend(f.feed(stream[i : i + chunk]))
        f.close()
        assert parts == whole == lines

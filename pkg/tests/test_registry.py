import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hepcluster.model import Config, NodeStatic, ResourceSnapshot
from hepcluster.registry import Registry, UnknownNode

from helpers import GiB

CFG = Config()


def snap(acr=800, amr=4 * GiB, running=0, at=0):
    return ResourceSnapshot(acr_milli=acr, amr_bytes=amr, running_jobs=running, taken_at=at)


def static(node_id="node01", ip="192.0.0.2", cores=4, total=8 * GiB):
    return NodeStatic(id=node_id, ip=ip, cpu_cores=cores, total_mem_bytes=total)


class TestRegister:
    def test_single_node(self):
        reg = Registry()
        reg.register(static(), now=0)
        assert len(reg) == 1
        rec = reg.get("node01")
        assert rec.last.acr_milli == 0 and rec.last.amr_bytes == 0
        assert rec.in_flight == 0

    def test_reregistration_replaces(self):
        reg = Registry()
        reg.register(static(ip="192.0.0.2"), now=0)
        reg.note_dispatch("node01")
        reg.register(static(ip="192.0.0.9"), now=100)
        assert len(reg) == 1
        rec = reg.get("node01")
        assert rec.static.ip == "192.0.0.9"
        assert rec.in_flight == 0

    def test_paper_topology(self):
        reg = Registry()
        for i in (1, 2, 3):
            reg.register(static(f"node0{i}", ip=f"192.0.0.{i + 1}"), now=0)
        assert len(reg) == 3


class TestHeartbeat:
    def test_stores_snapshot_and_resets_in_flight(self):
        reg = Registry()
        reg.register(static(), now=0)
        reg.note_dispatch("node01")
        reg.heartbeat("node01", snap(acr=800, amr=4 * GiB, running=2), now=1000)
        rec = reg.get("node01")
        assert rec.last.acr_milli == 800
        assert rec.last.amr_bytes == 4 * GiB
        assert rec.last.running_jobs == 2
        assert rec.last_heartbeat_at == 1000
        assert rec.in_flight == 0

    def test_unknown_node(self):
        with pytest.raises(UnknownNode):
            Registry().heartbeat("ghost", snap(), now=0)

    def test_amr_clamped_to_total(self):
        reg = Registry()
        reg.register(static(total=8 * GiB), now=0)
        reg.heartbeat("node01", snap(amr=16 * GiB), now=0)
        assert reg.get("node01").last.amr_bytes == 8 * GiB


class TestEligible:
    def test_silent_node_excluded(self):
        reg = Registry()
        for i in (1, 2, 3):
            reg.register(static(f"node0{i}"), now=0)
        reg.heartbeat("node01", snap(), now=10000)
        reg.heartbeat("node02", snap(), now=10000)
        # node03 silent since registration at t=0 -> age 10000 > 6000
        elig = reg.eligible(now=10000, cfg=CFG)
        assert [r.static.id for r in elig] == ["node01", "node02"]

    def test_empty(self):
        assert Registry().eligible(now=0, cfg=CFG) == []

    def test_boundary_inclusive(self):
        reg = Registry()
        reg.register(static(), now=0)
        assert len(reg.eligible(now=CFG.stale_after_ms, cfg=CFG)) == 1
        assert len(reg.eligible(now=CFG.stale_after_ms + 1, cfg=CFG)) == 0


class TestNoteDispatch:
    def test_count_and_reset(self):
        reg = Registry()
        reg.register(static(), now=0)
        reg.note_dispatch("node01")
        assert reg.get("node01").in_flight == 1
        reg.note_dispatch("node01")
        assert reg.get("node01").in_flight == 2
        reg.heartbeat("node01", snap(), now=0)
        assert reg.get("node01").in_flight == 0

    def test_unknown(self):
        with pytest.raises(UnknownNode):
            Registry().note_dispatch("ghost")


class TestTableRows:
    def test_fresh_row(self):
        reg = Registry()
        reg.register(static(), now=0)
        reg.heartbeat("node01", snap(acr=700), now=2000)
        [row] = reg.table_rows(now=3000, cfg=CFG)
        assert row.age_ms == 1000
        assert row.eligible is True
        assert row.acr_milli == 700

    def test_stale_row(self):
        reg = Registry()
        reg.register(static(), now=0)
        [row] = reg.table_rows(now=7000, cfg=CFG)
        assert row.age_ms == 7000
        assert row.eligible is False

    def test_empty(self):
        assert Registry().table_rows(now=0, cfg=CFG) == []

    def test_sorted_by_id(self):
        reg = Registry()
        for nid in ("node03", "node01", "node02"):
            reg.register(static(nid), now=0)
        rows = reg.table_rows(now=0, cfg=CFG)
        assert [r.node_id for r in rows] == ["node01", "node02", "node03"]


# --- properties ----------------------------------------------------------

node_ids = st.from_regex(r"n[0-9]{1,3}", fullmatch=True)


@given(
    hbs=st.dictionaries(node_ids, st.integers(0, 20000), min_size=0, max_size=20),
    now=st.integers(0, 30000),
)
@settings(max_examples=200)
def test_eligible_matches_brute_force(hbs, now):
    reg = Registry()
    for nid, hb_at in hbs.items():
        reg.register(static(nid), now=0)
        if hb_at <= now:
            reg.heartbeat(nid, snap(), now=hb_at)
    last = {nid: (hb_at if hb_at <= now else 0) for nid, hb_at in hbs.items()}
    expected = sorted(n for n, t in last.items() if now - t <= CFG.stale_after_ms)
    assert [r.static.id for r in reg.eligible(now, CFG)] == expected


@given(ops=st.lists(st.sampled_from(["dispatch", "heartbeat"]), max_size=50))
@settings(max_examples=200)
def test_in_flight_counts_since_last_heartbeat(ops):
    reg = Registry()
    reg.register(static(), now=0)
    since_hb = 0
    for op in ops:
        if op == "dispatch":
            reg.note_dispatch("node01")
            since_hb += 1
        else:
            reg.heartbeat("node01", snap(), now=0)
            since_hb = 0
        assert reg.get("node01").in_flight == since_hb


@given(amr=st.integers(0, 1 << 40), total=st.integers(1, 1 << 36))
@settings(max_examples=200)
def test_amr_never_exceeds_total(amr, total):
    reg = Registry()
    reg.register(static(total=total), now=0)
    reg.heartbeat("node01", snap(amr=amr), now=0)
    assert reg.get("node01").last.amr_bytes <= total

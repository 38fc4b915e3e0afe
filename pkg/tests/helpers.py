"""Shared builders for tests."""

from hepcluster.model import NodeStatic, ResourceSnapshot
from hepcluster.registry import NodeRecord

GiB = 1 << 30


def make_record(
    node_id="node01",
    acr=1000,
    amr=8 * GiB,
    total=8 * GiB,
    running=0,
    in_flight=0,
    ip="192.0.0.2",
    cores=4,
    last_hb=0,
):
    return NodeRecord(
        static=NodeStatic(id=node_id, ip=ip, cpu_cores=cores, total_mem_bytes=total),
        last=ResourceSnapshot(acr_milli=acr, amr_bytes=amr, running_jobs=running, taken_at=last_hb),
        last_heartbeat_at=last_hb,
        in_flight=in_flight,
    )

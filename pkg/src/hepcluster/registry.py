"""The master's node table.

Tracks every registered worker's static facts, its most recent resource
report, heartbeat age, and the number of dispatches made since that
report.  One logical writer mutates it; readers see whole records.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

from . import protocol
from .model import Config, NodeStatic, ResourceSnapshot


class UnknownNode(KeyError):
    def __init__(self, node_id: str):
        super().__init__(node_id)
        self.node_id = node_id


@dataclass
class NodeRecord:
    static: NodeStatic
    last: ResourceSnapshot
    last_heartbeat_at: int
    in_flight: int = 0  # dispatches since the last heartbeat


def _zero_snapshot(now: int) -> ResourceSnapshot:
    return ResourceSnapshot(acr_milli=0, amr_bytes=0, running_jobs=0, taken_at=now)


class Registry:
    def __init__(self) -> None:
        self._nodes: Dict[str, NodeRecord] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def get(self, node_id: str) -> NodeRecord:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def register(self, static: NodeStatic, now: int) -> None:
        """Insert or replace a node with a zero snapshot and fresh heartbeat.

        A just-registered node is eligible immediately (score 0) so an
        idle cluster can accept work before the first heartbeat arrives.
        """
        self._nodes[static.id] = NodeRecord(
            static=static, last=_zero_snapshot(now), last_heartbeat_at=now
        )

    def heartbeat(self, node_id: str, snap: ResourceSnapshot, now: int) -> None:
        rec = self.get(node_id)
        amr = min(snap.amr_bytes, rec.static.total_mem_bytes)
        if amr != snap.amr_bytes:
            snap = ResourceSnapshot(
                acr_milli=snap.acr_milli,
                amr_bytes=amr,
                running_jobs=snap.running_jobs,
                taken_at=snap.taken_at,
            )
        rec.last = snap
        rec.last_heartbeat_at = now
        rec.in_flight = 0

    def note_dispatch(self, node_id: str) -> None:
        self.get(node_id).in_flight += 1

    def eligible(self, now: int, cfg: Config) -> List[NodeRecord]:
        """Nodes heard from within the staleness window, id ascending.

        The boundary is inclusive: age == stale_after_ms is still eligible.
        """
        out = [
            rec
            for rec in self._nodes.values()
            if now - rec.last_heartbeat_at <= cfg.stale_after_ms
        ]
        out.sort(key=lambda r: r.static.id)
        return out

    def table_rows(self, now: int, cfg: Config) -> List[protocol.Node]:
        rows = []
        for rec in sorted(self._nodes.values(), key=lambda r: r.static.id):
            age = now - rec.last_heartbeat_at
            rows.append(
                protocol.Node(
                    node_id=rec.static.id,
                    ip=rec.static.ip,
                    acr_milli=rec.last.acr_milli,
                    amr_bytes=rec.last.amr_bytes,
                    running_jobs=rec.last.running_jobs,
                    age_ms=age,
                    eligible=age <= cfg.stale_after_ms,
                )
            )
        return rows

"""Serializable snapshots of per-process state.

These are the bodies of the checkpoint image sections and of the run
manifest. Bytes fields travel as base64 in JSON.
"""

from typing import Any

import orjson
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field

from ibcr.domain.models import IdPolicy
from ibcr.domain.models import QueueKind
from ibcr.domain.models import ResourceKind
from ibcr.domain.models import TransitionKind
from ibcr.domain.models import WorkloadName


class _State(BaseModel):
    model_config = ConfigDict(ser_json_bytes="base64", val_json_bytes="base64")

    def to_json(self) -> bytes:
        return orjson.dumps(self.model_dump(mode="json"))


# Virtual/real ids are ints, except rkeys which are scoped by pd uid.
IdKey = int | tuple[int, int]


class MemoryRegionState(_State):
    base_addr: int
    data: bytes


class CreationRecordState(_State):
    kind: ResourceKind
    virtual_id: int
    params: dict[str, int | None] = Field(default_factory=dict)
    visible: dict[str, int | None] = Field(default_factory=dict)


class ModifyRecordState(_State):
    kind: ResourceKind
    virtual_id: int
    transition: TransitionKind | None = None
    remote_lid: int | None = None
    remote_qp_num: int | None = None
    srq_limit: int | None = None


class ResourceLogState(_State):
    creations: list[CreationRecordState] = Field(default_factory=list)
    modifies: list[ModifyRecordState] = Field(default_factory=list)


class WqeRecordState(_State):
    queue: QueueKind
    owner: int
    index: int
    wr_id: int
    opcode: int
    sg_list: list[tuple[int, int, int]] = Field(default_factory=list)
    signaled: bool = True
    inline_flag: bool = False
    remote_addr: int | None = None
    rkey: int | None = None
    imm: int | None = None
    inline_payload: bytes | None = None
    reposted: bool = False


class WqeLogState(_State):
    entries: list[WqeRecordState] = Field(default_factory=list)
    next_index: int = 0


class DrainedEventState(_State):
    cq: int
    wr_id: int
    status: int
    opcode: int
    byte_len: int
    qp_num: int
    imm: int | None = None
    error: str | None = None


class DrainedCqState(_State):
    events: list[DrainedEventState] = Field(default_factory=list)


class DirectoryState(_State):
    qp_pd: list[tuple[int, int]] = Field(default_factory=list)
    rkeys: list[tuple[int, int, int]] = Field(default_factory=list)
    lids: list[tuple[int, int]] = Field(default_factory=list)
    qp_real: list[tuple[int, int]] = Field(default_factory=list)


class PluginState(_State):
    rank: int
    n_ranks: int
    policy: IdPolicy
    restarted: bool = False
    tables: dict[str, list[tuple[IdKey, IdKey]]] = Field(default_factory=dict)
    directory: DirectoryState = Field(default_factory=DirectoryState)
    recv_seen: list[tuple[int, int, int]] = Field(default_factory=list)
    send_retired: list[tuple[int, int, int]] = Field(default_factory=list)
    counters: dict[str, int] = Field(default_factory=dict)
    hybrid_base: dict[str, int] = Field(default_factory=dict)


class WorkloadStateImage(_State):
    name: WorkloadName
    data: dict[str, Any] = Field(default_factory=dict)


class NodeImage(_State):
    rank: int
    node_id: int
    port_index: int = 0
    epoch: int = 1
    memory: list[MemoryRegionState] = Field(default_factory=list)
    resource_log: ResourceLogState = Field(default_factory=ResourceLogState)
    wqe_log: WqeLogState = Field(default_factory=WqeLogState)
    drained: DrainedCqState = Field(default_factory=DrainedCqState)
    plugin: PluginState
    workload: WorkloadStateImage


class RunManifest(_State):
    """Everything ``ibcr restart <dir>`` needs besides the images."""

    spec: dict[str, Any]
    ranks: int
    epoch: int
    mode: str
    placement: list[tuple[int, int]]
    images: list[str]
    reference_digests: list[str] = Field(default_factory=list)
    plugin: dict[str, Any] = Field(default_factory=dict)
    fabric: dict[str, Any] = Field(default_factory=dict)
    engine: dict[str, Any] = Field(default_factory=dict)

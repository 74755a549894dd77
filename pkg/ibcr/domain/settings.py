"""Typed, validated application settings (pydantic-settings).

Every setting is available as a CLI flag and an environment variable. Env vars
use the ``IBCR_<SECTION>_`` prefix. A ``.env`` file in the working directory is
loaded automatically. ``IBCR_SEED`` is honoured as an alias of the workload
seed and, unlike every other variable, beats the ``--seed`` flag.
"""

from __future__ import annotations

from pydantic import AliasChoices
from pydantic import BaseModel
from pydantic import Field
from pydantic import field_validator
from pydantic import model_validator
from pydantic_settings import BaseSettings
from pydantic_settings import SettingsConfigDict

from ibcr.domain.models import Action
from ibcr.domain.models import FabricConfig
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import TransportMode
from ibcr.domain.models import WorkloadName
from ibcr.domain.workload import WorkloadSpec


_ENV = {
    "env_file": ".env",
    "extra": "ignore",
    "populate_by_name": True,
    "env_ignore_empty": True,
    # CLI overrides are applied via setattr after env/.env/default resolve, so
    # assignment must validate (enforces field bounds on CLI-supplied values).
    "validate_assignment": True,
}


class InstrumentationSettings(BaseSettings):
    model_config = SettingsConfigDict(**_ENV)

    logfire_token: str = Field(
        default="", validation_alias=AliasChoices("IBCR_LOGFIRE_TOKEN", "LOGFIRE_TOKEN")
    )


class FabricSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_FABRIC_", **_ENV)

    mode: TransportMode = TransportMode.IN_PROCESS
    delivery_delay_ticks: int = Field(default=1, ge=0)
    completion_skew_ticks: int = Field(default=0, ge=0)
    delivery_jitter_ticks: int = Field(default=0, ge=0)
    port_count: int = Field(default=8, ge=1, le=64)

    def to_config(self, seed: int, mode: TransportMode | None = None) -> FabricConfig:
        return FabricConfig(
            mode=mode or self.mode,
            delivery_delay_ticks=self.delivery_delay_ticks,
            completion_skew_ticks=self.completion_skew_ticks,
            rng_seed=seed,
            delivery_jitter_ticks=self.delivery_jitter_ticks,
            port_count=self.port_count,
        )


class EngineSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_ENGINE_", **_ENV)

    memory_bytes: int = Field(default=4 * 1024 * 1024, gt=0)
    cq_capacity: int = Field(default=256, gt=0)
    # Pin the epoch nonce / shift the id counters, e.g. to force real ids of a
    # later epoch onto values already handed out as virtual ids.
    id_tag: int | None = Field(default=None, ge=0x800, le=0xFFF)
    id_offset: int = Field(default=0, ge=0)


class PluginSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_PLUGIN_", **_ENV)

    id_policy: IdPolicy = IdPolicy.REAL_EQUALS_VIRTUAL_AT_CREATE
    drain_interval_ticks: int = Field(default=100, ge=1)
    drain_max_rounds: int = Field(default=16, ge=1)
    capture_inline_payloads: bool = True
    drain_coordinated: bool = True
    settle_ticks: int = Field(default=0, ge=0)


class CoordinatorSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_COORDINATOR_", **_ENV)

    address: str = ""
    listen: str = "127.0.0.1:7779"
    expect: int = Field(default=0, ge=0)
    timeout_secs: float = Field(default=30.0, gt=0)
    # virtual ticks a checkpoint waits for every client to acknowledge quiesce
    quiesce_timeout_ticks: int = Field(default=1000, ge=0)

    @field_validator("address", "listen")
    @classmethod
    def _host_port(cls, value: str) -> str:
        if value:
            host, sep, port = value.rpartition(":")
            if not sep or not host or not port.isdigit():
                raise ValueError(f"expected host:port, got {value!r}")
        return value


class ImageSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_IMAGE_", **_ENV)

    ckpt_dir: str = "./ckpt"
    compress: bool = True


class WorkloadSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_WORKLOAD_", **_ENV)

    workload: WorkloadName = WorkloadName.PING_PONG
    nodes: int = Field(default=2, ge=1)
    procs_per_node: int = Field(default=1, ge=1)
    iters: int = Field(default=100, ge=1)
    msg_size: int = Field(default=4096, ge=1)
    imm_every: int | None = Field(default=None, ge=1)
    signaled_every: int = Field(default=1, ge=1)
    seed: int = Field(default=42, validation_alias=AliasChoices("IBCR_SEED", "IBCR_WORKLOAD_SEED"))
    ckpt_at: int | None = Field(default=None, ge=0)
    action: Action | None = None
    consolidate: int | None = Field(default=None, ge=1)

    @property
    def ranks(self) -> int:
        return self.nodes * self.procs_per_node

    def spec(self) -> WorkloadSpec:
        return WorkloadSpec(
            name=self.workload,
            iterations=self.iters,
            msg_size=self.msg_size,
            imm_every=self.imm_every,
            signaled_every=self.signaled_every,
            seed=self.seed,
        )


class ReportSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="IBCR_REPORT_", **_ENV)

    database: str = ""
    timeout: float = Field(default=5.0, gt=0)


class AppSettings(BaseModel):
    instrumentation: InstrumentationSettings
    fabric: FabricSettings
    engine: EngineSettings
    plugin: PluginSettings
    coordinator: CoordinatorSettings
    image: ImageSettings
    workload: WorkloadSettings
    report: ReportSettings

    @classmethod
    def defaults(cls, **sections) -> AppSettings:
        """All sections from env/.env/default, with explicit sections swapped in."""
        base = {
            "instrumentation": InstrumentationSettings(),
            "fabric": FabricSettings(),
            "engine": EngineSettings(),
            "plugin": PluginSettings(),
            "coordinator": CoordinatorSettings(),
            "image": ImageSettings(),
            "workload": WorkloadSettings(),
            "report": ReportSettings(),
        }
        base.update(sections)
        return cls(**base)

    def with_snapshot(self, **snapshots: dict) -> AppSettings:
        """Fill sections from a saved snapshot.

        A field that was set explicitly (flag, env var, constructor argument)
        keeps its value; everything still at its default comes from the
        snapshot. Raises ``ValidationError`` like any other construction.
        """
        sections = {}
        for name, snapshot in snapshots.items():
            current = getattr(self, name)
            explicit = current.model_dump(include=current.model_fields_set)
            sections[name] = type(current)(**{**snapshot, **explicit})
        return type(self)(**{**dict(self), **sections})

    @model_validator(mode="after")
    def _check_cross_field(self) -> AppSettings:
        problems: list[str] = []
        w = self.workload
        if (w.ckpt_at is None) != (w.action is None):
            problems.append("--ckpt-at and --action must be given together.")
        if w.ckpt_at is not None and w.ckpt_at >= w.iters:
            problems.append(f"--ckpt-at {w.ckpt_at} must be below --iters {w.iters}.")
        if w.action == Action.RESTART_CONSOLIDATE and w.consolidate is None:
            problems.append("--action restart_consolidate requires --consolidate <n>.")
        if w.procs_per_node > self.fabric.port_count:
            problems.append(
                f"--procs-per-node {w.procs_per_node} exceeds the port count "
                f"{self.fabric.port_count} (IBCR_FABRIC_PORT_COUNT)."
            )
        if w.consolidate is not None and -(-w.ranks // w.consolidate) > self.fabric.port_count:
            problems.append(
                f"consolidating {w.ranks} ranks onto {w.consolidate} hosts needs more than "
                f"{self.fabric.port_count} ports per host."
            )
        if problems:
            raise ValueError("Invalid configuration:\n  - " + "\n  - ".join(problems))
        return self

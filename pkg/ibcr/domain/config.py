"""CLI parser and settings loader.

Builds the argparse surface (subcommands + flags), then loads validated
``AppSettings`` applying precedence CLI flag > workload file > env var > .env >
default. Every flag defaults to ``None`` so unset flags never mask environment
variables. ``IBCR_SEED`` is the one env var that beats its flag.
"""

import argparse
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from ibcr.domain.models import Action
from ibcr.domain.models import IdPolicy
from ibcr.domain.models import TransportMode
from ibcr.domain.models import WorkloadName
from ibcr.domain.settings import AppSettings
from ibcr.domain.settings import CoordinatorSettings
from ibcr.domain.settings import EngineSettings
from ibcr.domain.settings import FabricSettings
from ibcr.domain.settings import ImageSettings
from ibcr.domain.settings import InstrumentationSettings
from ibcr.domain.settings import PluginSettings
from ibcr.domain.settings import ReportSettings
from ibcr.domain.settings import WorkloadSettings
from ibcr.domain.validation import ConfigError
from ibcr.domain.workload import parse_workload_text


# argparse dest -> settings field, per section.
WORKLOAD_CLI = {
    "workload": "workload",
    "nodes": "nodes",
    "procs_per_node": "procs_per_node",
    "iters": "iters",
    "msg_size": "msg_size",
    "imm_every": "imm_every",
    "signaled_every": "signaled_every",
    "seed": "seed",
    "ckpt_at": "ckpt_at",
    "action": "action",
    "consolidate": "consolidate",
}
FABRIC_CLI = {
    "transport": "mode",
    "delivery_delay_ticks": "delivery_delay_ticks",
    "completion_skew_ticks": "completion_skew_ticks",
    "delivery_jitter_ticks": "delivery_jitter_ticks",
    "port_count": "port_count",
}
ENGINE_CLI = {"memory_bytes": "memory_bytes", "cq_capacity": "cq_capacity"}
PLUGIN_CLI = {
    "id_policy": "id_policy",
    "drain_interval_ticks": "drain_interval_ticks",
    "drain_max_rounds": "drain_max_rounds",
    "capture_inline_payloads": "capture_inline_payloads",
    "drain_coordinated": "drain_coordinated",
    "settle_ticks": "settle_ticks",
}
COORDINATOR_CLI = {
    "coordinator": "address",
    "listen": "listen",
    "expect": "expect",
    "timeout_secs": "timeout_secs",
    "quiesce_timeout_ticks": "quiesce_timeout_ticks",
}
IMAGE_CLI = {"ckpt_dir": "ckpt_dir", "image_compress": "compress"}
REPORT_CLI = {"report_database": "database"}


def add_workload_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Workload Options")
    g.add_argument(
        "--workload",
        dest="workload",
        choices=[w.value for w in WorkloadName],
        default=None,
        help="Traffic pattern ($IBCR_WORKLOAD_WORKLOAD)",
    )
    g.add_argument(
        "--workload-file",
        dest="workload_file",
        default=None,
        help="key=value workload spec file; flags still win",
    )
    g.add_argument("--nodes", dest="nodes", type=int, default=None, help="Hosts ($IBCR_WORKLOAD_NODES)")
    g.add_argument(
        "--procs-per-node",
        dest="procs_per_node",
        type=int,
        default=None,
        help="Processes per host ($IBCR_WORKLOAD_PROCS_PER_NODE)",
    )
    g.add_argument("--iters", dest="iters", type=int, default=None, help="Iterations ($IBCR_WORKLOAD_ITERS)")
    g.add_argument(
        "--msg-size", dest="msg_size", type=int, default=None, help="Bytes per message ($IBCR_WORKLOAD_MSG_SIZE)"
    )
    g.add_argument(
        "--imm-every",
        dest="imm_every",
        type=int,
        default=None,
        help="WRITE_WITH_IMM cadence ($IBCR_WORKLOAD_IMM_EVERY)",
    )
    g.add_argument(
        "--signaled-every",
        dest="signaled_every",
        type=int,
        default=None,
        help="Signal every k-th RDMA write ($IBCR_WORKLOAD_SIGNALED_EVERY)",
    )
    g.add_argument("--seed", dest="seed", type=int, default=None, help="Seed ($IBCR_SEED, wins over the flag)")
    g.add_argument(
        "--ckpt-at",
        dest="ckpt_at",
        type=int,
        default=None,
        help="Checkpoint once rank 0 has posted this iteration ($IBCR_WORKLOAD_CKPT_AT)",
    )
    g.add_argument(
        "--action",
        dest="action",
        choices=[a.value for a in Action],
        default=None,
        help="What follows the checkpoint ($IBCR_WORKLOAD_ACTION)",
    )
    add_consolidate_arg(g)


def add_consolidate_arg(parser) -> None:
    parser.add_argument(
        "--consolidate",
        dest="consolidate",
        type=int,
        default=None,
        help="Host slots to restart onto ($IBCR_WORKLOAD_CONSOLIDATE)",
    )


def add_fabric_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Fabric Options")
    g.add_argument(
        "--transport",
        dest="transport",
        choices=[m.value for m in TransportMode],
        default=None,
        help="sim (in-process) or stream (loopback sockets) ($IBCR_FABRIC_MODE)",
    )
    g.add_argument(
        "--delivery-delay-ticks",
        dest="delivery_delay_ticks",
        type=int,
        default=None,
        help="Ticks from send to delivery ($IBCR_FABRIC_DELIVERY_DELAY_TICKS)",
    )
    g.add_argument(
        "--completion-skew-ticks",
        dest="completion_skew_ticks",
        type=int,
        default=None,
        help="Sender completion lag behind the receiver ($IBCR_FABRIC_COMPLETION_SKEW_TICKS)",
    )
    g.add_argument(
        "--delivery-jitter-ticks",
        dest="delivery_jitter_ticks",
        type=int,
        default=None,
        help="Seeded extra delay, never reorders ($IBCR_FABRIC_DELIVERY_JITTER_TICKS)",
    )
    g.add_argument(
        "--port-count",
        dest="port_count",
        type=int,
        default=None,
        help="HCA ports per host ($IBCR_FABRIC_PORT_COUNT)",
    )


def add_engine_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Engine Options")
    g.add_argument(
        "--memory-bytes",
        dest="memory_bytes",
        type=int,
        default=None,
        help="Registrable memory per process ($IBCR_ENGINE_MEMORY_BYTES)",
    )
    g.add_argument(
        "--cq-capacity",
        dest="cq_capacity",
        type=int,
        default=None,
        help="Completion queue depth ($IBCR_ENGINE_CQ_CAPACITY)",
    )


def add_plugin_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Plugin Options")
    g.add_argument(
        "--id-policy",
        dest="id_policy",
        choices=[p.value for p in IdPolicy],
        default=None,
        help="Virtual id allocation ($IBCR_PLUGIN_ID_POLICY)",
    )
    g.add_argument(
        "--drain-interval-ticks",
        dest="drain_interval_ticks",
        type=int,
        default=None,
        help="Wait between drain rounds ($IBCR_PLUGIN_DRAIN_INTERVAL_TICKS)",
    )
    g.add_argument(
        "--drain-max-rounds",
        dest="drain_max_rounds",
        type=int,
        default=None,
        help="Drain round budget ($IBCR_PLUGIN_DRAIN_MAX_ROUNDS)",
    )
    g.add_argument(
        "--settle-ticks",
        dest="settle_ticks",
        type=int,
        default=None,
        help="Wait before the first drain round ($IBCR_PLUGIN_SETTLE_TICKS)",
    )
    g.add_argument(
        "--capture-inline-payloads",
        dest="capture_inline_payloads",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Copy inline payloads into the WQE log ($IBCR_PLUGIN_CAPTURE_INLINE_PAYLOADS)",
    )
    g.add_argument(
        "--drain-coordinated",
        dest="drain_coordinated",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Balance sender/receiver tallies across nodes ($IBCR_PLUGIN_DRAIN_COORDINATED)",
    )


def add_image_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Image Options")
    g.add_argument(
        "--ckpt-dir", dest="ckpt_dir", default=None, help="Image directory ($IBCR_IMAGE_CKPT_DIR)"
    )
    g.add_argument(
        "--no-compress",
        dest="image_compress",
        action="store_false",
        default=None,
        help="Store sections uncompressed ($IBCR_IMAGE_COMPRESS)",
    )


def add_coordinator_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Coordinator Options")
    g.add_argument(
        "--coordinator",
        dest="coordinator",
        default=None,
        help="host:port of a running coordinator; in-process when unset ($IBCR_COORDINATOR_ADDRESS)",
    )
    g.add_argument(
        "--timeout-secs",
        dest="timeout_secs",
        type=float,
        default=None,
        help="Barrier timeout ($IBCR_COORDINATOR_TIMEOUT_SECS)",
    )
    g.add_argument(
        "--quiesce-timeout-ticks",
        dest="quiesce_timeout_ticks",
        type=int,
        default=None,
        help="Ticks to wait for every quiesce acknowledgement ($IBCR_COORDINATOR_QUIESCE_TIMEOUT_TICKS)",
    )


def add_report_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("Report Options")
    g.add_argument(
        "--report-database",
        dest="report_database",
        default=None,
        help="SQLite file receiving run reports ($IBCR_REPORT_DATABASE)",
    )


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    out = {}
    for dest, field in mapping.items():
        val = getattr(args, dest, None)
        if val is not None:
            out[field] = val
    return out


def _build_section(cls, args: argparse.Namespace, mapping: dict[str, str], base: dict | None = None):
    """Construct a section from env/.env/default, then apply overrides on top.

    ``base`` holds values from a workload file; CLI flags are applied after it.
    Assignment validates, so every override is still bounds-checked.
    """
    section = cls()
    for field, val in {**(base or {}), **_overrides(args, mapping)}.items():
        setattr(section, field, val)
    return section


def _format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"]
        lines.append(f"{loc}: {msg}" if loc else msg)
    return "Invalid configuration:\n  - " + "\n  - ".join(lines)


def _parse_all(argv: list[str] | None) -> argparse.Namespace:
    argv = argv if argv is not None else sys.argv
    parser = argparse.ArgumentParser(add_help=False)
    add_workload_args(parser)
    add_fabric_args(parser)
    add_engine_args(parser)
    add_plugin_args(parser)
    add_image_args(parser)
    add_coordinator_args(parser)
    add_report_args(parser)
    parser.add_argument("--listen", dest="listen", default=None)
    parser.add_argument("--expect", dest="expect", type=int, default=None)
    args, _ = parser.parse_known_args(argv)
    return args


def _workload_file(args: argparse.Namespace) -> dict:
    path = getattr(args, "workload_file", None)
    if not path:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read workload file {path}: {err}") from err
    values = parse_workload_text(text)
    unknown = sorted(set(values) - set(WorkloadSettings.model_fields))
    if unknown:
        raise ConfigError(f"unknown keys in workload file {path}: {', '.join(unknown)}")
    return values


def load_settings(argv: list[str] | None = None) -> AppSettings:
    """Load validated AppSettings; raise ConfigError on any invalid value."""
    args = _parse_all(argv)
    workload_cli = dict(WORKLOAD_CLI)
    if os.getenv("IBCR_SEED"):
        workload_cli.pop("seed")
    try:
        file_values = _workload_file(args)
        if os.getenv("IBCR_SEED"):
            file_values.pop("seed", None)
        return AppSettings(
            instrumentation=InstrumentationSettings(),
            fabric=_build_section(FabricSettings, args, FABRIC_CLI),
            engine=_build_section(EngineSettings, args, ENGINE_CLI),
            plugin=_build_section(PluginSettings, args, PLUGIN_CLI),
            coordinator=_build_section(CoordinatorSettings, args, COORDINATOR_CLI),
            image=_build_section(ImageSettings, args, IMAGE_CLI),
            workload=_build_section(WorkloadSettings, args, workload_cli, file_values),
            report=_build_section(ReportSettings, args, REPORT_CLI),
        )
    except ValidationError as err:
        raise ConfigError(_format_validation_error(err)) from err


def create_cli_parser() -> argparse.ArgumentParser:
    """Main CLI parser with run/restart/coordinator/overhead subcommands."""
    parser = argparse.ArgumentParser(
        prog="ibcr",
        description="ibcr - checkpoint-restart over a simulated RDMA verbs fabric",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True, help="Available commands")

    run_parser = subparsers.add_parser(
        "run",
        help="Run a workload, optionally checkpointing it",
        description="Runs a reference pass and the requested pass, then compares digests",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    add_workload_args(run_parser)
    add_fabric_args(run_parser)
    add_engine_args(run_parser)
    add_plugin_args(run_parser)
    add_image_args(run_parser)
    add_coordinator_args(run_parser)
    add_report_args(run_parser)

    restart_parser = subparsers.add_parser(
        "restart",
        help="Restart a checkpointed computation from its image directory",
        description="Reads manifest.json and the per-rank images, then finishes the workload",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    restart_parser.add_argument("image_dir", help="Directory holding manifest.json and images")
    add_consolidate_arg(restart_parser)
    add_fabric_args(restart_parser)
    add_engine_args(restart_parser)
    add_plugin_args(restart_parser)
    add_coordinator_args(restart_parser)
    add_report_args(restart_parser)

    coordinator_parser = subparsers.add_parser(
        "coordinator",
        help="Serve the coordinator protocol over TCP",
        description="Registration, checkpoint phases, restart barrier and id exchange",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    coordinator_parser.add_argument(
        "--listen", dest="listen", default=None, help="host:port ($IBCR_COORDINATOR_LISTEN)"
    )
    coordinator_parser.add_argument(
        "--expect", dest="expect", type=int, default=None, help="Clients per barrier ($IBCR_COORDINATOR_EXPECT)"
    )
    coordinator_parser.add_argument(
        "--timeout-secs",
        dest="timeout_secs",
        type=float,
        default=None,
        help="Barrier timeout ($IBCR_COORDINATOR_TIMEOUT_SECS)",
    )

    overhead_parser = subparsers.add_parser(
        "overhead",
        help="Split checkpointing overhead into startup cost and runtime ratio",
        description="Solves o = s + r*t for two (t, o) measurements",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    overhead_parser.add_argument("--t1", dest="t1", type=float, required=True, help="Native runtime 1")
    overhead_parser.add_argument("--o1", dest="o1", type=float, required=True, help="Overhead at t1")
    overhead_parser.add_argument("--t2", dest="t2", type=float, required=True, help="Native runtime 2")
    overhead_parser.add_argument("--o2", dest="o2", type=float, required=True, help="Overhead at t2")

    return parser

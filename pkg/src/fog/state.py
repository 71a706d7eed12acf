"""Deployment state persisted between CLI invocations.

`fog launch` runs in one process and `fog status`/`teardown` in others, so
everything needed to inspect or dismantle a deployment lives in files under
the state directory (FOG_STATE_DIR, default ~/.local/state/fog):

    <id>/record.fog    deployment record (manifest key=value syntax)
    <id>/secret        32-byte deployment secret, mode 0600
    <id>/manifest.fog  copy of the launched manifest
    <id>/logs/         host-side process logs / proxy stats
    <id>/lock          flock serializing mutating commands
"""

from __future__ import annotations

import fcntl
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

# Deployment lifecycle; transitions only ever move rightward.
PROVISIONING = "PROVISIONING"
PUSHING = "PUSHING"
SETUP = "SETUP"
NETWORKING = "NETWORKING"
RUNNING = "RUNNING"
FAILED = "FAILED"
TORN_DOWN = "TORN_DOWN"

STATUS_ORDER = [PROVISIONING, PUSHING, SETUP, NETWORKING, RUNNING]


class UnknownDeployment(Exception):
    pass


def state_dir(override: "str | Path | None" = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get("FOG_STATE_DIR")
    if env:
        return Path(env)
    xdg = os.environ.get("XDG_STATE_HOME", "~/.local/state")
    return Path(xdg).expanduser() / "fog"


def write_sections(sections: list[tuple[str, dict[str, str]]]) -> str:
    lines: list[str] = []
    for header, mapping in sections:
        lines.append(f"[{header}]")
        for key, value in mapping.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def read_sections(text: str) -> list[tuple[str, dict[str, str]]]:
    sections: list[tuple[str, dict[str, str]]] = []
    current: Optional[dict[str, str]] = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = {}
            sections.append((line[1:-1].strip(), current))
            continue
        if current is None or "=" not in line:
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        current[key] = value
    return sections


@dataclass
class GroupRuntime:
    name: str
    network: str = "direct"
    instance_type: str = ""
    image: str = ""
    sandbox: str = ""
    control_port: int = 0
    registry_address: str = ""  # cloud-side registry, when this group hosts it
    channel_port: int = 0
    node_pids: dict[str, int] = field(default_factory=dict)
    ports: list[int] = field(default_factory=list)


@dataclass
class DeploymentState:
    deployment_id: str
    status: str = PROVISIONING
    provider: str = "local"
    trace: bool = False
    manifest_path: str = ""
    created: float = field(default_factory=time.time)
    error: str = ""
    secret_id: str = ""
    edge_registry: str = ""
    edge_registry_pid: int = 0
    edge_proxy_pid: int = 0
    edge_netmon_pid: int = 0
    edge_node_pids: dict[str, int] = field(default_factory=dict)
    groups: dict[str, GroupRuntime] = field(default_factory=dict)
    listen_ports: list[int] = field(default_factory=list)

    def host_pids(self) -> list[int]:
        pids = [self.edge_registry_pid, self.edge_proxy_pid, self.edge_netmon_pid]
        pids.extend(self.edge_node_pids.values())
        return [p for p in pids if p > 0]

    def to_text(self) -> str:
        sections: list[tuple[str, dict[str, str]]] = [
            (
                "deployment",
                {
                    "id": self.deployment_id,
                    "status": self.status,
                    "provider": self.provider,
                    "trace": "1" if self.trace else "0",
                    "manifest_path": self.manifest_path,
                    "created": f"{self.created:.3f}",
                    "error": json.dumps(self.error),
                    "secret_id": self.secret_id,
                    "listen_ports": ",".join(map(str, self.listen_ports)),
                },
            ),
            (
                "edge",
                {
                    "registry": self.edge_registry,
                    "registry_pid": str(self.edge_registry_pid),
                    "proxy_pid": str(self.edge_proxy_pid),
                    "netmon_pid": str(self.edge_netmon_pid),
                    **{f"node.{k}": str(v) for k, v in self.edge_node_pids.items()},
                },
            ),
        ]
        for g in self.groups.values():
            sections.append(
                (
                    f"group {g.name}",
                    {
                        "network": g.network,
                        "instance_type": g.instance_type,
                        "image": g.image,
                        "sandbox": g.sandbox,
                        "control_port": str(g.control_port),
                        "registry_address": g.registry_address,
                        "channel_port": str(g.channel_port),
                        "ports": ",".join(map(str, g.ports)),
                        **{f"node.{k}": str(v) for k, v in g.node_pids.items()},
                    },
                )
            )
        return write_sections(sections)

    @classmethod
    def from_text(cls, text: str) -> "DeploymentState":
        state: Optional[DeploymentState] = None
        for header, mapping in read_sections(text):
            if header == "deployment":
                state = cls(
                    deployment_id=mapping["id"],
                    status=mapping.get("status", PROVISIONING),
                    provider=mapping.get("provider", "local"),
                    trace=mapping.get("trace") == "1",
                    manifest_path=mapping.get("manifest_path", ""),
                    created=float(mapping.get("created", 0)),
                    error=json.loads(mapping.get("error", '""')),
                    secret_id=mapping.get("secret_id", ""),
                    listen_ports=[int(p) for p in mapping.get("listen_ports", "").split(",") if p],
                )
            elif header == "edge" and state is not None:
                state.edge_registry = mapping.get("registry", "")
                state.edge_registry_pid = int(mapping.get("registry_pid", 0))
                state.edge_proxy_pid = int(mapping.get("proxy_pid", 0))
                state.edge_netmon_pid = int(mapping.get("netmon_pid", 0))
                state.edge_node_pids = {
                    k[5:]: int(v) for k, v in mapping.items() if k.startswith("node.")
                }
            elif header.startswith("group ") and state is not None:
                g = GroupRuntime(
                    name=header[6:],
                    network=mapping.get("network", "direct"),
                    instance_type=mapping.get("instance_type", ""),
                    image=mapping.get("image", ""),
                    sandbox=mapping.get("sandbox", ""),
                    control_port=int(mapping.get("control_port", 0)),
                    registry_address=mapping.get("registry_address", ""),
                    channel_port=int(mapping.get("channel_port", 0)),
                    node_pids={k[5:]: int(v) for k, v in mapping.items() if k.startswith("node.")},
                    ports=[int(p) for p in mapping.get("ports", "").split(",") if p],
                )
                state.groups[g.name] = g
        if state is None:
            raise ValueError("no [deployment] section in record")
        return state


def deployment_dir(sd: Path, deployment_id: str) -> Path:
    return sd / deployment_id


def save(sd: Path, state: DeploymentState) -> None:
    d = deployment_dir(sd, state.deployment_id)
    d.mkdir(parents=True, exist_ok=True)
    (d / "logs").mkdir(exist_ok=True)
    tmp = d / "record.fog.tmp"
    tmp.write_text(state.to_text(), encoding="utf-8")
    os.replace(tmp, d / "record.fog")


def load(sd: Path, deployment_id: str) -> DeploymentState:
    path = deployment_dir(sd, deployment_id) / "record.fog"
    if not path.is_file():
        raise UnknownDeployment(deployment_id)
    return DeploymentState.from_text(path.read_text(encoding="utf-8"))


def list_deployments(sd: Path) -> list[str]:
    if not sd.is_dir():
        return []
    return sorted(p.parent.name for p in sd.glob("*/record.fog"))


def secret_path(sd: Path, deployment_id: str) -> Path:
    return deployment_dir(sd, deployment_id) / "secret"


def write_secret(sd: Path, deployment_id: str, secret: bytes) -> Path:
    path = secret_path(sd, deployment_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(secret)
    return path


@contextmanager
def deployment_lock(sd: Path, deployment_id: str):
    """Serializes mutating commands (launch/teardown) per deployment."""
    d = deployment_dir(sd, deployment_id)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)

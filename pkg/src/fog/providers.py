"""Pluggable instance providers.

The local provider is the tested reference: an "instance" is a sandboxed
subprocess group on loopback, rooted in a per-instance directory under
<tmp>/fog-<deployment>/<name>/{code,setup,logs}. A small supervisor process
owns the group: it applies the simulated boot delay, accepts exec requests
on a control port, and keeps every child in its session so terminate can
kill the whole group. Connections to ports outside the instance's security
rules are refused at accept time by the shared listener machinery.

The mock remote provider answers the same six operations with scripted
results and no processes; deploy skips runtime liveness checks for such
virtual instances. It exists to exercise orchestration error paths without
a network.
"""

from __future__ import annotations

import abc
import json
import os
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import transport
from .manifest import MachineSpec
from .transport import FrameConnection
from .wire import FrameKind

CONTROL_TIMEOUT = 30.0
TERMINATE_GRACE = 2.0
NODE_PORT_BLOCK = 32


class ProviderError(Exception):
    pass


@dataclass(frozen=True)
class SecurityRules:
    """Concrete inbound port allowlist for one instance."""

    ports: frozenset[int]
    peers: frozenset[str] = frozenset({"127.0.0.1"})
    control_port: int = 0
    node_port_range: tuple[int, int] = (0, 0)
    service_ports: dict = field(default_factory=dict, hash=False, compare=False)

    def as_env(self) -> str:
        return ",".join(str(p) for p in sorted(self.ports))


@dataclass
class InstanceHandle:
    deployment_id: str
    name: str
    host: str = "127.0.0.1"
    control_port: int = 0
    node_port_range: tuple[int, int] = (0, 0)
    sandbox: str = ""
    pid: int = 0
    instance_type: str = ""
    workers: int = 1
    gpu: bool = False

    @property
    def address(self) -> str:
        return f"{self.host}:{self.control_port}"


class Provider(abc.ABC):
    """The six operations a deployment needs from an instance provider."""

    name = "abstract"
    virtual = False  # True when instances carry no live processes

    @abc.abstractmethod
    def create_instance(
        self, spec: MachineSpec, rules: SecurityRules, deployment_id: str, name: str
    ) -> InstanceHandle: ...

    @abc.abstractmethod
    def address(self, handle: InstanceHandle) -> str: ...

    @abc.abstractmethod
    def push_files(self, handle: InstanceHandle, paths: list[Path], remote_root: str) -> None: ...

    @abc.abstractmethod
    def exec(
        self,
        handle: InstanceHandle,
        command: list[str],
        env: Optional[dict[str, str]] = None,
        timeout: float = CONTROL_TIMEOUT,
    ) -> tuple[int, str]: ...

    @abc.abstractmethod
    def terminate(self, handle: InstanceHandle) -> None: ...

    @abc.abstractmethod
    def list_instances(self, deployment_id: str) -> list[InstanceHandle]: ...


def instances_root(deployment_id: str) -> Path:
    return Path(tempfile.gettempdir()) / f"fog-{deployment_id}"


def allocate_node_port_block(host: str = "127.0.0.1", size: int = NODE_PORT_BLOCK) -> tuple[int, int]:
    """A contiguous loopback port block with free endpoints."""
    import random

    for _ in range(64):
        base = random.randrange(21000, 60000 - size)
        ok = True
        for probe in (base, base + size - 1):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                sock.bind((host, probe))
            except OSError:
                ok = False
            finally:
                sock.close()
            if not ok:
                break
        if ok:
            return base, base + size - 1
    raise ProviderError("cannot find a free port block")


class LocalProvider(Provider):
    """Instances as sandboxed subprocess groups on loopback."""

    name = "local"

    def create_instance(
        self, spec: MachineSpec, rules: SecurityRules, deployment_id: str, name: str
    ) -> InstanceHandle:
        sandbox = instances_root(deployment_id) / name
        for sub in ("code", "setup", "logs"):
            (sandbox / sub).mkdir(parents=True, exist_ok=True)
        control_port = rules.control_port or transport.find_free_port()
        node_range = rules.node_port_range
        if node_range == (0, 0):
            node_range = allocate_node_port_block()
        allowed = set(rules.ports) | {control_port}
        env = dict(
            os.environ,
            FOG_DEPLOYMENT=deployment_id,
            FOG_WORKERS=str(spec.workers),
            FOG_GPU="1" if spec.gpu else "0",
            FOG_ALLOWED_PORTS=",".join(str(p) for p in sorted(allowed)),
            FOG_PORT_RANGE=f"{node_range[0]}-{node_range[1]}",
        )
        log_path = sandbox / "logs" / "instance.log"
        with open(log_path, "ab") as log_fh:
            proc = subprocess.Popen(
                [
                    sys.executable,
                    "-m",
                    "fog.runners",
                    "instance",
                    "--deployment",
                    deployment_id,
                    "--name",
                    name,
                    "--control-port",
                    str(control_port),
                    "--sandbox",
                    str(sandbox),
                    "--startup-delay-ms",
                    str(spec.startup_delay_ms),
                ],
                env=env,
                cwd=str(sandbox),
                stdout=log_fh,
                stderr=log_fh,
                stdin=subprocess.DEVNULL,
                start_new_session=True,
            )
        threading.Thread(target=proc.wait, daemon=True).start()
        handle = InstanceHandle(
            deployment_id=deployment_id,
            name=name,
            control_port=control_port,
            node_port_range=node_range,
            sandbox=str(sandbox),
            pid=proc.pid,
            instance_type=spec.instance_type,
            workers=spec.workers,
            gpu=spec.gpu,
        )
        deadline = time.monotonic() + 10.0 + spec.startup_delay_ms / 1000
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                raise ProviderError(
                    f"instance {name} exited at boot (see {log_path})"
                )
            try:
                code, _ = self._control(handle, {"op": "ping"}, timeout=1.0)
                if code == 0:
                    break
            except (OSError, ProviderError):
                time.sleep(0.05)
        else:
            proc.kill()
            raise ProviderError(f"instance {name} never became ready")
        self._write_marker(handle)
        return handle

    def address(self, handle: InstanceHandle) -> str:
        return handle.address

    def push_files(self, handle: InstanceHandle, paths: list[Path], remote_root: str) -> None:
        dest_root = Path(handle.sandbox) / remote_root
        dest_root.mkdir(parents=True, exist_ok=True)
        for path in paths:
            path = Path(path)
            if not path.exists():
                raise ProviderError(f"push source {path} does not exist")
            dest = dest_root / path.name
            if path.is_dir():
                shutil.copytree(path, dest, dirs_exist_ok=True)
            else:
                shutil.copy2(path, dest)

    def exec(
        self,
        handle: InstanceHandle,
        command: list[str],
        env: Optional[dict[str, str]] = None,
        timeout: float = CONTROL_TIMEOUT,
    ) -> tuple[int, str]:
        return self._control(
            handle,
            {"op": "exec", "cmd": list(command), "env": env or {}, "timeout": timeout},
            timeout=timeout + 5.0,
        )

    def terminate(self, handle: InstanceHandle) -> None:
        try:
            self._control(handle, {"op": "shutdown"}, timeout=1.0)
        except (OSError, ProviderError):
            pass
        if handle.pid:
            _kill_group(handle.pid)
        marker = Path(handle.sandbox) / "instance.fog"
        try:
            marker.unlink()
        except OSError:
            pass

    def list_instances(self, deployment_id: str) -> list[InstanceHandle]:
        out = []
        root = instances_root(deployment_id)
        for marker in sorted(root.glob("*/instance.fog")):
            try:
                fields = dict(
                    line.split(" = ", 1)
                    for line in marker.read_text().splitlines()
                    if " = " in line
                )
                handle = InstanceHandle(
                    deployment_id=deployment_id,
                    name=fields["name"],
                    control_port=int(fields["control_port"]),
                    node_port_range=tuple(int(p) for p in fields["node_ports"].split("-")),
                    sandbox=fields["sandbox"],
                    pid=int(fields["pid"]),
                    instance_type=fields.get("instance_type", ""),
                    workers=int(fields.get("workers", 1)),
                    gpu=fields.get("gpu") == "1",
                )
            except (KeyError, ValueError):
                continue
            if _pid_alive(handle.pid):
                out.append(handle)
            else:
                try:
                    marker.unlink()
                except OSError:
                    pass
        return out

    def _write_marker(self, handle: InstanceHandle) -> None:
        lines = [
            "[instance]",
            f"name = {handle.name}",
            f"pid = {handle.pid}",
            f"control_port = {handle.control_port}",
            f"node_ports = {handle.node_port_range[0]}-{handle.node_port_range[1]}",
            f"sandbox = {handle.sandbox}",
            f"instance_type = {handle.instance_type}",
            f"workers = {handle.workers}",
            f"gpu = {'1' if handle.gpu else '0'}",
        ]
        (Path(handle.sandbox) / "instance.fog").write_text("\n".join(lines) + "\n")

    def _control(self, handle: InstanceHandle, request: dict, timeout: float) -> tuple[int, str]:
        sock = socket.create_connection((handle.host, handle.control_port), timeout=min(timeout, 5.0))
        conn = FrameConnection(sock)
        try:
            conn.send_json(FrameKind.CTRL, request)
            kind, body = conn.recv(timeout=timeout)
            reply = json.loads(body.decode("utf-8"))
            if not reply.get("ok", False):
                raise ProviderError(reply.get("error", "instance control failure"))
            return int(reply.get("exit", 0)), reply.get("output", "")
        finally:
            conn.close()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
        return True
    except ProcessLookupError:
        return False
    except PermissionError:
        return True


def _kill_group(pid: int, grace: float = TERMINATE_GRACE) -> None:
    """SIGTERM the process group, escalate to SIGKILL after the grace period."""
    try:
        pgid = os.getpgid(pid)
    except ProcessLookupError:
        return
    try:
        os.killpg(pgid, signal.SIGTERM)
    except ProcessLookupError:
        return
    deadline = time.monotonic() + grace
    while time.monotonic() < deadline:
        if not _pid_alive(pid):
            return
        time.sleep(0.05)
    try:
        os.killpg(pgid, signal.SIGKILL)
    except ProcessLookupError:
        pass


class MockRemoteProvider(Provider):
    """Scripted provider for orchestration error-path tests; no processes."""

    name = "mock-remote"
    virtual = True

    def __init__(
        self,
        fail_create: bool = False,
        fail_push: bool = False,
        fail_exec_matching: Optional[str] = None,
    ):
        self.fail_create = fail_create
        self.fail_push = fail_push
        self.fail_exec_matching = fail_exec_matching
        self.instances: dict[str, InstanceHandle] = {}
        self.calls: list[tuple] = []
        self._next_pid = 50_000

    def create_instance(self, spec, rules, deployment_id, name):
        self.calls.append(("create_instance", name, spec.instance_type))
        if self.fail_create:
            raise ProviderError("scripted create failure")
        handle = InstanceHandle(
            deployment_id=deployment_id,
            name=name,
            control_port=transport.find_free_port(),
            node_port_range=rules.node_port_range,
            sandbox=str(instances_root(deployment_id) / name),
            pid=0,
            instance_type=spec.instance_type,
            workers=spec.workers,
            gpu=spec.gpu,
        )
        self.instances[name] = handle
        return handle

    def address(self, handle):
        return handle.address

    def push_files(self, handle, paths, remote_root):
        self.calls.append(("push_files", handle.name, [str(p) for p in paths], remote_root))
        if self.fail_push:
            raise ProviderError("scripted push failure")

    def exec(self, handle, command, env=None, timeout=CONTROL_TIMEOUT):
        self.calls.append(("exec", handle.name, list(command)))
        if self.fail_exec_matching and any(self.fail_exec_matching in part for part in command):
            return 1, "scripted exec failure"
        self._next_pid += 1
        return 0, f"pid={self._next_pid}"

    def terminate(self, handle):
        self.calls.append(("terminate", handle.name))
        self.instances.pop(handle.name, None)

    def list_instances(self, deployment_id):
        return [h for h in self.instances.values() if h.deployment_id == deployment_id]


def get_provider(name: str) -> Provider:
    if name == "local":
        return LocalProvider()
    if name == "mock-remote":
        return MockRemoteProvider()
    raise ProviderError(f"unknown provider {name!r}")

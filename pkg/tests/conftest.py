"""Shared helpers for the integration-leaning tests."""

import socket
import time

import psutil
import pytest

from fog.providers import LocalProvider, Provider


def wait_for(predicate, timeout=10.0, interval=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def port_refuses(port: int, host: str = "127.0.0.1") -> bool:
    """True when nothing is serving: connection refused or instant close."""
    try:
        sock = socket.create_connection((host, port), timeout=0.5)
    except OSError:
        return True
    try:
        sock.settimeout(0.5)
        return sock.recv(1) == b""
    except socket.timeout:
        return False
    except OSError:
        return True
    finally:
        sock.close()


def deployment_processes(deployment_id: str) -> list[int]:
    """Live (non-zombie) processes tagged with this deployment id."""
    found = []
    for proc in psutil.process_iter(["pid", "cmdline", "status"]):
        try:
            if proc.info["status"] == psutil.STATUS_ZOMBIE:
                continue
            cmdline = proc.info["cmdline"] or []
            # the tag is always the argv pair "--deployment <id>"
            if "--deployment" in cmdline:
                idx = cmdline.index("--deployment")
                if idx + 1 < len(cmdline) and cmdline[idx + 1] == deployment_id:
                    found.append(proc.info["pid"])
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            continue
    return found


class FaultyProvider(Provider):
    """LocalProvider wrapper that injects one failure at a chosen step.

    Step mapping: 1 = create_instance, 2 = first push_files, 3 = setup
    script exec (bash), 4 = networking spawns (registry/proxy/netmon),
    5 = node/container spawns.
    """

    name = "local"
    virtual = False

    def __init__(self, fail_step: int):
        self.inner = LocalProvider()
        self.fail_step = fail_step

    def create_instance(self, spec, rules, deployment_id, name):
        if self.fail_step == 1:
            raise RuntimeError("injected provision failure")
        return self.inner.create_instance(spec, rules, deployment_id, name)

    def address(self, handle):
        return self.inner.address(handle)

    def push_files(self, handle, paths, remote_root):
        if self.fail_step == 2 and remote_root == "code":
            raise RuntimeError("injected push failure")
        return self.inner.push_files(handle, paths, remote_root)

    def exec(self, handle, command, env=None, timeout=30.0):
        tokens = set(command)
        if self.fail_step == 3 and command and command[0] == "bash":
            return 1, "injected setup failure"
        if self.fail_step == 4 and tokens & {"registry", "proxy", "netmon"}:
            raise RuntimeError("injected networking failure")
        if self.fail_step == 5 and tokens & {"node", "container"}:
            raise RuntimeError("injected launch failure")
        return self.inner.exec(handle, command, env=env, timeout=timeout)

    def terminate(self, handle):
        return self.inner.terminate(handle)

    def list_instances(self, deployment_id):
        return self.inner.list_instances(deployment_id)


@pytest.fixture
def fast_env(monkeypatch):
    """Speed up heartbeats/backoff in every spawned process."""
    monkeypatch.setenv("FOG_BACKOFF_INITIAL_MS", "50")
    monkeypatch.setenv("FOG_BACKOFF_CAP_MS", "500")
    monkeypatch.setenv("FOG_PING_INTERVAL_S", "0.5")
    monkeypatch.setenv("FOG_LIVENESS_TIMEOUT_S", "2.0")

"""Deployment orchestration: plan, execute, and dismantle a manifest.

Every cloud group goes through the same five ordered steps:

    1. provision an instance with its security rules
    2. push the collected packages (or pull the container image)
    3. run the environment setup script, when one is given
    4. establish networking: the shared registry for direct groups, or the
       cloud registry + proxy pair for proxied groups
    5. launch the nodes (or run the container)

Edge nodes launch on the host in parallel with step 5. Failure at any step
marks the deployment FAILED and rolls back automatically: instances are
terminated, launched processes killed, and a tag sweep catches stragglers,
so a failed launch never leaves anything running or billing.
"""

from __future__ import annotations

import json
import logging
import os
import secrets as secrets_mod
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import psutil

from . import channel as channel_mod
from . import state as state_mod
from . import transport
from .manifest import (
    NETWORK_PROXY,
    CloudGroupSpec,
    LaunchManifest,
    MachineSpec,
    collect_packages,
    render_manifest,
    validate,
)
from .providers import (
    InstanceHandle,
    Provider,
    ProviderError,
    SecurityRules,
    allocate_node_port_block,
)
from .state import (
    FAILED,
    NETWORKING,
    PROVISIONING,
    PUSHING,
    RUNNING,
    SETUP,
    TORN_DOWN,
    DeploymentState,
    GroupRuntime,
)

log = logging.getLogger(__name__)

STEP_NAMES = {1: "provision", 2: "push", 3: "setup", 4: "network", 5: "launch"}
_READY_TIMEOUT = 15.0

Progress = Callable[[int, Optional[str], bool, str], None]


class InvalidManifest(Exception):
    def __init__(self, diagnostics):
        super().__init__("; ".join(d.message for d in diagnostics))
        self.diagnostics = diagnostics


class AlreadyDeployed(Exception):
    pass


class StepFailed(Exception):
    def __init__(self, step: int, group: Optional[str], cause: str):
        super().__init__(f"step {step} ({STEP_NAMES.get(step, '?')}) failed"
                         f"{' for group ' + group if group else ''}: {cause}")
        self.step = step
        self.group = group
        self.cause = cause


@dataclass(frozen=True)
class PlanStep:
    index: int  # 1..5; edge launch is index 5 with group None
    group: Optional[str]
    kind: str
    description: str


@dataclass
class DeploymentPlan:
    manifest: LaunchManifest
    catalog: dict[str, MachineSpec]
    base_dir: Path
    steps: list[PlanStep] = field(default_factory=list)

    @property
    def proxy_groups(self) -> list[CloudGroupSpec]:
        return [g for g in self.manifest.groups.values() if g.network == NETWORK_PROXY]


def plan_deployment(
    m: LaunchManifest,
    catalog: dict[str, MachineSpec],
    base_dir: "str | Path" = ".",
) -> DeploymentPlan:
    """Expand a validated manifest into the ordered step list."""
    base = Path(base_dir)
    diagnostics = validate(m, catalog, base_dir=base)
    if diagnostics:
        raise InvalidManifest(diagnostics)
    plan = DeploymentPlan(manifest=m, catalog=catalog, base_dir=base)
    for g in m.groups.values():
        plan.steps.append(PlanStep(1, g.name, "provision", f"provision {g.instance_type}"))
        if g.image:
            plan.steps.append(PlanStep(2, g.name, "pull-image", f"pull image {g.image}"))
        else:
            pkgs = sorted(collect_packages(m).get(g.name, ()))
            plan.steps.append(PlanStep(2, g.name, "push", f"push packages {', '.join(pkgs) or '(none)'}"))
        if g.setup_script:
            plan.steps.append(PlanStep(3, g.name, "setup", f"run {g.setup_script}"))
        else:
            plan.steps.append(PlanStep(3, g.name, "skip-setup", "no setup script"))
        plan.steps.append(
            PlanStep(4, g.name, "network", "proxy pair" if g.network == NETWORK_PROXY else "direct overlay")
        )
        if g.image:
            plan.steps.append(PlanStep(5, g.name, "run-container", f"run {g.image}"))
        else:
            nodes = [n.name for n in m.cloud_nodes(g.name)]
            plan.steps.append(PlanStep(5, g.name, "launch", f"launch {', '.join(nodes) or '(none)'}"))
    plan.steps.append(PlanStep(5, None, "edge-launch", f"launch {', '.join(n.name for n in m.edge_nodes()) or '(none)'}"))
    return plan


def _runner_cmd(kind: str, deployment_id: str, *args: str) -> list[str]:
    return [sys.executable, "-m", "fog.runners", kind, "--deployment", deployment_id, *args]


def _spawn_host(cmd: list[str], env: dict[str, str], log_path: Path) -> int:
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "ab") as fh:
        proc = subprocess.Popen(
            cmd,
            env={**os.environ, **env},
            stdout=fh,
            stderr=fh,
            stdin=subprocess.DEVNULL,
            start_new_session=True,
        )
    # Reap on exit so pid-liveness checks never see a zombie.
    threading.Thread(target=proc.wait, daemon=True).start()
    return proc.pid


def _spawn_in_instance(
    provider: Provider,
    handle: InstanceHandle,
    inner_cmd: list[str],
    env: dict[str, str],
    log_name: str,
) -> int:
    """Launch a long-running command inside the instance; returns its pid."""
    log_path = f"{handle.sandbox}/logs/{log_name}.log"
    code, output = provider.exec(
        handle,
        [sys.executable, "-m", "fog.runners", "spawn", "--log", log_path, "--", *inner_cmd],
        env=env,
    )
    if code != 0 or "pid=" not in output:
        raise ProviderError(f"spawn of {log_name} failed: {output.strip()[:500]}")
    return int(output.strip().rsplit("pid=", 1)[1].split()[0])


def _wait_port(address: str, timeout: float, what: str) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            conn = transport.connect(address, timeout=1.0)
            conn.close()
            return
        except OSError:
            time.sleep(0.05)
    raise ProviderError(f"{what} at {address} never became reachable")


def _wait_proxy_established(stats_path: Path, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            stats = json.loads(stats_path.read_text())
            if stats.get("established"):
                return
            if stats.get("fatal_error"):
                raise ProviderError(f"proxy failed: {stats['fatal_error']}")
        except (OSError, json.JSONDecodeError):
            pass
        time.sleep(0.1)
    raise ProviderError("proxy channel never established")


def _pid_alive_local(pid: int) -> bool:
    try:
        os.kill(pid, 0)
        return True
    except ProcessLookupError:
        return False
    except PermissionError:
        return True


def deploy(
    plan: DeploymentPlan,
    provider: Provider,
    state_dir: "str | Path",
    deployment_id: Optional[str] = None,
    trace: bool = False,
    progress: Optional[Progress] = None,
) -> DeploymentState:
    """Run the plan to RUNNING, or FAILED with automatic rollback."""
    sd = state_mod.state_dir(state_dir)
    dep_id = deployment_id or secrets_mod.token_hex(4)
    report = progress or (lambda *a: None)

    with state_mod.deployment_lock(sd, dep_id):
        try:
            existing = state_mod.load(sd, dep_id)
        except state_mod.UnknownDeployment:
            existing = None
        if existing is not None and existing.status != TORN_DOWN:
            raise AlreadyDeployed(f"deployment {dep_id} is {existing.status}")

        m = plan.manifest
        secret = channel_mod.generate_secret()
        secret_file = state_mod.write_secret(sd, dep_id, secret)
        st = DeploymentState(
            deployment_id=dep_id,
            status=PROVISIONING,
            provider=provider.name,
            trace=trace,
            secret_id=channel_mod.secret_id(secret),
        )
        dep_dir = state_mod.deployment_dir(sd, dep_id)
        dep_dir.mkdir(parents=True, exist_ok=True)
        (dep_dir / "manifest.fog").write_text(render_manifest(m), encoding="utf-8")
        st.manifest_path = str(dep_dir / "manifest.fog")
        for g in m.groups.values():
            st.groups[g.name] = GroupRuntime(
                name=g.name, network=g.network, instance_type=g.instance_type, image=g.image or ""
            )
        state_mod.save(sd, st)

        handles: dict[str, InstanceHandle] = {}
        base_env = {"FOG_TRACE": "1" if trace else "0", "FOG_DEPLOYMENT": dep_id}
        logs = dep_dir / "logs"

        def fail(step: int, group: Optional[str], cause: str):
            report(step, group, False, cause)
            st.status = FAILED
            st.error = f"step {step}: {cause}"
            state_mod.save(sd, st)
            _rollback(provider, dep_id, st, handles)
            state_mod.save(sd, st)
            raise StepFailed(step, group, cause)

        def run_step_for_groups(step: int, fn):
            """One step across all groups, concurrently; first failure wins.

            Every group's attempt runs to completion before any rollback, so
            rollback never races a half-created instance.
            """
            groups = list(m.groups.values())
            if not groups:
                return
            outcomes: dict[str, tuple[bool, str]] = {}
            with ThreadPoolExecutor(max_workers=max(1, len(groups))) as pool:
                futures = {g.name: pool.submit(fn, g) for g in groups}
                for name, future in futures.items():
                    try:
                        outcomes[name] = (True, future.result() or "")
                    except Exception as exc:  # noqa: BLE001 - converted to StepFailed
                        outcomes[name] = (False, str(exc))
            for name, (ok, detail) in outcomes.items():
                if ok:
                    report(step, name, True, detail)
            for name, (ok, detail) in outcomes.items():
                if not ok:
                    fail(step, name, detail)

        # -- step 1: provision --------------------------------------------------
        def provision_group(g: CloudGroupSpec) -> str:
            spec = plan.catalog[g.instance_type]
            control_port = transport.find_free_port()
            base, top = allocate_node_port_block()
            service_ports = {}
            node_range = (base, top)
            if g.network == NETWORK_PROXY and g.name == plan.proxy_groups[0].name:
                service_ports = {"registry": base, "channel": base + 1}
                node_range = (base + 2, top)
            rules = SecurityRules(
                ports=frozenset({control_port, *range(base, top + 1)}),
                control_port=control_port,
                node_port_range=node_range,
                service_ports=service_ports,
            )
            handle = provider.create_instance(spec, rules, dep_id, g.name)
            handles[g.name] = handle
            gr = st.groups[g.name]
            gr.sandbox = handle.sandbox
            gr.control_port = handle.control_port
            gr.ports = sorted({control_port, *range(base, top + 1)})
            if service_ports:
                gr.registry_address = f"127.0.0.1:{service_ports['registry']}"
                gr.channel_port = service_ports["channel"]
            return f"{g.instance_type} at {provider.address(handle)}"

        run_step_for_groups(1, provision_group)
        st.status = PUSHING
        state_mod.save(sd, st)

        # -- step 2: push code / pull image -------------------------------------
        packages = collect_packages(m)

        def push_group(g: CloudGroupSpec) -> str:
            handle = handles[g.name]
            if g.image:
                code, output = provider.exec(
                    handle,
                    _runner_cmd("pull-image", dep_id, "--sandbox", handle.sandbox, "--image", g.image),
                )
                if code != 0:
                    raise ProviderError(f"image pull failed: {output.strip()[:300]}")
                return f"pulled {g.image}"
            dirs = []
            for pkg in sorted(packages.get(g.name, ())):
                if pkg == "builtin":
                    continue  # ships with the installed library
                path = plan.base_dir / pkg
                if not path.is_dir():
                    raise ProviderError(f"package directory {path} not found")
                dirs.append(path)
            provider.push_files(handle, dirs, "code")
            return f"pushed {len(dirs)} package(s)"

        run_step_for_groups(2, push_group)
        st.status = SETUP
        state_mod.save(sd, st)

        # -- step 3: setup script ------------------------------------------------
        def setup_group(g: CloudGroupSpec) -> str:
            if not g.setup_script:
                return "no setup script"
            handle = handles[g.name]
            script = plan.base_dir / g.setup_script
            provider.push_files(handle, [script], "setup")
            code, output = provider.exec(
                handle, ["bash", f"{handle.sandbox}/setup/{script.name}"], env=base_env
            )
            if code != 0:
                raise ProviderError(f"setup script exited {code}: {output.strip()[:300]}")
            return f"ran {g.setup_script}"

        run_step_for_groups(3, setup_group)
        st.status = NETWORKING
        state_mod.save(sd, st)

        # -- step 4: networking ----------------------------------------------------
        edge_registry_port = transport.find_free_port()
        st.edge_registry = f"127.0.0.1:{edge_registry_port}"
        try:
            st.edge_registry_pid = _spawn_host(
                _runner_cmd("registry", dep_id, "--port", str(edge_registry_port)),
                base_env,
                logs / "registry.log",
            )
            if not provider.virtual:
                _wait_port(st.edge_registry, _READY_TIMEOUT, "edge registry")
        except (ProviderError, OSError) as exc:
            fail(4, None, f"edge registry: {exc}")
        st.listen_ports.append(edge_registry_port)

        proxy_groups = plan.proxy_groups
        topic_policy_args: list[str] = []
        if proxy_groups and all(g.topics for g in proxy_groups):
            merged = sorted({t for g in proxy_groups for t in g.topics})
            topic_policy_args = ["--topics", ",".join(merged)]

        def network_group(g: CloudGroupSpec) -> str:
            handle = handles[g.name]
            gr = st.groups[g.name]
            if g.network != NETWORK_PROXY:
                pid = _spawn_in_instance(
                    provider,
                    handle,
                    _runner_cmd("netmon", dep_id, "--registry", st.edge_registry),
                    {**base_env, "FOG_ORIGIN": "cloud", "FOG_MASTER": st.edge_registry},
                    "netmon",
                )
                gr.node_pids["fogmon"] = pid
                return "direct overlay (shared edge registry)"
            host_group = proxy_groups[0]
            if g.name != host_group.name:
                return f"proxied via group {host_group.name}"
            host_handle = handles[host_group.name]
            host_gr = st.groups[host_group.name]
            registry_port = transport.split_address(host_gr.registry_address)[1]
            provider.push_files(host_handle, [secret_file], "setup")
            gr.node_pids["fogreg"] = _spawn_in_instance(
                provider,
                host_handle,
                _runner_cmd("registry", dep_id, "--port", str(registry_port)),
                base_env,
                "registry",
            )
            if not provider.virtual:
                _wait_port(host_gr.registry_address, _READY_TIMEOUT, "cloud registry")
            gr.node_pids["fogproxy"] = _spawn_in_instance(
                provider,
                host_handle,
                _runner_cmd(
                    "proxy",
                    dep_id,
                    "--side", "cloud",
                    "--registry", host_gr.registry_address,
                    "--secret-file", f"{host_handle.sandbox}/setup/secret",
                    "--channel-listen", str(host_gr.channel_port),
                    "--stats", f"{host_handle.sandbox}/logs/proxy-stats.json",
                    *topic_policy_args,
                ),
                base_env,
                "proxy",
            )
            st.edge_proxy_pid = _spawn_host(
                _runner_cmd(
                    "proxy",
                    dep_id,
                    "--side", "edge",
                    "--registry", st.edge_registry,
                    "--secret-file", str(secret_file),
                    "--channel-connect", f"127.0.0.1:{host_gr.channel_port}",
                    "--stats", str(logs / "proxy-edge-stats.json"),
                    *topic_policy_args,
                ),
                base_env,
                logs / "proxy-edge.log",
            )
            if not provider.virtual:
                _wait_proxy_established(logs / "proxy-edge-stats.json", _READY_TIMEOUT)
            return "proxy pair established"

        run_step_for_groups(4, network_group)
        if not proxy_groups and m.groups and not provider.virtual:
            st.edge_netmon_pid = _spawn_host(
                _runner_cmd("netmon", dep_id, "--registry", st.edge_registry),
                {**base_env, "FOG_ORIGIN": "edge"},
                logs / "netmon.log",
            )
        state_mod.save(sd, st)

        # -- step 5: launch ----------------------------------------------------------
        def launch_group(g: CloudGroupSpec) -> str:
            handle = handles[g.name]
            gr = st.groups[g.name]
            master = (
                st.groups[proxy_groups[0].name].registry_address
                if g.network == NETWORK_PROXY
                else st.edge_registry
            )
            env = {**base_env, "FOG_MASTER": master, "FOG_ORIGIN": "cloud"}
            if g.image:
                gr.node_pids[g.name] = _spawn_in_instance(
                    provider,
                    handle,
                    _runner_cmd("container", dep_id, "--name", g.name, "--image", g.image),
                    env,
                    f"container-{g.name}",
                )
                return f"container {g.image}"
            for n in m.cloud_nodes(g.name):
                gr.node_pids[n.name] = _spawn_in_instance(
                    provider,
                    handle,
                    _runner_cmd(
                        "node",
                        dep_id,
                        "--name", n.name,
                        "--package", n.package,
                        "--exec", n.exec,
                        "--code-root", f"{handle.sandbox}/code",
                        "--", *n.args,
                    ),
                    {**env, "FOG_NODE_NAME": n.name},
                    f"node-{n.name}",
                )
            return f"launched {len(m.cloud_nodes(g.name))} node(s)"

        run_step_for_groups(5, launch_group)

        try:
            for n in m.edge_nodes():
                st.edge_node_pids[n.name] = _spawn_host(
                    _runner_cmd(
                        "node",
                        dep_id,
                        "--name", n.name,
                        "--package", n.package,
                        "--exec", n.exec,
                        "--code-root", str(plan.base_dir),
                        "--", *n.args,
                    ),
                    {
                        **base_env,
                        "FOG_MASTER": st.edge_registry,
                        "FOG_ORIGIN": "edge",
                        "FOG_NODE_NAME": n.name,
                    },
                    logs / f"node-{n.name}.log",
                )
        except OSError as exc:
            fail(5, None, f"edge launch: {exc}")
        report(5, None, True, f"launched {len(m.edge_nodes())} edge node(s)")

        if not provider.virtual:
            time.sleep(0.4)
            for name, pid in st.edge_node_pids.items():
                if not _pid_alive_local(pid):
                    fail(5, None, f"edge node {name} exited at launch (see logs)")
            for g in m.groups.values():
                for name, pid in st.groups[g.name].node_pids.items():
                    code, _ = provider.exec(
                        handles[g.name],
                        [sys.executable, "-c", "import os,sys; os.kill(int(sys.argv[1]), 0)", str(pid)],
                    )
                    if code != 0:
                        fail(5, g.name, f"process {name} (pid {pid}) died at launch")

        st.status = RUNNING
        for gr in st.groups.values():
            st.listen_ports.extend(gr.ports)
        state_mod.save(sd, st)
        return st


def _rollback(
    provider: Provider,
    deployment_id: str,
    st: DeploymentState,
    handles: dict[str, InstanceHandle],
) -> None:
    for pid in st.host_pids():
        _kill_pid(pid)
    seen = set()
    for handle in list(handles.values()) + provider.list_instances(deployment_id):
        if handle.name in seen:
            continue
        seen.add(handle.name)
        try:
            provider.terminate(handle)
        except Exception:
            log.exception("rollback: terminate %s failed", handle.name)
    sweep_deployment_processes(deployment_id)


def _kill_pid(pid: int, grace: float = 1.0) -> None:
    if pid <= 0:
        return
    try:
        proc = psutil.Process(pid)
        proc.terminate()
        try:
            proc.wait(grace)
        except psutil.TimeoutExpired:
            proc.kill()
    except psutil.NoSuchProcess:
        pass


def sweep_deployment_processes(deployment_id: str) -> list[int]:
    """Kill any process whose argv tags it with this deployment."""
    killed = []
    for proc in psutil.process_iter(["pid", "cmdline"]):
        try:
            cmdline = proc.info["cmdline"] or []
            if "--deployment" in cmdline:
                idx = cmdline.index("--deployment")
                if idx + 1 < len(cmdline) and cmdline[idx + 1] == deployment_id:
                    proc.kill()
                    killed.append(proc.info["pid"])
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            continue
    return killed


def teardown(
    deployment_id: str,
    provider: Optional[Provider] = None,
    state_dir: "str | Path | None" = None,
) -> tuple[DeploymentState, list[str]]:
    """Stop processes, terminate instances, revoke credentials. Idempotent."""
    from .providers import get_provider

    sd = state_mod.state_dir(state_dir)
    with state_mod.deployment_lock(sd, deployment_id):
        st = state_mod.load(sd, deployment_id)
        if st.status == TORN_DOWN:
            return st, []
        provider = provider or get_provider(st.provider)
        errors: list[str] = []
        for pid in st.host_pids():
            try:
                _kill_pid(pid)
            except Exception as exc:  # noqa: BLE001 - collected, not fatal
                errors.append(f"kill {pid}: {exc}")
        for handle in provider.list_instances(deployment_id):
            try:
                provider.terminate(handle)
            except Exception as exc:
                errors.append(f"terminate {handle.name}: {exc}")
        sweep_deployment_processes(deployment_id)
        try:
            state_mod.secret_path(sd, deployment_id).unlink()
        except OSError:
            pass
        st.status = TORN_DOWN
        state_mod.save(sd, st)
        return st, errors

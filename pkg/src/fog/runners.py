"""Process entry points for everything a deployment spawns.

    python -m fog.runners instance   --deployment D --name N --control-port P --sandbox DIR
    python -m fog.runners registry   --port P [--liveness S]
    python -m fog.runners proxy      --side edge|cloud --registry H:P --secret-file F
                                     (--channel-listen P | --channel-connect H:P) [...]
    python -m fog.runners netmon     --registry H:P [--interval S]
    python -m fog.runners node       --name N --package P --exec E --code-root DIR [args...]
    python -m fog.runners container  --name N --image IMG
    python -m fog.runners spawn      --log FILE -- CMD ...
    python -m fog.runners pull-image --sandbox DIR --image IMG

Every runner takes --deployment so its argv tags it as belonging to one
deployment; teardown sweeps stragglers by that tag. Runners exit cleanly on
SIGTERM. The proxy runner additionally treats SIGUSR1 as a chaos hook that
simulates a network interruption on the channel.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import runpy
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

from . import transport
from .node import Backoff, Node
from .registry import RegistryServer
from .transport import FrameConnection, Listener
from .wire import FrameKind

log = logging.getLogger("fog.runners")

_EXEC_OUTPUT_CAP = 65_536


def _install_sigterm(cleanup=None):
    stop = threading.Event()

    def handler(signum, frame):
        if cleanup:
            try:
                cleanup()
            except Exception:
                pass
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    return stop


def run_instance(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="fog.runners instance")
    parser.add_argument("--deployment", required=True)
    parser.add_argument("--name", required=True)
    parser.add_argument("--control-port", type=int, required=True)
    parser.add_argument("--sandbox", required=True)
    parser.add_argument("--startup-delay-ms", type=int, default=0)
    args = parser.parse_args(argv)
    time.sleep(args.startup_delay_ms / 1000)  # simulated machine boot

    sandbox = Path(args.sandbox)
    allowed = transport.allowed_ports_from_env()

    def handle(conn: FrameConnection, peer: str) -> None:
        try:
            while True:
                kind, body = conn.recv()
                if kind is not FrameKind.CTRL:
                    continue
                request = json.loads(body.decode("utf-8"))
                op = request.get("op")
                if op == "ping":
                    conn.send_json(FrameKind.CTRL, {"ok": True})
                elif op == "exec":
                    conn.send_json(FrameKind.CTRL, _exec_request(sandbox, request))
                elif op == "shutdown":
                    conn.send_json(FrameKind.CTRL, {"ok": True})
                    os._exit(0)
                else:
                    conn.send_json(FrameKind.CTRL, {"ok": False, "error": f"unknown op {op!r}"})
        except Exception:
            pass
        finally:
            conn.close()

    listener = Listener(handle, port=args.control_port, allowed_ports=allowed, name="instance-ctl")
    stop = _install_sigterm(listener.close)
    stop.wait()
    return 0


def _exec_request(sandbox: Path, request: dict) -> dict:
    env = dict(os.environ)
    env.update({str(k): str(v) for k, v in (request.get("env") or {}).items()})
    try:
        proc = subprocess.run(
            request["cmd"],
            cwd=str(sandbox),
            env=env,
            capture_output=True,
            text=True,
            timeout=float(request.get("timeout", 60)),
        )
        output = (proc.stdout + proc.stderr)[:_EXEC_OUTPUT_CAP]
        return {"ok": True, "exit": proc.returncode, "output": output}
    except subprocess.TimeoutExpired:
        return {"ok": True, "exit": 124, "output": "exec timed out"}
    except OSError as exc:
        return {"ok": True, "exit": 127, "output": str(exc)}


def run_registry(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="fog.runners registry")
    parser.add_argument("--deployment", default="")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--liveness", type=float, default=float(os.environ.get("FOG_LIVENESS_TIMEOUT_S", 6.0)))
    args = parser.parse_args(argv)
    server = RegistryServer(port=args.port, liveness_timeout=args.liveness,
                            allowed_ports=transport.allowed_ports_from_env())
    log.info("registry listening on %s", server.address)
    stop = _install_sigterm(server.close)
    stop.wait()
    return 0


def run_proxy(argv: list[str]) -> int:
    from .bridge import ProxyEndpoint, TopicPolicy

    parser = argparse.ArgumentParser(prog="fog.runners proxy")
    parser.add_argument("--deployment", default="")
    parser.add_argument("--side", choices=("edge", "cloud"), required=True)
    parser.add_argument("--registry", required=True)
    parser.add_argument("--secret-file", required=True)
    parser.add_argument("--channel-listen", type=int)
    parser.add_argument("--channel-connect")
    parser.add_argument("--topics", default="")
    parser.add_argument("--poll-ms", type=int, default=500)
    parser.add_argument("--stats", default="")
    parser.add_argument("--trace", action="store_true")
    args = parser.parse_args(argv)

    secret = Path(args.secret_file).read_bytes()
    topics = tuple(t for t in args.topics.split(",") if t) or None
    policy = TopicPolicy(topics=topics, poll_interval=args.poll_ms / 1000)
    endpoint = ProxyEndpoint(
        side=args.side,
        registry=args.registry,
        secret=secret,
        channel_listen_port=args.channel_listen,
        channel_connect=args.channel_connect,
        policy=policy,
        trace=args.trace or os.environ.get("FOG_TRACE") == "1",
        stats_path=args.stats or None,
        backoff=Backoff.from_env(),
        port_range=transport.port_range_from_env(),
        allowed_ports=transport.allowed_ports_from_env(),
    )

    def chaos(signum, frame):
        blackout = float(os.environ.get("FOG_FAULT_BLACKOUT_MS", 2000)) / 1000
        log.warning("chaos hook: dropping channel for %.1fs", blackout)
        endpoint.inject_channel_fault(blackout)

    signal.signal(signal.SIGUSR1, chaos)
    stop = _install_sigterm(endpoint.close)
    while not stop.wait(0.5):
        if endpoint.fatal_error:
            log.error("proxy fatal: %s", endpoint.fatal_error)
            endpoint.close()
            return 3
    return 0


def run_netmon(argv: list[str]) -> int:
    from .netmon import NetMonitor

    parser = argparse.ArgumentParser(prog="fog.runners netmon")
    parser.add_argument("--deployment", default="")
    parser.add_argument("--registry", required=True)
    parser.add_argument("--name", default=f"fogmon-{os.getpid()}")
    parser.add_argument("--interval", type=float, default=1.0)
    args = parser.parse_args(argv)
    node = Node(
        name=args.name,
        registry=args.registry,
        origin=os.environ.get("FOG_ORIGIN", "edge"),
        backoff=Backoff.from_env(),
        port_range=transport.port_range_from_env(),
        allowed_ports=transport.allowed_ports_from_env(),
    )
    # Without a tunnel the overlay probe path is the registry round trip,
    # and there is no channel whose bytes could be metered.
    monitor = NetMonitor(
        node,
        probe_rtt=lambda: _safe_ping(node),
        counters=lambda: (0, 0),
        interval=args.interval,
    )
    monitor.start()
    stop = _install_sigterm(node.close)
    stop.wait()
    monitor.stop()
    return 0


def _safe_ping(node: Node):
    try:
        return node.ping_registry()
    except Exception:
        return None


def run_node(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="fog.runners node")
    parser.add_argument("--deployment", default="")
    parser.add_argument("--name", required=True)
    parser.add_argument("--package", required=True)
    parser.add_argument("--exec", dest="entry", required=True)
    parser.add_argument("--code-root", default=".")
    # node args follow a "--" separator so they may carry their own flags
    if "--" in argv:
        split = argv.index("--")
        argv, user_args = argv[:split], argv[split + 1 :]
    else:
        user_args = []
    args = parser.parse_args(argv)
    args.args = user_args
    os.environ.setdefault("FOG_NODE_NAME", args.name)
    if args.package == "builtin":
        from . import workloads

        return workloads.run_builtin(args.entry, args.args)
    script = Path(args.code_root) / args.package / args.entry
    if not script.is_file():
        log.error("node %s: entry %s not found", args.name, script)
        return 2
    sys.argv = [str(script)] + list(args.args)
    runpy.run_path(str(script), run_name="__main__")
    return 0


def run_container(argv: list[str]) -> int:
    """Stand-in for `docker run`: hold the image's process slot, log the env."""
    parser = argparse.ArgumentParser(prog="fog.runners container")
    parser.add_argument("--deployment", default="")
    parser.add_argument("--name", required=True)
    parser.add_argument("--image", required=True)
    args = parser.parse_args(argv)
    log.info(
        "container %s: image=%s workers=%s gpu=%s",
        args.name,
        args.image,
        os.environ.get("FOG_WORKERS", "1"),
        os.environ.get("FOG_GPU", "0"),
    )
    print(
        json.dumps(
            {
                "container": args.name,
                "image": args.image,
                "FOG_WORKERS": os.environ.get("FOG_WORKERS", "1"),
                "FOG_GPU": os.environ.get("FOG_GPU", "0"),
            }
        ),
        flush=True,
    )
    stop = _install_sigterm()
    stop.wait()
    return 0


def run_pull_image(argv: list[str]) -> int:
    """Simulated registry pull; leaves an image marker in the sandbox."""
    parser = argparse.ArgumentParser(prog="fog.runners pull-image")
    parser.add_argument("--deployment", default="")
    parser.add_argument("--sandbox", required=True)
    parser.add_argument("--image", required=True)
    args = parser.parse_args(argv)
    images = Path(args.sandbox) / "images"
    images.mkdir(parents=True, exist_ok=True)
    time.sleep(0.05)
    safe = args.image.replace("/", "_").replace(":", "_")
    (images / f"{safe}.img").write_text(args.image + "\n")
    print(f"pulled {args.image}")
    return 0


def run_spawn(argv: list[str]) -> int:
    """Detach helper: start a long-running command and print its pid.

    The child stays in the caller's session (the instance's process group),
    mirroring `nohup` over ssh in the real analogue.
    """
    parser = argparse.ArgumentParser(prog="fog.runners spawn")
    parser.add_argument("--log", required=True)
    parser.add_argument("cmd", nargs=argparse.REMAINDER)
    args = parser.parse_args(argv)
    cmd = args.cmd[1:] if args.cmd and args.cmd[0] == "--" else args.cmd
    if not cmd:
        print("spawn: empty command", file=sys.stderr)
        return 2
    log_path = Path(args.log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "ab") as fh:
        proc = subprocess.Popen(
            cmd, stdout=fh, stderr=fh, stdin=subprocess.DEVNULL, env=dict(os.environ)
        )
    print(f"pid={proc.pid}")
    return 0


RUNNERS = {
    "instance": run_instance,
    "registry": run_registry,
    "proxy": run_proxy,
    "netmon": run_netmon,
    "node": run_node,
    "container": run_container,
    "pull-image": run_pull_image,
    "spawn": run_spawn,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(
        level=os.environ.get("FOG_LOG_LEVEL", "INFO"),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if not argv or argv[0] not in RUNNERS:
        print(f"usage: python -m fog.runners {{{','.join(RUNNERS)}}} ...", file=sys.stderr)
        return 2
    return RUNNERS[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())

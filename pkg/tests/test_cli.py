"""CLI behavior: exit codes, step lines, status/topics/echo/teardown."""

import json
import shutil
import subprocess
import sys

import pytest
from conftest import wait_for

from fog.cli import main

EDGE_MANIFEST = """
[node ticker]
package = builtin
exec = source
args = --topic, /tick, --rate, 5, --size, 128
placement = edge
"""

PROXY_MANIFEST = EDGE_MANIFEST + """
[node watcher]
package = builtin
exec = sink
args = --topic, /tick
placement = cloud:offload

[cloud offload]
instance_type = m5.large
network = proxy
"""


@pytest.fixture
def run_cli(tmp_path, capsys, fast_env):
    """Invoke the CLI in-process against an isolated state dir."""

    def run(*argv, json_mode=False):
        full = ["--state-dir", str(tmp_path / "state")]
        if json_mode:
            full.append("--json")
        full.extend(argv)
        code = main(full)
        captured = capsys.readouterr()
        return code, captured.out

    return run


def write_manifest(tmp_path, text, name="app.fog"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_launch_edge_only_prints_edge_line(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, EDGE_MANIFEST)
    code, out = run_cli("launch", manifest, "--id", "cliedge1")
    assert code == 0
    assert "edge launch ok" in out
    assert "RUNNING" in out
    code, _ = run_cli("teardown", "cliedge1")
    assert code == 0


def test_launch_validation_failure_exits_2(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, EDGE_MANIFEST.replace("exec = source", "exeq = source"))
    code, out = run_cli("launch", manifest)
    assert code == 2
    assert "unknown-key" in out


def test_launch_unknown_instance_type_exits_2(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, PROXY_MANIFEST.replace("m5.large", "z9.mega"))
    code, out = run_cli("launch", manifest)
    assert code == 2
    assert "unknown-instance-type" in out


def test_launch_proxy_group_prints_five_steps(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, PROXY_MANIFEST)
    code, out = run_cli("launch", manifest, "--id", "cli5steps")
    try:
        assert code == 0
        for step, op in [(1, "provision"), (2, "push"), (3, "setup"), (4, "network"), (5, "launch")]:
            assert f"[{step}/5] offload {op} ok" in out
    finally:
        run_cli("teardown", "cli5steps")


def test_launch_failing_setup_exits_3_with_fail_line(run_cli, tmp_path):
    (tmp_path / "bad.bash").write_text("#!/bin/bash\nexit 9\n")
    manifest = write_manifest(tmp_path, PROXY_MANIFEST.replace(
        "network = proxy", "network = proxy\nsetup_script = bad.bash"))
    code, out = run_cli("launch", manifest, "--id", "clifail")
    assert code == 3
    assert "[3/5] offload setup fail" in out
    assert "rolled back" in out
    from fog.providers import LocalProvider

    assert LocalProvider().list_instances("clifail") == []


def test_status_shows_groups_and_bridge(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, PROXY_MANIFEST)
    code, _ = run_cli("launch", manifest, "--id", "clistat")
    assert code == 0
    try:
        code, out = run_cli("status", "clistat")
        assert code == 0
        assert "deployment clistat: RUNNING" in out
        assert "group offload: m5.large network=proxy" in out
        code, out = run_cli("status", "clistat", json_mode=True)
        assert code == 0
        obj = json.loads(out.strip().splitlines()[-1])
        assert obj["status"] == "RUNNING"
        assert obj["groups"]["offload"]["network"] == "proxy"
    finally:
        run_cli("teardown", "clistat")


def test_topics_lists_both_sides(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, PROXY_MANIFEST)
    code, _ = run_cli("launch", manifest, "--id", "clitopics")
    assert code == 0
    try:
        def topic_output():
            _, out = run_cli("topics", "clitopics")
            return out
        assert wait_for(lambda: "/tick" in topic_output(), timeout=10)
        out = topic_output()
        assert "edge registry" in out
        assert "cloud registry" in out
        assert "/fogros/latency" in out
    finally:
        run_cli("teardown", "clitopics")


def test_echo_prints_messages_and_activates_monitoring(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, PROXY_MANIFEST)
    code, _ = run_cli("launch", manifest, "--id", "cliecho")
    assert code == 0
    try:
        code, out = run_cli("echo", "cliecho", "/tick", "--count", "3", "--timeout", "15")
        assert code == 0
        lines = [l for l in out.splitlines() if l.startswith("seq=")]
        assert len(lines) == 3
        assert "origin=edge" in lines[0]
        # Echoing the monitor topic is what switches monitoring on.
        code, out = run_cli("echo", "cliecho", "/fogros/latency", "--count", "2", "--timeout", "20")
        assert code == 0
        lines = [l for l in out.splitlines() if "rtt_ms=" in l]
        assert len(lines) == 2
    finally:
        run_cli("teardown", "cliecho")


def test_echo_json_mode_one_object_per_line(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, EDGE_MANIFEST)
    code, _ = run_cli("launch", manifest, "--id", "clijson")
    assert code == 0
    try:
        code, out = run_cli("echo", "clijson", "/tick", "--count", "2", "--timeout", "15", json_mode=True)
        assert code == 0
        objs = [json.loads(l) for l in out.strip().splitlines()]
        msgs = [o for o in objs if o.get("event") == "message"]
        assert len(msgs) == 2
        assert all(o["topic"] == "/tick" and o["size"] == 128 for o in msgs)
    finally:
        run_cli("teardown", "clijson")


def test_unknown_deployment_exits_4(run_cli):
    for command in (["status", "nope"], ["topics", "nope"], ["echo", "nope", "/t"], ["teardown", "nope"]):
        code, _ = run_cli(*command)
        assert code == 4, command


def test_teardown_then_status_exits_4(run_cli, tmp_path):
    manifest = write_manifest(tmp_path, EDGE_MANIFEST)
    code, _ = run_cli("launch", manifest, "--id", "cligone")
    assert code == 0
    code, _ = run_cli("teardown", "cligone")
    assert code == 0
    code, out = run_cli("status", "cligone")
    assert code == 4
    assert "torn down" in out
    # teardown stays idempotent
    code, _ = run_cli("teardown", "cligone")
    assert code == 0


def test_console_script_entrypoint_installed(tmp_path):
    exe = shutil.which("fog")
    assert exe, "console script `fog` not on PATH"
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True, timeout=30)
    assert proc.returncode == 0
    assert "launch" in proc.stdout and "teardown" in proc.stdout

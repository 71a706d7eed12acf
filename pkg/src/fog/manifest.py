"""Launch manifests: which nodes run where, and on what kind of machine.

The `.fog` format is sectioned key=value text (UTF-8):

    # station with one offloaded planner
    [node camera]
    package = sensors
    exec = camera.py
    placement = edge

    [node planner]
    package = planner_pkg
    exec = planner.py
    placement = cloud:heavy

    [cloud heavy]
    instance_type = c5.24xlarge
    setup_script = init.bash
    network = proxy
    topics = /sensor, /plan

Headers are `[node <name>]`, `[cloud <group>]`; list values are
comma-separated (items may not contain commas); `#` starts a comment.
Unknown keys are errors: a typo in a deployment config must fail loudly.

The machine catalog uses the same syntax with `[machine <type>]` sections
holding `workers`, `gpu`, and `startup_delay_ms`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import wire

# Section names double as process names and trace hop labels; keep them to a
# charset that cannot collide with structured labels like "bridge:<side>".
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

EDGE = "edge"
NETWORK_DIRECT = "direct"
NETWORK_PROXY = "proxy"

_NODE_KEYS = {"package", "exec", "args", "placement"}
_GROUP_KEYS = {"instance_type", "setup_script", "image", "network", "topics", "region"}
_MACHINE_KEYS = {"workers", "gpu", "startup_delay_ms"}


class ManifestError(Exception):
    """Parse failure; ``line`` is 1-based, ``code`` is a stable slug."""

    def __init__(self, line: int, code: str, message: str):
        super().__init__(f"line {line}: {message} [{code}]")
        self.line = line
        self.code = code


@dataclass(order=True, frozen=True)
class Diagnostic:
    line: int
    code: str
    message: str


@dataclass(frozen=True)
class NodeSpec:
    name: str
    package: str = ""
    exec: str = ""
    args: tuple[str, ...] = ()
    placement: Optional[str] = None  # None = edge, else cloud group name

    @property
    def on_edge(self) -> bool:
        return self.placement is None


@dataclass(frozen=True)
class CloudGroupSpec:
    name: str
    instance_type: str
    setup_script: Optional[str] = None
    image: Optional[str] = None
    network: str = NETWORK_DIRECT
    topics: Optional[tuple[str, ...]] = None
    region: Optional[str] = None


@dataclass(frozen=True)
class MachineSpec:
    instance_type: str
    workers: int = 1
    gpu: bool = False
    startup_delay_ms: int = 0


@dataclass
class LaunchManifest:
    nodes: tuple[NodeSpec, ...] = ()
    groups: dict[str, CloudGroupSpec] = field(default_factory=dict)
    # header/key line numbers for diagnostics; not part of manifest identity
    source_lines: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def cloud_nodes(self, group: str) -> list[NodeSpec]:
        return [n for n in self.nodes if n.placement == group]

    def edge_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.on_edge]


DEFAULT_CATALOG: dict[str, MachineSpec] = {
    spec.instance_type: spec
    for spec in (
        MachineSpec("t3.micro", workers=1, startup_delay_ms=40),
        MachineSpec("m5.large", workers=2, startup_delay_ms=60),
        MachineSpec("g4dn.xlarge", workers=4, gpu=True, startup_delay_ms=100),
        MachineSpec("c4.8xlarge", workers=6, startup_delay_ms=100),
        MachineSpec("c5.24xlarge", workers=8, startup_delay_ms=120),
    )
}


def _split_sections(text: str, what: str) -> list[tuple[int, str, str, dict[str, tuple[int, str]]]]:
    """Split sectioned key=value text into (line, kind, name, {key: (line, value)})."""
    sections: list[tuple[int, str, str, dict[str, tuple[int, str]]]] = []
    current: Optional[dict[str, tuple[int, str]]] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ManifestError(lineno, "syntax", "unterminated section header")
            parts = line[1:-1].split()
            if len(parts) != 2:
                raise ManifestError(
                    lineno, "syntax", f"expected '[<kind> <name>]', got {line!r}"
                )
            kind, name = parts
            if not _NAME_RE.match(name):
                raise ManifestError(lineno, "bad-value", f"invalid section name {name!r}")
            current = {}
            sections.append((lineno, kind, name, current))
            continue
        if "=" not in line:
            raise ManifestError(lineno, "syntax", f"expected 'key = value', got {line!r}")
        if current is None:
            raise ManifestError(lineno, "syntax", f"{what} entry outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ManifestError(lineno, "syntax", "empty key")
        if key in current:
            raise ManifestError(lineno, "syntax", f"duplicate key {key!r} in section")
        current[key] = (lineno, value)
    return sections


def _split_list(value: str) -> tuple[str, ...]:
    return tuple(item.strip() for item in value.split(",") if item.strip())


def parse_manifest(text: str) -> LaunchManifest:
    """Parse manifest text; raises ManifestError with a line number."""
    nodes: list[NodeSpec] = []
    groups: dict[str, CloudGroupSpec] = {}
    source_lines: dict[str, int] = {}
    placements: dict[str, tuple[int, str]] = {}

    for header_line, kind, name, entries in _split_sections(text, "manifest"):
        if kind == "node":
            if any(n.name == name for n in nodes):
                raise ManifestError(header_line, "duplicate-node", f"node {name!r} defined twice")
            for key, (lineno, _) in entries.items():
                if key not in _NODE_KEYS:
                    raise ManifestError(lineno, "unknown-key", f"unknown node key {key!r}")
            placement_raw = entries.get("placement", (header_line, EDGE))[1]
            if placement_raw == EDGE:
                placement = None
            elif placement_raw.startswith("cloud:") and placement_raw[6:]:
                placement = placement_raw[6:]
                placements[name] = (entries.get("placement", (header_line, ""))[0], placement)
            else:
                raise ManifestError(
                    entries["placement"][0],
                    "bad-value",
                    f"placement must be 'edge' or 'cloud:<group>', got {placement_raw!r}",
                )
            nodes.append(
                NodeSpec(
                    name=name,
                    package=entries.get("package", (0, ""))[1],
                    exec=entries.get("exec", (0, ""))[1],
                    args=_split_list(entries.get("args", (0, ""))[1]),
                    placement=placement,
                )
            )
            source_lines[f"node:{name}"] = header_line
        elif kind == "cloud":
            if name in groups:
                raise ManifestError(header_line, "duplicate-group", f"group {name!r} defined twice")
            for key, (lineno, _) in entries.items():
                if key not in _GROUP_KEYS:
                    raise ManifestError(lineno, "unknown-key", f"unknown cloud group key {key!r}")
            if "instance_type" not in entries:
                raise ManifestError(header_line, "missing-key", f"group {name!r} needs instance_type")
            network = entries.get("network", (0, NETWORK_DIRECT))[1]
            if network not in (NETWORK_DIRECT, NETWORK_PROXY):
                raise ManifestError(
                    entries["network"][0], "bad-value", f"network must be direct or proxy, got {network!r}"
                )
            topics: Optional[tuple[str, ...]] = None
            if "topics" in entries:
                topics = _split_list(entries["topics"][1])
                if not topics:
                    raise ManifestError(entries["topics"][0], "bad-value", "topics list is empty")
            groups[name] = CloudGroupSpec(
                name=name,
                instance_type=entries["instance_type"][1],
                setup_script=entries.get("setup_script", (0, None))[1] or None,
                image=entries.get("image", (0, None))[1] or None,
                network=network,
                topics=topics,
                region=entries.get("region", (0, None))[1] or None,
            )
            source_lines[f"cloud:{name}"] = header_line
            for key, (lineno, _) in entries.items():
                source_lines[f"cloud:{name}:{key}"] = lineno
        else:
            raise ManifestError(header_line, "syntax", f"unknown section kind {kind!r}")

    for node_name, (lineno, group) in placements.items():
        if group not in groups:
            raise ManifestError(
                lineno, "dangling-group-ref", f"node {node_name!r} references missing group {group!r}"
            )
    for group in groups.values():
        packaged = [n for n in nodes if n.placement == group.name and n.package]
        if group.image and packaged:
            raise ManifestError(
                source_lines[f"cloud:{group.name}"],
                "image-and-packages",
                f"group {group.name!r} launches an image; package nodes not allowed",
            )
        if not group.image:
            for n in nodes:
                if n.placement == group.name and not (n.package and n.exec):
                    raise ManifestError(
                        source_lines[f"node:{n.name}"],
                        "missing-key",
                        f"node {n.name!r} needs package and exec",
                    )
    for n in nodes:
        if n.on_edge and not (n.package and n.exec):
            raise ManifestError(
                source_lines[f"node:{n.name}"], "missing-key", f"node {n.name!r} needs package and exec"
            )
    if not nodes and not any(g.image for g in groups.values()):
        raise ManifestError(1, "empty-manifest", "manifest launches nothing")
    return LaunchManifest(nodes=tuple(nodes), groups=groups, source_lines=source_lines)


def render_manifest(m: LaunchManifest) -> str:
    """Canonical text form; parse_manifest(render_manifest(m)) == m."""
    out: list[str] = []
    for n in m.nodes:
        out.append(f"[node {n.name}]")
        if n.package:
            out.append(f"package = {n.package}")
        if n.exec:
            out.append(f"exec = {n.exec}")
        if n.args:
            out.append(f"args = {', '.join(n.args)}")
        out.append(f"placement = {EDGE if n.on_edge else 'cloud:' + n.placement}")
        out.append("")
    for g in m.groups.values():
        out.append(f"[cloud {g.name}]")
        out.append(f"instance_type = {g.instance_type}")
        if g.setup_script:
            out.append(f"setup_script = {g.setup_script}")
        if g.image:
            out.append(f"image = {g.image}")
        out.append(f"network = {g.network}")
        if g.topics:
            out.append(f"topics = {', '.join(g.topics)}")
        if g.region:
            out.append(f"region = {g.region}")
        out.append("")
    return "\n".join(out)


def collect_packages(m: LaunchManifest) -> dict[str, set[str]]:
    """Packages to push per cloud group; edge nodes are launched in place."""
    out: dict[str, set[str]] = {}
    for n in m.nodes:
        if n.placement is not None and n.package:
            out.setdefault(n.placement, set()).add(n.package)
    return out


def validate(
    m: LaunchManifest,
    catalog: Optional[dict[str, MachineSpec]] = None,
    base_dir: Optional[Path] = None,
) -> list[Diagnostic]:
    """Deployability checks; empty result means the manifest can deploy."""
    catalog = DEFAULT_CATALOG if catalog is None else catalog
    base = Path(base_dir) if base_dir else Path.cwd()
    out: list[Diagnostic] = []
    for g in m.groups.values():
        header = m.source_lines.get(f"cloud:{g.name}", 0)
        if g.instance_type not in catalog:
            out.append(
                Diagnostic(
                    m.source_lines.get(f"cloud:{g.name}:instance_type", header),
                    "unknown-instance-type",
                    f"group {g.name!r}: no machine spec for {g.instance_type!r}",
                )
            )
        if g.setup_script:
            path = base / g.setup_script
            if not path.is_file():
                out.append(
                    Diagnostic(
                        m.source_lines.get(f"cloud:{g.name}:setup_script", header),
                        "missing-setup-script",
                        f"group {g.name!r}: setup script {str(path)!r} not found",
                    )
                )
        for topic in g.topics or ():
            try:
                wire.validate_topic(topic)
            except wire.InvalidTopic as exc:
                out.append(
                    Diagnostic(
                        m.source_lines.get(f"cloud:{g.name}:topics", header),
                        "invalid-topic",
                        f"group {g.name!r}: {exc}",
                    )
                )
    return sorted(out)


def parse_catalog(text: str) -> dict[str, MachineSpec]:
    """Parse a `[machine <type>]` catalog file (same syntax as manifests)."""
    catalog: dict[str, MachineSpec] = {}
    for header_line, kind, name, entries in _split_sections(text, "catalog"):
        if kind != "machine":
            raise ManifestError(header_line, "syntax", f"expected [machine <type>], got {kind!r}")
        if name in catalog:
            raise ManifestError(header_line, "duplicate-group", f"machine {name!r} defined twice")
        for key, (lineno, _) in entries.items():
            if key not in _MACHINE_KEYS:
                raise ManifestError(lineno, "unknown-key", f"unknown machine key {key!r}")
        try:
            workers = int(entries.get("workers", (0, "1"))[1])
            delay = int(entries.get("startup_delay_ms", (0, "0"))[1])
        except ValueError as exc:
            raise ManifestError(header_line, "bad-value", str(exc)) from exc
        gpu_raw = entries.get("gpu", (0, "false"))[1].lower()
        if gpu_raw not in ("true", "false"):
            raise ManifestError(entries["gpu"][0], "bad-value", f"gpu must be true/false, got {gpu_raw!r}")
        if workers < 1:
            raise ManifestError(header_line, "bad-value", "workers must be >= 1")
        if delay < 0:
            raise ManifestError(header_line, "bad-value", "startup_delay_ms must be >= 0")
        catalog[name] = MachineSpec(
            instance_type=name, workers=workers, gpu=gpu_raw == "true", startup_delay_ms=delay
        )
    return catalog


def load_catalog(path: Optional[Path] = None) -> dict[str, MachineSpec]:
    if path is None:
        return dict(DEFAULT_CATALOG)
    return parse_catalog(Path(path).read_text(encoding="utf-8"))

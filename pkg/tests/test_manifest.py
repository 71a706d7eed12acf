"""Manifest parsing, rendering round-trip, package collection, validation."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fog.manifest import (
    DEFAULT_CATALOG,
    CloudGroupSpec,
    LaunchManifest,
    ManifestError,
    NodeSpec,
    collect_packages,
    load_catalog,
    parse_catalog,
    parse_manifest,
    render_manifest,
    validate,
)

OFFLOAD_MANIFEST = """
# one local client, one offloaded planner
[node client]
package = mpt_ros
exec = client.py
placement = edge

[node server]
package = mpt_ros
exec = server.py
placement = cloud:planner

[cloud planner]
instance_type = c5.24xlarge
setup_script = init.bash
network = proxy
"""

CONTAINER_MANIFEST = """
[cloud grasp]
image = dexnet:gpu
instance_type = g4dn.xlarge
"""


def test_offload_manifest_parses():
    m = parse_manifest(OFFLOAD_MANIFEST)
    assert [n.name for n in m.nodes] == ["client", "server"]
    group = m.groups["planner"]
    assert group.instance_type == "c5.24xlarge"
    assert group.setup_script == "init.bash"
    assert group.network == "proxy"
    assert m.nodes[1].placement == "planner"


def test_container_group_needs_no_package_nodes():
    m = parse_manifest(CONTAINER_MANIFEST)
    group = m.groups["grasp"]
    assert group.image == "dexnet:gpu"
    assert group.instance_type == "g4dn.xlarge"
    assert m.nodes == ()


def test_dangling_group_ref():
    bad = """
[node a]
package = p
exec = e
placement = cloud:missing
"""
    with pytest.raises(ManifestError) as err:
        parse_manifest(bad)
    assert err.value.code == "dangling-group-ref"


def test_unknown_key_rejected():
    bad = "[node a]\npackage = p\nexec = e\ncolour = blue\n"
    with pytest.raises(ManifestError) as err:
        parse_manifest(bad)
    assert err.value.code == "unknown-key"
    assert err.value.line == 4


def test_duplicate_node_rejected():
    bad = "[node a]\npackage = p\nexec = e\n[node a]\npackage = p\nexec = e\n"
    with pytest.raises(ManifestError) as err:
        parse_manifest(bad)
    assert err.value.code == "duplicate-node"


def test_syntax_error_carries_line_number():
    with pytest.raises(ManifestError) as err:
        parse_manifest("[node a]\npackage = p\nexec = e\nnot a kv line\n")
    assert err.value.code == "syntax"
    assert err.value.line == 4


def test_image_group_excludes_package_nodes():
    bad = """
[node a]
package = p
exec = e
placement = cloud:g

[cloud g]
image = thing:latest
instance_type = t3.micro
"""
    with pytest.raises(ManifestError) as err:
        parse_manifest(bad)
    assert err.value.code == "image-and-packages"


def test_empty_manifest_rejected():
    with pytest.raises(ManifestError) as err:
        parse_manifest("# nothing here\n")
    assert err.value.code == "empty-manifest"


def test_collect_packages_edge_only():
    m = parse_manifest("[node a]\npackage = p\nexec = e\nplacement = edge\n")
    assert collect_packages(m) == {}


def test_collect_packages_shared_package_once():
    text = OFFLOAD_MANIFEST + """
[node server2]
package = mpt_ros
exec = other.py
placement = cloud:planner
"""
    m = parse_manifest(text)
    assert collect_packages(m) == {"planner": {"mpt_ros"}}


def test_validate_unknown_instance_type(tmp_path):
    (tmp_path / "init.bash").write_text("")
    m = parse_manifest(OFFLOAD_MANIFEST.replace("c5.24xlarge", "z9.mega"))
    diags = validate(m, DEFAULT_CATALOG, base_dir=tmp_path)
    assert [d.code for d in diags] == ["unknown-instance-type"]


def test_validate_missing_setup_script(tmp_path):
    m = parse_manifest(OFFLOAD_MANIFEST)
    diags = validate(m, DEFAULT_CATALOG, base_dir=tmp_path)
    assert [d.code for d in diags] == ["missing-setup-script"]


def test_validate_clean_manifest(tmp_path):
    (tmp_path / "init.bash").write_text("#!/bin/bash\nexit 0\n")
    m = parse_manifest(OFFLOAD_MANIFEST)
    assert validate(m, DEFAULT_CATALOG, base_dir=tmp_path) == []


def test_validate_invalid_topic(tmp_path):
    (tmp_path / "init.bash").write_text("")
    text = OFFLOAD_MANIFEST.replace("network = proxy", "network = proxy\ntopics = nope")
    m = parse_manifest(text)
    diags = validate(m, DEFAULT_CATALOG, base_dir=tmp_path)
    assert [d.code for d in diags] == ["invalid-topic"]


def test_diagnostics_sorted_by_line_then_code(tmp_path):
    text = """
[cloud g1]
instance_type = z9.mega
setup_script = gone.bash

[node a]
package = p
exec = e
placement = cloud:g1
"""
    m = parse_manifest(text)
    diags = validate(m, DEFAULT_CATALOG, base_dir=tmp_path)
    assert diags == sorted(diags)
    assert {d.code for d in diags} == {"unknown-instance-type", "missing-setup-script"}


names = st.text(alphabet="abcdefgh123", min_size=1, max_size=8)
tokens = st.text(alphabet="abcXYZ019._-", min_size=1, max_size=12)
topic_lists = st.lists(
    st.text(alphabet="abc_1", min_size=1, max_size=6).map(lambda s: "/" + s),
    min_size=1,
    max_size=4,
    unique=True,
).map(tuple)


@st.composite
def manifests(draw):
    group_names = draw(st.lists(names, min_size=1, max_size=3, unique=True))
    groups = {}
    for g in group_names:
        groups[g] = CloudGroupSpec(
            name=g,
            instance_type=draw(st.sampled_from(sorted(DEFAULT_CATALOG))),
            setup_script=draw(st.one_of(st.none(), tokens)),
            image=None,
            network=draw(st.sampled_from(["direct", "proxy"])),
            topics=draw(st.one_of(st.none(), topic_lists)),
            region=draw(st.one_of(st.none(), tokens)),
        )
    node_names = draw(st.lists(names, min_size=1, max_size=4, unique=True))
    nodes = tuple(
        NodeSpec(
            name=n,
            package=draw(tokens),
            exec=draw(tokens),
            args=tuple(draw(st.lists(st.text(alphabet="abc-_=9", min_size=1, max_size=6), max_size=3))),
            placement=draw(st.one_of(st.none(), st.sampled_from(group_names))),
        )
        for n in node_names
    )
    return LaunchManifest(nodes=nodes, groups=groups)


@settings(max_examples=100, deadline=None)
@given(manifests())
def test_parse_render_round_trip(m):
    assert parse_manifest(render_manifest(m)) == m


def test_catalog_parse_and_defaults(tmp_path):
    text = """
[machine z9.mega]
workers = 16
gpu = true
startup_delay_ms = 5
"""
    catalog = parse_catalog(text)
    spec = catalog["z9.mega"]
    assert (spec.workers, spec.gpu, spec.startup_delay_ms) == (16, True, 5)
    assert load_catalog(None)["c5.24xlarge"].workers == 8
    path = tmp_path / "cat.fog"
    path.write_text(text)
    assert load_catalog(path) == catalog


def test_catalog_rejects_bad_workers():
    with pytest.raises(ManifestError):
        parse_catalog("[machine m]\nworkers = 0\n")

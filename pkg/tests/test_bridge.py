"""Bridge: discovery rule vs brute-force oracle, tunneling, loop freedom."""

import itertools
import random
import time

import pytest

from fog.bridge import (
    CLOUD_TO_EDGE,
    EDGE_TO_CLOUD,
    BridgeEntry,
    TopicPolicy,
    discover_bridgeable,
    run_proxy_pair,
)
from fog.channel import generate_secret
from fog.node import Backoff, Node
from fog.registry import Endpoint, RegistryServer, TopicRecord
from fog.wire import FrameKind, Origin

FAST = Backoff(initial=0.05, cap=0.3)
POLL = 0.15


def wait_for(predicate, timeout=8.0, interval=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def endpoint(tag: int) -> Endpoint:
    return Endpoint(f"n{tag}", bytes([tag] * 16), f"127.0.0.1:{20000 + tag}")


def table_from_flags(has_pub: bool, has_sub: bool, topic="/t", base=1):
    rec = TopicRecord()
    if has_pub:
        rec.publishers.add(endpoint(base))
    if has_sub:
        rec.subscribers.add(endpoint(base + 1))
    return {topic: rec} if (has_pub or has_sub) else {}


def oracle_rule(edge_table, cloud_table):
    """Literal restatement of the discovery rule, applied per topic."""
    entries = set()
    topics = set(edge_table) | set(cloud_table)
    for t in topics:
        edge_rec = edge_table.get(t, TopicRecord())
        cloud_rec = cloud_table.get(t, TopicRecord())
        if len(edge_rec.publishers) >= 1 and len(cloud_rec.subscribers) >= 1:
            entries.add(BridgeEntry(t, EDGE_TO_CLOUD))
        if len(cloud_rec.publishers) >= 1 and len(edge_rec.subscribers) >= 1:
            entries.add(BridgeEntry(t, CLOUD_TO_EDGE))
    return entries


def test_discovery_matches_oracle_on_all_16_single_topic_placements():
    for ep, es, cp, cs in itertools.product((False, True), repeat=4):
        edge = table_from_flags(ep, es, base=1)
        cloud = table_from_flags(cp, cs, base=3)
        assert discover_bridgeable(edge, cloud) == oracle_rule(edge, cloud), (
            ep, es, cp, cs,
        )


def test_discovery_matches_oracle_on_randomized_tables():
    rng = random.Random(42)
    for _ in range(1000):
        topics = [f"/t{i}" for i in range(rng.randrange(0, 8))]
        def random_table():
            table = {}
            for t in topics:
                rec = TopicRecord()
                for k in range(rng.randrange(0, 3)):
                    rec.publishers.add(endpoint(rng.randrange(1, 120)))
                for k in range(rng.randrange(0, 3)):
                    rec.subscribers.add(endpoint(rng.randrange(1, 120)))
                if not rec.empty():
                    table[t] = rec
            return table
        edge, cloud = random_table(), random_table()
        assert discover_bridgeable(edge, cloud) == oracle_rule(edge, cloud)


def test_examples_from_rule():
    edge = table_from_flags(True, False, "/sensor")
    cloud = table_from_flags(False, True, "/sensor", base=3)
    assert discover_bridgeable(edge, cloud) == {BridgeEntry("/sensor", EDGE_TO_CLOUD)}
    assert discover_bridgeable(table_from_flags(True, False, "/x"), {}) == set()
    assert discover_bridgeable({}, {}) == set()
    both_e = table_from_flags(True, True, "/y")
    both_c = table_from_flags(True, True, "/y", base=3)
    assert discover_bridgeable(both_e, both_c) == {
        BridgeEntry("/y", EDGE_TO_CLOUD),
        BridgeEntry("/y", CLOUD_TO_EDGE),
    }


class BridgedPair:
    """Two registries joined by an in-process proxy pair."""

    def __init__(self, policy=None, trace=False):
        self.edge_registry = RegistryServer(liveness_timeout=2.0)
        self.cloud_registry = RegistryServer(liveness_timeout=2.0)
        self.edge_proxy, self.cloud_proxy = run_proxy_pair(
            self.edge_registry.address,
            self.cloud_registry.address,
            generate_secret(),
            policy=policy or TopicPolicy(poll_interval=POLL),
            trace=trace,
            backoff=FAST,
            monitor_interval=0.3,
        )
        self.nodes: list[Node] = []

    def node(self, name, side) -> Node:
        reg = self.edge_registry if side == "edge" else self.cloud_registry
        n = Node(name, reg.address, origin=side, trace=self.edge_proxy.trace, backoff=FAST, ping_interval=0.5)
        self.nodes.append(n)
        return n

    def close(self):
        for n in self.nodes:
            n.close()
        self.edge_proxy.close()
        self.cloud_proxy.close()
        self.edge_registry.close()
        self.cloud_registry.close()


@pytest.fixture
def pair():
    p = BridgedPair()
    yield p
    p.close()


def test_edge_to_cloud_tunnel_end_to_end(pair):
    sub_node = pair.node("consumer", "cloud")
    sub = sub_node.subscribe("/sensor", capacity=32)
    pub_node = pair.node("camera", "edge")
    pub = pub_node.advertise("/sensor")
    assert wait_for(lambda: BridgeEntry("/sensor", EDGE_TO_CLOUD) in pair.edge_proxy.bridge_table)
    payload = random.Random(5).randbytes(2048)
    deadline = time.monotonic() + 5
    env = None
    while env is None and time.monotonic() < deadline:
        pub.publish(payload)
        env = sub.get(timeout=0.3)
    assert env is not None
    assert env.payload == payload
    assert env.origin is Origin.EDGE
    assert env.publisher_id == pub_node.node_id


def test_bridging_begins_within_two_poll_intervals(pair):
    sub_node = pair.node("consumer", "cloud")
    sub_node.subscribe("/late", capacity=8)
    time.sleep(3 * POLL)  # let the subscriber-only state settle
    pub_node = pair.node("src", "edge")
    pub_node.advertise("/late")
    t0 = time.monotonic()
    assert wait_for(
        lambda: BridgeEntry("/late", EDGE_TO_CLOUD) in pair.edge_proxy.bridge_table,
        timeout=10 * POLL,
    )
    # bound: two poll intervals plus scheduling slack on a loaded host
    assert time.monotonic() - t0 <= 2 * POLL + 0.5


def test_no_remote_subscriber_means_no_data_frames(pair):
    pub_node = pair.node("lonely", "edge")
    pub = pub_node.advertise("/unwatched")
    time.sleep(4 * POLL)
    for _ in range(10):
        pub.publish(b"nobody cares")
    time.sleep(4 * POLL)
    sent, _ = pair.edge_proxy.frame_counters()
    assert sent.get(int(FrameKind.DATA), 0) == 0
    assert pair.edge_proxy.bridge_table == set()


def test_unsubscribe_removes_entry_and_stops_data(pair):
    sub_node = pair.node("consumer", "cloud")
    sub = sub_node.subscribe("/feed", capacity=32)
    pub_node = pair.node("src", "edge")
    pub = pub_node.advertise("/feed")
    assert wait_for(lambda: BridgeEntry("/feed", EDGE_TO_CLOUD) in pair.edge_proxy.bridge_table)
    deadline = time.monotonic() + 5
    while sub.get(timeout=0.2) is None and time.monotonic() < deadline:
        pub.publish(b"x")
    sub.close()
    assert wait_for(
        lambda: BridgeEntry("/feed", EDGE_TO_CLOUD) not in pair.edge_proxy.bridge_table,
        timeout=10 * POLL,
    )
    sent_before, _ = pair.edge_proxy.frame_counters()
    for _ in range(10):
        pub.publish(b"y")
    time.sleep(4 * POLL)
    sent_after, _ = pair.edge_proxy.frame_counters()
    assert sent_after.get(int(FrameKind.DATA), 0) == sent_before.get(int(FrameKind.DATA), 0)


def test_explicit_policy_bridges_only_listed_topics():
    p = BridgedPair(policy=TopicPolicy(topics=("/a",), poll_interval=POLL))
    try:
        cloud_node = p.node("consumer", "cloud")
        sub_a = cloud_node.subscribe("/a", capacity=8)
        sub_b = cloud_node.subscribe("/b", capacity=8)
        edge_node = p.node("src", "edge")
        pub_a = edge_node.advertise("/a")
        pub_b = edge_node.advertise("/b")
        assert wait_for(lambda: BridgeEntry("/a", EDGE_TO_CLOUD) in p.edge_proxy.bridge_table)
        time.sleep(2 * POLL)
        assert BridgeEntry("/b", EDGE_TO_CLOUD) not in p.edge_proxy.bridge_table
        got_a = None
        deadline = time.monotonic() + 5
        while got_a is None and time.monotonic() < deadline:
            pub_a.publish(b"a")
            pub_b.publish(b"b")
            got_a = sub_a.get(timeout=0.2)
        assert got_a is not None
        assert sub_b.get(timeout=3 * POLL) is None
    finally:
        p.close()


def test_loop_freedom_with_pubs_and_subs_on_both_sides():
    p = BridgedPair(trace=True)
    try:
        edge_node = p.node("edge-app", "edge")
        cloud_node = p.node("cloud-app", "cloud")
        edge_sub = edge_node.subscribe("/chat", capacity=128)
        cloud_sub = cloud_node.subscribe("/chat", capacity=128)
        edge_pub = edge_node.advertise("/chat")
        cloud_pub = cloud_node.advertise("/chat")
        assert wait_for(
            lambda: {
                BridgeEntry("/chat", EDGE_TO_CLOUD),
                BridgeEntry("/chat", CLOUD_TO_EDGE),
            }
            <= p.edge_proxy.bridge_table
        )
        # Also wait until republication publishers are wired up both ways.
        assert wait_for(lambda: "/chat" in p.cloud_proxy._inbound and "/chat" in p.edge_proxy._inbound)
        time.sleep(0.3)
        n = 10
        for i in range(n):
            edge_pub.publish(b"e%d" % i)
            cloud_pub.publish(b"c%d" % i)
        time.sleep(1.0)

        def drain(sub):
            out = []
            while True:
                env = sub.get(timeout=0.3)
                if env is None:
                    return out
                out.append(env)

        edge_got = drain(edge_sub)
        cloud_got = drain(cloud_sub)
        # Exactly one copy of each message per subscriber, no echoes.
        assert sorted(e.payload for e in edge_got) == sorted(
            [b"e%d" % i for i in range(n)] + [b"c%d" % i for i in range(n)]
        )
        assert sorted(e.payload for e in cloud_got) == sorted(
            [b"e%d" % i for i in range(n)] + [b"c%d" % i for i in range(n)]
        )
        for env in edge_got + cloud_got:
            bridge_hops = [h for h in env.trace if h.startswith("bridge:")]
            assert len(bridge_hops) in (0, 2)  # direct or exactly one crossing
        # Channel carried each message at most once in each direction.
        sent_edge, _ = p.edge_proxy.frame_counters()
        sent_cloud, _ = p.cloud_proxy.frame_counters()
        assert sent_edge.get(int(FrameKind.DATA), 0) == n
        assert sent_cloud.get(int(FrameKind.DATA), 0) == n
    finally:
        p.close()


def test_forwarding_preserves_large_and_empty_payloads(pair):
    cloud_node = pair.node("consumer", "cloud")
    sub = cloud_node.subscribe("/frames", capacity=64)
    edge_node = pair.node("camera", "edge")
    pub = edge_node.advertise("/frames")
    assert wait_for(lambda: BridgeEntry("/frames", EDGE_TO_CLOUD) in pair.edge_proxy.bridge_table)
    assert wait_for(lambda: "/frames" in pair.cloud_proxy._inbound)
    time.sleep(0.3)
    big = random.Random(48).randbytes(49_152)
    pub.publish(big)
    pub.publish(b"")
    got = [sub.get(timeout=5) for _ in range(2)]
    assert got[0] is not None and got[0].payload == big
    assert got[1] is not None and got[1].payload == b""


def test_channel_fault_rejoins_and_keeps_bridge_table(pair):
    cloud_node = pair.node("consumer", "cloud")
    sub = cloud_node.subscribe("/stream", capacity=256)
    edge_node = pair.node("src", "edge")
    pub = edge_node.advertise("/stream")
    assert wait_for(lambda: BridgeEntry("/stream", EDGE_TO_CLOUD) in pair.edge_proxy.bridge_table)
    assert wait_for(lambda: sub.get(timeout=0.2) is not None or pub.publish(b"warm") > 0)
    pair.edge_proxy.inject_channel_fault(blackout_s=1.0)
    assert not pair.edge_proxy.established
    assert BridgeEntry("/stream", EDGE_TO_CLOUD) in pair.edge_proxy.bridge_table
    assert wait_for(lambda: pair.edge_proxy.established, timeout=10)
    deadline = time.monotonic() + 8
    env = None
    while env is None and time.monotonic() < deadline:
        pub.publish(b"after")
        env = sub.get(timeout=0.3)
        if env is not None and env.payload != b"after":
            env = None
    assert env is not None
    assert pair.edge_proxy.reconnects >= 1

"""Registry behavior: peer lists, idempotency, notifications, liveness."""

import threading
import time

import pytest

from fog.registry import (
    PUB,
    SUB,
    Endpoint,
    RegistryClient,
    RegistryServer,
    RegistryUnavailable,
)


def make_endpoint(tag: int) -> Endpoint:
    return Endpoint(name=f"n{tag}", node_id=bytes([tag] * 16), address=f"127.0.0.1:{10000 + tag}")


@pytest.fixture
def server():
    srv = RegistryServer(liveness_timeout=1.0)
    yield srv
    srv.close()


def client_for(server, tag, on_event=None, ping_interval=0.3):
    return RegistryClient(
        server.address, make_endpoint(tag), on_event=on_event, ping_interval=ping_interval
    )


def wait_for(predicate, timeout=5.0, interval=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def test_register_publisher_empty_registry(server):
    c = client_for(server, 1)
    assert c.register("/t", PUB) == []
    c.close()


def test_publisher_sees_existing_subscriber(server):
    cs = client_for(server, 1)
    cs.register("/t", SUB)
    cp = client_for(server, 2)
    peers = cp.register("/t", PUB)
    assert [p.name for p in peers] == ["n1"]
    cs.close()
    cp.close()


def test_subscriber_sees_existing_publisher(server):
    cp = client_for(server, 1)
    cp.register("/t", PUB)
    cs = client_for(server, 2)
    assert [p.name for p in cs.register("/t", SUB)] == ["n1"]
    cp.close()
    cs.close()


def test_two_publishers_set_equality_both_orders():
    # Brute-force order check: registering P1,P2 in either order must leave
    # the subscriber with the identical peer set.
    results = []
    for order in ((1, 2), (2, 1)):
        srv = RegistryServer()
        clients = [client_for(srv, tag) for tag in order]
        for c in clients:
            c.register("/t", PUB)
        cs = client_for(srv, 9)
        peers = cs.register("/t", SUB)
        results.append({p.node_id for p in peers})
        for c in clients + [cs]:
            c.close()
        srv.close()
    assert results[0] == results[1] == {bytes([1] * 16), bytes([2] * 16)}


def test_duplicate_registration_is_idempotent(server):
    cs = client_for(server, 1)
    cs.register("/t", SUB)
    cp = client_for(server, 2)
    first = cp.register("/t", PUB)
    second = cp.register("/t", PUB)
    assert [p.name for p in first] == [p.name for p in second] == ["n1"]
    snap = cp.snapshot()
    assert len(snap["/t"].publishers) == 1
    cs.close()
    cp.close()


def test_unregister_unknown_is_noop(server):
    c = client_for(server, 1)
    c.unregister("/nothing", PUB)
    assert c.snapshot() == {}
    c.close()


def test_register_then_unregister_removes_topic(server):
    c = client_for(server, 1)
    c.register("/t", PUB)
    c.unregister("/t", PUB)
    assert c.snapshot() == {}
    c.close()


def test_invalid_topic_rejected(server):
    from fog.wire import InvalidTopic

    c = client_for(server, 1)
    with pytest.raises(InvalidTopic):
        c.register("no-slash", PUB)
    c.close()


def test_snapshot_shape(server):
    c1 = client_for(server, 1)
    c2 = client_for(server, 2)
    c1.register("/a", PUB)
    c2.register("/b", SUB)
    snap = c1.snapshot()
    assert set(snap) == {"/a", "/b"}
    assert {e.name for e in snap["/a"].publishers} == {"n1"}
    assert snap["/a"].subscribers == set()
    assert {e.name for e in snap["/b"].subscribers} == {"n2"}
    c1.close()
    c2.close()


def test_new_publisher_notifies_subscriber(server):
    events = []
    cs = client_for(server, 1, on_event=events.append)
    cs.register("/t", SUB)
    cp = client_for(server, 2)
    cp.register("/t", PUB)
    assert wait_for(lambda: any(e["event"] == "peer_added" for e in events))
    added = [e for e in events if e["event"] == "peer_added"][0]
    assert added["topic"] == "/t"
    assert added["role"] == PUB
    assert added["endpoint"]["name"] == "n2"
    cs.close()
    cp.close()


def test_new_subscriber_notifies_publisher(server):
    events = []
    cp = client_for(server, 1, on_event=events.append)
    cp.register("/t", PUB)
    cs = client_for(server, 2)
    cs.register("/t", SUB)
    assert wait_for(lambda: any(e["event"] == "peer_added" and e["role"] == SUB for e in events))
    cp.close()
    cs.close()


def test_connection_drop_expunges_within_liveness_bound(server):
    cp = client_for(server, 1)
    cp.register("/t", PUB)
    observer = client_for(server, 2)
    cp.close()  # simulates a node crash: connection drops
    assert wait_for(lambda: observer.snapshot() == {}, timeout=2 * 1.0)
    observer.close()


def test_silent_peer_expires(server):
    # A client that stops heartbeating (but keeps its socket open) is expired
    # within the liveness timeout.
    c = client_for(server, 1, ping_interval=999)
    c.register("/t", PUB)
    observer = client_for(server, 2, ping_interval=0.3)
    assert wait_for(lambda: observer.snapshot() == {}, timeout=2 * 1.0 + 1.0)
    observer.close()
    c.close()


def test_registry_unreachable():
    with pytest.raises(RegistryUnavailable):
        RegistryClient("127.0.0.1:1", make_endpoint(1))


def test_concurrent_registrations_consistent_snapshots(server):
    # 100 concurrent registrations while snapshotting: every snapshot must be
    # internally consistent (publisher sets only ever grow here, and no
    # snapshot may contain an endpoint that never registered).
    n = 100
    clients = [client_for(server, (i % 150) + 1, ping_interval=30) for i in range(30)]
    stop = threading.Event()
    bad: list = []

    def snapshotter():
        observer = client_for(server, 200, ping_interval=30)
        while not stop.is_set():
            snap = observer.snapshot()
            for topic, rec in snap.items():
                if not topic.startswith("/load"):
                    continue
                for ep in rec.publishers | rec.subscribers:
                    if not ep.name.startswith("n"):
                        bad.append((topic, ep))
        observer.close()

    snap_thread = threading.Thread(target=snapshotter)
    snap_thread.start()
    threads = []
    for i in range(n):
        c = clients[i % len(clients)]
        t = threading.Thread(
            target=c.register, args=(f"/load/{i % 7}", PUB if i % 2 else SUB)
        )
        threads.append(t)
        t.start()
    for t in threads:
        t.join()
    stop.set()
    snap_thread.join()
    assert bad == []
    final = clients[0].snapshot()
    total = sum(len(r.publishers) + len(r.subscribers) for t, r in final.items() if t.startswith("/load"))
    assert total == len({(i % len(clients), f"/load/{i % 7}", i % 2) for i in range(n)})
    for c in clients:
        c.close()


def test_ping_round_trip(server):
    c = client_for(server, 1)
    rtt = c.ping()
    assert 0 < rtt < 1.0
    c.close()

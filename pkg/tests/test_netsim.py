import pytest

from replicavm import experiments as ex
from replicavm.netsim import (
    FaultEvent, PingClient, ScenarioError, Simulator, StreamClient, VirtualSwitch, parse_scenario,
    parse_time,
)
from replicavm.replication import build_cluster, run_scenario

_SEQ = (0).to_bytes(8, "little")


def _echo(switch, name):
    def handler(payload, src):
        switch.deliver(name, src, payload)
    switch.attach(name, handler)


def test_parse_time():
    assert parse_time("2s") == 2000.0
    assert parse_time("250ms") == 250.0
    assert parse_time("1.5s") == 1500.0
    with pytest.raises(ValueError):
        parse_time("5 minutes")


def test_parse_full_scenario():
    sc = parse_scenario("""
        # three replicas, stream, failover
        replicas 3
        workload streamcopy 32
        delayed-sends off
        drift-max 20000
        lag 5000
        heartbeat-ms 50
        miss-threshold 4
        latency-ms 2
        slowdown 2 1.5
        client stream 128
        kill primary @ t=2s
        kill secondary 2 @ t=250ms
    """)
    assert sc.replicas == 3 and sc.workload == "streamcopy" and sc.param == 32
    assert not sc.delayed_sends and sc.drift_max == 20000 and sc.lag == 5000
    assert sc.heartbeat_ms == 50.0 and sc.miss_threshold == 4 and sc.latency_ms == 2.0
    assert sc.slowdown == {2: 1.5}
    assert sc.client == ("stream", 128)
    assert sc.events == [FaultEvent(2000.0, "kill", "primary"), FaultEvent(250.0, "kill", "secondary", 2)]


@pytest.mark.parametrize("text,line", [
    ("replicas 3\nbogus 1\n", 2),
    ("replicas 3\n\nkill primary @ t=soon\n", 3),
    ("reboot primary @ t=1s\n", 1),
    ("kill everyone @ t=1s\n", 1),
    ("delayed-sends maybe\n", 1),
    ("replicas\n", 1),
    ("client stream\n", 1),
])
def test_scenario_errors_carry_line_numbers(text, line):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_deliver_and_drop_counting():
    sim = Simulator()
    sw = VirtualSwitch(sim, latency_ms=1.0)
    got = []
    sw.attach("a", lambda p, s: got.append((sim.now, p, s)))
    sw.bind("vm", "a")
    assert sw.deliver("c", "vm", b"x")
    assert not sw.deliver("c", "nowhere", b"y")
    sim.run()
    assert got == [(1.0, b"x", "c")]
    assert sw.dropped == 1
    assert [d.payload for d in sw.delivery_log] == [b"x"]


def test_in_order_per_link():
    sim = Simulator()
    sw = VirtualSwitch(sim)
    got = []
    sw.attach("a", lambda p, s: got.append(p))
    for i in range(50):
        sw.deliver("c", "a", bytes([i]))
    sim.run()
    assert got == [bytes([i]) for i in range(50)]
    times = [d.arrived for d in sw.delivery_log]
    assert times == sorted(times)


def test_rebind_then_ping_reaches_new_endpoint():
    sim = Simulator()
    sw = VirtualSwitch(sim)
    _echo(sw, "old")
    _echo(sw, "new")
    sw.bind("vm", "old")
    sw.detach("old")
    done = sw.rebind("vm", "new")
    assert done == pytest.approx(50.0)
    ping = PingClient(sim, sw, "vm", count=5, interval_ms=20.0, start_ms=60.0)
    sim.run()
    assert ping.series() == [2.0] * 5
    assert {d.endpoint for d in sw.delivery_log if d.dst == "vm"} == {"new"}


def test_no_rebind_after_death_pings_unanswered():
    sim = Simulator()
    sw = VirtualSwitch(sim)
    _echo(sw, "old")
    sw.bind("vm", "old")
    sw.detach("old")
    ping = PingClient(sim, sw, "vm", count=20, interval_ms=10.0)
    sim.run()
    assert ping.lost() == 20
    assert ping.median_rtt() is None


def test_ping_rtt_is_two_link_latencies():
    sim = Simulator()
    sw = VirtualSwitch(sim, latency_ms=3.0)
    _echo(sw, "vmhost")
    sw.bind("vm", "vmhost")
    ping = PingClient(sim, sw, "vm", count=4, interval_ms=5.0)
    sim.run()
    assert ping.median_rtt() == 6.0
    assert ping.unresponsive_window() <= 6.0 + 5.0


def _stream_client(total):
    sim = Simulator()
    sw = VirtualSwitch(sim)
    client = StreamClient(sim, sw, total)
    return sim, sw, client


def _send(sim, sw, seqs):
    for i, s in enumerate(seqs):
        sim.at(float(i), sw.deliver, "vm", "client", s.to_bytes(8, "little") + b"data")
    sim.run()


def test_stream_client_in_order_completes():
    sim, sw, client = _stream_client(5)
    _send(sim, sw, range(5))
    r = client.result()
    assert r.completed and not r.stalled and not r.regression_detected and r.gaps == 0


def test_stream_client_regression_stalls():
    sim, sw, client = _stream_client(6)
    _send(sim, sw, [0, 1, 2, 3, 1, 2, 3, 4, 5])
    r = client.result()
    assert r.regression_detected and r.stalled and not r.completed
    assert r.frames == 4


def test_stream_client_tolerates_gaps():
    sim, sw, client = _stream_client(6)
    _send(sim, sw, [0, 1, 4, 5])
    r = client.result()
    assert r.completed and r.gaps == 2 and not r.regression_detected


def test_stream_baseline_no_failure_no_delayed_sends():
    r = run_scenario(ex.stream_scenario(seed=1, delayed_sends=False))
    assert r.stream.completed and not r.stream.regression_detected and r.stream.gaps == 0
    assert r.converged


def test_kill_mid_stream_without_delayed_sends_regresses():
    r = run_scenario(ex.stream_scenario(seed=2, delayed_sends=False, lag=5000, kill_ms=150.0))
    assert r.stream.regression_detected and r.stream.stalled
    assert len(r.promotions) == 1


def test_kill_mid_stream_with_delayed_sends_continues():
    r = run_scenario(ex.stream_scenario(seed=2, delayed_sends=True, lag=5000, kill_ms=150.0))
    assert r.stream.completed and not r.stream.regression_detected
    assert r.promotions[0].rolled_back_outputs == 0


def test_sequence_strictly_increasing_across_two_failovers():
    sc = ex.stream_scenario(seed=4, delayed_sends=True, lag=2000, kill_ms=100.0, blocks=128)
    sc.events.append(FaultEvent(900.0, "kill", "primary"))
    sim, switch, cluster, client = build_cluster(sc)
    sim.run(until=sc.duration_ms, stop=lambda: client.completed or client.stalled)
    assert len(cluster.promotions) == 2
    seqs = [int.from_bytes(d.payload[:8], "little") for d in switch.delivery_log if d.endpoint == "client"]
    assert all(a < b for a, b in zip(seqs, seqs[1:]))
    assert client.completed


def test_failover_window_is_detection_plus_promotion_plus_rebind():
    r = ex.failover_latency(seed=3)
    (p,) = r.promotions
    hb = r.scenario.heartbeat_ms
    # detection needs more than miss_threshold periods of silence, checked every period
    detect = p.detected_ms - p.failed_ms
    assert hb * r.scenario.miss_threshold - hb < detect <= hb * (r.scenario.miss_threshold + 2)
    assert p.rebound_ms - p.live_ms == pytest.approx(r.scenario.rebind_ms)
    window = r.unresponsive_ms
    assert p.failover_ms - 20.0 <= window <= p.failover_ms + 40.0
    assert r.ping_rtt[-1] is not None

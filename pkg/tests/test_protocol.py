import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skyseg import config as cfgmod
from skyseg.backends import DEFAULT_BN_CHANNELS, OracleBackend
from skyseg.errors import ConfigError, EncodingError, FrameError, ParameterError
from skyseg.metrics import volume_refinement, volume_stats
from skyseg.numerics import upsample_nearest
from skyseg.protocol import (
    HEADER_SIZE,
    FinalResult,
    FollowerNode,
    LeaderNode,
    MessageLog,
    MissionTrace,
    NetworkModel,
    Refinement,
    RoundConfig,
    StatShare,
    TaskAssign,
    corruption_at,
    decode,
    encode,
    payload_breakdown,
    run_mission,
    run_round,
    transmission_time,
)
from skyseg.tta import NormStats
from skyseg.world import GeoRect, generate_scene

from conftest import oracle_config, small_config
from messages_gen import assert_round_trip, grid, random_message


# codec ---------------------------------------------------------------------------


@pytest.mark.parametrize("h,w", [(400, 600), (300, 400), (1, 1), (7, 13)])
def test_refinement_sizes(h, w, rng):
    msg = Refinement(3, 2, *grid(rng, h, w))
    frame = encode(msg)
    assert len(frame) == HEADER_SIZE + volume_refinement(h, w)
    assert decode(frame, {2: (h, w)}) == msg


def test_paper_refinement_volumes(rng):
    assert payload_breakdown(Refinement(0, 0, *grid(rng, 400, 600))) == (1_440_000, 0)
    assert payload_breakdown(Refinement(0, 0, *grid(rng, 300, 400))) == (720_000, 0)


def test_statshare_default_layout(rng):
    layers = tuple(NormStats(rng.normal(size=c), rng.random(c)) for c in DEFAULT_BN_CHANNELS)
    msg = StatShare(1, layers, 1, 2)
    assert payload_breakdown(msg) == (volume_stats(17872), 240) == (71_488, 240)
    frame = encode(msg)
    assert len(frame) == HEADER_SIZE + 71_488 + 240
    back = decode(frame)
    for a, b in zip(layers, back.layers):
        # binary16: relative error at most 2**-11 for normal values
        np.testing.assert_allclose(b.mean, a.mean, rtol=2**-11, atol=2**-24)
        np.testing.assert_allclose(b.var, a.var, rtol=2**-11, atol=2**-24)


def test_header_layout(rng):
    frame = encode(Refinement(0x01020304, 3, *grid(rng, 2, 2), sender=2, recipient=0))
    assert frame[:4] == b"SKYM"
    assert frame[4:8] == bytes([2, 2, 0, 3])
    assert frame[8:12] == (0x01020304).to_bytes(4, "little")
    assert frame[12:16] == (24).to_bytes(4, "little")


def test_task_and_final_round_trip(rng):
    task = TaskAssign(7, (GeoRect(0, 0, 10, 10), GeoRect(10, 0, 20, 10), GeoRect(0, 10, 10, 20)), (0, 1, 2), 0, 3)
    assert decode(encode(task)) == task
    final = FinalResult(2, *grid(rng, 5, 4))
    assert decode(encode(final)) == final


def test_truncated_and_bad_frames(rng):
    frame = encode(TaskAssign(1, (GeoRect(0, 0, 4, 4),), (0,), 0, 1))
    for cut in (0, 5, HEADER_SIZE, len(frame) - 1):
        with pytest.raises(FrameError):
            decode(frame[:cut])
    with pytest.raises(FrameError):
        decode(b"XXXX" + frame[4:])
    ref = encode(Refinement(0, 1, *grid(rng, 3, 3)))
    with pytest.raises(FrameError):
        decode(ref)
    with pytest.raises(FrameError):
        decode(ref, {1: (3, 4)})


def test_encoding_errors(rng):
    with pytest.raises(EncodingError):
        encode(Refinement(0, 0, np.full((2, 2), 65536, np.int64), np.zeros((2, 2), np.float32)))
    with pytest.raises(EncodingError):
        encode(StatShare(0, (NormStats([1e6], [1.0]),)))
    with pytest.raises(EncodingError):
        encode(TaskAssign(0, (GeoRect(0, 0, 1, 1),), (0,), 0, 300))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**63))
def test_codec_round_trip_property(seed):
    assert_round_trip(*random_message(seed))


# network -----------------------------------------------------------------------


def test_transmission_time_examples():
    assert transmission_time(0, NetworkModel(rtt=0.01)) == pytest.approx(0.005)
    assert transmission_time(1_440_000, NetworkModel(bandwidth=10e6, rtt=0)) == pytest.approx(0.144)
    a = transmission_time(10**6, NetworkModel(bandwidth=1e6, rtt=0))
    b = transmission_time(10**6, NetworkModel(bandwidth=2e6, rtt=0))
    assert b == pytest.approx(a / 2)
    with pytest.raises(ParameterError):
        NetworkModel(bandwidth=0)


def test_loss_is_deterministic():
    net = NetworkModel(loss_rate=0.5, seed=4)
    draws = [net.delivered(r, 2, 1, 0) for r in range(200)]
    assert draws == [net.delivered(r, 2, 1, 0) for r in range(200)]
    assert 60 < sum(draws) < 140


# rounds ------------------------------------------------------------------------------


def oracle_parties(k, leader_acc=0.7, follower_acc=0.95, follower_conf=0.9, latencies=None):
    leader = LeaderNode(OracleBackend(leader_acc, 0.6), (200, 300))
    lat = latencies or [0.0] * k
    followers = [FollowerNode(i + 1, OracleBackend(follower_acc, follower_conf, latency=lat[i])) for i in range(k)]
    return leader, followers


@pytest.fixture(scope="module")
def oscene():
    return generate_scene(11, 600, 400, 6)


def test_zero_followers_gives_coarse(oscene):
    leader, _ = oracle_parties(0)
    fused, rep = run_round(oscene, leader, [], NetworkModel(), RoundConfig())
    coarse = leader.backend.predict(oscene, oscene.rect, np.random.SeedSequence([0, 0, 2, 0]), (200, 300))
    np.testing.assert_array_equal(fused.labels, upsample_nearest(coarse.labels, 400, 600))
    assert rep.bytes_per_link == {} and rep.received == [] and rep.miou_fused == rep.miou_coarse


def test_perfect_followers_replace(oscene):
    leader, followers = oracle_parties(3, follower_acc=1.0, follower_conf=1.0)
    fused, rep = run_round(oscene, leader, followers, NetworkModel(), RoundConfig(fusion="replace"))
    assert rep.miou_fused >= rep.miou_coarse
    for idx, f in zip(rep.selected, followers):
        r = GeoRect(*[(0, 0, 300, 200), (300, 0, 600, 200), (0, 200, 300, 400), (300, 200, 600, 400)][idx])
        np.testing.assert_array_equal(fused.labels[r.slices], oscene.labels[r.slices])


def test_round_is_deterministic(oscene):
    reports = []
    for _ in range(2):
        leader, followers = oracle_parties(3)
        reports.append(run_round(oscene, leader, followers, NetworkModel(loss_rate=0.2, seed=3), RoundConfig(seed=9))[1])
    assert reports[0].to_dict() == reports[1].to_dict()


def test_follower_latency_is_max_not_sum(oscene):
    leader, followers = oracle_parties(3, latencies=[0.1, 0.4, 0.2])
    net = NetworkModel()
    _, rep = run_round(oscene, leader, followers, net, RoundConfig())
    assert rep.latency["follower_inference"] == pytest.approx(0.4)
    slowest = max(rep.follower_paths.values())
    assert rep.latency["total"] == pytest.approx(
        rep.latency["leader_inference"] + slowest + rep.latency["fusion"] + rep.latency["tta_exchange"]
    )
    assert slowest < sum(rep.follower_paths.values())


def test_lossless_receives_every_patch(oscene):
    leader, followers = oracle_parties(4)
    _, rep = run_round(oscene, leader, followers, NetworkModel(), RoundConfig())
    assert sorted(rep.received) == sorted(rep.selected) == [0, 1, 2, 3]
    assert set(rep.refinement_payload.values()) == {volume_refinement(200, 300)}


def test_loss_degrades_to_received_patches(oscene):
    leader, followers = oracle_parties(3)
    fused, rep = run_round(oscene, leader, followers, NetworkModel(loss_rate=1.0), RoundConfig())
    assert rep.received == []
    assert rep.miou_fused == rep.miou_coarse
    log = MessageLog()
    leader, followers = oracle_parties(3)
    _, rep = run_round(oscene, leader, followers, NetworkModel(loss_rate=0.5, seed=1), RoundConfig(), message_log=log)
    assert set(rep.received) <= set(rep.selected)
    assert all(len(line) for line in log.dumps().splitlines())


def test_too_many_followers(oscene):
    leader, _ = oracle_parties(0)
    _, followers = oracle_parties(5)
    with pytest.raises(ConfigError):
        run_round(oscene, leader, followers, NetworkModel(), RoundConfig())


def test_bad_enum_rejected(oscene):
    leader, followers = oracle_parties(1)
    with pytest.raises(ConfigError):
        run_round(oscene, leader, followers, NetworkModel(), RoundConfig(fusion="blend"))


def test_corruption_schedule_lookup():
    sched = [(0, "snow", 2), (5, "fog", 5)]
    assert corruption_at(sched, 0) == ("snow", 2)
    assert corruption_at(sched, 5) == ("fog", 5)
    assert corruption_at([], 3) == ("none", 0)


# missions --------------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3])
def test_stat_traffic_constant_across_corruption_switch(n):
    """Default follower layout: each follower sends 71,488 B of statistics to every peer."""
    cfg = oracle_config(followers=n, **{"follower.backend": "cnn", "corruption.schedule": [[0, "none", 0], [2, "fog", 5]]})
    cfg["scene"].update(width=1200, height=800)
    cfg["leader"].update(height=400, width=600)
    cfg["calibration"]["images"] = 1
    sc = cfgmod.build(cfg)
    reports = run_mission(sc.scene, sc.schedule, sc.leader, sc.followers, sc.net, sc.round_config, 4)
    assert [r.corruption for r in reports] == ["none", "none", "fog", "fog"]
    for r in reports:
        assert set(r.stat_payload.values()) == {71_488 * (n - 1)}
        assert set(r.stat_framing.values()) == {240 * (n - 1)}
        assert set(r.refinement_payload.values()) == {1_440_000}


def test_clean_mission_stats_stay_in_envelope():
    cfg = small_config(followers=3, tta="cross")
    sc = cfgmod.build(cfg)
    init_leader = [(s.mean.copy(), s.var.copy()) for s in sc.leader.ln_stats]
    init_f = [(s.mean.copy(), s.var.copy()) for s in sc.followers[0].bank.running]
    trace = MissionTrace()
    run_mission(sc.scene, [], sc.leader, sc.followers, sc.net, sc.round_config, 12, trace=trace)
    # leader: every adapted value lies within [min, max] of init and all observed sample stats
    for layer, (m0, v0) in enumerate(init_leader):
        seen_m = [m0] + [rt.leader_sample_stats[layer].mean for rt in trace.rounds]
        seen_v = [v0] + [rt.leader_sample_stats[layer].var for rt in trace.rounds]
        for rt in trace.rounds:
            assert np.all(rt.leader_stats[layer].mean >= np.min(seen_m, axis=0) - 1e-12)
            assert np.all(rt.leader_stats[layer].mean <= np.max(seen_m, axis=0) + 1e-12)
            assert np.all(rt.leader_stats[layer].var >= np.min(seen_v, axis=0) - 1e-12)
            assert np.all(rt.leader_stats[layer].var <= np.max(seen_v, axis=0) + 1e-12)
    for layer, (m0, v0) in enumerate(init_f):
        seen_m = [m0] + [b[layer].mean for rt in trace.rounds for b in rt.follower_batch.values()]
        seen_v = [v0] + [b[layer].var for rt in trace.rounds for b in rt.follower_batch.values()]
        lo_m, hi_m = np.min(seen_m, axis=0), np.max(seen_m, axis=0)
        lo_v, hi_v = np.min(seen_v, axis=0), np.max(seen_v, axis=0)
        for rt in trace.rounds:
            for stats in rt.follower_stats.values():
                # binary16 rounding on the wire can nudge values by one half-precision ulp
                tol_m = 1e-3 * (1 + np.abs(hi_m))
                tol_v = 1e-3 * (1 + np.abs(hi_v))
                assert np.all(stats[layer].mean >= lo_m - tol_m) and np.all(stats[layer].mean <= hi_m + tol_m)
                assert np.all(stats[layer].var >= lo_v - tol_v) and np.all(stats[layer].var <= hi_v + tol_v)
                assert np.all(stats[layer].var >= 0)


def test_cross_tta_followers_symmetric():
    sc = cfgmod.build(small_config(followers=3, tta="cross"))
    trace = MissionTrace()
    run_mission(sc.scene, [], sc.leader, sc.followers, sc.net, sc.round_config, 5, trace=trace)
    for rt in trace.rounds:
        a, b, c = (rt.follower_stats[i] for i in (1, 2, 3))
        assert a == b == c


def test_mission_rejects_zero_rounds():
    sc = cfgmod.build(oracle_config(followers=1))
    with pytest.raises(ConfigError):
        run_mission(sc.scene, [], sc.leader, sc.followers, sc.net, sc.round_config, 0)


def test_mission_reports_identical_across_runs():
    out = []
    for _ in range(2):
        sc = cfgmod.build(small_config(followers=2, **{"network.loss_rate": 0.1}))
        out.append([r.to_dict() for r in run_mission(sc.scene, sc.schedule, sc.leader, sc.followers, sc.net, sc.round_config, 4)])
    assert out[0] == out[1]


def test_tta_off_leaves_state_untouched():
    sc = cfgmod.build(small_config(followers=2, tta="off"))
    before = list(sc.followers[0].bank.running)
    run_mission(sc.scene, [], sc.leader, sc.followers, sc.net, dataclasses.replace(sc.round_config, tta="off"), 2)
    assert sc.followers[0].bank.running == before

"""Acceptance suite: one PASS/FAIL line per primary criterion.

Lines are printed as each check runs and repeated in the terminal summary.
"""

import json
import time

import numpy as np

from skyseg import config as cfgmod
from skyseg.backends import DEFAULT_BN_CHANNELS, AttentionStack, SegPrediction
from skyseg.cli import execute, write_run
from skyseg.fusion import probability_fusion
from skyseg.metrics import miou, volume_refinement, volume_stats, volume_stats_per_follower
from skyseg.protocol import MissionTrace, Refinement, StatShare, encode, payload_breakdown, run_mission
from skyseg.protocol.messages import HEADER_SIZE
from skyseg.selection import attention_final_map, select_patches
from skyseg.tta import NormStats, ema_update
from skyseg.world import GeoRect

from conftest import oracle_config, small_config
from messages_gen import assert_round_trip, random_message
from oracles import probability_fusion_bruteforce, replay_follower, replay_leader

RESULTS: dict[str, str] = {}


def record(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS[name] = line
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------


def test_wire_volumes():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    def refinement(h, w):
        msg = Refinement(0, 0, rng.integers(0, 6, (h, w)).astype(np.uint16), rng.random((h, w)).astype(np.float32))
        frame = encode(msg)
        return payload_breakdown(msg)[0], len(frame) - HEADER_SIZE

    layers = tuple(NormStats(rng.normal(size=c), rng.random(c)) for c in DEFAULT_BN_CHANNELS)
    per_peer = [payload_breakdown(StatShare(0, layers, 1, peer))[0] for peer in (2, 3)]
    got = {
        "refinement 600x400": refinement(400, 600),
        "refinement 400x300": refinement(300, 400),
        "statshare 17872 ch": (payload_breakdown(StatShare(0, layers))[0], volume_stats(17872)),
        "L-3F per follower": (sum(per_peer), volume_stats_per_follower(17872, 3)),
    }
    want = {"refinement 600x400": 1_440_000, "refinement 400x300": 720_000, "statshare 17872 ch": 71_488, "L-3F per follower": 142_976}
    elapsed = time.perf_counter() - t0
    ok = all(a == b == want[k] for k, (a, b) in got.items()) and volume_refinement(600, 400) == 1_440_000
    ok = ok and volume_refinement(400, 300) == 720_000 and elapsed < 1.0
    detail = ", ".join(f"{k}={v[0]}" for k, v in got.items())
    record("wire volumes", ok, f"{detail} ({elapsed:.2f}s)")


# 2 -------------------------------------------------------------------------------


def _pairs(stats):
    return [(s.mean.tolist(), s.var.tolist()) for s in stats]


def _tta_mission(n, loss):
    sc = cfgmod.build(small_config(followers=n, tta="cross", **{"network.loss_rate": loss, "network.seed": 5}))
    leader_init = [(float(s.mean[0]), float(s.var[0])) for s in sc.leader.ln_stats]
    follower_init = {f.node_id: _pairs(f.bank.running) for f in sc.followers}
    trace = MissionTrace()
    schedule = [(0, "none", 0), (50, "fog", 5)]
    run_mission(sc.scene, schedule, sc.leader, sc.followers, sc.net, sc.round_config, 100, trace=trace)

    err = 0.0
    samples = [[(float(s.mean[0]), float(s.var[0])) for s in rt.leader_sample_stats] for rt in trace.rounds]
    for rt, ref in zip(trace.rounds, replay_leader(leader_init, samples, sc.round_config.alpha)):
        for s, (m, v) in zip(rt.leader_stats, ref):
            err = max(err, abs(s.mean[0] - m), abs(s.var[0] - v))

    rounds = [
        {
            "batch": {i: _pairs(b) for i, b in rt.follower_batch.items()},
            "published": dict(rt.follower_published),
            "received": dict(rt.follower_received),
            "updated": set(rt.follower_stats),
        }
        for rt in trace.rounds
    ]
    for f in sc.followers:
        hist = replay_follower(f.node_id, follower_init[f.node_id], rounds, sc.round_config.alpha)
        for rt, (means, vars_) in zip(trace.rounds, hist):
            if f.node_id not in rt.follower_stats:
                continue
            for s, m, v in zip(rt.follower_stats[f.node_id], means, vars_):
                err = max(err, float(np.max(np.abs(s.mean - m))), float(np.max(np.abs(s.var - v))))
        final = hist[-1]
        for s, m, v in zip(f.bank.running, *final):
            err = max(err, float(np.max(np.abs(s.mean - m))), float(np.max(np.abs(s.var - v))))
    return err


def test_tta_oracle_equivalence():
    t0 = time.perf_counter()
    errs = {f"{n}F": _tta_mission(n, 0.0) for n in (1, 2, 3)}
    errs["3F lossy"] = _tta_mission(3, 0.2)
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-6 and elapsed < 10.0
    record("TTA oracle equivalence", ok, f"max |diff| {worst:.2e} over 100 rounds x {list(errs)} ({elapsed:.1f}s)")


# 3 -------------------------------------------------------------------------------


def test_ema_convexity():
    rng = np.random.default_rng(2024)
    violations = 0
    steps = 0
    for _ in range(10_000):
        c = int(rng.integers(1, 9))
        scale = 10.0 ** rng.uniform(-3, 3)
        alpha = float(rng.choice([0.0, 1.0, 0.05, rng.random()], p=[0.05, 0.05, 0.3, 0.6]))
        state = NormStats(rng.normal(0, scale, c), rng.exponential(scale, c))
        for _ in range(int(rng.integers(1, 30))):
            var = rng.exponential(scale, c) * (rng.random(c) > 0.1)
            inc = NormStats(rng.normal(0, scale, c), var)
            out = ema_update(state, inc, alpha)
            tol = 1e-12 * scale
            lo_m, hi_m = np.minimum(state.mean, inc.mean), np.maximum(state.mean, inc.mean)
            lo_v, hi_v = np.minimum(state.var, inc.var), np.maximum(state.var, inc.var)
            bad = (out.mean < lo_m - tol) | (out.mean > hi_m + tol) | (out.var < lo_v - tol) | (out.var > hi_v + tol)
            violations += int(bad.any() or (out.var < 0).any())
            steps += 1
            state = out
    record("EMA convexity", violations == 0, f"{violations} violations in 10000 sequences / {steps} updates")


# 4 -------------------------------------------------------------------------------


SIZES = (128, 64, 32, 16)


def test_selection_properties():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        a = [(rng.random((s, s)), rng.random((s, s))) for s in SIZES]
        b = [(rng.random((s, s)), rng.random((s, s))) for s in SIZES]
        al, be = rng.uniform(-2, 2, 2)
        mix = AttentionStack(tuple((al * x1 + be * y1, al * x2 + be * y2) for (x1, x2), (y1, y2) in zip(a, b)))
        lhs = attention_final_map(mix).astype(np.float64)
        rhs = al * attention_final_map(AttentionStack(tuple(a))) + be * attention_final_map(AttentionStack(tuple(b)))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    hits = 0
    for _ in range(100):
        q = int(rng.integers(4))
        stages = []
        for s in SIZES:
            h = s // 2
            pair = []
            for _ in range(2):
                m = np.zeros((s, s))
                m[(q // 2) * h : (q // 2 + 1) * h, (q % 2) * h : (q % 2 + 1) * h] = rng.random((h, h)) ** 4
                pair.append(m / m.sum())
            stages.append(tuple(pair))
        final = attention_final_map(AttentionStack(tuple(stages)))
        hits += select_patches(final, 1, GeoRect(0, 0, 600, 400)).indices == [q]
    record("selection linearity / one-quadrant", worst <= 1e-5 and hits == 100, f"max deviation {worst:.2e}, one-quadrant {hits}/100")


# 5 -------------------------------------------------------------------------------


def test_fusion_bruteforce():
    rng = np.random.default_rng(11)
    mismatches = 0
    for _ in range(1000):
        coarse = SegPrediction(rng.integers(0, 5, (8, 8)).astype(np.uint16), rng.random((8, 8)).astype(np.float32))
        refs = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = (int(v) for v in rng.integers(0, 8, 2))
            r = GeoRect(x0, y0, int(rng.integers(x0 + 1, 9)), int(rng.integers(y0 + 1, 9)))
            probs = rng.random(r.shape).astype(np.float32)
            # some exact ties exercise the keep-coarse rule
            tie = rng.random(r.shape) < 0.1
            probs[tie] = coarse.probs[r.slices][tie]
            refs.append((r, SegPrediction(rng.integers(0, 5, r.shape).astype(np.uint16), probs)))
        out = probability_fusion(coarse, refs)
        labels, probs = probability_fusion_bruteforce(
            coarse.labels.tolist(),
            coarse.probs.tolist(),
            [r.as_tuple() for r, _ in refs],
            [(p.labels.tolist(), p.probs.tolist()) for _, p in refs],
        )
        mismatches += int(out.labels.tolist() != labels or out.probs.tolist() != probs)
    record("fusion oracle equivalence", mismatches == 0, f"{mismatches} mismatches in 1000 random 8x8 cases")


# 6 -------------------------------------------------------------------------------


def test_miou_hand_check():
    v = miou(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    same = miou(np.array([[0, 1], [2, 3]]), np.array([[0, 1], [2, 3]]), 4)
    record("mIoU hand check", abs(v - 58.33) <= 0.01 and same == 100.0, f"example {v:.4f}, identical {same}")


# 7 -------------------------------------------------------------------------------


TREND = {
    "scene.hotspots": "random",
    "leader.accuracy": 0.7,
    "leader.confidence": 0.6,
    "follower.accuracy": 0.95,
    "follower.confidence": 0.9,
}


def _mean_fused(**overrides):
    vals = []
    for seed in range(20):
        sc = cfgmod.build(oracle_config(seed=seed, rounds=1, **TREND, **overrides))
        vals.append(run_mission(sc.scene, sc.schedule, sc.leader, sc.followers, sc.net, sc.round_config, 1)[0].miou_fused)
    return float(np.mean(vals))


def test_directional_trends():
    t0 = time.perf_counter()
    by_k = [_mean_fused(followers=k) for k in (1, 2, 3)]
    rand = _mean_fused(followers=3, selection="random")
    replace = _mean_fused(followers=3, fusion="replace")
    elapsed = time.perf_counter() - t0
    attention = by_k[2]
    ok = attention > rand and by_k[0] <= by_k[1] <= by_k[2] and attention >= replace and elapsed < 60
    detail = (
        f"attention {attention:.2f} vs random {rand:.2f}; 1/2/3 followers "
        + "/".join(f"{v:.2f}" for v in by_k)
        + f"; prob {attention:.2f} vs replace {replace:.2f} ({elapsed:.1f}s)"
    )
    record("directional trends", ok, detail)


# 8 -------------------------------------------------------------------------------


def test_determinism(tmp_path):
    configs = {
        "model cross-TTA lossy fog": small_config(
            followers=3, rounds=3, **{"network.loss_rate": 0.2, "corruption.kind": "fog", "corruption.severity": 4}
        ),
        "oracle random-selection": oracle_config(followers=2, selection="random", rounds=3, **{"scene.hotspots": "random"}),
    }
    same = []
    for name, cfg in configs.items():
        outs = []
        for run in ("a", "b"):
            d = tmp_path / f"{name.replace(' ', '_')}_{run}"
            write_run(d, *execute(json.loads(json.dumps(cfg))))
            outs.append(b"".join((d / f).read_bytes() for f in ("report.json", "rounds.csv", "messages.ndjson")))
        same.append(outs[0] == outs[1])
    record("determinism", all(same), f"{sum(same)}/{len(same)} configs byte-identical across two runs")


# 9 -------------------------------------------------------------------------------


def test_codec_round_trip():
    failures = 0
    for seed in range(10_000):
        try:
            assert_round_trip(*random_message(seed))
        except AssertionError:
            failures += 1
    record("codec round trip", failures == 0, f"{failures} failures in 10000 random messages")

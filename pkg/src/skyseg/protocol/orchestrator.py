"""One leader, up to four followers, one round at a time.

A round: leader capture and inference, upsampling of the coarse result,
patch selection, task assignment, parallel follower capture and inference,
refinement upload, fusion, then the normalisation-statistics exchange.
Latencies come from a compute model (MACs / throughput) and the link model,
so reports are reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ..backends import (
    CnnBackend,
    OracleBackend,
    SegPrediction,
    TransformerBackend,
    cnn_forward,
    transformer_forward,
)
from ..errors import ConfigError, StateError
from ..fusion import FUSION_METHODS, fuse
from ..metrics import miou
from ..numerics import area_resize, resize_nearest, upsample_nearest
from ..selection import (
    MAX_PATCHES,
    SELECTION_METHODS,
    PatchRanking,
    SelectionWeights,
    attention_final_map,
    baseline_ranking,
    select_patches,
)
from ..tta import AGGREGATE_MODES, MemoryBank, NormStats, adapt_step_follower, adapt_step_leader
from ..world import CORRUPTIONS, Scene, apply_corruption, follower_capture, leader_capture
from .messages import (
    LEADER_ID,
    REFINEMENT,
    STAT_SHARE,
    TASK_ASSIGN,
    Refinement,
    StatShare,
    TaskAssign,
    decode,
    encode,
    payload_breakdown,
    quantize_half,
)
from .network import NetworkModel, transmission_time

log = logging.getLogger(__name__)

TTA_MODES = ("off", "local", "cross")

# purpose tags for derived seeds
_CORRUPT, _LEADER, _FOLLOWER, _SELECT = 1, 2, 3, 4


@dataclass
class LeaderNode:
    backend: TransformerBackend | OracleBackend
    resolution: tuple[int, int] = (400, 600)  # (h, w) of the wide-area capture
    macs_per_second: float = 1e11
    ln_stats: list[NormStats] | None = None


@dataclass
class FollowerNode:
    node_id: int
    backend: CnnBackend | OracleBackend
    macs_per_second: float = 5e10
    bank: MemoryBank | None = None


@dataclass(frozen=True)
class RoundConfig:
    fusion: str = "prob"
    selection: str = "attention"
    tta: str = "cross"
    aggregate: str = "mean"
    alpha: float = 0.05
    weights: SelectionWeights = SelectionWeights()
    corruption: str = "none"
    severity: int = 0
    seed: int = 0
    fusion_seconds_per_pixel: float = 2e-9

    def validate(self) -> None:
        for name, value, allowed in (
            ("fusion", self.fusion, FUSION_METHODS),
            ("selection", self.selection, SELECTION_METHODS),
            ("tta", self.tta, TTA_MODES),
            ("aggregate", self.aggregate, AGGREGATE_MODES),
            ("corruption", self.corruption, ("none",) + CORRUPTIONS),
        ):
            if value not in allowed:
                raise ConfigError(f"{name}={value!r} is not one of: {', '.join(allowed)}")


@dataclass
class RoundReport:
    round_id: int
    corruption: str
    severity: int
    selected: list[int]
    received: list[int]
    latency: dict[str, float]
    follower_paths: dict[str, float]
    bytes_per_link: dict[str, int]
    refinement_payload: dict[str, int]
    stat_payload: dict[str, int]
    stat_framing: dict[str, int]
    miou_coarse: float
    miou_fused: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MessageLog:
    """Every frame put on a link, with a digest for replay comparison."""

    records: list[dict] = field(default_factory=list)

    def record(self, round_id: int, kind: str, sender: int, recipient: int, frame: bytes, delivered: bool) -> None:
        self.records.append(
            {
                "round": round_id,
                "variant": kind,
                "sender": sender,
                "recipient": recipient,
                "bytes": len(frame),
                "delivered": delivered,
                "sha256": hashlib.sha256(frame).hexdigest(),
            }
        )

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class RoundTrace:
    leader_sample_stats: list[NormStats] | None = None
    leader_stats: list[NormStats] | None = None
    follower_batch: dict[int, list[NormStats]] = field(default_factory=dict)
    follower_published: dict[int, bool] = field(default_factory=dict)
    follower_received: dict[int, list[int]] = field(default_factory=dict)
    follower_stats: dict[int, list[NormStats]] = field(default_factory=dict)


@dataclass
class MissionTrace:
    """Optional per-round record of adaptation inputs and outputs."""

    rounds: list[RoundTrace] = field(default_factory=list)


def derive_seed(seed: int, round_id: int, purpose: int, node: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, round_id, purpose, node])


def init_tta(leader: LeaderNode, followers: Sequence[FollowerNode], config: RoundConfig) -> None:
    """Start every device's adaptation state from its training-time statistics."""
    if isinstance(leader.backend, TransformerBackend) and leader.backend.ln_init is not None:
        leader.ln_stats = list(leader.backend.ln_init)
    for f in followers:
        if isinstance(f.backend, CnnBackend):
            f.bank = MemoryBank(list(f.backend.running_stats), config.alpha, f.node_id, config.aggregate)


def _link(a: int, b: int) -> str:
    return f"{a}->{b}"


def _leader_inference(scene: Scene, leader: LeaderNode, config: RoundConfig, round_id: int, need_attention: bool):
    obs = leader_capture(scene, *leader.resolution)
    if config.corruption != "none":
        obs = apply_corruption(obs, config.corruption, config.severity, derive_seed(config.seed, round_id, _CORRUPT).entropy)
    b = leader.backend
    if isinstance(b, TransformerBackend):
        size = b.config.input_size
        adapted = leader.ln_stats if config.tta != "off" else None
        if config.tta != "off" and adapted is None:
            raise StateError("leader LN statistics not initialised; calibrate the backend first")
        out = transformer_forward(b, area_resize(obs.image, size, size), adapted)
        h, w = leader.resolution
        pred = SegPrediction(resize_nearest(out.prediction.labels, h, w), resize_nearest(out.prediction.probs, h, w))
        return pred, out.attention, out.ln_stats, b.macs() / leader.macs_per_second
    seed = derive_seed(config.seed, round_id, _LEADER)
    pred = b.predict(scene, scene.rect, seed, out_shape=leader.resolution)
    attention = b.attention(scene, scene.rect, derive_seed(config.seed, round_id, _LEADER, 1)) if need_attention else None
    return pred, attention, None, b.latency


def _rank(config: RoundConfig, attention, k: int, scene: Scene, round_id: int) -> PatchRanking:
    if config.selection == "attention":
        return select_patches(attention_final_map(attention, config.weights), k, scene.rect)
    rng = np.random.default_rng(derive_seed(config.seed, round_id, _SELECT))
    return baseline_ranking(config.selection, k, scene.rect, rng)


def run_round(
    scene: Scene,
    leader: LeaderNode,
    followers: Sequence[FollowerNode],
    net: NetworkModel,
    config: RoundConfig,
    round_id: int = 0,
    message_log: MessageLog | None = None,
    trace: MissionTrace | None = None,
) -> tuple[SegPrediction, RoundReport]:
    config.validate()
    k = len(followers)
    if k > MAX_PATCHES:
        raise ConfigError(f"{k} followers requested; the 2x2 grid supports at most {MAX_PATCHES}")
    ids = [f.node_id for f in followers]
    if len(set(ids)) != k or LEADER_ID in ids:
        raise ConfigError("follower ids must be unique and differ from the leader id")
    h, w = leader.resolution
    if scene.height % h or scene.width % w:
        raise ConfigError(f"scene {scene.height}x{scene.width} is not a multiple of leader resolution {h}x{w}")

    link_bytes: dict[str, int] = {}
    rt = RoundTrace()

    def send(msg, kind: str, patch_shapes=None):
        frame = encode(msg)
        link = _link(msg.sender, msg.recipient)
        link_bytes[link] = link_bytes.get(link, 0) + len(frame)
        variant = {"TaskAssign": TASK_ASSIGN, "Refinement": REFINEMENT, "StatShare": STAT_SHARE}[kind]
        ok = net.delivered(round_id, variant, msg.sender, msg.recipient)
        if message_log is not None:
            message_log.record(round_id, kind, msg.sender, msg.recipient, frame, ok)
        received = decode(frame, patch_shapes) if ok else None
        return frame, received

    # steps 1-4: capture, coarse inference + attention, upsample
    need_attention = k > 0 and config.selection == "attention"
    low, attention, ln_seen, leader_latency = _leader_inference(scene, leader, config, round_id, need_attention)
    coarse = SegPrediction(
        upsample_nearest(low.labels, scene.height, scene.width),
        upsample_nearest(low.probs, scene.height, scene.width),
    )

    # step 5-6: selection and assignment
    ranking = _rank(config, attention, k, scene, round_id) if k else PatchRanking(None, ())
    patch_shapes = {p.index: p.rect.shape for p in ranking.ranked}
    paths: dict[str, float] = {}
    assign_tx: dict[str, float] = {}
    infer: dict[str, float] = {}
    refine_tx: dict[str, float] = {}
    refinement_payload: dict[str, int] = {}
    refinements = []
    received: list[int] = []
    batch: dict[int, list[NormStats]] = {}

    # steps 7-10, logically parallel across followers
    for f, patch in zip(followers, ranking.ranked):
        key = str(f.node_id)
        frame, task = send(TaskAssign(round_id, (patch.rect,), (patch.index,), LEADER_ID, f.node_id), "TaskAssign")
        assign_tx[key] = transmission_time(len(frame), net)
        paths[key] = assign_tx[key]
        if task is None:
            log.info("round %d: task for follower %d lost", round_id, f.node_id)
            continue
        rect, index = task.rects[0], task.patch_ids[0]
        obs = follower_capture(scene, rect)
        if config.corruption != "none":
            seed = derive_seed(config.seed, round_id, _CORRUPT, f.node_id).entropy
            obs = apply_corruption(obs, config.corruption, config.severity, seed)
        b = f.backend
        if isinstance(b, CnnBackend):
            if config.tta != "off" and f.bank is None:
                raise StateError(f"follower {f.node_id} has no adaptation state")
            adapted = f.bank.running if config.tta != "off" else None
            mode = "collecting" if config.tta != "off" else "frozen"
            out = cnn_forward(b, obs.image, mode, adapted)
            pred = out.prediction
            if out.bn_stats is not None:
                batch[f.node_id] = out.bn_stats
            infer[key] = b.macs(*rect.shape) / f.macs_per_second
        else:
            pred = b.predict(scene, rect, derive_seed(config.seed, round_id, _FOLLOWER, f.node_id))
            infer[key] = b.latency
        msg = Refinement(round_id, index, pred.labels, pred.probs, f.node_id, LEADER_ID)
        frame, got = send(msg, "Refinement", patch_shapes)
        refinement_payload[key] = payload_breakdown(msg)[0]
        refine_tx[key] = transmission_time(len(frame), net)
        paths[key] += infer[key] + refine_tx[key]
        if got is not None:
            refinements.append((rect, got.prediction()))
            received.append(index)

    # step 11
    fused = fuse(config.fusion, coarse, refinements)
    fusion_latency = sum(r.height * r.width for r, _ in refinements) * config.fusion_seconds_per_pixel

    # adaptation
    if config.tta != "off" and ln_seen is not None:
        rt.leader_sample_stats = ln_seen
        leader.ln_stats = adapt_step_leader(leader.ln_stats, ln_seen, config.alpha)
        rt.leader_stats = leader.ln_stats
    stat_payload: dict[str, int] = {}
    stat_framing: dict[str, int] = {}
    tta_tx: dict[str, float] = {}
    banked = [f for f in followers if f.bank is not None]
    if config.tta != "off":
        local: dict[int, list[NormStats]] = dict(batch)
        if config.tta == "cross":
            for s in banked:
                if s.node_id not in batch:
                    continue
                key = str(s.node_id)
                stat_payload[key] = stat_framing[key] = 0
                tta_tx[key] = 0.0
                for r in banked:
                    if r is s:
                        continue
                    msg = StatShare(round_id, tuple(batch[s.node_id]), s.node_id, r.node_id)
                    frame, got = send(msg, "StatShare")
                    data, framing = payload_breakdown(msg)
                    stat_payload[key] += data
                    stat_framing[key] += framing
                    tta_tx[key] += transmission_time(len(frame), net)
                    if got is not None:
                        r.bank.store(s.node_id, list(got.layers))
                published = len(banked) > 1
                if published:
                    # peers only ever see wire-precision values; pool the same values locally
                    local[s.node_id] = [NormStats(quantize_half(m.mean), quantize_half(m.var)) for m in batch[s.node_id]]
                rt.follower_published[s.node_id] = published
        for f in banked:
            rt.follower_received[f.node_id] = sorted(f.bank.peers)
            own = local.get(f.node_id)
            if own is None and not f.bank.peers:
                continue
            adapt_step_follower(f.bank, own)
            rt.follower_stats[f.node_id] = list(f.bank.running)
        rt.follower_batch = batch
    if trace is not None:
        trace.rounds.append(rt)

    follower_max = max(paths.values(), default=0.0)
    latency = {
        "leader_inference": leader_latency,
        "assignment_tx": max(assign_tx.values(), default=0.0),
        "follower_inference": max(infer.values(), default=0.0),
        "refinement_tx": max(refine_tx.values(), default=0.0),
        "fusion": fusion_latency,
        "tta_exchange": max(tta_tx.values(), default=0.0),
    }
    latency["total"] = leader_latency + follower_max + fusion_latency + latency["tta_exchange"]
    report = RoundReport(
        round_id=round_id,
        corruption=config.corruption,
        severity=config.severity if config.corruption != "none" else 0,
        selected=ranking.indices,
        received=received,
        latency=latency,
        follower_paths=paths,
        bytes_per_link=dict(sorted(link_bytes.items())),
        refinement_payload=refinement_payload,
        stat_payload=stat_payload,
        stat_framing=stat_framing,
        miou_coarse=miou(coarse.labels, scene.labels, scene.num_classes),
        miou_fused=miou(fused.labels, scene.labels, scene.num_classes),
    )
    log.debug("round %d: coarse %.2f fused %.2f", round_id, report.miou_coarse, report.miou_fused)
    return fused, report


def corruption_at(schedule: Sequence[tuple[int, str, int]], round_id: int) -> tuple[str, int]:
    """Active (kind, severity) for a round; entries are (start_round, kind, severity)."""
    kind, severity = "none", 0
    for start, k, s in sorted(schedule, key=lambda e: e[0]):
        if start <= round_id:
            kind, severity = k, s
    return kind, severity


def run_mission(
    scenes: Callable[[int], Scene] | Sequence[Scene],
    schedule: Sequence[tuple[int, str, int]],
    leader: LeaderNode,
    followers: Sequence[FollowerNode],
    net: NetworkModel,
    config: RoundConfig,
    rounds: int,
    message_log: MessageLog | None = None,
    trace: MissionTrace | None = None,
) -> list[RoundReport]:
    """Run ``rounds`` rounds, carrying adaptation state from one to the next.

    ``scenes`` is a per-round scene factory or a sequence indexed cyclically.
    """
    if rounds < 1:
        raise ConfigError("a mission needs at least one round")
    if config.tta != "off" and leader.ln_stats is None and all(f.bank is None for f in followers):
        init_tta(leader, followers, config)
    reports = []
    for r in range(rounds):
        scene = scenes(r) if callable(scenes) else scenes[r % len(scenes)]
        kind, severity = corruption_at(schedule, r)
        cfg = replace(config, corruption=kind, severity=severity)
        _, report = run_round(scene, leader, followers, net, cfg, r, message_log, trace)
        reports.append(report)
    return reports

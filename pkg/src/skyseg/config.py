"""Scenario configuration: defaults, validation and construction of the parties."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .backends import CnnBackend, CnnConfig, OracleBackend, TransformerBackend, TransformerConfig
from .errors import ConfigError
from .fusion import FUSION_METHODS
from .numerics import area_resize
from .protocol import FollowerNode, LeaderNode, NetworkModel, RoundConfig, init_tta
from .protocol.orchestrator import TTA_MODES
from .selection import MAX_PATCHES, SELECTION_METHODS, SelectionWeights, quadrant_rects
from .tta import AGGREGATE_MODES
from .world import CORRUPTIONS, MAX_SEVERITY, GeoRect, Scene, follower_capture, generate_scene, leader_capture

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "rounds": 3,
    "followers": 3,
    "fusion": "prob",
    "selection": "attention",
    "tta": "cross",
    "aggregate": "mean",
    "alpha": 0.05,
    "selection_weights": [0.1, 0.2, 0.3, 0.4],
    "fusion_seconds_per_pixel": 2e-9,
    "corruption": {"kind": "none", "severity": 0, "schedule": []},
    "scene": {
        "width": 1200,
        "height": 800,
        "num_classes": 6,
        "regions": None,
        "sequence": True,
        "hotspots": [],
    },
    "leader": {
        "backend": "transformer",
        "height": 400,
        "width": 600,
        "input_size": 512,
        "dim_divisor": 4,
        "weight_seed": 1,
        "macs_per_second": 1e11,
        "accuracy": 0.7,
        "confidence": 0.6,
        "hotspot_accuracy": 0.3,
        "latency": 0.0,
    },
    "follower": {
        "backend": "cnn",
        "channels": None,
        "stage_starts": None,
        "stem_pool": 8,
        "weight_seed": 2,
        "macs_per_second": 5e10,
        "accuracy": 0.95,
        "confidence": 0.9,
        "latency": 0.0,
    },
    "network": {"bandwidth": 1e7, "rtt": 0.01, "loss_rate": 0.0, "seed": 0},
    "calibration": {"images": 1, "seed": 1000},
}

ENUMS = {
    "fusion": FUSION_METHODS,
    "selection": SELECTION_METHODS,
    "tta": TTA_MODES,
    "aggregate": AGGREGATE_MODES,
    "corruption.kind": ("none",) + CORRUPTIONS,
    "leader.backend": ("transformer", "oracle"),
    "follower.backend": ("cnn", "oracle"),
}

# keys that accept null or a list in place of a scalar
_FREE_KEYS = {"scene.regions", "scene.hotspots", "follower.channels", "follower.stage_starts", "corruption.schedule"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} must be a section")
            out[key] = _merge(base[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def get_key(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    return node


def set_key(cfg: dict, dotted: str, value) -> None:
    get_key(cfg, dotted)
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def parse_value(text: str, current):
    """Interpret a command-line string using the type of the current value."""
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, str):
        return text
    return json.loads(text)


def resolve(override: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, override or {})
    validate(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def validate(cfg: dict) -> None:
    for key, allowed in ENUMS.items():
        value = get_key(cfg, key)
        if value not in allowed:
            raise ConfigError(f"{key}={value!r} is not one of: {', '.join(allowed)}")
    n = cfg["followers"]
    if not isinstance(n, int) or n < 0:
        raise ConfigError("followers must be a non-negative integer")
    if n > MAX_PATCHES:
        raise ConfigError(f"followers={n}: the 2x2 grid supports at most {MAX_PATCHES}")
    if not isinstance(cfg["rounds"], int) or cfg["rounds"] < 1:
        raise ConfigError("rounds must be a positive integer")
    if not 0.0 <= cfg["alpha"] <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    sev = cfg["corruption"]["severity"]
    if not isinstance(sev, int) or not 0 <= sev <= MAX_SEVERITY:
        raise ConfigError(f"severity must be an integer in 0..{MAX_SEVERITY}")
    for entry in cfg["corruption"]["schedule"]:
        if len(entry) != 3 or entry[1] not in ENUMS["corruption.kind"] or not 0 <= entry[2] <= MAX_SEVERITY:
            raise ConfigError(f"bad schedule entry {entry}; expected [start_round, kind, severity]")
    try:
        SelectionWeights(*cfg["selection_weights"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"selection_weights: {exc}") from exc
    sc, ld = cfg["scene"], cfg["leader"]
    if sc["height"] % ld["height"] or sc["width"] % ld["width"]:
        raise ConfigError("scene dims must be integer multiples of the leader resolution")
    hs = sc["hotspots"]
    if not (hs == "random" or isinstance(hs, list)):
        raise ConfigError('scene.hotspots must be "random" or a list of [x0, y0, x1, y1]')


@dataclass
class Scenario:
    config: dict
    leader: LeaderNode
    followers: list[FollowerNode]
    net: NetworkModel
    round_config: RoundConfig
    schedule: list[tuple[int, str, int]]

    def scene(self, round_id: int) -> Scene:
        sc = self.config["scene"]
        seed = self.config["seed"] * 100003 + (round_id if sc["sequence"] else 0)
        scene = generate_scene(seed, sc["width"], sc["height"], sc["num_classes"], sc["regions"])
        return replace(scene, hotspots=_hotspots(sc["hotspots"], scene, seed))


def _hotspots(spec, scene: Scene, seed: int) -> tuple[GeoRect, ...]:
    if spec == "random":
        rng = np.random.default_rng([seed, 7])
        quad = quadrant_rects(scene.rect)[int(rng.integers(4))]
        fh, fw = rng.uniform(0.5, 0.9, size=2)
        h, w = max(1, int(quad.height * fh)), max(1, int(quad.width * fw))
        y0 = quad.y0 + int(rng.integers(0, quad.height - h + 1))
        x0 = quad.x0 + int(rng.integers(0, quad.width - w + 1))
        return (GeoRect(x0, y0, x0 + w, y0 + h),)
    return tuple(GeoRect(*r) for r in spec)


def _schedule(cfg: dict) -> list[tuple[int, str, int]]:
    c = cfg["corruption"]
    if c["schedule"]:
        return [(int(s), str(k), int(v)) for s, k, v in c["schedule"]]
    return [(0, c["kind"], c["severity"])] if c["kind"] != "none" else []


def build(cfg: dict) -> Scenario:
    """Instantiate (and calibrate) the leader, followers and link for a resolved config."""
    validate(cfg)
    sc, ld, fl = cfg["scene"], cfg["leader"], cfg["follower"]
    num_classes = sc["num_classes"]
    calib = cfg["calibration"]
    train = [
        generate_scene(calib["seed"] + i, sc["width"], sc["height"], num_classes, sc["regions"])
        for i in range(calib["images"])
    ]

    if ld["backend"] == "transformer":
        tcfg = TransformerConfig(num_classes, input_size=ld["input_size"], dim_divisor=ld["dim_divisor"])
        lb = TransformerBackend(tcfg, ld["weight_seed"])
        size = tcfg.input_size
        lb.calibrate([area_resize(leader_capture(s, ld["height"], ld["width"]).image, size, size) for s in train])
    else:
        lb = OracleBackend(
            ld["accuracy"], ld["confidence"], hotspot_accuracy=ld["hotspot_accuracy"],
            latency=ld["latency"], scene_hotspots=True,
        )
    leader = LeaderNode(lb, (ld["height"], ld["width"]), ld["macs_per_second"])

    if fl["backend"] == "cnn":
        kwargs = {"stem_pool": fl["stem_pool"]}
        if fl["channels"] is not None:
            kwargs["channels"] = tuple(fl["channels"])
            starts = fl["stage_starts"] or _even_stages(len(fl["channels"]))
            kwargs["stage_starts"] = tuple(starts)
            kwargs["downsample_stages"] = tuple(i < 2 for i in range(len(starts)))
        fb = CnnBackend(CnnConfig(num_classes, **kwargs), fl["weight_seed"])
        fb.calibrate([follower_capture(s, q).image for s in train for q in quadrant_rects(s.rect)])
    else:
        fb = OracleBackend(fl["accuracy"], fl["confidence"], latency=fl["latency"])
    followers = [FollowerNode(i + 1, fb, fl["macs_per_second"]) for i in range(cfg["followers"])]

    net = NetworkModel(**cfg["network"])
    rc = RoundConfig(
        fusion=cfg["fusion"],
        selection=cfg["selection"],
        tta=cfg["tta"],
        aggregate=cfg["aggregate"],
        alpha=cfg["alpha"],
        weights=SelectionWeights(*cfg["selection_weights"]),
        seed=cfg["seed"],
        fusion_seconds_per_pixel=cfg["fusion_seconds_per_pixel"],
    )
    init_tta(leader, followers, rc)
    return Scenario(cfg, leader, followers, net, rc, _schedule(cfg))


def _even_stages(n_layers: int) -> list[int]:
    if n_layers < 2:
        raise ConfigError("follower.channels needs at least two layers")
    if n_layers < 4:
        return [1]
    return [n_layers // 4, n_layers // 2, 3 * n_layers // 4]

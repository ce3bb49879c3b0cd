"""Command-line scenario runner.

    skyseg run scenario.json --followers 3 --fusion prob --tta cross --out runs/a
    skyseg sweep scenario.json --axis followers=1,2,3 --axis selection=random,attention
    skyseg defaults

Set ``SKYSEG_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import SkySegError, ConfigError
from .metrics import volume_refinement, volume_stats_per_follower
from .protocol import MessageLog, run_mission

log = logging.getLogger("skyseg")

FLAG_KEYS = {
    "seed": "seed",
    "followers": "followers",
    "fusion": "fusion",
    "selection": "selection",
    "tta": "tta",
    "aggregate": "aggregate",
    "corruption": "corruption.kind",
    "severity": "corruption.severity",
    "rounds": "rounds",
}
AXIS_ALIASES = {"corruption": "corruption.kind", "severity": "corruption.severity"}

CSV_FIELDS = [
    "round", "corruption", "severity", "selected", "received", "miou_coarse", "miou_fused",
    "latency_total", "leader_inference", "assignment_tx", "follower_inference", "refinement_tx",
    "fusion", "tta_exchange", "bytes_total", "refinement_payload_per_follower", "stat_payload_per_follower",
]


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _stat_channels(scenario) -> int:
    f = scenario.followers[0] if scenario.followers else None
    return getattr(getattr(f, "backend", None), "config", None).total_channels if f and f.bank else 0


def execute(cfg: dict) -> tuple[dict, list[dict], str]:
    """Run one resolved config; returns (report, csv rows, message log text)."""
    scenario = cfgmod.build(cfg)
    mlog = MessageLog()
    reports = run_mission(
        scenario.scene, scenario.schedule, scenario.leader, scenario.followers, scenario.net,
        scenario.round_config, cfg["rounds"], mlog,
    )
    rounds = [r.to_dict() for r in reports]
    rows = []
    for r in reports:
        ref = list(r.refinement_payload.values())
        stat = list(r.stat_payload.values())
        rows.append({
            "round": r.round_id,
            "corruption": r.corruption,
            "severity": r.severity,
            "selected": ";".join(map(str, r.selected)),
            "received": ";".join(map(str, r.received)),
            "miou_coarse": r.miou_coarse,
            "miou_fused": r.miou_fused,
            "latency_total": r.latency["total"],
            **{k: r.latency[k] for k in ("leader_inference", "assignment_tx", "follower_inference",
                                         "refinement_tx", "fusion", "tta_exchange")},
            "bytes_total": sum(r.bytes_per_link.values()),
            "refinement_payload_per_follower": max(ref, default=0),
            "stat_payload_per_follower": max(stat, default=0),
        })
    sc = cfg["scene"]
    channels = _stat_channels(scenario)
    n = cfg["followers"]
    summary = {
        "mean_miou_coarse": float(np.mean([r["miou_coarse"] for r in rows])),
        "mean_miou_fused": float(np.mean([r["miou_fused"] for r in rows])),
        "mean_latency_total": float(np.mean([r["latency_total"] for r in rows])),
        # expected per-follower volumes from the accounting formulas
        "fusion_bytes_per_follower": volume_refinement(sc["height"] // 2, sc["width"] // 2) if n else 0,
        "tta_bytes_per_follower": volume_stats_per_follower(channels, n) if channels and cfg["tta"] == "cross" else 0,
        "stat_channels": channels,
    }
    report = {
        "config": cfg,
        "seeds": {
            "seed": cfg["seed"],
            "leader_weight_seed": cfg["leader"]["weight_seed"],
            "follower_weight_seed": cfg["follower"]["weight_seed"],
            "network_seed": cfg["network"]["seed"],
            "calibration_seed": cfg["calibration"]["seed"],
        },
        "summary": summary,
        "rounds": rounds,
    }
    return report, rows, mlog.dumps()


def _csv_text(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_run(out: Path, report: dict, rows: list[dict], messages: str) -> None:
    _write_atomic(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_atomic(out / "rounds.csv", _csv_text(rows, CSV_FIELDS))
    _write_atomic(out / "messages.ndjson", messages)


def run(config_path: str | None, overrides: dict, out: str) -> int:
    """Resolve, execute and write one scenario. Returns a process exit code."""
    try:
        cfg = _resolve(config_path, overrides)
        report, rows, messages = execute(cfg)
    except SkySegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_run(Path(out), report, rows, messages)
    s = report["summary"]
    print(f"mIoU coarse {s['mean_miou_coarse']:.2f}  fused {s['mean_miou_fused']:.2f}  -> {out}")
    return 0


def _resolve(config_path: str | None, overrides: dict) -> dict:
    base = cfgmod.load_config(config_path) if config_path else {}
    cfg = cfgmod._merge(cfgmod.DEFAULTS, base)
    for key, value in overrides.items():
        cfgmod.set_key(cfg, key, value)
    cfgmod.validate(cfg)
    return cfg


def parse_axes(specs: list[str], cfg: dict) -> list[tuple[str, list]]:
    if not specs:
        raise ConfigError("sweep needs at least one --axis key=v1,v2")
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"axis {spec!r} must look like key=v1,v2")
        key, _, raw = spec.partition("=")
        key = AXIS_ALIASES.get(key, key)
        current = cfgmod.get_key(cfg, key)
        values = [cfgmod.parse_value(v, current) for v in raw.split(",") if v != ""]
        if not values:
            raise ConfigError(f"axis {key} has no values")
        axes.append((key, values))
    return axes


def sweep(config_path: str | None, overrides: dict, axis_specs: list[str], out: str) -> int:
    """Run the Cartesian product of axis values, one report directory per cell."""
    try:
        base = _resolve(config_path, overrides)
        axes = parse_axes(axis_specs, base)
        cells = []
        for values in itertools.product(*(v for _, v in axes)):
            cfg = copy.deepcopy(base)
            for (key, _), value in zip(axes, values):
                cfgmod.set_key(cfg, key, value)
            cfgmod.validate(cfg)
            cells.append((dict(zip((k for k, _ in axes), values)), cfg))
        if not cells:
            raise ConfigError("sweep is empty")
        summary = []
        for i, (params, cfg) in enumerate(cells):
            report, rows, messages = execute(cfg)
            name = f"cell_{i:03d}_" + "_".join(f"{k.split('.')[-1]}-{v}" for k, v in params.items())
            write_run(Path(out) / name, report, rows, messages)
            summary.append({"cell": name, **params, **report["summary"]})
    except SkySegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    fields = list(summary[0])
    _write_atomic(Path(out) / "summary.csv", _csv_text(summary, fields))
    _write_atomic(Path(out) / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for row in summary:
        print(f"{row['cell']}: fused mIoU {row['mean_miou_fused']:.2f}")
    return 0


def _parser() -> argparse.ArgumentParser:
    d = cfgmod.DEFAULTS
    p = argparse.ArgumentParser(prog="skyseg", description="Leader-follower collaborative segmentation simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config_file", nargs="?", help="JSON scenario (same as --config)")
        sp.add_argument("--config", help="JSON scenario file; keys not given take their defaults")
        sp.add_argument("--seed", type=int, help=f"master seed (default {d['seed']})")
        sp.add_argument("--followers", type=int, help=f"number of followers, 0-4 (default {d['followers']})")
        sp.add_argument("--fusion", help=f"replace | prob (default {d['fusion']})")
        sp.add_argument("--selection", help=f"random | order | reorder | attention (default {d['selection']})")
        sp.add_argument("--tta", help=f"off | local | cross (default {d['tta']})")
        sp.add_argument("--aggregate", help=f"mean | sum (default {d['aggregate']})")
        sp.add_argument("--corruption", help="none | snow | fog | frost (default none)")
        sp.add_argument("--severity", type=int, help="0..5 (default 0)")
        sp.add_argument("--rounds", type=int, help=f"rounds per mission (default {d['rounds']})")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. leader.backend=oracle")
        sp.add_argument("--out", default="skyseg_out", help="output directory (default skyseg_out)")

    common(sub.add_parser("run", help="run one mission"))
    sw = sub.add_parser("sweep", help="run a grid of missions")
    common(sw)
    sw.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2",
                    help="sweep axis; keys: followers, fusion, selection, corruption, severity, tta, aggregate or any config key")
    sub.add_parser("defaults", help="print the default configuration")
    return p


def _overrides(args) -> dict:
    out = {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            out[key] = value
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r} must look like KEY=VALUE")
        out[key] = cfgmod.parse_value(raw, cfgmod.get_key(cfgmod.DEFAULTS, key))
    return out


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SKYSEG_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    if args.command == "defaults":
        print(json.dumps(cfgmod.DEFAULTS, indent=2))
        return 0
    try:
        overrides = _overrides(args)
    except (SkySegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    path = args.config or args.config_file
    if args.command == "run":
        return run(path, overrides, args.out)
    return sweep(path, overrides, args.axis, args.out)


if __name__ == "__main__":
    sys.exit(main())

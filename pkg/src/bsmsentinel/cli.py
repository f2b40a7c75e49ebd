"""Command-line front door: simulate, detect, evaluate, calibrate.

Each subcommand reads/writes plain CSV and key-value files so every stage of
the pipeline is independently reproducible and diffable. A manifest.json in
the output directory records what was produced by which invocation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ENV_PREFIX, ConfigError, apply_env_overrides, read_kv_file
from .detectors import DETECTOR_CONFIG_KEYS, DetectorConfig, _parse_bool
from .evaluate import (
    TraceMismatchError,
    calibrate_from_samples,
    format_table,
    ground_truth_rows,
    read_decisions_csv,
    run_pipeline,
    score,
    to_machine,
    write_decisions_csv,
)
from .simulate import (
    AttackSpec,
    LabeledTrace,
    ScenarioConfig,
    apply_attacks,
    generate_baseline,
    read_labels,
    write_labels,
)
from .trace import TraceError, read_trace, windowize, write_trace

_SCENARIO_CASTS = {
    "duration": float,
    "lanes": int,
    "flow": float,
    "speed_limit": float,
    "bsm_rate": float,
    "seed": int,
    "accel": float,
    "entry_speed": float,
    "segment_length": float,
    "anchor_lat": float,
    "anchor_lon": float,
    "lane_width": float,
    "warm_start": _parse_bool,
}

_ATTACK_CASTS = {
    "kind": str,
    "target_vehicle": int,
    "onset": float,
    "duration": float,
    "rate": float,
    "victim_id": int,
    "lon_halfwidth": float,
    "lat_halfwidth": float,
}


def _env(name: str, fallback=None):
    return os.environ.get(ENV_PREFIX + name, fallback)


def load_scenario(values: dict) -> tuple[ScenarioConfig, list[AttackSpec]]:
    scenario = ScenarioConfig()
    attack_fields: dict[int, dict] = {}
    for key, raw in values.items():
        if key.startswith("attack."):
            parts = key.split(".")
            if len(parts) != 3:
                raise ConfigError(f"attack keys look like attack.<n>.<field>: {key!r}")
            _, n, fieldname = parts
            try:
                index = int(n)
            except ValueError:
                raise ConfigError(f"attack index is not an integer: {key!r}") from None
            if fieldname not in _ATTACK_CASTS:
                raise ConfigError(f"unknown attack field: {key!r}")
            attack_fields.setdefault(index, {})[fieldname] = _ATTACK_CASTS[fieldname](raw)
        else:
            if key not in _SCENARIO_CASTS:
                raise ConfigError(f"unknown scenario key: {key!r}")
            setattr(scenario, key, _SCENARIO_CASTS[key](raw))
    specs = []
    for index in sorted(attack_fields):
        fields = attack_fields[index]
        for required in ("kind", "target_vehicle", "onset", "duration"):
            if required not in fields:
                raise ConfigError(f"attack.{index} is missing {required!r}")
        specs.append(AttackSpec(**fields))
    return scenario, specs


def _load_kv(path, allowed=None) -> dict:
    values = read_kv_file(path) if path else {}
    return apply_env_overrides(values, allowed=allowed)


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                    outputs: list[str], timings: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "inputs": {
            name: getattr(args, name)
            for name in ("trace", "detections", "labels")
            if getattr(args, name, None)
        },
        "outputs": outputs,
        "artifact_version": __version__,
        "timings_seconds": timings,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    values = _load_kv(args.config, allowed=_SCENARIO_CASTS)
    scenario, specs = load_scenario(values)
    if args.seed is not None:
        scenario.seed = args.seed
    for spec in specs:
        spec.validate(scenario)
    rng = np.random.default_rng(scenario.seed)
    trace = generate_baseline(scenario, rng)
    trace = apply_attacks(trace, specs, rng)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "trace.csv"
    labels_path = out_dir / "labels.csv"
    write_trace(trace_path, trace.records)
    write_labels(labels_path, trace)
    _write_manifest(
        out_dir, "simulate", args,
        [str(trace_path), str(labels_path)],
        {"total": time.perf_counter() - started},
    )
    return 0


def cmd_detect(args) -> int:
    started = time.perf_counter()
    records = read_trace(args.trace)
    cfg = DetectorConfig.from_mapping(_load_kv(args.config, allowed=DETECTOR_CONFIG_KEYS))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    decisions_path = out_dir / "decisions.csv"
    trace = LabeledTrace(records, [None] * len(records))
    detections, _ = run_pipeline(trace, cfg, window_len=args.window_len)
    write_decisions_csv(decisions_path, detections)
    _write_manifest(
        out_dir, "detect", args,
        [str(decisions_path)],
        {"total": time.perf_counter() - started},
    )
    return 0


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    detections = read_decisions_csv(args.detections)
    rows = read_labels(args.labels)
    truth, onsets = ground_truth_rows(rows, args.window_len)
    report = score(detections, truth, onsets, args.window_len)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "metrics.txt"
    machine_path = out_dir / "metrics.kv"
    table_path.write_text(format_table(report) + "\n", encoding="utf-8")
    machine_path.write_text(to_machine(report), encoding="utf-8")
    print(to_machine(report) if args.format == "machine" else format_table(report))
    _write_manifest(
        out_dir, "evaluate", args,
        [str(table_path), str(machine_path)],
        {"total": time.perf_counter() - started},
    )
    return 0


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    records = read_trace(args.trace)
    cfg = DetectorConfig.from_mapping(_load_kv(args.config, allowed=DETECTOR_CONFIG_KEYS))
    samples = windowize(records, args.window_len)
    seen: set = set()
    first_flags = []
    for s in samples:
        first_flags.append(s.vehicle_id not in seen)
        seen.add(s.vehicle_id)
    calib = calibrate_from_samples(samples, first_flags, cfg)
    lines = []
    for feature, p in calib.cusum_params.items():
        lines.append(f"{feature}.mu0 = {p.mu0!r}")
        lines.append(f"{feature}.sigma = {p.sigma!r}")
        lines.append(f"{feature}.k = {p.k!r}")
        lines.append(f"{feature}.h = {p.h!r}")
        lines.append(f"{feature}.n_samples = {calib.n_samples[feature]}")
        model = calib.mixtures[feature]
        lines.append(f"{feature}.mixture.w = {model.w[0]!r}, {model.w[1]!r}")
        lines.append(f"{feature}.mixture.mu = {model.mu[0]!r}, {model.mu[1]!r}")
        lines.append(f"{feature}.mixture.var = {model.var[0]!r}, {model.var[1]!r}")
    text = "\n".join(lines) + "\n"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    calib_path = out_dir / "calibration.kv"
    calib_path.write_text(text, encoding="utf-8")
    print(text, end="")
    _write_manifest(
        out_dir, "calibrate", args,
        [str(calib_path)],
        {"total": time.perf_counter() - started},
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsmsentinel",
        description="Streaming BSM attack detection: simulate, detect, evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_window=True):
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--out", default=_env("OUT", "."), help="output directory")
        if needs_window:
            p.add_argument("--window-len", type=float, default=0.1,
                           help="aggregation window length in seconds")

    p_sim = sub.add_parser("simulate", help="generate a labeled trace")
    common(p_sim, needs_window=False)
    p_sim.add_argument("--seed", type=int,
                       default=(int(_env("SEED")) if _env("SEED") else None))
    p_sim.set_defaults(func=cmd_simulate)

    p_det = sub.add_parser("detect", help="run detectors over a trace")
    common(p_det)
    p_det.add_argument("--trace", required=True)
    p_det.set_defaults(func=cmd_detect)

    p_eval = sub.add_parser("evaluate", help="score decisions against labels")
    common(p_eval)
    p_eval.add_argument("--detections", required=True)
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--format", choices=("table", "machine"),
                        default=_env("FORMAT", "table"))
    p_eval.set_defaults(func=cmd_evaluate)

    p_cal = sub.add_parser("calibrate", help="estimate in-control parameters")
    common(p_cal)
    p_cal.add_argument("--trace", required=True)
    p_cal.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TraceError, ConfigError, TraceMismatchError, ValueError) as exc:
        print(f"bsmsentinel {args.subcommand}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"bsmsentinel {args.subcommand}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

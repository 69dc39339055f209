import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from av_geometry import (
    MicPairConfig,
    ScenePoint,
    calibrate,
    calibration_residual_rms,
    default_mic_config,
    itd_map_corrected_array,
)
from config import LOG_LEVEL, Knobs
from errors import DegenerateFitError, InvalidInputError
from evaluation import aggregate, match_clusters, render_summary, scores_frame, write_summary
from event_sync import (
    ApproximateTimeSynchronizer,
    SyncSet,
    TimedEvent,
    TimeFrameSynchronizer,
    read_replay,
    write_replay,
)
from log import logger, set_log_level, set_log_level_to_debug
from mixture import OutlierDomain
from pipeline import IntervalObservations, motion_guided, run_face_guided
from simulator import (
    ITD_SCOPE,
    LEFT_CAMERA,
    RIGHT_CAMERA,
    ScenarioSpec,
    builtin_scenarios,
    dataset_to_events,
    generate,
    load_scenario,
    read_dataset,
    save_scenario,
    write_dataset,
)

console = Console()

PIPELINES = ("motion_guided", "face_guided")
VISION_SCOPE = "/vision"
HISTOGRAM_BINS = 50
# Versions recorded in every manifest
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "rich", "python-dotenv")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3


@dataclass
class RunConfig:
    """Everything a generate/run invocation depends on."""

    scenario: str = "StaCon"
    pipeline: str = "motion_guided"
    mic_config: Optional[str] = None
    out: str = "runs"
    seed: Optional[int] = None
    data: Optional[str] = None
    events: Optional[str] = None
    knobs: Knobs = field(default_factory=Knobs)

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise InvalidInputError(f"unknown pipeline {self.pipeline!r}, expected one of {PIPELINES}")
        for path in (self.mic_config, self.data, self.events):
            if path is not None and not os.path.exists(path):
                raise FileNotFoundError(2, "No such file or directory", path)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["knobs"] = self.knobs.to_dict()
        return data

    def config_hash(self) -> str:
        encoded = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(encoded).hexdigest()


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Flags over environment defaults, then the --config file over both."""
    knobs = Knobs().replace(
        tau_loc=args.tau_loc,
        n_max=args.n_max,
        det_threshold=args.det_threshold,
        max_spread=args.max_spread,
        tol=args.tol,
        max_iter=args.max_iter,
        energy_gate=args.energy_gate,
        workers=args.workers,
    )
    values = {
        "scenario": args.scenario,
        "pipeline": args.pipeline,
        "mic_config": args.mic_config,
        "out": args.out,
        "seed": args.seed,
        "data": getattr(args, "data", None),
        "events": getattr(args, "events", None),
    }
    values = {k: v for k, v in values.items() if v is not None}

    if args.config:
        with open(args.config, "r") as f:
            overrides = json.load(f)
        knob_names = set(Knobs.__dataclass_fields__)
        knobs = knobs.replace(**overrides.pop("knobs", {}))
        knobs = knobs.replace(**{k: overrides.pop(k) for k in list(overrides) if k in knob_names})
        unknown = set(overrides) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown keys in {args.config}: {sorted(unknown)}")
        values.update(overrides)

    return RunConfig(knobs=knobs, **values)


def resolve_scenario(run: RunConfig) -> ScenarioSpec:
    """A builtin scenario by name, otherwise a JSON spec file."""
    builtins = builtin_scenarios()
    if run.scenario in builtins:
        spec = builtins[run.scenario]
    else:
        spec = load_scenario(run.scenario)
        spec.name = spec.name or Path(run.scenario).stem
    if run.seed is not None:
        spec.seed = run.seed
    return spec


def resolve_mic_config(run: RunConfig) -> MicPairConfig:
    if run.mic_config is None:
        return default_mic_config()
    return MicPairConfig.load(run.mic_config)


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(out_dir: Path, command: str, run: RunConfig, seed: int, files: List[str]):
    manifest = {
        "command": command,
        "config": run.to_dict(),
        "config_sha256": run.config_hash(),
        "seed": seed,
        "versions": package_versions(),
        "files": sorted(files),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def cmd_generate(run: RunConfig) -> int:
    """Write the observation/ground-truth file and the raw event replay."""
    spec = resolve_scenario(run)
    mic = resolve_mic_config(run)
    out_dir = Path(run.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    logger.info(f"Generating {spec.name} ({spec.n_intervals} intervals, seed {spec.seed})...")
    dataset = generate(spec, mic, run.knobs.domain_margin)
    write_dataset(dataset, out_dir / "observations.jsonl")
    write_replay(dataset_to_events(dataset, spec.seed), out_dir / "events.jsonl")
    save_scenario(spec, out_dir / "scenario.json")
    mic.save(out_dir / "mic_config.json")
    write_manifest(
        out_dir,
        "generate",
        run,
        spec.seed,
        ["observations.jsonl", "events.jsonl", "scenario.json", "mic_config.json"],
    )

    visual = np.array([obs.visual_3d.shape[0] for obs, _ in dataset])
    auditory = np.array([obs.auditory.size for obs, _ in dataset])
    table = Table(title=f"Generated {spec.name}")
    table.add_column("Intervals", justify="right")
    table.add_column("Visual / interval", justify="right")
    table.add_column("Auditory / interval", justify="right")
    table.add_column("Speaking intervals", justify="right")
    speaking = sum(any(o.speaking for o in gt.objects) for _, gt in dataset)
    table.add_row(
        str(len(dataset)),
        f"{visual.mean():.1f}" if len(dataset) else "0",
        f"{auditory.mean():.1f}" if len(dataset) else "0",
        str(speaking),
    )
    console.print(table)
    logger.info(f"Wrote {out_dir}")
    return EXIT_OK


def _interval_from_sync_set(sync_set: SyncSet) -> IntervalObservations:
    frame = json.loads(sync_set.events[VISION_SCOPE].payload)
    itds = [json.loads(e.payload) for e in sync_set.events[ITD_SCOPE]]
    return IntervalObservations(
        visual_3d=np.asarray(frame["visual"], dtype=float).reshape(-1, 3),
        auditory=np.array([item["itd"] for item in itds]),
        interval_index=int(frame["interval_index"]),
        duration=float(frame["duration"]),
        audio_energy=float(np.mean([item["energy"] for item in itds])) if itds else 0.0,
    )


def replay_intervals(
    events: List[TimedEvent], interval_s: float, stall_timeout: Optional[float] = None
) -> List[IntervalObservations]:
    """Rebuild intervals from raw events.

    The two cameras are paired with ApproximateTime; every paired frame then
    collects the ITDs within half an interval of it (TimeFrame). Streams
    that stall longer than stall_timeout are not waited for.
    """
    stall_timeout = 2.0 * interval_s if stall_timeout is None else stall_timeout
    cameras = ApproximateTimeSynchronizer([LEFT_CAMERA, RIGHT_CAMERA])
    frames = TimeFrameSynchronizer(VISION_SCOPE, [ITD_SCOPE], 0.5 * interval_s, 0.5 * interval_s)

    intervals = []
    cameras.register_callback(
        lambda pair: frames.push(
            TimedEvent(VISION_SCOPE, pair.events[LEFT_CAMERA].timestamp, pair.events[LEFT_CAMERA].payload)
        )
    )
    frames.register_callback(lambda sync_set: intervals.append(_interval_from_sync_set(sync_set)))

    for event in events:
        if event.scope == ITD_SCOPE:
            frames.push(event)
        else:
            cameras.push(event)
        cameras.expire(event.timestamp, stall_timeout)
        frames.expire(event.timestamp, stall_timeout)
    cameras.flush()
    frames.flush()
    logger.info(f"Replayed {len(events)} events into {len(intervals)} intervals")
    return intervals


def itd_histogram(obs: IntervalObservations, objects, domain: OutlierDomain, mic: MicPairConfig) -> dict:
    counts, edges = np.histogram(obs.auditory, bins=HISTOGRAM_BINS, range=(domain.lo, domain.hi))
    positions = np.array([o.position.as_array() for o in objects]).reshape(-1, 3)
    return {
        "interval_index": obs.interval_index,
        "bin_edges": edges.tolist(),
        "counts": counts.tolist(),
        "object_itds": itd_map_corrected_array(positions, mic).tolist(),
        "speaking": [bool(o.speaking) for o in objects],
    }


def cmd_run(run: RunConfig) -> int:
    """Stream every interval through the chosen pipeline and evaluate it."""
    mic = resolve_mic_config(run)
    if run.data:
        dataset = read_dataset(run.data)
        name = Path(run.data).parent.name or Path(run.data).stem
        seed = run.seed
    else:
        spec = resolve_scenario(run)
        dataset = generate(spec, mic, run.knobs.domain_margin)
        name, seed = spec.name, spec.seed
    truth = {obs.interval_index: gt for obs, gt in dataset}

    if run.events:
        interval_s = dataset[0][0].duration if dataset else 0.4
        intervals = replay_intervals(read_replay(run.events), interval_s)
    else:
        intervals = [obs for obs, _ in dataset]

    out_dir = Path(run.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = OutlierDomain.from_mic_config(mic, run.knobs.domain_margin)
    logger.info(f"Running {run.pipeline} on {name} ({len(intervals)} intervals)...")

    records, histograms, scores, timings = [], [], [], []
    prev = None
    for obs in intervals:
        started = time.perf_counter()
        if run.pipeline == "motion_guided":
            result = motion_guided(obs, mic, prev, run.knobs)
            prev = result.params
        else:
            result = run_face_guided(obs, mic, run.knobs)
        elapsed = time.perf_counter() - started
        timings.append({"interval": obs.interval_index, "wall_s": elapsed})
        console.print(
            f"interval {obs.interval_index}: {len(result.objects)} objects in {elapsed * 1e3:.1f} ms"
        )

        records.append(result.to_record())
        histograms.append(itd_histogram(obs, result.objects, domain, mic))
        gt = truth.get(obs.interval_index)
        if gt is None:
            raise InvalidInputError(f"no ground truth for interval {obs.interval_index}")
        scores.append(match_clusters(result.objects, gt.visible_targets(), run.knobs.tau_loc))

    with open(out_dir / "results.jsonl", "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    with open(out_dir / "itd_histograms.jsonl", "w") as f:
        for histogram in histograms:
            f.write(json.dumps(histogram) + "\n")
    scores_frame(scores).to_csv(out_dir / "scores.csv", index=False)
    pd.DataFrame(timings).to_csv(out_dir / "timings.csv", index=False)

    tables = {name: aggregate(scores)}
    write_summary(tables, out_dir / "summary.csv", out_dir / "summary.json")
    write_manifest(
        out_dir,
        "run",
        run,
        seed,
        ["results.jsonl", "itd_histograms.jsonl", "scores.csv", "timings.csv", "summary.csv", "summary.json"],
    )

    if timings:
        wall = np.array([t["wall_s"] for t in timings])
        logger.info(f"Wall-clock per interval: mean {wall.mean() * 1e3:.1f} ms, max {wall.max() * 1e3:.1f} ms")
    console.print(render_summary(tables))
    return EXIT_OK


def load_calibration_pairs(path) -> List[Tuple[ScenePoint, float]]:
    """(position, itd) pairs from a CSV with columns x, y, z, itd"""
    frame = pd.read_csv(path)
    missing = {"x", "y", "z", "itd"} - set(frame.columns)
    if missing:
        raise KeyError(f"{path} lacks columns {sorted(missing)}")
    return [
        (ScenePoint(row.x, row.y, row.z), float(row.itd))
        for row in frame.itertuples(index=False)
    ]


def cmd_calibrate(pairs_path: str, mic_config: Optional[str], out: str) -> int:
    """Fit c1, c0 on recorded pairs and write the updated mic config."""
    cfg0 = MicPairConfig.load(mic_config) if mic_config else default_mic_config()
    pairs = load_calibration_pairs(pairs_path)
    fitted = calibrate(pairs, cfg0)
    rms = calibration_residual_rms(pairs, fitted)

    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fitted.save(out_path)
    console.print(
        f"c1 = {fitted.c1:.6f}, c0 = {fitted.c0:.3e} s, "
        f"residual RMS = {rms * 1e6:.2f} us over {len(pairs)} pairs"
    )
    logger.info(f"Wrote {out_path}")
    return EXIT_OK


def add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--scenario", help="Builtin scenario name or scenario JSON file (default: StaCon)")
    parser.add_argument("--pipeline", choices=PIPELINES, help="Pipeline to run (default: motion_guided)")
    parser.add_argument("--mic-config", help="Microphone pair JSON (default: 10 cm baseline on x)")
    parser.add_argument("--out", help="Output directory (default: runs)")
    parser.add_argument("--seed", type=int, help="Override the scenario seed")
    parser.add_argument("--config", help="JSON run config; its values override the flags")
    parser.add_argument("--tau-loc", type=float, help="Localisation match distance in m (default: 0.35)")
    parser.add_argument("--n-max", type=int, help="Largest number of objects tried (default: 10)")
    parser.add_argument("--det-threshold", type=float, help="Spurious-cluster determinant threshold (default: 1e-10)")
    parser.add_argument("--max-spread", type=float, help="Widest cluster kept as one object, in m (default: 0.5)")
    parser.add_argument("--tol", type=float, help="EM convergence tolerance (default: 1e-6)")
    parser.add_argument("--max-iter", type=int, help="EM iteration cap (default: 100)")
    parser.add_argument("--energy-gate", type=float, help="Audio energy threshold (default: 0.001)")
    parser.add_argument("--workers", type=int, help="Threads for the candidate fits (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Audio-visual detection, localisation and speaking-state assessment"
    )
    parser.add_argument("--debug", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    generate_parser = commands.add_parser("generate", help="Generate a synthetic dataset")
    add_run_flags(generate_parser)

    run_parser = commands.add_parser("run", help="Run a pipeline and evaluate it")
    add_run_flags(run_parser)
    run_parser.add_argument("--data", help="observations.jsonl written by generate")
    run_parser.add_argument("--events", help="events.jsonl to replay through the synchronizers")

    calibrate_parser = commands.add_parser("calibrate", help="Fit the ITD correction")
    calibrate_parser.add_argument("--pairs", required=True, help="CSV with columns x, y, z, itd")
    calibrate_parser.add_argument("--mic-config", help="Measured microphone geometry JSON")
    calibrate_parser.add_argument("--out", default="config_data/mic_config_calibrated.json", help="Output JSON")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.debug:
        set_log_level_to_debug()
    else:
        set_log_level(LOG_LEVEL)

    try:
        if args.command == "calibrate":
            return cmd_calibrate(args.pairs, args.mic_config, args.out)
        run = load_run_config(args)
        if args.command == "generate":
            return cmd_generate(run)
        return cmd_run(run)
    except FileNotFoundError as e:
        logger.error(f"File not found: {e.filename}")
        return EXIT_INPUT
    except (InvalidInputError, json.JSONDecodeError, KeyError) as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INPUT
    except DegenerateFitError as e:
        logger.error(f"Degenerate fit: {e}")
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())

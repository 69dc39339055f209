"""Synthetic audio-visual scenes with ground truth.

Each interval gets 3D points scattered around the visible objects, ITD values
scattered around the calibrated projection of the speaking objects, and
uniform outliers in both spaces.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from av_geometry import (
    MicPairConfig,
    ScenePoint,
    default_mic_config,
    itd_map_corrected_array,
)
from config import DEFAULT_DOMAIN_MARGIN, INTERVAL_DURATION, ITD_FRAME_SHIFT
from errors import InvalidInputError
from event_sync import TimedEvent
from mixture import OutlierDomain
from pipeline import IntervalObservations

# Visual outliers are drawn in this box (meters), in front of the sensors
SCENE_BOX_LO = np.array([-2.0, -1.0, 0.5])
SCENE_BOX_HI = np.array([2.0, 1.0, 5.0])

# Normalised audio energy of an interval with and without sound sources
SPEECH_ENERGY = 0.05
NOISE_FLOOR_ENERGY = 2e-4

# Inlier ITDs must stay inside the outlier domain up to this many sigmas
INLIER_SIGMAS = 5.0

# Outliers per interval when no rate is set, as a fraction of the inliers
OUTLIER_FRACTION = 0.05

Span = Tuple[float, float]


def _in_spans(t: float, spans: Sequence[Span]) -> bool:
    return any(start <= t < end for start, end in spans)


@dataclass
class ObjectTrack:
    """Piecewise-linear trajectory plus visibility and speaking schedules.

    Args:
        waypoints: (time, position) pairs with strictly increasing times;
            the position is held constant outside the covered range
        visible: [start, end) spans during which the object is seen
        speaking: [start, end) spans during which it emits sound
    """

    waypoints: List[Tuple[float, ScenePoint]]
    visible: List[Span] = field(default_factory=list)
    speaking: List[Span] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if not self.waypoints:
            raise InvalidInputError("an object track needs at least one waypoint")
        times = np.array([t for t, _ in self.waypoints], dtype=float)
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError(f"waypoint times must strictly increase in track {self.name!r}")
        for start, end in list(self.visible) + list(self.speaking):
            if not start < end:
                raise InvalidInputError(f"malformed span [{start}, {end}) in track {self.name!r}")
        self._times = times
        self._points = np.array([p.as_array() for _, p in self.waypoints])

    def position_at(self, t) -> np.ndarray:
        """Interpolated position(s); t may be a scalar or an array."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.column_stack([np.interp(t, self._times, self._points[:, i]) for i in range(3)])
        return out

    def is_visible(self, t: float) -> bool:
        return _in_spans(t, self.visible)

    def is_speaking(self, t: float) -> bool:
        return _in_spans(t, self.speaking)

    @property
    def waypoint_times(self) -> np.ndarray:
        return self._times

    @property
    def is_static(self) -> bool:
        return bool(np.all(self._points == self._points[0]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "waypoints": [[t, [p.x, p.y, p.z]] for t, p in self.waypoints],
            "visible": [list(s) for s in self.visible],
            "speaking": [list(s) for s in self.speaking],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectTrack":
        return cls(
            waypoints=[(float(t), ScenePoint.from_array(p)) for t, p in data["waypoints"]],
            visible=[tuple(s) for s in data.get("visible", [])],
            speaking=[tuple(s) for s in data.get("speaking", [])],
            name=data.get("name", ""),
        )


@dataclass
class ScenarioSpec:
    """Generator settings; rates are counts per interval.

    An outlier rate of None draws OUTLIER_FRACTION times the inliers of the
    same interval.
    """

    duration_s: float
    objects: List[ObjectTrack]
    interval_s: float = INTERVAL_DURATION
    visual_noise_sigma: float = 0.03
    itd_noise_sigma: float = 2e-5
    visual_outlier_rate: Optional[float] = None
    itd_outlier_rate: Optional[float] = None
    visual_points_per_object: int = 650
    itd_points_per_speaking_object: int = int(round(INTERVAL_DURATION / ITD_FRAME_SHIFT))
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.duration_s <= 0 or self.interval_s <= 0:
            raise InvalidInputError("duration and interval must be > 0")
        rates = (
            self.visual_noise_sigma,
            self.itd_noise_sigma,
            self.visual_outlier_rate,
            self.itd_outlier_rate,
            self.visual_points_per_object,
            self.itd_points_per_speaking_object,
        )
        if any(r is not None and r < 0 for r in rates):
            raise InvalidInputError("noise sigmas, rates and counts must be >= 0")

    @property
    def n_intervals(self) -> int:
        return int(np.floor(self.duration_s / self.interval_s + 1e-9))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["objects"] = [track.to_dict() for track in self.objects]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown or "duration_s" not in data:
            raise InvalidInputError(
                f"malformed scenario: unknown keys {sorted(unknown)}, duration_s "
                f"{'present' if 'duration_s' in data else 'missing'}"
            )
        data["objects"] = [ObjectTrack.from_dict(o) for o in data.get("objects", [])]
        return cls(**data)


def load_scenario(path) -> ScenarioSpec:
    """Load a ScenarioSpec from a JSON file"""
    with open(path, "r") as f:
        return ScenarioSpec.from_dict(json.load(f))


def save_scenario(spec: ScenarioSpec, path):
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2)


@dataclass
class TruthObject:
    object_id: int
    position: ScenePoint
    visible: bool
    speaking: bool


@dataclass
class GroundTruth:
    """Per-interval truth; labels give the generating object, -1 for outliers."""

    objects: List[TruthObject]
    visual_labels: np.ndarray
    auditory_labels: np.ndarray

    def visible_targets(self) -> List[Tuple[ScenePoint, bool]]:
        """(position, speaking) of the objects a detector can localise."""
        return [(o.position, o.speaking) for o in self.objects if o.visible]


def _draw_count(rng: np.random.Generator, rate: float) -> int:
    """Integer part of the rate plus one extra with the fractional probability."""
    whole = int(np.floor(rate))
    return whole + int(rng.random() < rate - whole)


def _outlier_rate(rate: Optional[float], n_inliers: int) -> float:
    return OUTLIER_FRACTION * n_inliers if rate is None else rate


def check_domain(spec: ScenarioSpec, cfg: MicPairConfig, domain: OutlierDomain):
    """Reject specs whose speaking objects would emit ITDs outside the domain."""
    pad = INLIER_SIGMAS * spec.itd_noise_sigma
    for track in spec.objects:
        if not track.speaking:
            continue
        times = np.append(track.waypoint_times, np.arange(spec.n_intervals + 1) * spec.interval_s)
        itd = itd_map_corrected_array(track.position_at(times), cfg)
        if itd.min() - pad < domain.lo or itd.max() + pad > domain.hi:
            raise InvalidInputError(
                f"track {track.name!r}: ITDs within {INLIER_SIGMAS:g} sigma leave the "
                f"outlier domain [{domain.lo:.3e}, {domain.hi:.3e}]"
            )


def generate(
    spec: ScenarioSpec,
    cfg: Optional[MicPairConfig] = None,
    domain_margin: float = DEFAULT_DOMAIN_MARGIN,
) -> List[Tuple[IntervalObservations, GroundTruth]]:
    """Generate every interval of the scenario, deterministically from spec.seed."""
    cfg = cfg or default_mic_config()
    domain = OutlierDomain.from_mic_config(cfg, domain_margin)
    check_domain(spec, cfg, domain)
    rng = np.random.default_rng(spec.seed)

    dataset = []
    for index in range(spec.n_intervals):
        t_start = index * spec.interval_s
        t_mid = t_start + 0.5 * spec.interval_s

        points, point_labels = [], []
        itds, itd_labels = [], []
        truth = []
        for object_id, track in enumerate(spec.objects):
            visible = track.is_visible(t_mid)
            speaking = track.is_speaking(t_mid)
            truth.append(
                TruthObject(object_id, ScenePoint.from_array(track.position_at(t_mid)[0]), visible, speaking)
            )

            if visible and spec.visual_points_per_object:
                # Moving objects smear along their path within the interval
                times = t_start + rng.random(spec.visual_points_per_object) * spec.interval_s
                centres = track.position_at(times)
                noise = rng.normal(0.0, spec.visual_noise_sigma, size=centres.shape)
                points.append(centres + noise)
                point_labels.append(np.full(len(centres), object_id))

            if speaking and spec.itd_points_per_speaking_object:
                times = t_start + rng.random(spec.itd_points_per_speaking_object) * spec.interval_s
                centre = itd_map_corrected_array(track.position_at(times), cfg)
                values = centre + rng.normal(0.0, spec.itd_noise_sigma, size=centre.shape)
                itds.append(np.clip(values, domain.lo, domain.hi))
                itd_labels.append(np.full(len(values), object_id))

        n_visual_inliers = sum(len(labels) for labels in point_labels)
        n_visual_outliers = _draw_count(rng, _outlier_rate(spec.visual_outlier_rate, n_visual_inliers))
        points.append(rng.uniform(SCENE_BOX_LO, SCENE_BOX_HI, size=(n_visual_outliers, 3)))
        point_labels.append(np.full(n_visual_outliers, -1))

        n_itd_inliers = sum(len(values) for values in itds)
        n_itd_outliers = _draw_count(rng, _outlier_rate(spec.itd_outlier_rate, n_itd_inliers))
        itds.append(rng.uniform(domain.lo, domain.hi, size=n_itd_outliers))
        itd_labels.append(np.full(n_itd_outliers, -1))

        any_sound = any(o.speaking for o in truth)
        obs = IntervalObservations(
            visual_3d=np.vstack(points),
            auditory=np.concatenate(itds),
            interval_index=index,
            duration=spec.interval_s,
            audio_energy=SPEECH_ENERGY if any_sound else NOISE_FLOOR_ENERGY,
        )
        gt = GroundTruth(
            objects=truth,
            visual_labels=np.concatenate(point_labels).astype(int),
            auditory_labels=np.concatenate(itd_labels).astype(int),
        )
        dataset.append((obs, gt))
    return dataset


def _static(name: str, position, visible=None, speaking=None, duration=1e9) -> ObjectTrack:
    return ObjectTrack(
        waypoints=[(0.0, ScenePoint(*position))],
        visible=[(0.0, duration)] if visible is None else visible,
        speaking=speaking or [],
        name=name,
    )


def _moving(name: str, waypoints, visible, speaking) -> ObjectTrack:
    return ObjectTrack(
        waypoints=[(t, ScenePoint(*p)) for t, p in waypoints],
        visible=visible,
        speaking=speaking,
        name=name,
    )


def builtin_scenarios() -> Dict[str, ScenarioSpec]:
    """Synthetic motion-guided sequences and face-guided room scenarios.

    StaCon/DynCon/StaVar/DynVar: static or moving objects, constant or
    varying number of visible objects. S1-S5: face-level observations (one
    3D point per visible face) of a small room; in S4 one speaker is never
    visible.
    """
    duration = 160.0
    left, middle, right = (-0.9, 0.0, 2.5), (0.0, 0.0, 2.2), (0.9, 0.0, 2.6)
    turns = [
        [(0.0, 20.0), (60.0, 80.0), (120.0, 140.0)],
        [(20.0, 40.0), (80.0, 100.0), (140.0, 160.0)],
        [(40.0, 60.0), (100.0, 120.0)],
    ]
    overlap = [(10.0, 30.0), (90.0, 110.0)]
    # About 20 ITDs per interval with two active speakers; wide visual
    # blobs and a fixed clutter level
    motion = dict(
        itd_points_per_speaking_object=10,
        visual_noise_sigma=0.10,
        itd_noise_sigma=1e-5,
        visual_outlier_rate=100.0,
        itd_outlier_rate=1.0,
    )

    scenarios = {
        "StaCon": ScenarioSpec(
            duration_s=duration,
            objects=[
                _static("left", left, speaking=turns[0] + overlap),
                _static("middle", middle, speaking=turns[1]),
                _static("right", right, speaking=turns[2]),
            ],
            seed=1,
            **motion,
        ),
        "DynCon": ScenarioSpec(
            duration_s=duration,
            objects=[
                _moving(
                    "left",
                    [(0.0, (-1.2, 0.0, 2.5)), (40.0, (-0.6, 0.0, 2.7)), (80.0, (-1.2, 0.0, 2.5)),
                     (120.0, (-0.6, 0.0, 2.7)), (160.0, (-1.2, 0.0, 2.5))],
                    [(0.0, duration)],
                    turns[0] + overlap,
                ),
                _static("middle", middle, speaking=turns[1]),
                _moving(
                    "right",
                    [(0.0, (0.7, 0.0, 2.4)), (50.0, (1.2, 0.0, 2.8)), (100.0, (0.7, 0.0, 2.4)),
                     (160.0, (1.2, 0.0, 2.8))],
                    [(0.0, duration)],
                    turns[2],
                ),
            ],
            seed=2,
            **motion,
        ),
        "StaVar": ScenarioSpec(
            duration_s=duration,
            objects=[
                _static("left", left, visible=[(0.0, 100.0)], speaking=turns[0]),
                _static("middle", middle, visible=[(30.0, duration)], speaking=turns[1]),
                _static("right", right, visible=[(0.0, 50.0), (110.0, duration)], speaking=turns[2]),
            ],
            seed=3,
            **motion,
        ),
        "DynVar": ScenarioSpec(
            duration_s=duration,
            objects=[
                _moving(
                    "left",
                    [(0.0, (-1.2, 0.0, 2.5)), (80.0, (-0.6, 0.0, 2.7)), (160.0, (-1.2, 0.0, 2.5))],
                    [(0.0, 70.0), (90.0, duration)],
                    turns[0],
                ),
                _static("middle", middle, visible=[(20.0, 140.0)], speaking=turns[1]),
                _moving(
                    "right",
                    [(0.0, (0.7, 0.0, 2.4)), (80.0, (1.2, 0.0, 2.8)), (160.0, (0.7, 0.0, 2.4))],
                    [(0.0, 60.0), (100.0, duration)],
                    turns[2],
                ),
            ],
            seed=4,
            **motion,
        ),
    }

    # Face-level scenes: a few detections per interval, ITDs every 20 ms
    faces = dict(
        visual_noise_sigma=0.01,
        visual_outlier_rate=0.0,
        visual_points_per_object=1,
        itd_noise_sigma=1e-5,
        itd_outlier_rate=1.0,
    )
    room = 60.0
    counting = [
        [(0.0, 8.0), (24.0, 32.0), (48.0, 56.0)],
        [(8.0, 16.0), (32.0, 40.0)],
        [(16.0, 24.0), (40.0, 48.0)],
    ]
    seats = [(-0.8, 0.0, 1.8), (0.0, 0.0, 2.0), (0.8, 0.0, 1.8)]
    scenarios.update(
        {
            "S1": ScenarioSpec(
                duration_s=room,
                objects=[_static("front", (0.0, 0.0, 1.5), speaking=[(0.0, 10.0), (20.0, 30.0), (40.0, 50.0)])],
                seed=11,
                **faces,
            ),
            "S2": ScenarioSpec(
                duration_s=room,
                objects=[_static(f"seat{i}", seats[i], speaking=counting[i]) for i in range(3)],
                seed=12,
                **faces,
            ),
            "S3": ScenarioSpec(
                duration_s=room,
                objects=[
                    _static("seat0", seats[0], speaking=counting[0]),
                    _static("standing", (0.0, -0.6, 2.0), speaking=counting[1]),
                    _static("seat2", seats[2], speaking=counting[2]),
                ],
                seed=13,
                **faces,
            ),
            "S4": ScenarioSpec(
                duration_s=room,
                objects=[
                    _static("seat0", seats[0], speaking=counting[0]),
                    _static("seat1", seats[1], speaking=counting[1]),
                    _static("outside", (-2.0, 0.0, 0.8), visible=[], speaking=counting[2]),
                ],
                seed=14,
                **faces,
            ),
            "S5": ScenarioSpec(
                duration_s=room,
                objects=[
                    _static("seat0", seats[0], speaking=[(0.0, 12.0), (30.0, 38.0)]),
                    _moving(
                        "walker",
                        [(0.0, (-0.3, 0.0, 2.2)), (30.0, (0.4, 0.0, 2.4)), (60.0, (-0.3, 0.0, 2.2))],
                        [(0.0, room)],
                        [(10.0, 25.0), (40.0, 55.0)],
                    ),
                    _static("seat2", seats[2], speaking=[(20.0, 34.0), (50.0, 60.0)]),
                ],
                seed=15,
                **faces,
            ),
        }
    )
    for name, spec in scenarios.items():
        spec.name = name
    return scenarios


def dataset_to_records(dataset) -> List[dict]:
    """One JSON-ready record per interval: observations plus ground truth."""
    records = []
    for obs, gt in dataset:
        records.append(
            {
                "interval_index": obs.interval_index,
                "duration": obs.duration,
                "audio_energy": obs.audio_energy,
                "visual": obs.visual_3d.tolist(),
                "visual_labels": gt.visual_labels.tolist(),
                "itd": obs.auditory.tolist(),
                "itd_labels": gt.auditory_labels.tolist(),
                "truth": [
                    {
                        "object_id": o.object_id,
                        "position": [o.position.x, o.position.y, o.position.z],
                        "visible": o.visible,
                        "speaking": o.speaking,
                    }
                    for o in gt.objects
                ],
            }
        )
    return records


def record_to_interval(record: dict) -> Tuple[IntervalObservations, GroundTruth]:
    obs = IntervalObservations(
        visual_3d=np.asarray(record["visual"], dtype=float).reshape(-1, 3),
        auditory=np.asarray(record["itd"], dtype=float),
        interval_index=int(record["interval_index"]),
        duration=float(record["duration"]),
        audio_energy=float(record.get("audio_energy", 1.0)),
    )
    gt = GroundTruth(
        objects=[
            TruthObject(
                int(o["object_id"]), ScenePoint.from_array(o["position"]),
                bool(o["visible"]), bool(o["speaking"]),
            )
            for o in record["truth"]
        ],
        visual_labels=np.asarray(record.get("visual_labels", []), dtype=int),
        auditory_labels=np.asarray(record.get("itd_labels", []), dtype=int),
    )
    return obs, gt


def write_dataset(dataset, path):
    """Write one JSON line per interval"""
    with open(path, "w") as f:
        for record in dataset_to_records(dataset):
            f.write(json.dumps(record) + "\n")


def read_dataset(path) -> List[Tuple[IntervalObservations, GroundTruth]]:
    """Read a file written by write_dataset"""
    with open(path, "r") as f:
        return [record_to_interval(json.loads(line)) for line in f if line.strip()]


# Replay scopes: two cameras and the ITD stream
LEFT_CAMERA = "/vision/left"
RIGHT_CAMERA = "/vision/right"
ITD_SCOPE = "/audio/itd"
CAMERA_JITTER_S = 0.002


def dataset_to_events(dataset, seed: int = 0) -> List[TimedEvent]:
    """Raw sensor events for a generated dataset, in timestamp order.

    The left camera fires at every interval midpoint with the interval's 3D
    points, the right camera sends a frame marker with a jittered stamp, and
    the ITD values are spread evenly over their interval with the interval's
    audio energy.
    """
    rng = np.random.default_rng(seed)
    events = []
    for obs, _ in dataset:
        t_start = obs.interval_index * obs.duration
        t_frame = t_start + 0.5 * obs.duration
        frame = {
            "interval_index": obs.interval_index,
            "duration": obs.duration,
            "visual": obs.visual_3d.tolist(),
        }
        events.append(TimedEvent(LEFT_CAMERA, t_frame, json.dumps(frame).encode()))
        jitter = rng.uniform(-CAMERA_JITTER_S, CAMERA_JITTER_S)
        events.append(TimedEvent(RIGHT_CAMERA, t_frame + jitter))

        k = obs.auditory.size
        for j, value in enumerate(obs.auditory):
            stamp = t_start + (j + 0.5) * obs.duration / k
            item = {"itd": float(value), "energy": obs.audio_energy}
            events.append(TimedEvent(ITD_SCOPE, stamp, json.dumps(item).encode()))

    order = {LEFT_CAMERA: 0, RIGHT_CAMERA: 1, ITD_SCOPE: 2}
    return sorted(events, key=lambda e: (e.timestamp, order[e.scope]))

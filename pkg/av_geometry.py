"""Deterministic mappings between the scene and the ITD space, and the
least-squares audio-visual calibration."""

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence, Tuple

import numpy as np

from config import DEFAULT_SOUND_SPEED
from errors import DegenerateFitError, InvalidInputError

# An ITD is a plain float (seconds); corrected values live in the same space
ItdValue = float

# Relative slack on the physical |ITD| <= baseline / speed bound
BOUND_RTOL = 1e-9


@dataclass(frozen=True)
class ScenePoint:
    """A point in cyclopean scene coordinates (meters)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise InvalidInputError(f"non-finite scene point {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ScenePoint":
        x, y, z = (float(v) for v in values)
        return cls(x, y, z)


@dataclass(frozen=True)
class MicPairConfig:
    """Microphone pair geometry plus the affine ITD correction c1 * itd + c0."""

    mic_left: ScenePoint
    mic_right: ScenePoint
    sound_speed: float = DEFAULT_SOUND_SPEED
    c1: float = 1.0
    c0: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.sound_speed) and self.sound_speed > 0):
            raise InvalidInputError(f"sound_speed must be > 0, got {self.sound_speed}")
        if self.baseline <= 0:
            raise InvalidInputError("mic_left and mic_right must differ")
        if not (math.isfinite(self.c1) and self.c1 != 0):
            raise InvalidInputError(f"c1 must be finite and non-zero, got {self.c1}")
        if not math.isfinite(self.c0):
            raise InvalidInputError(f"c0 must be finite, got {self.c0}")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.mic_left.as_array() - self.mic_right.as_array()))

    @property
    def max_itd(self) -> float:
        """Largest raw |ITD| a direct-path source can produce"""
        return self.baseline / self.sound_speed

    def swapped(self) -> "MicPairConfig":
        return replace(self, mic_left=self.mic_right, mic_right=self.mic_left)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mic_left"] = [self.mic_left.x, self.mic_left.y, self.mic_left.z]
        data["mic_right"] = [self.mic_right.x, self.mic_right.y, self.mic_right.z]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MicPairConfig":
        return cls(
            mic_left=ScenePoint.from_array(data["mic_left"]),
            mic_right=ScenePoint.from_array(data["mic_right"]),
            sound_speed=float(data.get("sound_speed", DEFAULT_SOUND_SPEED)),
            c1=float(data.get("c1", 1.0)),
            c0=float(data.get("c0", 0.0)),
        )

    def save(self, path):
        """Save the config as JSON (SI units)"""
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "MicPairConfig":
        """Load a config written by save()"""
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


def default_mic_config() -> MicPairConfig:
    """A 10 cm baseline along the x axis, centred on the cyclopean origin."""
    return MicPairConfig(
        mic_left=ScenePoint(-0.05, 0.0, 0.0),
        mic_right=ScenePoint(0.05, 0.0, 0.0),
    )


def itd_map_array(points: np.ndarray, cfg: MicPairConfig) -> np.ndarray:
    """Raw ITD (seconds) of every row of an (M, 3) array of scene points."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("non-finite scene points")
    d_left = np.linalg.norm(points - cfg.mic_left.as_array(), axis=1)
    d_right = np.linalg.norm(points - cfg.mic_right.as_array(), axis=1)
    itd = (d_left - d_right) / cfg.sound_speed

    # Rounding can push collinear points a hair past the triangle bound
    bound = cfg.max_itd
    return np.clip(itd, -bound, bound)


def itd_map_corrected_array(points: np.ndarray, cfg: MicPairConfig) -> np.ndarray:
    return cfg.c1 * itd_map_array(points, cfg) + cfg.c0


def itd_map(s: ScenePoint, cfg: MicPairConfig) -> ItdValue:
    """(|s - M_L| - |s - M_R|) / speed, bounded by baseline / speed."""
    return float(itd_map_array(s.as_array(), cfg)[0])


def itd_map_corrected(s: ScenePoint, cfg: MicPairConfig) -> ItdValue:
    """The calibrated projection c1 * itd_map(s) + c0."""
    return cfg.c1 * itd_map(s, cfg) + cfg.c0


def within_physical_bound(itd: ItdValue, cfg: MicPairConfig) -> bool:
    """True when a raw ITD is reachable by a direct-path source."""
    return abs(itd) <= cfg.max_itd * (1.0 + BOUND_RTOL)


def _pairs_to_arrays(
    pairs: Iterable[Tuple[ScenePoint, ItdValue]]
) -> Tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    if not pairs:
        return np.empty((0, 3)), np.empty(0)
    points = np.array([p.as_array() for p, _ in pairs])
    observed = np.array([float(itd) for _, itd in pairs])
    if not np.all(np.isfinite(observed)):
        raise InvalidInputError("non-finite ITD in calibration pairs")
    return points, observed


def calibrate(
    pairs: Iterable[Tuple[ScenePoint, ItdValue]], cfg0: MicPairConfig
) -> MicPairConfig:
    """Fit c1, c0 by ordinary least squares of observed ITD on itd_map(s, cfg0).

    Args:
        pairs: (scene position, observed ITD) samples, e.g. a face tracked while
            a loudspeaker held below it plays white noise
        cfg0: measured geometry; its own c1, c0 are ignored

    Returns:
        cfg0 with the fitted c1 and c0
    """
    points, observed = _pairs_to_arrays(pairs)
    if len(observed) < 2:
        raise DegenerateFitError(f"calibration needs >= 2 pairs, got {len(observed)}")

    raw = itd_map_array(points, cfg0)

    # Normal equations of y = c1 * x + c0, solved in centred form
    x_mean = raw.mean()
    y_mean = observed.mean()
    dx = raw - x_mean
    sxx = float(np.dot(dx, dx))
    if sxx <= np.finfo(float).eps * max(float(np.dot(raw, raw)), np.finfo(float).tiny):
        raise DegenerateFitError("all raw ITDs are identical; the affine fit is undetermined")

    c1 = float(np.dot(dx, observed - y_mean)) / sxx
    c0 = float(y_mean - c1 * x_mean)
    return replace(cfg0, c1=c1, c0=c0)


def calibration_residual_rms(
    pairs: Iterable[Tuple[ScenePoint, ItdValue]], cfg: MicPairConfig
) -> float:
    """RMS (seconds) of observed ITD minus the corrected projection."""
    points, observed = _pairs_to_arrays(pairs)
    if len(observed) == 0:
        return 0.0
    residual = observed - itd_map_corrected_array(points, cfg)
    return float(np.sqrt(np.mean(residual**2)))

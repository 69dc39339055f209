"""Run-time knobs, read from the environment (.env) with built-in defaults."""

import os
from dataclasses import asdict, dataclass, field, replace

from dotenv import load_dotenv

from errors import InvalidInputError

# Load environment variables
load_dotenv()

DEFAULT_TOL = float(os.getenv("AVH_TOL", "1e-6"))
DEFAULT_PER_OBSERVATION_TOL = os.getenv("AVH_PER_OBSERVATION_TOL", "true").lower() in (
    "1",
    "true",
    "yes",
)
DEFAULT_MAX_ITER = int(os.getenv("AVH_MAX_ITER", "100"))
DEFAULT_N_MAX = int(os.getenv("AVH_N_MAX", "10"))
DEFAULT_DET_THRESHOLD = float(os.getenv("AVH_DET_THRESHOLD", "1e-10"))
DEFAULT_MAX_SPREAD = float(os.getenv("AVH_MAX_SPREAD", "0.5"))
DEFAULT_DOMAIN_MARGIN = float(os.getenv("AVH_DOMAIN_MARGIN", "0.1"))
DEFAULT_ENERGY_GATE = float(os.getenv("AVH_ENERGY_GATE", "0.001"))
DEFAULT_TAU_LOC = float(os.getenv("AVH_TAU_LOC", "0.35"))
DEFAULT_FACE_SIGMA2 = float(os.getenv("AVH_FACE_SIGMA2", "1e-9"))
DEFAULT_WORKERS = int(os.getenv("AVH_WORKERS", "1"))
DEFAULT_SOUND_SPEED = float(os.getenv("AVH_SOUND_SPEED", "343.0"))
LOG_LEVEL = os.getenv("AVH_LOG_LEVEL", "INFO")

# Seconds of audio per ITD value and visual frames per interval
ITD_FRAME_SHIFT = 0.02
INTERVAL_DURATION = 0.4


@dataclass(frozen=True)
class Knobs:
    """Numeric parameters shared by both pipelines and the evaluation.

    Args:
        tol: absolute log-likelihood gain below which EM stops
        per_observation_tol: scale tol by the observation count in the
            candidate fits of the motion-guided pipeline
        max_iter: EM iteration cap
        n_max: largest number of AV objects tried by model selection
        det_threshold: covariance determinant (m^6) below which a cluster is spurious
        max_spread: largest standard deviation (m) of a cluster that is still one object
        domain_margin: extra width of the outlier domain, as a fraction of its width
        energy_gate: normalised audio energy below which ITDs are ignored
        tau_loc: detection-to-truth distance (m) accepted as a true positive
        face_sigma2: initial ITD variance (s^2) of the face-guided components
        workers: threads used for the candidate-N fits
    """

    tol: float = field(default=DEFAULT_TOL)
    per_observation_tol: bool = field(default=DEFAULT_PER_OBSERVATION_TOL)
    max_iter: int = field(default=DEFAULT_MAX_ITER)
    n_max: int = field(default=DEFAULT_N_MAX)
    det_threshold: float = field(default=DEFAULT_DET_THRESHOLD)
    max_spread: float = field(default=DEFAULT_MAX_SPREAD)
    domain_margin: float = field(default=DEFAULT_DOMAIN_MARGIN)
    energy_gate: float = field(default=DEFAULT_ENERGY_GATE)
    tau_loc: float = field(default=DEFAULT_TAU_LOC)
    face_sigma2: float = field(default=DEFAULT_FACE_SIGMA2)
    workers: int = field(default=DEFAULT_WORKERS)

    def __post_init__(self):
        if self.tol < 0 or self.max_iter < 1:
            raise InvalidInputError("tol must be >= 0 and max_iter >= 1")
        if self.n_max < 0:
            raise InvalidInputError(f"n_max must be >= 0, got {self.n_max}")
        if self.det_threshold < 0 or self.domain_margin < 0 or self.energy_gate < 0:
            raise InvalidInputError("thresholds and margins must be non-negative")
        if self.tau_loc <= 0 or self.face_sigma2 <= 0 or self.max_spread <= 0 or self.workers < 1:
            raise InvalidInputError("tau_loc, face_sigma2, max_spread and workers must be positive")

    def replace(self, **overrides) -> "Knobs":
        """Return a copy with the non-None overrides applied"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

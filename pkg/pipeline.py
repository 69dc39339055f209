"""Per-interval procedures: motion-guided (visual EM, vision-guided fusion,
BIC selection, post-processing) and face-guided (faces initialise an
auditory-only EM), plus the final position and speaking-state estimators."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from av_geometry import MicPairConfig, ScenePoint, itd_map_corrected_array
from config import DEFAULT_ENERGY_GATE, INTERVAL_DURATION, Knobs
from errors import InvalidInputError
from log import logger
from mixture import (
    EMPTY_MASS,
    MixtureParams,
    OutlierDomain,
    Posteriors,
    em_fusion,
    em_visual,
    log_likelihood,
)
from selection import (
    ScoredModel,
    bic_score,
    init_from_previous,
    merge_clusters,
    reject_spurious,
    select_model,
)


@dataclass
class IntervalObservations:
    """Features gathered during one time interval.

    visual_3d is an (M, 3) array of scene points, auditory a (K,) array of
    ITD values in seconds.
    """

    visual_3d: np.ndarray
    auditory: np.ndarray
    interval_index: int = 0
    duration: float = INTERVAL_DURATION
    audio_energy: float = 1.0

    def __post_init__(self):
        self.visual_3d = np.asarray(self.visual_3d, dtype=float).reshape(-1, 3)
        self.auditory = np.asarray(self.auditory, dtype=float).ravel()
        if self.duration <= 0:
            raise InvalidInputError(f"interval duration must be > 0, got {self.duration}")
        if self.audio_energy < 0:
            raise InvalidInputError(f"audio energy must be >= 0, got {self.audio_energy}")
        if not (np.all(np.isfinite(self.visual_3d)) and np.all(np.isfinite(self.auditory))):
            raise InvalidInputError("non-finite observations")


@dataclass
class AVObject:
    """One detected speaker."""

    position: ScenePoint
    covariance: np.ndarray
    weight: float
    speaking: bool
    auditory_mass: float
    component: int = field(default=-1)

    def to_dict(self) -> dict:
        return {
            "position": [self.position.x, self.position.y, self.position.z],
            "covariance": np.asarray(self.covariance).tolist(),
            "weight": float(self.weight),
            "speaking": bool(self.speaking),
            "auditory_mass": float(self.auditory_mass),
        }


class ClusterEstimate(NamedTuple):
    component: int
    position: ScenePoint
    covariance: np.ndarray
    mass: float


@dataclass
class IntervalResult:
    """Everything one interval hands to the evaluation and to the next interval."""

    interval_index: int
    objects: List[AVObject]
    params: Optional[MixtureParams]
    n_components: int
    n_auditory: int
    bic: Optional[float] = None

    def to_record(self) -> dict:
        return {
            "interval_index": self.interval_index,
            "n_hat": len(self.objects),
            "n_components": self.n_components,
            "n_auditory": self.n_auditory,
            "bic": self.bic,
            "objects": [obj.to_dict() for obj in self.objects],
        }


def estimate_positions(visual_3d, alpha) -> List[ClusterEstimate]:
    """Weighted mean and scatter of the 3D features of every Gaussian cluster.

    Clusters with visual mass below 1e-8 are omitted.
    """
    visual_3d = np.asarray(visual_3d, dtype=float).reshape(-1, 3)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 2 or alpha.shape[0] != visual_3d.shape[0]:
        raise InvalidInputError(
            f"alpha has shape {alpha.shape} for {visual_3d.shape[0]} visual features"
        )

    estimates = []
    for n in range(alpha.shape[1] - 1):
        mass = float(alpha[:, n].sum())
        if mass < EMPTY_MASS:
            continue
        weights = alpha[:, n]
        mean = weights @ visual_3d / mass
        centred = visual_3d - mean
        cov = (centred * weights[:, None]).T @ centred / mass
        cov = 0.5 * (cov + cov.T)
        estimates.append(ClusterEstimate(n, ScenePoint.from_array(mean), cov, mass))
    return estimates


def speaking_threshold(n_components: int, k: int) -> float:
    """tau_A = K / (N + 2)"""
    return k / (n_components + 2)


def estimate_speaking(beta, n_components: int, k: int) -> List[bool]:
    """A cluster speaks when its auditory mass exceeds K / (N + 2)."""
    beta = np.asarray(beta, dtype=float).reshape(-1, n_components + 1)
    if beta.shape[0] != k:
        raise InvalidInputError(f"beta has {beta.shape[0]} rows, expected {k}")
    mass = beta[:, :n_components].sum(axis=0)
    tau = speaking_threshold(n_components, k)
    return [bool(m > tau) for m in mass]


def energy_gate(frame_energy: float, threshold: float = DEFAULT_ENERGY_GATE) -> bool:
    """Process audio only when its normalised energy reaches the threshold."""
    if frame_energy < 0:
        raise InvalidInputError(f"frame energy must be >= 0, got {frame_energy}")
    return frame_energy >= threshold


def _gated_auditory(obs: IntervalObservations, knobs: Knobs) -> np.ndarray:
    if energy_gate(obs.audio_energy, knobs.energy_gate):
        return obs.auditory
    logger.debug(f"interval {obs.interval_index}: audio below energy gate, ITDs skipped")
    return np.empty(0)


def candidate_tol(knobs: Knobs, n_obs: int) -> float:
    """Gain below which a candidate fit stops: tol, or tol per observation."""
    if knobs.per_observation_tol:
        return knobs.tol * max(n_obs, 1)
    return knobs.tol


def _fit_candidate(
    n: int,
    v_proj: np.ndarray,
    a: np.ndarray,
    prev: Optional[MixtureParams],
    domain: OutlierDomain,
    knobs: Knobs,
) -> ScoredModel:
    init = init_from_previous(prev, n, domain, knobs.n_max)
    tol = candidate_tol(knobs, v_proj.size + a.size)
    params, alpha = em_visual(v_proj, init, tol, knobs.max_iter)
    params, posteriors = em_fusion(v_proj, a, alpha, params, tol, knobs.max_iter)
    loglik = log_likelihood(v_proj, a, params)
    return ScoredModel(
        n_components=n,
        params=params,
        posteriors=posteriors,
        bic=bic_score(loglik, n, v_proj.size + a.size),
        loglik=loglik,
    )


def fit_candidates(
    v_proj: np.ndarray,
    a: np.ndarray,
    prev: Optional[MixtureParams],
    domain: OutlierDomain,
    knobs: Knobs,
) -> List[ScoredModel]:
    """Fit and score one model for every N in 0..n_max, in N order."""
    sizes = range(knobs.n_max + 1)
    if knobs.workers > 1:
        with ThreadPoolExecutor(max_workers=knobs.workers) as pool:
            return list(
                pool.map(lambda n: _fit_candidate(n, v_proj, a, prev, domain, knobs), sizes)
            )
    return [_fit_candidate(n, v_proj, a, prev, domain, knobs) for n in sizes]


def motion_guided(
    obs: IntervalObservations,
    cfg: MicPairConfig,
    prev: Optional[MixtureParams] = None,
    knobs: Optional[Knobs] = None,
) -> IntervalResult:
    """Motion-guided robot hearing on one interval, with its bookkeeping."""
    knobs = knobs or Knobs()
    a = _gated_auditory(obs, knobs)
    if obs.visual_3d.shape[0] == 0 and a.size == 0:
        return IntervalResult(obs.interval_index, [], prev, 0, 0)

    domain = OutlierDomain.from_mic_config(cfg, knobs.domain_margin)
    v_proj = itd_map_corrected_array(obs.visual_3d, cfg)

    best = select_model(fit_candidates(v_proj, a, prev, domain, knobs))
    params, posteriors = merge_clusters(best.params, best.posteriors)
    logger.debug(
        f"interval {obs.interval_index}: BIC picked N={best.n_components}, "
        f"{params.n_components} after merging"
    )

    speaking = estimate_speaking(posteriors.auditory, params.n_components, a.size)
    auditory_mass = posteriors.auditory.sum(axis=0)
    objects = [
        AVObject(
            position=est.position,
            covariance=est.covariance,
            weight=float(params.weights[est.component]),
            speaking=speaking[est.component],
            auditory_mass=float(auditory_mass[est.component]),
            component=est.component,
        )
        for est in estimate_positions(obs.visual_3d, posteriors.visual)
    ]
    objects = reject_spurious(objects, knobs.det_threshold, knobs.max_spread)
    return IntervalResult(
        obs.interval_index, objects, params, params.n_components, int(a.size), best.bic
    )


def motion_guided_interval(
    obs: IntervalObservations,
    cfg: MicPairConfig,
    prev: Optional[MixtureParams] = None,
    knobs: Optional[Knobs] = None,
) -> Tuple[List[AVObject], Optional[MixtureParams]]:
    """Detect, localise and assess the speaking state of the AV objects.

    Returns:
        (objects, params) where params initialises the next interval
    """
    result = motion_guided(obs, cfg, prev, knobs)
    return result.objects, result.params


def face_guided(
    faces: Sequence[ScenePoint],
    auditory,
    cfg: MicPairConfig,
    knobs: Optional[Knobs] = None,
    interval_index: int = 0,
) -> IntervalResult:
    """Face-guided robot hearing on one interval, with its bookkeeping."""
    knobs = knobs or Knobs()
    a = np.asarray(auditory, dtype=float).ravel()
    faces = list(faces)
    if not faces:
        return IntervalResult(interval_index, [], None, 0, int(a.size))

    n = len(faces)
    domain = OutlierDomain.from_mic_config(cfg, knobs.domain_margin)
    face_array = np.array([f.as_array() for f in faces])
    init = MixtureParams(
        weights=np.full(n + 1, 1.0 / (n + 1)),
        means=np.clip(itd_map_corrected_array(face_array, cfg), domain.lo, domain.hi),
        stddevs=np.full(n, np.sqrt(knobs.face_sigma2)),
        domain=domain,
    )
    # Faces only initialise the model; no visual observation enters the EM
    params, posteriors = em_fusion(
        [], a, np.zeros((0, n + 1)), init, knobs.tol, knobs.max_iter
    )

    speaking = estimate_speaking(posteriors.auditory, n, a.size)
    auditory_mass = posteriors.auditory.sum(axis=0)
    objects = [
        AVObject(
            position=face,
            covariance=np.zeros((3, 3)),
            weight=float(params.weights[i]),
            speaking=speaking[i],
            auditory_mass=float(auditory_mass[i]),
            component=i,
        )
        for i, face in enumerate(faces)
    ]
    return IntervalResult(interval_index, objects, params, n, int(a.size))


def face_guided_interval(
    faces: Sequence[ScenePoint],
    auditory,
    cfg: MicPairConfig,
    knobs: Optional[Knobs] = None,
) -> List[AVObject]:
    """Speaking state of every detected face; positions are the faces themselves."""
    return face_guided(faces, auditory, cfg, knobs).objects


def run_face_guided(obs: IntervalObservations, cfg: MicPairConfig, knobs: Knobs) -> IntervalResult:
    """face_guided on an interval whose visual features are face centres."""
    faces = [ScenePoint.from_array(p) for p in obs.visual_3d]
    return face_guided(faces, _gated_auditory(obs, knobs), cfg, knobs, obs.interval_index)

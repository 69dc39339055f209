"""Model scoring, temporal initialisation and post-processing of the
selected mixture."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from config import DEFAULT_DET_THRESHOLD, DEFAULT_MAX_SPREAD, DEFAULT_N_MAX
from errors import InvalidInputError
from log import logger
from mixture import MixtureParams, OutlierDomain, Posteriors

# Grid used by the unimodality test between two component means
MERGE_SCAN_POINTS = 1000
PSD_TOL = 1e-12


@dataclass
class ScoredModel:
    n_components: int
    params: MixtureParams
    posteriors: Posteriors
    bic: float
    loglik: float


def free_parameters(n_components: int) -> int:
    """Weight, mean and variance per component."""
    return 3 * n_components


def bic_score(loglik: float, n_components: int, n_obs: int) -> float:
    """loglik - (3N / 2) * log(n_obs)"""
    if n_obs < 1:
        raise InvalidInputError(f"BIC needs at least one observation, got {n_obs}")
    if n_components < 0:
        raise InvalidInputError(f"negative component count {n_components}")
    return float(loglik - 0.5 * free_parameters(n_components) * np.log(n_obs))


def select_model(models: Sequence[ScoredModel]) -> ScoredModel:
    """Highest BIC wins; ties go to the smaller model."""
    if not models:
        raise InvalidInputError("no candidate models to select from")
    return max(models, key=lambda m: (m.bic, -m.n_components))


def davies_bouldin_scores(params: MixtureParams) -> np.ndarray:
    """DW_i = max_{j != i} (sigma_i + sigma_j) / |mu_i - mu_j|, inf for a lone cluster."""
    n = params.n_components
    if n == 1:
        return np.array([np.inf])
    spread = params.stddevs[:, None] + params.stddevs[None, :]
    gap = np.abs(params.means[:, None] - params.means[None, :])
    with np.errstate(divide="ignore"):
        ratio = spread / gap
    np.fill_diagonal(ratio, -np.inf)
    return ratio.max(axis=1)


def uniform_init(n_components: int, domain: OutlierDomain) -> MixtureParams:
    """Equal weights (outlier included), means evenly spaced over the domain."""
    slots = (np.arange(n_components) + 0.5) / max(n_components, 1)
    return MixtureParams(
        weights=np.full(n_components + 1, 1.0 / (n_components + 1)),
        means=domain.lo + slots * domain.width,
        stddevs=np.full(n_components, domain.width / (4.0 * max(n_components, 1))),
        domain=domain,
    )


def _split(params: MixtureParams, index: int) -> MixtureParams:
    mu, sigma = params.means[index], params.stddevs[index]
    half = params.weights[index] / 2.0
    domain = params.domain
    means = np.concatenate(
        [params.means[:index], [mu - sigma, mu + sigma], params.means[index + 1:]]
    )
    stddevs = np.concatenate(
        [params.stddevs[:index], [sigma, sigma], params.stddevs[index + 1:]]
    )
    weights = np.concatenate(
        [params.weights[:index], [half, half], params.weights[index + 1:]]
    )
    return MixtureParams(weights, np.clip(means, domain.lo, domain.hi), stddevs, domain)


def init_from_previous(
    prev: Optional[MixtureParams],
    target_n: int,
    domain: Optional[OutlierDomain] = None,
    n_max: int = DEFAULT_N_MAX,
) -> MixtureParams:
    """Initial model with target_n components, warm-started from prev.

    Fewer components keep the heaviest clusters; more components repeatedly
    split the cluster with the highest Davies-Bouldin index at mean +- sigma.
    Without a usable previous model the components are spread evenly.
    """
    if target_n < 0 or target_n > n_max:
        raise InvalidInputError(f"target_n must be in [0, {n_max}], got {target_n}")
    if domain is None:
        if prev is None:
            raise InvalidInputError("a domain is required when there is no previous model")
        domain = prev.domain

    if prev is None or (prev.n_components == 0 and target_n > 0):
        return uniform_init(target_n, domain)

    means = np.clip(prev.means, domain.lo, domain.hi)
    params = MixtureParams(prev.weights, means, prev.stddevs, domain)

    if target_n <= params.n_components:
        keep = np.sort(np.argsort(-params.weights[:-1], kind="stable")[:target_n])
        weights = np.append(params.weights[keep], params.outlier_weight)
        total = weights.sum()
        if total <= 0:
            return uniform_init(target_n, domain)
        return MixtureParams(weights / total, params.means[keep], params.stddevs[keep], domain)

    while params.n_components < target_n:
        params = _split(params, int(np.argmax(davies_bouldin_scores(params))))
    return params


def is_unimodal_pair(
    w1: float, mu1: float, s1: float, w2: float, mu2: float, s2: float
) -> bool:
    """True when the two-component sub-mixture has one mode between the means."""
    if mu1 == mu2 or w1 <= 0 or w2 <= 0:
        return True
    grid = np.linspace(mu1, mu2, MERGE_SCAN_POINTS)
    density = w1 * norm.pdf(grid, mu1, s1) + w2 * norm.pdf(grid, mu2, s2)
    slope = np.sign(np.diff(density))
    slope = slope[slope != 0]
    valley = (slope[:-1] < 0) & (slope[1:] > 0)
    return not np.any(valley)


def _merge_pair(params: MixtureParams, posteriors: Posteriors, i: int, j: int):
    w_i, w_j = params.weights[i], params.weights[j]
    w = w_i + w_j
    if w > 0:
        mu = (w_i * params.means[i] + w_j * params.means[j]) / w
        second = (
            w_i * (params.stddevs[i] ** 2 + params.means[i] ** 2)
            + w_j * (params.stddevs[j] ** 2 + params.means[j] ** 2)
        ) / w
        sigma = np.sqrt(max(second - mu**2, 0.0))
    else:
        mu = 0.5 * (params.means[i] + params.means[j])
        sigma = max(params.stddevs[i], params.stddevs[j])

    keep = [n for n in range(params.n_components) if n != j]
    means = params.means.copy()
    stddevs = params.stddevs.copy()
    weights = params.weights.copy()
    means[i], stddevs[i], weights[i] = mu, sigma, w
    merged = MixtureParams(
        weights=np.append(weights[keep], params.outlier_weight),
        means=means[keep],
        stddevs=stddevs[keep],
        domain=params.domain,
    )

    def fold(matrix: np.ndarray) -> np.ndarray:
        matrix = matrix.copy()
        matrix[:, i] += matrix[:, j]
        return np.delete(matrix, j, axis=1)

    return merged, Posteriors(fold(posteriors.visual), fold(posteriors.auditory))


def merge_clusters(
    params: MixtureParams, posteriors: Posteriors
) -> Tuple[MixtureParams, Posteriors]:
    """Merge Gaussian pairs whose sub-mixture is unimodal, closest pair first."""
    while params.n_components > 1:
        candidates = []
        for i in range(params.n_components):
            for j in range(i + 1, params.n_components):
                if is_unimodal_pair(
                    params.weights[i], params.means[i], params.stddevs[i],
                    params.weights[j], params.means[j], params.stddevs[j],
                ):
                    candidates.append((abs(params.means[i] - params.means[j]), i, j))
        if not candidates:
            break
        _, i, j = min(candidates)
        logger.debug(f"merging components {i} and {j}")
        params, posteriors = _merge_pair(params, posteriors, i, j)
    return params, posteriors


def _check_covariance(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3) or not np.all(np.isfinite(cov)):
        raise InvalidInputError(f"covariance must be a finite 3x3 matrix, got shape {cov.shape}")
    scale = max(float(np.max(np.abs(cov))), 1.0)
    if not np.allclose(cov, cov.T, atol=PSD_TOL * scale):
        raise InvalidInputError("covariance is not symmetric")
    if np.min(np.linalg.eigvalsh(cov)) < -PSD_TOL * scale:
        raise InvalidInputError("covariance is not positive semidefinite")
    return cov


def reject_spurious(
    objects: List,
    det_threshold: float = DEFAULT_DET_THRESHOLD,
    max_spread: float = DEFAULT_MAX_SPREAD,
) -> List:
    """Drop clusters that are flat or too wide to be one object.

    Projections of scattered points onto one ITD value lie near a
    hyperboloid sheet, so their back-projected cluster is flat when the
    points are few, and spans the scene when they are many.

    Args:
        objects: detections carrying a 3x3 covariance (m^2)
        det_threshold: determinant below which a cluster is flat
        max_spread: largest standard deviation (m) along any axis
    """
    kept = []
    for obj in objects:
        cov = _check_covariance(obj.covariance)
        # PSD up to rounding, so a tiny negative determinant is zero
        det = max(float(np.linalg.det(cov)), 0.0)
        spread = float(np.sqrt(max(np.linalg.eigvalsh(cov)[-1], 0.0)))
        if det < det_threshold or spread > max_spread:
            logger.debug(f"rejecting cluster at {obj.position} (det {det:.3e}, spread {spread:.2f} m)")
            continue
        kept.append(obj)
    return kept
